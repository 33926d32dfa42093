#pragma once

#include "shdl/grid.hpp"
#include "shdl/regression_net.hpp"

#include <Eigen/Dense>

#include <cstdint>
#include <filesystem>
#include <string>
#include <vector>

namespace shdl::priors {

/// Spectral-energy fraction above which a filter counts as a checkerboard.
inline constexpr double kCheckerboardThreshold = 0.5;

/// Mean-removed vectorized patches, one per column. Entries are ordered
/// (channel, row, col), the layout of the network's conv weights.
struct PatchMatrix {
    int z1 = 0;
    int z2 = 0;
    int channels = 0;
    Eigen::MatrixXd columns;

    int dimension() const { return z1 * z2 * channels; }
    int count() const { return static_cast<int>(columns.cols()); }
};

/// Draws `count` patches of size z1 x z2 (all channels) at uniformly random
/// samples and valid positions of `features`, removing each patch's mean.
PatchMatrix sample_patches(const net::Tensor& features, int z1, int z2, int count, std::uint64_t seed);

/// Eigenvectors of X X^T in descending eigenvalue order.
struct Spectrum {
    Eigen::VectorXd eigenvalues;
    Eigen::MatrixXd eigenvectors;  // one unit column per eigenvalue
    int rank = 0;
};

Spectrum principal_axes(const PatchMatrix& x);

struct PriorFilterSet {
    std::string layer_id;
    int z1 = 0;
    int z2 = 0;
    int channels = 0;
    Eigen::MatrixXd filters;  // (K x z1*z2*channels), one unit-norm filter per row
    int rejected_count = 0;
    int shortfall = 0;  // filters filled with random orthogonal complements
    double gain = 1.4142135623730951;  // scale applied to the unit filters at installation
    std::string notice;

    int k() const { return static_cast<int>(filters.rows()); }
};

/// Top-K eigenvectors of X X^T with the largest-magnitude entry of each made
/// positive. When K exceeds the rank only rank-many filters are returned and
/// `notice` says so.
PriorFilterSet learn_pca_filters(const PatchMatrix& x, int k);

/// True when more than kCheckerboardThreshold of the DFT energy lies in the
/// highest-frequency quadrant (|fx| >= 1/4 and |fy| >= 1/4 cycles/sample).
bool detect_checkerboard(const Grid& filter);
/// Same test with the energy summed over all channels of a flattened filter.
bool detect_checkerboard(const Eigen::VectorXd& filter, int z1, int z2, int channels);

struct PriorConfig {
    int patches = 10000;
    std::uint64_t seed = 0;
};

/// Seed of the patch draw for conv layer `layer` (0 for L3).
std::uint64_t patch_seed(const PriorConfig& config, int layer);

/// Learns L3 priors on `features` and each later layer on the output of the
/// network truncated after the previous, prior-initialized layer.
/// Checkerboard eigenvectors are skipped in favour of the next ones; any
/// remaining shortfall is filled with random orthonormal complements. Each
/// set's gain makes the installed layer's pre-activation RMS on the sampled
/// patches equal sqrt(2 E[x^2]), the expected value for a He-normal draw.
std::vector<PriorFilterSet> assemble_priors(const net::Tensor& features, const net::NetConfig& config,
                                            const PriorConfig& prior_config);

/// Unit filters times each set's gain, ready for
/// RegressionNet::init_with_priors.
std::vector<net::FilterMatrix> to_filter_matrices(const std::vector<PriorFilterSet>& sets);

void save_priors(const std::filesystem::path& stem, const std::vector<PriorFilterSet>& sets);
std::vector<PriorFilterSet> load_priors(const std::filesystem::path& stem);

}  // namespace shdl::priors
