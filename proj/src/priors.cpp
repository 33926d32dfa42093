#include "shdl/priors.hpp"

#include "shdl/float_array.hpp"

#include <cmath>
#include <complex>
#include <limits>
#include <numbers>
#include <random>
#include <stdexcept>

namespace shdl::priors {

namespace {

// He-normal std is sqrt(2 / fan_in); a unit vector has RMS 1 / sqrt(fan_in).
const double kHeScale = std::sqrt(2.0);
constexpr int kMaxComplementAttempts = 1000;

std::string layer_name(int index) { return "L" + std::to_string(index + 3); }

void apply_sign_convention(Eigen::Ref<Eigen::VectorXd> v) {
    Eigen::Index arg = 0;
    v.cwiseAbs().maxCoeff(&arg);
    if (v(arg) < 0.0) v = -v;
}

bool is_high(int k, int n) {
    const int folded = std::min(k, n - k);
    return 4 * folded >= n;
}

double high_quadrant_energy(const Eigen::Map<const Grid>& plane, double& total) {
    const int rows = static_cast<int>(plane.rows());
    const int cols = static_cast<int>(plane.cols());
    double high = 0.0;
    for (int u = 0; u < rows; ++u) {
        for (int v = 0; v < cols; ++v) {
            std::complex<double> acc = 0.0;
            for (int y = 0; y < rows; ++y) {
                for (int x = 0; x < cols; ++x) {
                    const double phase = -2.0 * std::numbers::pi *
                                         (static_cast<double>(u * y) / rows + static_cast<double>(v * x) / cols);
                    acc += plane(y, x) * std::polar(1.0, phase);
                }
            }
            const double e = std::norm(acc);
            total += e;
            if (is_high(u, rows) && is_high(v, cols)) high += e;
        }
    }
    return high;
}

bool checkerboard_ratio_exceeds(const double* data, int z1, int z2, int channels) {
    double total = 0.0;
    double high = 0.0;
    for (int c = 0; c < channels; ++c) {
        const Eigen::Map<const Grid> plane(data + static_cast<std::size_t>(c) * z1 * z2, z1, z2);
        high += high_quadrant_energy(plane, total);
    }
    if (!(total > 0.0)) throw ParameterError("detect_checkerboard: filter must be nonzero");
    return high / total > kCheckerboardThreshold;
}

// Unit vector orthogonal to the first `accepted` rows of `filters`, or an
// empty vector when the draw falls inside their span.
Eigen::VectorXd random_complement(const Eigen::MatrixXd& filters, int accepted, std::mt19937_64& rng) {
    std::normal_distribution<double> normal(0.0, 1.0);
    Eigen::VectorXd v(filters.cols());
    for (Eigen::Index i = 0; i < v.size(); ++i) v(i) = normal(rng);
    for (int pass = 0; pass < 2; ++pass) {
        for (int r = 0; r < accepted; ++r) v -= filters.row(r).dot(v) * filters.row(r).transpose();
    }
    const double norm = v.norm();
    if (norm < 1e-6) return {};
    return v / norm;
}

}  // namespace

namespace {

// Patches exactly as the convolution sees them, before mean removal.
PatchMatrix sample_raw_patches(const net::Tensor& features, int z1, int z2, int count, std::uint64_t seed) {
    if (z1 < 1 || z2 < 1) throw ParameterError("sample_patches: patch size must be positive");
    if (count < 1) throw ParameterError("sample_patches: need at least one patch");
    if (features.batch < 1 || features.channels < 1) throw DimensionError("sample_patches: empty feature stack");
    if (features.rows < z1 || features.cols < z2) {
        throw DimensionError("sample_patches: " + std::to_string(features.rows) + "x" + std::to_string(features.cols) +
                             " maps are smaller than a " + std::to_string(z1) + "x" + std::to_string(z2) + " patch");
    }
    PatchMatrix out;
    out.z1 = z1;
    out.z2 = z2;
    out.channels = features.channels;
    out.columns.resize(out.dimension(), count);
    std::mt19937_64 rng(seed);
    std::uniform_int_distribution<int> pick_sample(0, features.batch - 1);
    std::uniform_int_distribution<int> pick_row(0, features.rows - z1);
    std::uniform_int_distribution<int> pick_col(0, features.cols - z2);
    const std::size_t plane = static_cast<std::size_t>(features.rows) * features.cols;
    for (int n = 0; n < count; ++n) {
        const int s = pick_sample(rng);
        const int r0 = pick_row(rng);
        const int c0 = pick_col(rng);
        const double* base = features.sample(s);
        Eigen::Index i = 0;
        for (int c = 0; c < features.channels; ++c) {
            for (int y = 0; y < z1; ++y) {
                for (int x = 0; x < z2; ++x) {
                    out.columns(i++, n) = base[c * plane + static_cast<std::size_t>(r0 + y) * features.cols + c0 + x];
                }
            }
        }
    }
    return out;
}

// Scalar gain giving unit filters the pre-activation RMS of a He-normal draw,
// sqrt(2 E[x^2]), on the raw patches.
double matched_gain(const Eigen::MatrixXd& filters, const Eigen::MatrixXd& raw) {
    const double target = std::sqrt(2.0 * raw.squaredNorm() / static_cast<double>(raw.size()));
    const double actual = std::sqrt((filters * raw).squaredNorm() / static_cast<double>(filters.rows() * raw.cols()));
    if (!(actual > 0.0) || !(target > 0.0)) return kHeScale;
    return target / actual;
}

PatchMatrix center(PatchMatrix x) {
    for (Eigen::Index n = 0; n < x.columns.cols(); ++n) x.columns.col(n).array() -= x.columns.col(n).mean();
    return x;
}

}  // namespace

PatchMatrix sample_patches(const net::Tensor& features, int z1, int z2, int count, std::uint64_t seed) {
    return center(sample_raw_patches(features, z1, z2, count, seed));
}

Spectrum principal_axes(const PatchMatrix& x) {
    if (x.dimension() < 1 || x.columns.rows() != x.dimension()) {
        throw DimensionError("principal_axes: patch matrix shape does not match its geometry");
    }
    const Eigen::MatrixXd scatter = x.columns * x.columns.transpose();
    const Eigen::SelfAdjointEigenSolver<Eigen::MatrixXd> solver(scatter);
    if (solver.info() != Eigen::Success) throw std::runtime_error("principal_axes: eigendecomposition failed");
    Spectrum s;
    s.eigenvalues = solver.eigenvalues().reverse();
    s.eigenvectors = solver.eigenvectors().rowwise().reverse();
    const double top = std::max(s.eigenvalues.size() > 0 ? s.eigenvalues(0) : 0.0, 0.0);
    const double tol = top * static_cast<double>(x.dimension()) * 10.0 * std::numeric_limits<double>::epsilon();
    s.rank = 0;
    while (s.rank < s.eigenvalues.size() && top > 0.0 && s.eigenvalues(s.rank) > tol) ++s.rank;
    return s;
}

PriorFilterSet learn_pca_filters(const PatchMatrix& x, int k) {
    if (k < 1 || k > x.dimension()) {
        throw ParameterError("learn_pca_filters: K must be in [1, " + std::to_string(x.dimension()) + "]");
    }
    const Spectrum s = principal_axes(x);
    const int kept = std::min(k, s.rank);
    PriorFilterSet out;
    out.z1 = x.z1;
    out.z2 = x.z2;
    out.channels = x.channels;
    out.filters = s.eigenvectors.leftCols(kept).transpose();
    for (int r = 0; r < kept; ++r) {
        Eigen::VectorXd v = out.filters.row(r).transpose();
        apply_sign_convention(v);
        out.filters.row(r) = v.transpose();
    }
    if (kept < k) {
        out.notice = "rank deficient: requested " + std::to_string(k) + " filters, data rank is " +
                     std::to_string(s.rank);
    }
    return out;
}

bool detect_checkerboard(const Grid& filter) {
    const Grid copy = filter;
    return checkerboard_ratio_exceeds(copy.data(), static_cast<int>(copy.rows()), static_cast<int>(copy.cols()), 1);
}

bool detect_checkerboard(const Eigen::VectorXd& filter, int z1, int z2, int channels) {
    if (filter.size() != static_cast<Eigen::Index>(z1) * z2 * channels) {
        throw DimensionError("detect_checkerboard: filter length does not match its geometry");
    }
    return checkerboard_ratio_exceeds(filter.data(), z1, z2, channels);
}

std::uint64_t patch_seed(const PriorConfig& config, int layer) {
    return net::mix_seed(config.seed, static_cast<std::uint64_t>(layer) + 1);
}

std::vector<PriorFilterSet> assemble_priors(const net::Tensor& features, const net::NetConfig& config,
                                            const PriorConfig& prior_config) {
    config.validate();
    if (features.channels != config.input_channels || features.rows != config.input_rows ||
        features.cols != config.input_cols) {
        throw DimensionError("assemble_priors: features do not match the network input shape");
    }
    net::RegressionNet net(config, net::mix_seed(prior_config.seed, 0x5eed));
    std::vector<PriorFilterSet> sets;
    net::Tensor hidden;
    for (int layer = 0; layer < static_cast<int>(config.conv_widths.size()); ++layer) {
        if (layer > 0) hidden = net.forward_blocks(features, layer);
        const net::Tensor& input = layer > 0 ? hidden : features;
        const int k = config.conv_widths[static_cast<std::size_t>(layer)];
        const PatchMatrix raw = sample_raw_patches(input, config.kernel, config.kernel, prior_config.patches,
                                                   patch_seed(prior_config, layer));
        const PatchMatrix x = center(raw);
        const Spectrum s = principal_axes(x);

        PriorFilterSet set;
        set.layer_id = layer_name(layer);
        set.z1 = x.z1;
        set.z2 = x.z2;
        set.channels = x.channels;
        set.filters.setZero(k, x.dimension());
        int accepted = 0;
        for (int e = 0; e < s.rank && accepted < k; ++e) {
            Eigen::VectorXd v = s.eigenvectors.col(e);
            apply_sign_convention(v);
            if (detect_checkerboard(v, x.z1, x.z2, x.channels)) {
                ++set.rejected_count;
                continue;
            }
            set.filters.row(accepted++) = v.transpose();
        }
        set.shortfall = k - accepted;
        if (set.shortfall > 0) {
            set.notice = "shortfall: " + std::to_string(set.shortfall) +
                         " filters filled with random orthogonal complements";
            std::mt19937_64 rng(net::mix_seed(prior_config.seed, 0x1000 + static_cast<std::uint64_t>(layer)));
            int attempts = 0;
            while (accepted < k) {
                if (++attempts > kMaxComplementAttempts * k) {
                    throw std::runtime_error("assemble_priors: could not complete " + set.layer_id + " filters");
                }
                Eigen::VectorXd v = random_complement(set.filters, accepted, rng);
                if (v.size() == 0) continue;
                apply_sign_convention(v);
                if (detect_checkerboard(v, x.z1, x.z2, x.channels)) continue;
                set.filters.row(accepted++) = v.transpose();
            }
        }
        set.gain = matched_gain(set.filters, raw.columns);
        net.params()[static_cast<std::size_t>(2 * layer)].value = set.gain * set.filters;
        net.params()[static_cast<std::size_t>(2 * layer + 1)].value.setZero();
        sets.push_back(std::move(set));
    }
    return sets;
}

std::vector<net::FilterMatrix> to_filter_matrices(const std::vector<PriorFilterSet>& sets) {
    std::vector<net::FilterMatrix> out;
    out.reserve(sets.size());
    for (const PriorFilterSet& s : sets) out.push_back(s.gain * s.filters);
    return out;
}

void save_priors(const std::filesystem::path& stem, const std::vector<PriorFilterSet>& sets) {
    nlohmann::json header;
    header["dtype"] = "float32";
    header["byte_order"] = "little";
    nlohmann::json layers = nlohmann::json::array();
    std::vector<double> flat;
    for (const PriorFilterSet& s : sets) {
        layers.push_back({{"layer_id", s.layer_id},
                          {"K", s.k()},
                          {"z1", s.z1},
                          {"z2", s.z2},
                          {"c", s.channels},
                          {"rejected_count", s.rejected_count},
                          {"shortfall", s.shortfall},
                          {"gain", s.gain}});
        for (Eigen::Index r = 0; r < s.filters.rows(); ++r) {
            for (Eigen::Index c = 0; c < s.filters.cols(); ++c) flat.push_back(s.filters(r, c));
        }
    }
    header["layers"] = layers;
    write_f32(std::filesystem::path(stem).concat(".bin"), flat);
    write_json(std::filesystem::path(stem).concat(".json"), header);
}

std::vector<PriorFilterSet> load_priors(const std::filesystem::path& stem) {
    const nlohmann::json header = read_json(std::filesystem::path(stem).concat(".json"));
    const std::vector<double> flat = read_f32(std::filesystem::path(stem).concat(".bin"));
    std::vector<PriorFilterSet> sets;
    std::size_t offset = 0;
    for (const auto& l : header.at("layers")) {
        PriorFilterSet s;
        s.layer_id = l.at("layer_id").get<std::string>();
        const int k = l.at("K").get<int>();
        s.z1 = l.at("z1").get<int>();
        s.z2 = l.at("z2").get<int>();
        s.channels = l.at("c").get<int>();
        s.rejected_count = l.at("rejected_count").get<int>();
        s.shortfall = l.value("shortfall", 0);
        s.gain = l.at("gain").get<double>();
        const std::size_t dim = static_cast<std::size_t>(s.z1) * s.z2 * s.channels;
        if (k < 0 || offset + k * dim > flat.size()) throw DimensionError("load_priors: data shorter than header");
        s.filters.resize(k, static_cast<Eigen::Index>(dim));
        for (int r = 0; r < k; ++r) {
            for (std::size_t c = 0; c < dim; ++c) s.filters(r, static_cast<Eigen::Index>(c)) = flat[offset++];
        }
        sets.push_back(std::move(s));
    }
    if (offset != flat.size()) throw DimensionError("load_priors: data longer than header");
    return sets;
}

}  // namespace shdl::priors
