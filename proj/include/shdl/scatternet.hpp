#pragma once

#include "shdl/grid.hpp"

#include <array>
#include <filesystem>
#include <span>
#include <string>
#include <vector>

namespace shdl::scatternet {

inline constexpr int kNumOrientations = 6;
inline constexpr std::array<int, kNumOrientations> kOrientationDegrees{15, 45, 75, 105, 135, 165};

/// Second-layer envelopes carry no DC pedestal and vary at the averaging
/// scale itself, so L2 maps are averaged over a window this much wider than
/// the L0/L1 window to stay translation stable.
inline constexpr double kSecondLayerWidthFactor = 2.5;

/// Analysis and synthesis filters of the dual-tree complex wavelet transform.
///
/// Level 1 uses the near-symmetric 13/19-tap biorthogonal pair; deeper levels
/// use the 14-tap quarter-shift pair, where tree b is the time reverse of
/// tree a. Lowpass filters are normalized to a DC gain of sqrt(2); the level-1
/// pair is applied without decimation, which is compensated by a
/// 1/sqrt(2) gain per filtered dimension.
struct DtcwtFilterBank {
    std::vector<double> h0o, h1o, g0o, g1o;
    std::vector<double> h0a, h0b, h1a, h1b;
    std::vector<double> g0a, g0b, g1a, g1b;
};

DtcwtFilterBank build_filter_bank();

struct ComplexSubband {
    int scale = 1;                // j >= 1
    int orientation_degrees = 15; // one of kOrientationDegrees
    Grid real_part;
    Grid imag_part;
};

struct DtcwtPyramid {
    Grid lowpass;
    /// highpasses[j-1][r] is the subband at scale j, orientation index r.
    std::vector<std::array<ComplexSubband, kNumOrientations>> highpasses;
    int input_rows = 0;
    int input_cols = 0;
};

/// Forward 2D DTCWT with symmetric extension at the borders.
/// Throws DimensionError when a level's input falls below the filter support.
DtcwtPyramid dtcwt_forward(const Grid& image, const DtcwtFilterBank& bank, int levels);
Grid dtcwt_inverse(const DtcwtPyramid& pyramid, const DtcwtFilterBank& bank);

Grid complex_modulus(const ComplexSubband& subband);

/// log(envelope + k); k must be positive.
Grid parametric_log(const Grid& envelope, double k);

/// Gaussian smoothing of width proportional to `averaging_scale` (in the
/// envelope's own pixels) followed by area resampling to out_rows x out_cols.
/// Both stages preserve the mean.
Grid local_average(const Grid& envelope, double averaging_scale, int out_rows, int out_cols);

struct ScatterConfig {
    int num_scales = 2;                              // J
    std::vector<double> log_offsets{1e-3, 1e-3};     // k_j, one per scale
    std::vector<double> resolution_factors{1.0, 1.5, 2.0};
    int border_crop = 1;                             // pixels trimmed from each side of every map
    bool joint_invariance_enabled = false;

    double averaging_scale() const { return static_cast<double>(1 << num_scales); }
    int channels_per_resolution() const;
    void validate() const;
};

enum class Layer { L0, L1, L2 };
std::string to_string(Layer layer);
Layer layer_from_string(const std::string& s);

struct ChannelDescriptor {
    Layer layer = Layer::L0;
    double resolution = 1.0;
    std::vector<int> scales;        // empty for L0, (j) for L1, (j1, j2) for L2
    std::vector<int> orientations;  // degrees, parallel to scales
    int rows = 0;
    int cols = 0;

    bool operator==(const ChannelDescriptor&) const = default;
};

struct ScatterFeatures {
    std::vector<ChannelDescriptor> channels;
    std::vector<Grid> maps;

    int rows() const { return maps.empty() ? 0 : static_cast<int>(maps.front().rows()); }
    int cols() const { return maps.empty() ? 0 : static_cast<int>(maps.front().cols()); }
    /// Channel-major flattening: channel, then row, then column.
    std::vector<double> flatten() const;
};

/// First-layer (log) envelopes of one resolution, indexed [j-1][r].
using FirstLayer = std::vector<std::array<Grid, kNumOrientations>>;

/// L2 maps for every path (j1, r1) -> (j2, r2) with j2 > j1, ordered by
/// j1, r1, j2, r2. `resolution` is the resampling factor of the image the
/// envelopes came from; outputs are at out_rows x out_cols.
std::vector<Grid> second_layer(const FirstLayer& first_layer, const DtcwtFilterBank& bank,
                               const ScatterConfig& config, double resolution, int out_rows, int out_cols);

ScatterFeatures scatter(const GrayImage& image, const DtcwtFilterBank& bank, const ScatterConfig& config);

/// Smooths L1/L2 channels cyclically across orientation (width 3) and across
/// scale (nearest-neighbour weight 1/4). L0 is untouched.
ScatterFeatures joint_invariance(const ScatterFeatures& features, const ScatterConfig& config);

/// k_j = 1e-3 times the mean first-layer envelope at scale j over `images`.
std::vector<double> calibrate_log_offsets(std::span<const GrayImage> images, const DtcwtFilterBank& bank,
                                          const ScatterConfig& config);

/// Writes `<stem>.bin` and `<stem>.json`.
void export_features(const std::filesystem::path& stem, const ScatterFeatures& features);
ScatterFeatures import_features(const std::filesystem::path& stem);

}  // namespace shdl::scatternet
