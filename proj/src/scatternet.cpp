#include "shdl/scatternet.hpp"

#include "shdl/float_array.hpp"

#include <algorithm>
#include <cmath>
#include <map>
#include <numbers>
#include <stdexcept>
#include <tuple>

namespace shdl::scatternet {

namespace {

constexpr double kSqrtHalf = 0.70710678118654752440;
constexpr double kLogOffsetFraction = 1e-3;
// Gaussian width of the averaging kernel relative to the averaging scale.
constexpr double kAveragingSigmaRatio = 1.0;
constexpr int kMinLevelInput = 7;

std::vector<double> reversed(std::vector<double> v) {
    std::reverse(v.begin(), v.end());
    return v;
}

// Negates the even-indexed taps (flip_even) or the odd-indexed ones.
std::vector<double> alternate_signs(const std::vector<double>& v, bool flip_even) {
    std::vector<double> out(v.size());
    for (std::size_t n = 0; n < v.size(); ++n) {
        const bool even = n % 2 == 0;
        out[n] = (even == flip_even) ? -v[n] : v[n];
    }
    return out;
}

std::vector<double> scaled(std::vector<double> v, double s) {
    for (double& x : v) x *= s;
    return v;
}

Grid transpose(const Grid& g) { return g.transpose(); }

// Non-decimating filter along axis 0 with an odd-length filter; output has
// the input's size and each output sample is aligned with its input sample.
Grid colfilter(const Grid& x, const std::vector<double>& h, double gain) {
    const long rows = x.rows();
    const long m = static_cast<long>(h.size());
    const long m2 = m / 2;
    Grid y = Grid::Zero(rows, x.cols());
    for (long i = 0; i < rows; ++i) {
        for (long k = 0; k < m; ++k) {
            if (h[k] == 0.0) continue;
            y.row(i) += (gain * h[k]) * x.row(reflect_index(i + m2 - k, rows));
        }
    }
    return y;
}

// Decimating quarter-shift filter along axis 0: ha on one polyphase, hb on
// the other, outputs interleaved. Rows must be a multiple of 4.
Grid coldfilt(const Grid& x, const std::vector<double>& ha, const std::vector<double>& hb) {
    const long rows = x.rows();
    if (rows % 4 != 0) throw DimensionError("coldfilt: rows must be a multiple of 4");
    const long m = static_cast<long>(ha.size());
    const long half = m / 2;
    const long r2 = rows / 2;
    double dot = 0.0;
    for (long k = 0; k < m; ++k) dot += ha[k] * hb[k];
    const long s1 = dot > 0 ? 0 : 1;
    const long s2 = 1 - s1;

    // Extended index n maps to row reflect(n - m); t_q = 5 + 4q.
    auto ext = [&](long n) { return reflect_index(n - m, rows); };
    Grid y = Grid::Zero(r2, x.cols());
    for (long i = 0; i < rows / 4; ++i) {
        for (long k = 0; k < half; ++k) {
            const long t = 5 + 4 * (i + half - 1 - k);
            y.row(s1 + 2 * i) += ha[2 * k] * x.row(ext(t - 1)) + ha[2 * k + 1] * x.row(ext(t - 3));
            y.row(s2 + 2 * i) += hb[2 * k] * x.row(ext(t)) + hb[2 * k + 1] * x.row(ext(t - 2));
        }
    }
    return y;
}

// Interpolating quarter-shift filter along axis 0 (inverse of coldfilt).
Grid colifilt(const Grid& x, const std::vector<double>& ha, const std::vector<double>& hb) {
    const long rows = x.rows();
    if (rows % 2 != 0) throw DimensionError("colifilt: rows must be even");
    const long m = static_cast<long>(ha.size());
    const long half = m / 2;
    double dot = 0.0;
    for (long k = 0; k < m; ++k) dot += ha[k] * hb[k];
    Grid y = Grid::Zero(2 * rows, x.cols());
    auto ext = [&](long n) { return reflect_index(n - half, rows); };

    if (half % 2 == 0) {
        // t_q = 3 + 2q
        const long taps = half;
        for (long i = 0; i < rows / 2; ++i) {
            for (long k = 0; k < taps; ++k) {
                const long t = 3 + 2 * (i + taps - 1 - k);
                const long ta = dot > 0 ? t : t - 1;
                const long tb = dot > 0 ? t - 1 : t;
                y.row(4 * i) += ha[2 * k + 1] * x.row(ext(tb - 2));
                y.row(4 * i + 1) += hb[2 * k + 1] * x.row(ext(ta - 2));
                y.row(4 * i + 2) += ha[2 * k] * x.row(ext(tb));
                y.row(4 * i + 3) += hb[2 * k] * x.row(ext(ta));
            }
        }
    } else {
        // t_q = 2 + 2q
        for (long i = 0; i < rows / 2; ++i) {
            for (long k = 0; k < half; ++k) {
                const long t = 2 + 2 * (i + half - 1 - k);
                const long ta = dot > 0 ? t : t - 1;
                const long tb = dot > 0 ? t - 1 : t;
                y.row(4 * i) += ha[2 * k] * x.row(ext(tb));
                y.row(4 * i + 1) += hb[2 * k] * x.row(ext(ta));
                y.row(4 * i + 2) += ha[2 * k + 1] * x.row(ext(tb));
                y.row(4 * i + 3) += hb[2 * k + 1] * x.row(ext(ta));
            }
        }
    }
    return y;
}

// Quads (a b / c d) to two complex subimages p - q and p + q where
// p = (a + ib)/sqrt2 and q = (d - ic)/sqrt2.
void q2c(const Grid& y, ComplexSubband& first, ComplexSubband& second) {
    const long r = y.rows() / 2;
    const long c = y.cols() / 2;
    first.real_part.resize(r, c);
    first.imag_part.resize(r, c);
    second.real_part.resize(r, c);
    second.imag_part.resize(r, c);
    for (long i = 0; i < r; ++i) {
        for (long j = 0; j < c; ++j) {
            const double a = y(2 * i, 2 * j);
            const double b = y(2 * i, 2 * j + 1);
            const double cc = y(2 * i + 1, 2 * j);
            const double d = y(2 * i + 1, 2 * j + 1);
            const double pr = a * kSqrtHalf, pi = b * kSqrtHalf;
            const double qr = d * kSqrtHalf, qi = -cc * kSqrtHalf;
            first.real_part(i, j) = pr - qr;
            first.imag_part(i, j) = pi - qi;
            second.real_part(i, j) = pr + qr;
            second.imag_part(i, j) = pi + qi;
        }
    }
}

Grid c2q(const ComplexSubband& first, const ComplexSubband& second) {
    const long r = first.real_part.rows();
    const long c = first.real_part.cols();
    Grid x(2 * r, 2 * c);
    for (long i = 0; i < r; ++i) {
        for (long j = 0; j < c; ++j) {
            const double pr = (first.real_part(i, j) + second.real_part(i, j)) * kSqrtHalf;
            const double pi = (first.imag_part(i, j) + second.imag_part(i, j)) * kSqrtHalf;
            const double qr = (first.real_part(i, j) - second.real_part(i, j)) * kSqrtHalf;
            const double qi = (first.imag_part(i, j) - second.imag_part(i, j)) * kSqrtHalf;
            x(2 * i, 2 * j) = pr;
            x(2 * i, 2 * j + 1) = pi;
            x(2 * i + 1, 2 * j) = qi;
            x(2 * i + 1, 2 * j + 1) = -qr;
        }
    }
    return x;
}

Grid extend_to_multiple_of_4(const Grid& g) {
    Grid out = g;
    if (out.rows() % 4 != 0) {
        Grid ext(out.rows() + 2, out.cols());
        ext.row(0) = out.row(0);
        ext.middleRows(1, out.rows()) = out;
        ext.row(out.rows() + 1) = out.row(out.rows() - 1);
        out = std::move(ext);
    }
    if (out.cols() % 4 != 0) {
        Grid ext(out.rows(), out.cols() + 2);
        ext.col(0) = out.col(0);
        ext.middleCols(1, out.cols()) = out;
        ext.col(out.cols() + 1) = out.col(out.cols() - 1);
        out = std::move(ext);
    }
    return out;
}

void assign_level(std::array<ComplexSubband, kNumOrientations>& level, int scale, const Grid& horizontal,
                  const Grid& vertical, const Grid& diagonal) {
    q2c(horizontal, level[0], level[5]);
    q2c(vertical, level[2], level[3]);
    q2c(diagonal, level[1], level[4]);
    for (int r = 0; r < kNumOrientations; ++r) {
        level[r].scale = scale;
        level[r].orientation_degrees = kOrientationDegrees[r];
    }
}

// Row-stochastic matrix: Gaussian smoothing (half-sample symmetric
// boundary) followed by area resampling from n_in to n_out samples.
Eigen::MatrixXd averaging_operator(long n_in, long n_out, double sigma) {
    Eigen::MatrixXd blur = Eigen::MatrixXd::Identity(n_in, n_in);
    if (sigma > 0.0) {
        blur.setZero();
        const long radius = std::max<long>(1, static_cast<long>(std::ceil(3.5 * sigma)));
        std::vector<double> k(2 * radius + 1);
        double sum = 0.0;
        for (long i = -radius; i <= radius; ++i) {
            k[i + radius] = std::exp(-0.5 * static_cast<double>(i * i) / (sigma * sigma));
            sum += k[i + radius];
        }
        for (long i = 0; i < n_in; ++i) {
            for (long t = -radius; t <= radius; ++t) blur(i, reflect_index(i + t, n_in)) += k[t + radius] / sum;
        }
    }
    Eigen::MatrixXd area = Eigen::MatrixXd::Zero(n_out, n_in);
    const double step = static_cast<double>(n_in) / static_cast<double>(n_out);
    for (long o = 0; o < n_out; ++o) {
        const double lo = o * step;
        const double hi = (o + 1) * step;
        for (long i = static_cast<long>(std::floor(lo)); i < n_in && i < hi; ++i) {
            const double overlap = std::min<double>(hi, i + 1) - std::max<double>(lo, i);
            if (overlap > 0) area(o, i) = overlap / step;
        }
    }
    return area * blur;
}

Grid crop_border(const Grid& g, int border) {
    if (border == 0) return g;
    return g.block(border, border, g.rows() - 2 * border, g.cols() - 2 * border);
}

int even_floor(int n) { return n - (n % 2); }

}  // namespace

DtcwtFilterBank build_filter_bank() {
    // Near-symmetric 13/19-tap level-1 pair (unit DC gain as published).
    const std::vector<double> h0o_unit{-0.0017578125, 0.0, 0.022265625, -0.046875, -0.0482421875, 0.296875,
                                       0.55546875,    0.296875, -0.0482421875, -0.046875, 0.022265625, 0.0,
                                       -0.0017578125};
    const std::vector<double> g0o_unit{7.062639508928571e-05, 0.0, -0.0013419015066964285,
                                       -0.0018833705357142855, 0.007156808035714285, 0.023856026785714284,
                                       -0.05564313616071428, -0.05168805803571428, 0.29975760323660716,
                                       0.5594308035714286, 0.29975760323660716, -0.05168805803571428,
                                       -0.05564313616071428, 0.023856026785714284, 0.007156808035714285,
                                       -0.0018833705357142855, -0.0013419015066964285, 0.0,
                                       7.062639508928571e-05};
    // 14-tap quarter-shift tree-a lowpass.
    const std::vector<double> h0a{0.003253142763653182, -0.00388321199915849, 0.03466034684485349,
                                  -0.03887280126882779, -0.11720388769911527, 0.27529538466888204,
                                  0.7561456438925225,   0.5688104207121227,   0.011866092033797,
                                  -0.1067118046866654,  0.023825384794920298, 0.01702522388155399,
                                  -0.005439475937274115, -0.004556895628475491};

    DtcwtFilterBank bank;
    const double s = std::numbers::sqrt2;
    bank.h0o = scaled(h0o_unit, s);
    bank.g0o = scaled(g0o_unit, s);
    bank.h1o = alternate_signs(bank.g0o, /*flip_even=*/true);
    bank.g1o = alternate_signs(bank.h0o, /*flip_even=*/false);

    bank.h0a = h0a;
    bank.h0b = reversed(h0a);
    bank.h1a = alternate_signs(bank.h0b, /*flip_even=*/false);
    bank.h1b = reversed(bank.h1a);
    bank.g0a = bank.h0b;
    bank.g0b = bank.h0a;
    bank.g1a = bank.h1b;
    bank.g1b = bank.h1a;
    return bank;
}

DtcwtPyramid dtcwt_forward(const Grid& image, const DtcwtFilterBank& bank, int levels) {
    if (levels < 1) throw ParameterError("dtcwt_forward: levels must be >= 1");
    if (image.rows() < kMinLevelInput || image.cols() < kMinLevelInput) {
        throw DimensionError("dtcwt_forward: image smaller than the level-1 filter support");
    }
    DtcwtPyramid pyr;
    pyr.input_rows = static_cast<int>(image.rows());
    pyr.input_cols = static_cast<int>(image.cols());

    Grid x = image;
    if (x.rows() % 2 != 0) {
        x.conservativeResize(x.rows() + 1, Eigen::NoChange);
        x.row(x.rows() - 1) = x.row(x.rows() - 2);
    }
    if (x.cols() % 2 != 0) {
        x.conservativeResize(Eigen::NoChange, x.cols() + 1);
        x.col(x.cols() - 1) = x.col(x.cols() - 2);
    }

    const double g = kSqrtHalf;
    pyr.highpasses.resize(static_cast<std::size_t>(levels));
    const Grid lo = transpose(colfilter(x, bank.h0o, g));
    const Grid hi = transpose(colfilter(x, bank.h1o, g));
    Grid lolo = transpose(colfilter(lo, bank.h0o, g));
    assign_level(pyr.highpasses[0], 1, transpose(colfilter(hi, bank.h0o, g)), transpose(colfilter(lo, bank.h1o, g)),
                 transpose(colfilter(hi, bank.h1o, g)));

    for (int level = 1; level < levels; ++level) {
        if (lolo.rows() < kMinLevelInput || lolo.cols() < kMinLevelInput) {
            throw DimensionError("dtcwt_forward: level " + std::to_string(level + 1) +
                                 " input smaller than the quarter-shift filter support");
        }
        lolo = extend_to_multiple_of_4(lolo);
        const Grid lo2 = transpose(coldfilt(lolo, bank.h0b, bank.h0a));
        const Grid hi2 = transpose(coldfilt(lolo, bank.h1b, bank.h1a));
        lolo = transpose(coldfilt(lo2, bank.h0b, bank.h0a));
        assign_level(pyr.highpasses[level], level + 1, transpose(coldfilt(hi2, bank.h0b, bank.h0a)),
                     transpose(coldfilt(lo2, bank.h1b, bank.h1a)), transpose(coldfilt(hi2, bank.h1b, bank.h1a)));
    }
    pyr.lowpass = std::move(lolo);
    return pyr;
}

Grid dtcwt_inverse(const DtcwtPyramid& pyramid, const DtcwtFilterBank& bank) {
    const auto& yh = pyramid.highpasses;
    if (yh.empty()) throw ParameterError("dtcwt_inverse: empty pyramid");
    Grid z = pyramid.lowpass;
    for (std::size_t level = yh.size(); level >= 2; --level) {
        const auto& bands = yh[level - 1];
        const Grid lh = c2q(bands[0], bands[5]);
        const Grid hl = c2q(bands[2], bands[3]);
        const Grid hh = c2q(bands[1], bands[4]);
        const Grid y1 = colifilt(z, bank.g0b, bank.g0a) + colifilt(lh, bank.g1b, bank.g1a);
        const Grid y2 = colifilt(hl, bank.g0b, bank.g0a) + colifilt(hh, bank.g1b, bank.g1a);
        z = transpose(colifilt(transpose(y1), bank.g0b, bank.g0a) + colifilt(transpose(y2), bank.g1b, bank.g1a));
        const long want_r = 2 * yh[level - 2][0].real_part.rows();
        const long want_c = 2 * yh[level - 2][0].real_part.cols();
        if (z.rows() != want_r) z = z.middleRows(1, z.rows() - 2).eval();
        if (z.cols() != want_c) z = z.middleCols(1, z.cols() - 2).eval();
        if (z.rows() != want_r || z.cols() != want_c) throw DimensionError("dtcwt_inverse: inconsistent level sizes");
    }
    const auto& bands = yh[0];
    const Grid lh = c2q(bands[0], bands[5]);
    const Grid hl = c2q(bands[2], bands[3]);
    const Grid hh = c2q(bands[1], bands[4]);
    const double g = kSqrtHalf;
    const Grid y1 = colfilter(z, bank.g0o, g) + colfilter(lh, bank.g1o, g);
    const Grid y2 = colfilter(hl, bank.g0o, g) + colfilter(hh, bank.g1o, g);
    z = transpose(colfilter(transpose(y1), bank.g0o, g) + colfilter(transpose(y2), bank.g1o, g));
    return z.topLeftCorner(pyramid.input_rows, pyramid.input_cols);
}

Grid complex_modulus(const ComplexSubband& subband) {
    if (subband.real_part.rows() != subband.imag_part.rows() || subband.real_part.cols() != subband.imag_part.cols()) {
        throw DimensionError("complex_modulus: real and imaginary parts differ in size");
    }
    return (subband.real_part.array().square() + subband.imag_part.array().square()).sqrt().matrix();
}

Grid parametric_log(const Grid& envelope, double k) {
    if (!(k > 0.0)) throw ParameterError("parametric_log: k must be positive");
    return (envelope.array() + k).log().matrix();
}

Grid local_average(const Grid& envelope, double averaging_scale, int out_rows, int out_cols) {
    if (out_rows <= 0 || out_cols <= 0 || out_rows > envelope.rows() || out_cols > envelope.cols()) {
        throw DimensionError("local_average: output must be non-empty and no larger than the input");
    }
    const double sigma = kAveragingSigmaRatio * averaging_scale;
    const Eigen::MatrixXd rows_op = averaging_operator(envelope.rows(), out_rows, sigma);
    const Eigen::MatrixXd cols_op = averaging_operator(envelope.cols(), out_cols, sigma);
    return rows_op * envelope * cols_op.transpose();
}

int ScatterConfig::channels_per_resolution() const {
    const int j = num_scales;
    return 1 + kNumOrientations * j + kNumOrientations * kNumOrientations * j * (j - 1) / 2;
}

void ScatterConfig::validate() const {
    if (num_scales < 1) throw ConfigError("scatter: num_scales must be >= 1");
    if (static_cast<int>(log_offsets.size()) != num_scales) {
        throw ConfigError("scatter: need one log offset per scale");
    }
    for (double k : log_offsets) {
        if (!(k > 0.0)) throw ConfigError("scatter: log offsets must be positive");
    }
    if (resolution_factors.empty()) throw ConfigError("scatter: no resolution factors");
    for (double f : resolution_factors) {
        if (!(f >= 1.0)) throw ConfigError("scatter: resolution factors must be >= 1");
    }
    if (border_crop < 0) throw ConfigError("scatter: border_crop must be >= 0");
}

std::string to_string(Layer layer) {
    switch (layer) {
        case Layer::L0: return "L0";
        case Layer::L1: return "L1";
        case Layer::L2: return "L2";
    }
    return "?";
}

Layer layer_from_string(const std::string& s) {
    if (s == "L0") return Layer::L0;
    if (s == "L1") return Layer::L1;
    if (s == "L2") return Layer::L2;
    throw ParameterError("unknown layer '" + s + "'");
}

std::vector<double> ScatterFeatures::flatten() const {
    std::vector<double> out;
    out.reserve(maps.size() * static_cast<std::size_t>(rows() * cols()));
    for (const Grid& m : maps) out.insert(out.end(), m.data(), m.data() + m.size());
    return out;
}

std::vector<Grid> second_layer(const FirstLayer& first_layer, const DtcwtFilterBank& bank,
                               const ScatterConfig& config, double resolution, int out_rows, int out_cols) {
    const int num_scales = config.num_scales;
    if (static_cast<int>(first_layer.size()) != num_scales) {
        throw DimensionError("second_layer: expected one envelope set per scale");
    }
    std::vector<Grid> maps;
    for (int j1 = 1; j1 < num_scales; ++j1) {
        for (int r1 = 0; r1 < kNumOrientations; ++r1) {
            const DtcwtPyramid pyr = dtcwt_forward(first_layer[j1 - 1][r1], bank, num_scales - j1);
            for (int j2 = j1 + 1; j2 <= num_scales; ++j2) {
                // map pitch is 2^j2 / resolution base pixels
                const double avg =
                    kSecondLayerWidthFactor * config.averaging_scale() * resolution / static_cast<double>(1 << j2);
                for (int r2 = 0; r2 < kNumOrientations; ++r2) {
                    maps.push_back(local_average(complex_modulus(pyr.highpasses[j2 - j1 - 1][r2]), avg, out_rows,
                                                 out_cols));
                }
            }
        }
    }
    return maps;
}

ScatterFeatures scatter(const GrayImage& image, const DtcwtFilterBank& bank, const ScatterConfig& config) {
    config.validate();
    const int num_scales = config.num_scales;
    const int base_rows = image.height();
    const int base_cols = image.width();
    const int out_rows = static_cast<int>(std::lround(base_rows / config.averaging_scale()));
    const int out_cols = static_cast<int>(std::lround(base_cols / config.averaging_scale()));
    const int final_rows = out_rows - 2 * config.border_crop;
    const int final_cols = out_cols - 2 * config.border_crop;
    if (final_rows < 1 || final_cols < 1) {
        throw DimensionError("scatter: image too small for the averaging scale and border crop");
    }

    ScatterFeatures features;
    auto push = [&](Layer layer, double res, std::vector<int> scales, std::vector<int> orients, const Grid& map) {
        features.channels.push_back(
            ChannelDescriptor{layer, res, std::move(scales), std::move(orients), final_rows, final_cols});
        features.maps.push_back(crop_border(map, config.border_crop));
    };

    for (double res : config.resolution_factors) {
        Grid x = image.pixels();
        if (res != 1.0) {
            const int rr = static_cast<int>(std::lround(base_rows * res));
            const int cc = static_cast<int>(std::lround(base_cols * res));
            x = center_fit(resize_bilinear(x, rr, cc), even_floor(rr), even_floor(cc));
        }
        if (x.rows() < GrayImage::kMinSide || x.cols() < GrayImage::kMinSide) {
            throw DimensionError("scatter: resampled image below minimum size");
        }
        const DtcwtPyramid pyr = dtcwt_forward(x, bank, num_scales);

        push(Layer::L0, res, {}, {}, local_average(x, config.averaging_scale() * res, out_rows, out_cols));

        FirstLayer first(static_cast<std::size_t>(num_scales));
        for (int j = 1; j <= num_scales; ++j) {
            const double avg = config.averaging_scale() * res / static_cast<double>(1 << j);
            for (int r = 0; r < kNumOrientations; ++r) {
                first[j - 1][r] = parametric_log(complex_modulus(pyr.highpasses[j - 1][r]), config.log_offsets[j - 1]);
                push(Layer::L1, res, {j}, {kOrientationDegrees[r]}, local_average(first[j - 1][r], avg, out_rows, out_cols));
            }
        }

        const std::vector<Grid> l2 = second_layer(first, bank, config, res, out_rows, out_cols);
        std::size_t idx = 0;
        for (int j1 = 1; j1 < num_scales; ++j1) {
            for (int r1 = 0; r1 < kNumOrientations; ++r1) {
                for (int j2 = j1 + 1; j2 <= num_scales; ++j2) {
                    for (int r2 = 0; r2 < kNumOrientations; ++r2) {
                        push(Layer::L2, res, {j1, j2}, {kOrientationDegrees[r1], kOrientationDegrees[r2]}, l2[idx++]);
                    }
                }
            }
        }
    }
    if (config.joint_invariance_enabled) return joint_invariance(features, config);
    return features;
}

ScatterFeatures joint_invariance(const ScatterFeatures& features, const ScatterConfig& config) {
    const int n = kNumOrientations;
    const int num_scales = config.num_scales;
    const int per_res = config.channels_per_resolution();
    if (features.maps.size() % static_cast<std::size_t>(per_res) != 0) {
        throw DimensionError("joint_invariance: channel count does not match the configuration");
    }
    auto wrap = [n](int r) { return ((r % n) + n) % n; };
    // Symmetric, doubly stochastic neighbour weights along the scale axis.
    auto scale_mix = [](const std::vector<Grid>& line) {
        const std::size_t len = line.size();
        std::vector<Grid> out(len);
        for (std::size_t i = 0; i < len; ++i) {
            Grid acc = line[i];
            if (i > 0) acc += 0.25 * (line[i - 1] - line[i]);
            if (i + 1 < len) acc += 0.25 * (line[i + 1] - line[i]);
            out[i] = std::move(acc);
        }
        return out;
    };

    ScatterFeatures out = features;
    const std::size_t blocks = features.maps.size() / static_cast<std::size_t>(per_res);
    for (std::size_t b = 0; b < blocks; ++b) {
        const std::size_t base = b * static_cast<std::size_t>(per_res);
        const std::size_t l1 = base + 1;
        const std::size_t l2 = l1 + static_cast<std::size_t>(num_scales * n);

        // L1: orientation then scale.
        std::vector<std::vector<Grid>> smoothed(num_scales, std::vector<Grid>(n));
        for (int j = 0; j < num_scales; ++j) {
            for (int r = 0; r < n; ++r) {
                const auto at = [&](int rr) -> const Grid& { return features.maps[l1 + j * n + wrap(rr)]; };
                smoothed[j][r] = (at(r - 1) + at(r) + at(r + 1)) / 3.0;
            }
        }
        for (int r = 0; r < n; ++r) {
            std::vector<Grid> line(num_scales);
            for (int j = 0; j < num_scales; ++j) line[j] = smoothed[j][r];
            const std::vector<Grid> mixed = scale_mix(line);
            for (int j = 0; j < num_scales; ++j) out.maps[l1 + j * n + r] = mixed[j];
        }

        // L2: joint orientation shift of (r1, r2), then scale along paths
        // with the same scale gap j2 - j1.
        std::vector<std::pair<int, int>> paths;
        for (int j1 = 1; j1 < num_scales; ++j1)
            for (int j2 = j1 + 1; j2 <= num_scales; ++j2) paths.emplace_back(j1, j2);
        auto index_of = [&](int j1, int j2, int r1, int r2) {
            std::size_t off = 0;
            for (int a = 1; a < j1; ++a) off += static_cast<std::size_t>(n * (num_scales - a) * n);
            off += static_cast<std::size_t>(r1 * (num_scales - j1) * n + (j2 - j1 - 1) * n + r2);
            return l2 + off;
        };
        std::map<std::tuple<int, int, int, int>, Grid> rotated;
        for (auto [j1, j2] : paths) {
            for (int r1 = 0; r1 < n; ++r1) {
                for (int r2 = 0; r2 < n; ++r2) {
                    Grid acc = Grid::Zero(features.maps[base].rows(), features.maps[base].cols());
                    for (int s = -1; s <= 1; ++s) acc += features.maps[index_of(j1, j2, wrap(r1 + s), wrap(r2 + s))];
                    rotated[{j1, j2, r1, r2}] = acc / 3.0;
                }
            }
        }
        for (int gap = 1; gap < num_scales; ++gap) {
            for (int r1 = 0; r1 < n; ++r1) {
                for (int r2 = 0; r2 < n; ++r2) {
                    std::vector<Grid> line;
                    for (int j1 = 1; j1 + gap <= num_scales; ++j1) line.push_back(rotated[{j1, j1 + gap, r1, r2}]);
                    const std::vector<Grid> mixed = scale_mix(line);
                    for (int j1 = 1; j1 + gap <= num_scales; ++j1) {
                        out.maps[index_of(j1, j1 + gap, r1, r2)] = mixed[static_cast<std::size_t>(j1 - 1)];
                    }
                }
            }
        }
    }
    return out;
}

std::vector<double> calibrate_log_offsets(std::span<const GrayImage> images, const DtcwtFilterBank& bank,
                                          const ScatterConfig& config) {
    if (images.empty()) throw ParameterError("calibrate_log_offsets: no images");
    std::vector<double> sums(static_cast<std::size_t>(config.num_scales), 0.0);
    std::vector<double> counts(static_cast<std::size_t>(config.num_scales), 0.0);
    for (const GrayImage& img : images) {
        const DtcwtPyramid pyr = dtcwt_forward(img.pixels(), bank, config.num_scales);
        for (int j = 0; j < config.num_scales; ++j) {
            for (const ComplexSubband& band : pyr.highpasses[j]) {
                const Grid env = complex_modulus(band);
                sums[j] += env.sum();
                counts[j] += static_cast<double>(env.size());
            }
        }
    }
    std::vector<double> k(sums.size());
    for (std::size_t j = 0; j < k.size(); ++j) k[j] = std::max(kLogOffsetFraction * sums[j] / counts[j], 1e-12);
    return k;
}

void export_features(const std::filesystem::path& stem, const ScatterFeatures& features) {
    nlohmann::json header;
    header["dtype"] = "float32";
    header["byte_order"] = "little";
    nlohmann::json channels = nlohmann::json::array();
    for (const ChannelDescriptor& c : features.channels) {
        channels.push_back({{"layer", to_string(c.layer)},
                            {"resolution", c.resolution},
                            {"scales", c.scales},
                            {"orientations", c.orientations},
                            {"rows", c.rows},
                            {"cols", c.cols}});
    }
    header["channels"] = channels;
    const std::vector<double> flat = features.flatten();
    write_f32(std::filesystem::path(stem).concat(".bin"), flat);
    write_json(std::filesystem::path(stem).concat(".json"), header);
}

ScatterFeatures import_features(const std::filesystem::path& stem) {
    const nlohmann::json header = read_json(std::filesystem::path(stem).concat(".json"));
    const std::vector<double> flat = read_f32(std::filesystem::path(stem).concat(".bin"));
    ScatterFeatures features;
    std::size_t offset = 0;
    for (const auto& c : header.at("channels")) {
        ChannelDescriptor d;
        d.layer = layer_from_string(c.at("layer").get<std::string>());
        d.resolution = c.at("resolution").get<double>();
        d.scales = c.at("scales").get<std::vector<int>>();
        d.orientations = c.at("orientations").get<std::vector<int>>();
        d.rows = c.at("rows").get<int>();
        d.cols = c.at("cols").get<int>();
        const std::size_t n = static_cast<std::size_t>(d.rows * d.cols);
        if (offset + n > flat.size()) throw DimensionError("import_features: data shorter than header");
        Grid m(d.rows, d.cols);
        std::copy(flat.begin() + static_cast<long>(offset), flat.begin() + static_cast<long>(offset + n), m.data());
        offset += n;
        features.channels.push_back(std::move(d));
        features.maps.push_back(std::move(m));
    }
    if (offset != flat.size()) throw DimensionError("import_features: data longer than header");
    return features;
}

}  // namespace shdl::scatternet
