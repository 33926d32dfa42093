#include "shdl/regression_net.hpp"

#include "shdl/float_array.hpp"

#include <algorithm>
#include <cmath>
#include <limits>
#include <numeric>
#include <random>
#include <stdexcept>

namespace shdl::net {

namespace {

using RowMat = Eigen::Matrix<double, Eigen::Dynamic, Eigen::Dynamic, Eigen::RowMajor>;
using RowMap = Eigen::Map<RowMat>;
using ConstRowMap = Eigen::Map<const RowMat>;

constexpr int kConvLayers = 4;
constexpr int kFc1 = 2 * kConvLayers;
constexpr int kFc2 = kFc1 + 2;
constexpr double kMadToSigma = 1.4826;

// Same-padded im2col for a k x k kernel: rows are (channel, ky, kx), columns
// are output positions.
RowMat im2col(const double* in, int channels, int rows, int cols, int k) {
    const int pad = k / 2;
    RowMat out(channels * k * k, rows * cols);
    for (int c = 0; c < channels; ++c) {
        const double* plane = in + static_cast<std::size_t>(c) * rows * cols;
        for (int ky = 0; ky < k; ++ky) {
            for (int kx = 0; kx < k; ++kx) {
                double* dst = out.row((c * k + ky) * k + kx).data();
                for (int y = 0; y < rows; ++y) {
                    const int sy = y + ky - pad;
                    for (int x = 0; x < cols; ++x) {
                        const int sx = x + kx - pad;
                        dst[y * cols + x] =
                            (sy < 0 || sy >= rows || sx < 0 || sx >= cols) ? 0.0 : plane[sy * cols + sx];
                    }
                }
            }
        }
    }
    return out;
}

void col2im_add(const RowMat& colsm, double* out, int channels, int rows, int cols, int k) {
    const int pad = k / 2;
    for (int c = 0; c < channels; ++c) {
        double* plane = out + static_cast<std::size_t>(c) * rows * cols;
        for (int ky = 0; ky < k; ++ky) {
            for (int kx = 0; kx < k; ++kx) {
                const double* src = colsm.row((c * k + ky) * k + kx).data();
                for (int y = 0; y < rows; ++y) {
                    const int sy = y + ky - pad;
                    if (sy < 0 || sy >= rows) continue;
                    for (int x = 0; x < cols; ++x) {
                        const int sx = x + kx - pad;
                        if (sx >= 0 && sx < cols) plane[sy * cols + sx] += src[y * cols + x];
                    }
                }
            }
        }
    }
}

double rho(double r) {
    constexpr double c = kTukeyC;
    if (std::abs(r) > c) return c * c / 6.0;
    const double u = 1.0 - (r / c) * (r / c);
    return c * c / 6.0 * (1.0 - u * u * u);
}

double psi(double r) {
    constexpr double c = kTukeyC;
    if (std::abs(r) >= c) return 0.0;
    const double u = 1.0 - (r / c) * (r / c);
    return r * u * u;
}

double median_inplace(std::vector<double>& v) {
    const std::size_t n = v.size();
    const auto mid = v.begin() + static_cast<long>(n / 2);
    std::nth_element(v.begin(), mid, v.end());
    const double hi = *mid;
    if (n % 2 == 1) return hi;
    const double lo = *std::max_element(v.begin(), mid);
    return 0.5 * (lo + hi);
}


}  // namespace

std::uint64_t mix_seed(std::uint64_t a, std::uint64_t b) {
    std::seed_seq seq{static_cast<std::uint32_t>(a), static_cast<std::uint32_t>(a >> 32),
                      static_cast<std::uint32_t>(b), static_cast<std::uint32_t>(b >> 32)};
    std::uint64_t out = 0;
    std::array<std::uint32_t, 2> words{};
    seq.generate(words.begin(), words.end());
    out = (static_cast<std::uint64_t>(words[0]) << 32) | words[1];
    return out;
}

Tensor Tensor::zeros(int batch, int channels, int rows, int cols) {
    Tensor t;
    t.batch = batch;
    t.channels = channels;
    t.rows = rows;
    t.cols = cols;
    t.data.assign(static_cast<std::size_t>(batch) * channels * rows * cols, 0.0);
    return t;
}

Tensor Tensor::gather(const std::vector<int>& indices) const {
    Tensor t = zeros(static_cast<int>(indices.size()), channels, rows, cols);
    for (std::size_t i = 0; i < indices.size(); ++i) {
        if (indices[i] < 0 || indices[i] >= batch) throw DimensionError("Tensor::gather: index out of range");
        std::copy_n(sample(indices[i]), sample_size(), t.sample(static_cast<int>(i)));
    }
    return t;
}

void NetConfig::validate() const {
    if (input_channels < 1 || input_rows < 1 || input_cols < 1) throw ConfigError("net: input shape must be positive");
    for (int w : conv_widths)
        if (w < 1) throw ConfigError("net: conv widths must be positive");
    if (kernel < 1 || kernel % 2 == 0) throw ConfigError("net: kernel must be odd and positive");
    if (fc1_width < 1) throw ConfigError("net: fc1 width must be positive");
    if (output_width != 28) throw ConfigError("net: output width must be 28 (14 keypoints)");
    if (lrn_size < 1 || lrn_size % 2 == 0) throw ConfigError("net: LRN window must be odd");
    if (!(dropout_keep > 0.0 && dropout_keep <= 1.0)) throw ConfigError("net: dropout_keep must be in (0, 1]");
    const auto [r, c] = block_output_size(kConvLayers - 1);
    if (r < 1 || c < 1) throw ConfigError("net: pooling collapses the input");
}

std::pair<int, int> NetConfig::block_output_size(int layer) const {
    int r = input_rows;
    int c = input_cols;
    for (int i = 0; i <= layer; ++i) {
        if (pool_after[static_cast<std::size_t>(i)]) {
            r /= 2;
            c /= 2;
        }
    }
    return {r, c};
}

int NetConfig::fc1_inputs() const {
    const auto [r, c] = block_output_size(kConvLayers - 1);
    return conv_widths.back() * r * c;
}

void TrainConfig::validate() const {
    if (!(base_lr > 0.0) || !(lr_after_drop > 0.0)) throw ConfigError("train: learning rates must be positive");
    if (drop_epoch < 1) throw ConfigError("train: drop_epoch must be positive");
    if (epochs < 0) throw ConfigError("train: epochs must be non-negative");
    if (!(dropout_keep > 0.0 && dropout_keep <= 1.0)) throw ConfigError("train: dropout_keep must be in (0, 1]");
    if (batch_size < 1) throw ConfigError("train: batch_size must be positive");
    if (momentum < 0.0 || momentum >= 1.0) throw ConfigError("train: momentum must be in [0, 1)");
}

std::string to_string(InitMode mode) { return mode == InitMode::random ? "random" : "structural_prior"; }

double mad_scale(const Eigen::MatrixXd& pred, const Eigen::MatrixXd& target) {
    if (pred.rows() != target.rows() || pred.cols() != target.cols()) {
        throw DimensionError("mad_scale: prediction and target shapes differ");
    }
    std::vector<double> e(static_cast<std::size_t>(pred.size()));
    for (Eigen::Index i = 0; i < pred.size(); ++i) e[i] = pred.data()[i] - target.data()[i];
    const double med = median_inplace(e);
    for (double& v : e) v = std::abs(v - med);
    const double sigma = kMadToSigma * median_inplace(e);
    return sigma > 0.0 ? sigma : 1.0;
}

LossResult tukey_biweight_loss(const Eigen::MatrixXd& pred, const Eigen::MatrixXd& target, double sigma) {
    if (pred.rows() != target.rows() || pred.cols() != target.cols()) {
        throw DimensionError("tukey_biweight_loss: prediction and target shapes differ");
    }
    if (!(sigma > 0.0)) sigma = 1.0;
    LossResult out;
    out.sigma = sigma;
    out.grad.resize(pred.rows(), pred.cols());
    const double n = static_cast<double>(pred.size());
    double total = 0.0;
    const double cutoff = kTukeyC * sigma;
    for (Eigen::Index i = 0; i < pred.size(); ++i) {
        const double d = pred.data()[i] - target.data()[i];
        // outliers are decided on the unscaled residual so rounding in d / sigma cannot leak a gradient
        if (std::abs(d) > cutoff) {
            total += kTukeyC * kTukeyC / 6.0;
            out.grad.data()[i] = 0.0;
            continue;
        }
        const double r = d / sigma;
        total += rho(r);
        out.grad.data()[i] = psi(r) / (sigma * n);
    }
    out.loss = total / n;
    return out;
}

LossResult tukey_biweight_loss(const Eigen::MatrixXd& pred, const Eigen::MatrixXd& target) {
    return tukey_biweight_loss(pred, target, mad_scale(pred, target));
}

struct RegressionNet::Cache {
    struct Block {
        const Tensor* input = nullptr;
        Tensor relu;    // conv + bias after ReLU
        Tensor scale;   // LRN denominators k + alpha/n * sum a^2
        Tensor lrn;     // LRN output
        std::vector<int> argmax;
        Tensor pooled;  // only when pooling
        const Tensor& out() const { return argmax.empty() ? lrn : pooled; }
    };
    std::vector<Block> blocks;
    Eigen::MatrixXd flat;
    Eigen::MatrixXd fc1_pre;
    Eigen::MatrixXd mask;
    Eigen::MatrixXd fc1_out;
    Eigen::MatrixXd output;
};

RegressionNet::RegressionNet(NetConfig config, std::uint64_t seed) : config_(std::move(config)) {
    config_.validate();
    std::mt19937_64 rng(seed);
    const int k2 = config_.kernel * config_.kernel;
    int in = config_.input_channels;
    for (int i = 0; i < kConvLayers; ++i) {
        const int out = config_.conv_widths[static_cast<std::size_t>(i)];
        const double std_dev = std::sqrt(2.0 / (in * k2));
        std::normal_distribution<double> n(0.0, std_dev);
        Eigen::MatrixXd w(out, in * k2);
        for (Eigen::Index r = 0; r < w.rows(); ++r)
            for (Eigen::Index c = 0; c < w.cols(); ++c) w(r, c) = n(rng);
        const std::string name = "conv" + std::to_string(i + 3);
        params_.push_back({name + ".weight", w});
        params_.push_back({name + ".bias", Eigen::MatrixXd::Zero(out, 1)});
        in = out;
    }
    params_.push_back({"fc7.weight", Eigen::MatrixXd::Zero(config_.fc1_width, config_.fc1_inputs())});
    params_.push_back({"fc7.bias", Eigen::MatrixXd::Zero(config_.fc1_width, 1)});
    params_.push_back({"fc8.weight", Eigen::MatrixXd::Zero(config_.output_width, config_.fc1_width)});
    params_.push_back({"fc8.bias", Eigen::MatrixXd::Zero(config_.output_width, 1)});
    randomize_fc(rng());
}

void RegressionNet::randomize_fc(std::uint64_t seed) {
    std::mt19937_64 rng(seed);
    for (int idx : {kFc1, kFc2}) {
        Eigen::MatrixXd& w = params_[static_cast<std::size_t>(idx)].value;
        // He-uniform for the rectified fc7, unit-gain uniform for the linear output
        const double gain = idx == kFc1 ? 6.0 : 3.0;
        const double limit = std::sqrt(gain / static_cast<double>(w.cols()));
        std::uniform_real_distribution<double> u(-limit, limit);
        for (Eigen::Index r = 0; r < w.rows(); ++r)
            for (Eigen::Index c = 0; c < w.cols(); ++c) w(r, c) = u(rng);
        params_[static_cast<std::size_t>(idx + 1)].value.setZero();
    }
}

void RegressionNet::set_dropout_keep(double keep) {
    if (!(keep > 0.0 && keep <= 1.0)) throw ConfigError("net: dropout_keep must be in (0, 1]");
    config_.dropout_keep = keep;
}

void RegressionNet::check_input(const Tensor& input) const {
    if (input.channels != config_.input_channels) {
        throw ConfigError("net: input has " + std::to_string(input.channels) + " channels, expected " +
                          std::to_string(config_.input_channels));
    }
    if (input.rows != config_.input_rows || input.cols != config_.input_cols) {
        throw ConfigError("net: input spatial size does not match the configuration");
    }
    if (input.data.size() != static_cast<std::size_t>(input.batch) * input.sample_size()) {
        throw DimensionError("net: tensor data length does not match its shape");
    }
}

void RegressionNet::forward_impl(const Tensor& input, bool train_mode, std::uint64_t dropout_seed, int blocks,
                                 Cache& cache) const {
    check_input(input);
    const int k = config_.kernel;
    const int batch = input.batch;
    cache.blocks.assign(static_cast<std::size_t>(blocks), {});
    const Tensor* x = &input;
    for (int i = 0; i < blocks; ++i) {
        Cache::Block& blk = cache.blocks[static_cast<std::size_t>(i)];
        blk.input = x;
        const Eigen::MatrixXd& w = params_[static_cast<std::size_t>(2 * i)].value;
        const Eigen::MatrixXd& b = params_[static_cast<std::size_t>(2 * i + 1)].value;
        const int out_c = static_cast<int>(w.rows());
        const int rows = x->rows;
        const int cols = x->cols;
        const int hw = rows * cols;
        blk.relu = Tensor::zeros(batch, out_c, rows, cols);
        blk.scale = Tensor::zeros(batch, out_c, rows, cols);
        blk.lrn = Tensor::zeros(batch, out_c, rows, cols);
        const int half = config_.lrn_size / 2;
        const double a_n = config_.lrn_alpha / config_.lrn_size;
        for (int s = 0; s < batch; ++s) {
            const RowMat colsm = im2col(x->sample(s), x->channels, rows, cols, k);
            RowMap y(blk.relu.sample(s), out_c, hw);
            y.noalias() = w * colsm;
            y.colwise() += b.col(0);
            y = y.cwiseMax(0.0);
            const RowMat sq = y.cwiseAbs2();
            RowMap sc(blk.scale.sample(s), out_c, hw);
            RowMap out(blk.lrn.sample(s), out_c, hw);
            for (int c = 0; c < out_c; ++c) {
                const int lo = std::max(0, c - half);
                const int hi = std::min(out_c - 1, c + half);
                sc.row(c) = (config_.lrn_k + a_n * sq.middleRows(lo, hi - lo + 1).colwise().sum().array()).matrix();
                out.row(c) = y.row(c).array() * sc.row(c).array().pow(-config_.lrn_beta);
            }
        }
        if (config_.pool_after[static_cast<std::size_t>(i)]) {
            const int pr = rows / 2;
            const int pc = cols / 2;
            blk.pooled = Tensor::zeros(batch, out_c, pr, pc);
            blk.argmax.assign(blk.pooled.data.size(), 0);
            std::size_t o = 0;
            for (int s = 0; s < batch; ++s) {
                for (int c = 0; c < out_c; ++c) {
                    const double* plane = blk.lrn.sample(s) + static_cast<std::size_t>(c) * hw;
                    for (int y = 0; y < pr; ++y) {
                        for (int xx = 0; xx < pc; ++xx, ++o) {
                            int best = (2 * y) * cols + 2 * xx;
                            for (int dy = 0; dy < 2; ++dy)
                                for (int dx = 0; dx < 2; ++dx) {
                                    const int idx = (2 * y + dy) * cols + 2 * xx + dx;
                                    if (plane[idx] > plane[best]) best = idx;
                                }
                            blk.argmax[o] = best;
                            blk.pooled.data[o] = plane[best];
                        }
                    }
                }
            }
        }
        x = &blk.out();
    }
    if (blocks < kConvLayers) return;

    cache.flat = ConstRowMap(x->data.data(), batch, static_cast<Eigen::Index>(x->sample_size()));
    const Eigen::MatrixXd& w7 = params_[kFc1].value;
    const Eigen::MatrixXd& b7 = params_[kFc1 + 1].value;
    cache.fc1_pre = cache.flat * w7.transpose();
    cache.fc1_pre.rowwise() += b7.col(0).transpose();
    const Eigen::MatrixXd relu = cache.fc1_pre.cwiseMax(0.0);
    if (train_mode) {
        std::mt19937_64 rng(dropout_seed);
        std::bernoulli_distribution keep(config_.dropout_keep);
        cache.mask.resize(relu.rows(), relu.cols());
        for (Eigen::Index r = 0; r < relu.rows(); ++r)
            for (Eigen::Index c = 0; c < relu.cols(); ++c) cache.mask(r, c) = keep(rng) ? 1.0 : 0.0;
    } else {
        cache.mask = Eigen::MatrixXd::Constant(relu.rows(), relu.cols(), config_.dropout_keep);
    }
    cache.fc1_out = relu.cwiseProduct(cache.mask);
    cache.output = cache.fc1_out * params_[kFc2].value.transpose();
    cache.output.rowwise() += params_[kFc2 + 1].value.col(0).transpose();
}

Eigen::MatrixXd RegressionNet::forward(const Tensor& input, bool train_mode, std::uint64_t dropout_seed) const {
    Cache cache;
    forward_impl(input, train_mode, dropout_seed, kConvLayers, cache);
    return cache.output;
}

Tensor RegressionNet::forward_blocks(const Tensor& input, int blocks) const {
    if (blocks < 0 || blocks > kConvLayers) throw ParameterError("forward_blocks: block count out of range");
    if (blocks == 0) return input;
    Cache cache;
    forward_impl(input, false, 0, blocks, cache);
    return cache.blocks.back().out();
}

Eigen::MatrixXd RegressionNet::fc1_activations(const Tensor& input, bool train_mode,
                                               std::uint64_t dropout_seed) const {
    Cache cache;
    forward_impl(input, train_mode, dropout_seed, kConvLayers, cache);
    return cache.fc1_out;
}

double RegressionNet::loss_and_gradients(const Tensor& input, const Eigen::MatrixXd& targets, bool train_mode,
                                         std::uint64_t dropout_seed, std::vector<Eigen::MatrixXd>& grads,
                                         std::optional<double> fixed_sigma, Eigen::MatrixXd* predictions) const {
    if (input.batch < 1) throw DimensionError("loss_and_gradients: empty batch");
    if (targets.rows() != input.batch || targets.cols() != config_.output_width) {
        throw DimensionError("loss_and_gradients: targets must be batch x output_width");
    }
    Cache cache;
    forward_impl(input, train_mode, dropout_seed, kConvLayers, cache);
    if (predictions) *predictions = cache.output;
    const LossResult loss = fixed_sigma ? tukey_biweight_loss(cache.output, targets, *fixed_sigma)
                                        : tukey_biweight_loss(cache.output, targets);
    grads.resize(params_.size());
    for (std::size_t i = 0; i < params_.size(); ++i) grads[i].setZero(params_[i].value.rows(), params_[i].value.cols());

    // fully connected layers
    const Eigen::MatrixXd& d_out = loss.grad;
    grads[kFc2] = d_out.transpose() * cache.fc1_out;
    grads[kFc2 + 1] = d_out.colwise().sum().transpose();
    Eigen::MatrixXd d_h = (d_out * params_[kFc2].value).cwiseProduct(cache.mask);
    d_h = d_h.cwiseProduct((cache.fc1_pre.array() > 0.0).cast<double>().matrix());
    grads[kFc1] = d_h.transpose() * cache.flat;
    grads[kFc1 + 1] = d_h.colwise().sum().transpose();
    const Eigen::MatrixXd d_flat = d_h * params_[kFc1].value;

    const int k = config_.kernel;
    const int batch = input.batch;
    const int half = config_.lrn_size / 2;
    const double a_n = config_.lrn_alpha / config_.lrn_size;
    const double beta = config_.lrn_beta;

    // gradient w.r.t. the current block output, same layout as that output
    AlignedVector d_next(static_cast<std::size_t>(d_flat.size()));
    RowMap(d_next.data(), d_flat.rows(), d_flat.cols()) = d_flat;

    for (int i = kConvLayers - 1; i >= 0; --i) {
        const Cache::Block& blk = cache.blocks[static_cast<std::size_t>(i)];
        const Tensor& x = *blk.input;
        const int out_c = blk.lrn.channels;
        const int rows = blk.lrn.rows;
        const int cols = blk.lrn.cols;
        const int hw = rows * cols;

        // un-pool
        AlignedVector d_lrn;
        if (!blk.argmax.empty()) {
            d_lrn.assign(blk.lrn.data.size(), 0.0);
            const std::size_t pooled_plane = static_cast<std::size_t>(blk.pooled.rows) * blk.pooled.cols;
            for (std::size_t o = 0; o < blk.argmax.size(); ++o) {
                const std::size_t plane = o / pooled_plane;
                d_lrn[plane * hw + static_cast<std::size_t>(blk.argmax[o])] += d_next[o];
            }
        } else {
            d_lrn = std::move(d_next);
        }

        Eigen::MatrixXd& dw = grads[static_cast<std::size_t>(2 * i)];
        Eigen::MatrixXd& db = grads[static_cast<std::size_t>(2 * i + 1)];
        const Eigen::MatrixXd& w = params_[static_cast<std::size_t>(2 * i)].value;
        AlignedVector d_in;
        if (i > 0) d_in.assign(x.data.size(), 0.0);
        for (int s = 0; s < batch; ++s) {
            const std::size_t off = static_cast<std::size_t>(s) * out_c * hw;
            const ConstRowMap g(d_lrn.data() + off, out_c, hw);
            const ConstRowMap a(blk.relu.sample(s), out_c, hw);
            const ConstRowMap sc(blk.scale.sample(s), out_c, hw);
            // t_c = g_c * a_c * s_c^(-beta-1)
            const RowMat t = (g.array() * a.array() * sc.array().pow(-beta - 1.0)).matrix();
            RowMat d_a(out_c, hw);
            for (int c = 0; c < out_c; ++c) {
                const int lo = std::max(0, c - half);
                const int hi = std::min(out_c - 1, c + half);
                const Eigen::RowVectorXd window = t.middleRows(lo, hi - lo + 1).colwise().sum();
                d_a.row(c) = (g.row(c).array() * sc.row(c).array().pow(-beta) -
                              2.0 * a_n * beta * a.row(c).array() * window.array())
                                 .matrix();
            }
            // ReLU
            d_a = d_a.cwiseProduct((a.array() > 0.0).cast<double>().matrix());
            const RowMat colsm = im2col(x.sample(s), x.channels, x.rows, x.cols, k);
            dw.noalias() += d_a * colsm.transpose();
            db += d_a.rowwise().sum();
            if (i > 0) {
                const RowMat d_cols = w.transpose() * d_a;
                col2im_add(d_cols, d_in.data() + static_cast<std::size_t>(s) * x.sample_size(), x.channels, x.rows,
                           x.cols, k);
            }
        }
        d_next = std::move(d_in);
    }
    return loss.loss;
}

void RegressionNet::init_with_priors(const std::vector<FilterMatrix>& filters, std::uint64_t seed) {
    if (filters.size() != static_cast<std::size_t>(kConvLayers)) {
        throw ConfigError("init_with_priors: need one filter set per conv layer");
    }
    for (int i = 0; i < kConvLayers; ++i) {
        const Eigen::MatrixXd& w = params_[static_cast<std::size_t>(2 * i)].value;
        const FilterMatrix& f = filters[static_cast<std::size_t>(i)];
        if (f.rows() != w.rows() || f.cols() != w.cols()) {
            throw ConfigError("init_with_priors: layer " + std::to_string(i + 3) + " expects " +
                              std::to_string(w.rows()) + "x" + std::to_string(w.cols()) + " filters, got " +
                              std::to_string(f.rows()) + "x" + std::to_string(f.cols()));
        }
        if (!f.allFinite()) throw ConfigError("init_with_priors: non-finite prior");
    }
    for (int i = 0; i < kConvLayers; ++i) {
        params_[static_cast<std::size_t>(2 * i)].value = filters[static_cast<std::size_t>(i)];
        params_[static_cast<std::size_t>(2 * i + 1)].value.setZero();
    }
    randomize_fc(seed);
    init_mode_ = InitMode::structural_prior;
}

void RegressionNet::round_to_f32() {
    for (Param& p : params_) p.value = p.value.unaryExpr([](double v) { return to_f32(v); });
}

void RegressionNet::save(const std::filesystem::path& stem, const nlohmann::json& extra) const {
    nlohmann::json doc;
    doc["config"] = {{"input_channels", config_.input_channels},
                     {"input_rows", config_.input_rows},
                     {"input_cols", config_.input_cols},
                     {"conv_widths", config_.conv_widths},
                     {"pool_after", config_.pool_after},
                     {"kernel", config_.kernel},
                     {"fc1_width", config_.fc1_width},
                     {"output_width", config_.output_width},
                     {"lrn_size", config_.lrn_size},
                     {"lrn_alpha", config_.lrn_alpha},
                     {"lrn_beta", config_.lrn_beta},
                     {"lrn_k", config_.lrn_k},
                     {"dropout_keep", config_.dropout_keep}};
    doc["init_mode"] = to_string(init_mode_);
    doc["dtype"] = "float32";
    doc["byte_order"] = "little";
    nlohmann::json layers = nlohmann::json::array();
    std::vector<double> flat;
    for (const Param& p : params_) {
        layers.push_back({{"name", p.name}, {"rows", p.value.rows()}, {"cols", p.value.cols()}});
        const RowMat rm = p.value;
        flat.insert(flat.end(), rm.data(), rm.data() + rm.size());
    }
    doc["params"] = layers;
    for (auto it = extra.begin(); it != extra.end(); ++it) doc[it.key()] = it.value();
    write_f32(std::filesystem::path(stem).concat(".bin"), flat);
    write_json(std::filesystem::path(stem).concat(".json"), doc);
}

RegressionNet RegressionNet::load(const std::filesystem::path& stem, nlohmann::json* extra) {
    const nlohmann::json doc = read_json(std::filesystem::path(stem).concat(".json"));
    const std::vector<double> flat = read_f32(std::filesystem::path(stem).concat(".bin"));
    const nlohmann::json& c = doc.at("config");
    NetConfig cfg;
    cfg.input_channels = c.at("input_channels").get<int>();
    cfg.input_rows = c.at("input_rows").get<int>();
    cfg.input_cols = c.at("input_cols").get<int>();
    cfg.conv_widths = c.at("conv_widths").get<std::array<int, 4>>();
    cfg.pool_after = c.at("pool_after").get<std::array<bool, 4>>();
    cfg.kernel = c.at("kernel").get<int>();
    cfg.fc1_width = c.at("fc1_width").get<int>();
    cfg.output_width = c.at("output_width").get<int>();
    cfg.lrn_size = c.at("lrn_size").get<int>();
    cfg.lrn_alpha = c.at("lrn_alpha").get<double>();
    cfg.lrn_beta = c.at("lrn_beta").get<double>();
    cfg.lrn_k = c.at("lrn_k").get<double>();
    cfg.dropout_keep = c.at("dropout_keep").get<double>();
    RegressionNet net(cfg, 0);
    net.init_mode_ = doc.at("init_mode").get<std::string>() == "random" ? InitMode::random : InitMode::structural_prior;
    std::size_t off = 0;
    const nlohmann::json& layers = doc.at("params");
    if (layers.size() != net.params_.size()) throw ConfigError("checkpoint: parameter count mismatch");
    for (std::size_t i = 0; i < net.params_.size(); ++i) {
        Param& p = net.params_[i];
        if (layers[i].at("name").get<std::string>() != p.name ||
            layers[i].at("rows").get<Eigen::Index>() != p.value.rows() ||
            layers[i].at("cols").get<Eigen::Index>() != p.value.cols()) {
            throw ConfigError("checkpoint: parameter '" + p.name + "' does not match the configuration");
        }
        const std::size_t n = static_cast<std::size_t>(p.value.size());
        if (off + n > flat.size()) throw DimensionError("checkpoint: weight file too short");
        p.value = ConstRowMap(flat.data() + off, p.value.rows(), p.value.cols());
        off += n;
    }
    if (off != flat.size()) throw DimensionError("checkpoint: weight file too long");
    if (extra) *extra = doc;
    return net;
}

FeatureNormalizer FeatureNormalizer::fit(const Tensor& features) {
    if (features.batch < 1) throw DimensionError("FeatureNormalizer: no samples");
    FeatureNormalizer f;
    const std::size_t plane = static_cast<std::size_t>(features.rows) * features.cols;
    f.mean.assign(static_cast<std::size_t>(features.channels), 0.0);
    f.inv_std.assign(static_cast<std::size_t>(features.channels), 1.0);
    for (int c = 0; c < features.channels; ++c) {
        double sum = 0.0;
        double sq = 0.0;
        for (int s = 0; s < features.batch; ++s) {
            const double* p = features.sample(s) + c * plane;
            for (std::size_t i = 0; i < plane; ++i) {
                sum += p[i];
                sq += p[i] * p[i];
            }
        }
        const double n = static_cast<double>(plane) * features.batch;
        const double m = sum / n;
        const double var = std::max(sq / n - m * m, 0.0);
        f.mean[static_cast<std::size_t>(c)] = m;
        f.inv_std[static_cast<std::size_t>(c)] = var > 1e-24 ? 1.0 / std::sqrt(var) : 1.0;
    }
    return f;
}

void FeatureNormalizer::apply(Tensor& features) const {
    if (static_cast<int>(mean.size()) != features.channels) {
        throw ConfigError("FeatureNormalizer: channel count mismatch");
    }
    const std::size_t plane = static_cast<std::size_t>(features.rows) * features.cols;
    for (int s = 0; s < features.batch; ++s) {
        for (int c = 0; c < features.channels; ++c) {
            double* p = features.sample(s) + c * plane;
            for (std::size_t i = 0; i < plane; ++i) p[i] = (p[i] - mean[c]) * inv_std[c];
        }
    }
}

nlohmann::json FeatureNormalizer::to_json() const { return {{"mean", mean}, {"inv_std", inv_std}}; }

FeatureNormalizer FeatureNormalizer::from_json(const nlohmann::json& j) {
    FeatureNormalizer f;
    f.mean = j.at("mean").get<std::vector<double>>();
    f.inv_std = j.at("inv_std").get<std::vector<double>>();
    if (f.mean.size() != f.inv_std.size()) throw ConfigError("FeatureNormalizer: mean/std length mismatch");
    return f;
}

double evaluation_loss(const RegressionNet& net, const RegressionData& data, double sigma) {
    if (data.size() == 0) return 0.0;
    constexpr int kChunk = 64;
    double total = 0.0;
    for (int start = 0; start < data.size(); start += kChunk) {
        const int n = std::min(kChunk, data.size() - start);
        std::vector<int> idx(static_cast<std::size_t>(n));
        std::iota(idx.begin(), idx.end(), start);
        const Eigen::MatrixXd pred = net.forward(data.features.gather(idx), false, 0);
        // overflowed outputs would otherwise land in the bounded outlier branch
        if (!pred.allFinite()) return std::numeric_limits<double>::quiet_NaN();
        total += tukey_biweight_loss(pred, data.targets.middleRows(start, n), sigma).loss * n;
    }
    return total / data.size();
}

double reference_sigma(const RegressionData& train) {
    if (train.targets.rows() == 0) return 1.0;
    const Eigen::RowVectorXd mean = train.targets.colwise().mean();
    const Eigen::MatrixXd centered = Eigen::MatrixXd(train.targets.rowwise() - mean);
    return mad_scale(centered, Eigen::MatrixXd::Zero(centered.rows(), centered.cols()));
}

double sgd_step(RegressionNet& net, const Tensor& batch, const Eigen::MatrixXd& targets, double lr,
                std::uint64_t dropout_seed, std::vector<Eigen::MatrixXd>* velocity, double momentum,
                Eigen::MatrixXd* predictions) {
    std::vector<Eigen::MatrixXd> grads;
    Eigen::MatrixXd pred;
    const double loss = net.loss_and_gradients(batch, targets, true, dropout_seed, grads, std::nullopt, &pred);
    bool finite = std::isfinite(loss) && pred.allFinite();
    for (const Eigen::MatrixXd& g : grads) finite = finite && g.allFinite();
    if (!finite) throw std::runtime_error("sgd_step: non-finite loss, prediction or gradient (divergence)");
    std::vector<Param>& params = net.params();
    std::vector<Eigen::MatrixXd> updated(params.size());
    std::vector<Eigen::MatrixXd> new_velocity;
    if (velocity) {
        new_velocity = *velocity;
        if (new_velocity.size() != params.size()) new_velocity.assign(params.size(), Eigen::MatrixXd());
    }
    for (std::size_t i = 0; i < params.size(); ++i) {
        if (velocity) {
            Eigen::MatrixXd& v = new_velocity[i];
            if (v.size() == 0) v.setZero(grads[i].rows(), grads[i].cols());
            v = momentum * v - lr * grads[i];
            updated[i] = params[i].value + v;
        } else {
            updated[i] = params[i].value - lr * grads[i];
        }
        if (!updated[i].allFinite()) throw std::runtime_error("sgd_step: non-finite parameter update (divergence)");
    }
    for (std::size_t i = 0; i < params.size(); ++i) params[i].value = std::move(updated[i]);
    if (velocity) *velocity = std::move(new_velocity);
    if (predictions) *predictions = std::move(pred);
    return loss;
}

TrainResult train(RegressionNet net, const RegressionData& train_set, const RegressionData& val_set,
                  const TrainConfig& config) {
    config.validate();
    if (train_set.size() == 0) throw DimensionError("train: empty training set");
    net.set_dropout_keep(config.dropout_keep);
    TrainResult result{net, {}, 0, 0.0, reference_sigma(train_set), false, {}};
    result.best_val_loss = evaluation_loss(net, val_set, result.sigma_ref);
    if (config.epochs == 0) return result;

    std::mt19937_64 rng(config.seed);
    std::vector<int> order(static_cast<std::size_t>(train_set.size()));
    std::iota(order.begin(), order.end(), 0);
    std::vector<Eigen::MatrixXd> velocity;
    for (int epoch = 1; epoch <= config.epochs; ++epoch) {
        const double lr = epoch <= config.drop_epoch ? config.base_lr : config.lr_after_drop;
        std::shuffle(order.begin(), order.end(), rng);
        double train_total = 0.0;
        for (std::size_t start = 0; start < order.size(); start += static_cast<std::size_t>(config.batch_size)) {
            const std::size_t end = std::min(order.size(), start + static_cast<std::size_t>(config.batch_size));
            const std::vector<int> idx(order.begin() + static_cast<long>(start), order.begin() + static_cast<long>(end));
            const Tensor batch = train_set.features.gather(idx);
            Eigen::MatrixXd targets(static_cast<Eigen::Index>(idx.size()), train_set.targets.cols());
            for (std::size_t i = 0; i < idx.size(); ++i) targets.row(static_cast<Eigen::Index>(i)) = train_set.targets.row(idx[i]);
            Eigen::MatrixXd pred;
            try {
                sgd_step(net, batch, targets, lr, mix_seed(config.seed, (static_cast<std::uint64_t>(epoch) << 32) | start),
                         config.momentum > 0.0 ? &velocity : nullptr, config.momentum, &pred);
            } catch (const std::runtime_error& e) {
                // sgd_step leaves the net untouched when it detects divergence
                result.net = net;
                result.diverged = true;
                result.diagnostic = "epoch " + std::to_string(epoch) + ": " + e.what();
                return result;
            }
            train_total += tukey_biweight_loss(pred, targets, result.sigma_ref).loss * static_cast<double>(idx.size());
        }
        const double val = evaluation_loss(net, val_set, result.sigma_ref);
        if (!std::isfinite(val)) {
            result.diverged = true;
            result.diagnostic = "epoch " + std::to_string(epoch) + ": non-finite validation loss";
            return result;
        }
        result.curve.push_back({epoch, train_total / train_set.size(), val});
        if (epoch == 1 || val < result.best_val_loss) {
            result.best_val_loss = val;
            result.best_epoch = epoch;
            result.net = net;
        }
    }
    return result;
}

}  // namespace shdl::net
