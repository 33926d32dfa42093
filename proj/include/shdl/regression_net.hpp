#pragma once

#include "shdl/grid.hpp"

#include <Eigen/Dense>
#include <json.hpp>

#include <array>
#include <cstdint>
#include <filesystem>
#include <optional>
#include <string>
#include <vector>

namespace shdl::net {

/// Heap buffer with Eigen's alignment, so vectorized reductions split their
/// work identically on every run.
using AlignedVector = std::vector<double, Eigen::aligned_allocator<double>>;

/// Deterministic 64-bit seed derived from two values.
std::uint64_t mix_seed(std::uint64_t a, std::uint64_t b);

/// Dense activations laid out as [batch][channel][row][col].
struct Tensor {
    int batch = 0;
    int channels = 0;
    int rows = 0;
    int cols = 0;
    AlignedVector data;

    static Tensor zeros(int batch, int channels, int rows, int cols);
    std::size_t sample_size() const { return static_cast<std::size_t>(channels) * rows * cols; }
    double* sample(int b) { return data.data() + b * sample_size(); }
    const double* sample(int b) const { return data.data() + b * sample_size(); }
    /// Copies the given batch items, in order.
    Tensor gather(const std::vector<int>& indices) const;
};

struct NetConfig {
    int input_channels = 147;
    int input_rows = 28;
    int input_cols = 18;
    std::array<int, 4> conv_widths{32, 32, 64, 64};
    std::array<bool, 4> pool_after{true, false, true, false};
    int kernel = 3;
    int fc1_width = 512;
    int output_width = 28;
    int lrn_size = 5;
    double lrn_alpha = 1e-4;
    double lrn_beta = 0.75;
    double lrn_k = 2.0;
    double dropout_keep = 0.5;

    void validate() const;
    /// Spatial size (rows, cols) after conv block `layer` (0-based).
    std::pair<int, int> block_output_size(int layer) const;
    int fc1_inputs() const;
};

struct TrainConfig {
    double base_lr = 1e-5;
    double lr_after_drop = 1e-6;
    int drop_epoch = 20;  // at or beyond epochs: no drop within the run
    double dropout_keep = 0.5;
    int batch_size = 20;
    int epochs = 90;
    double momentum = 0.0;
    std::uint64_t seed = 0;

    void validate() const;
};

enum class InitMode { random, structural_prior };
std::string to_string(InitMode mode);

struct Param {
    std::string name;
    Eigen::MatrixXd value;
};

/// Tukey biweight constant.
inline constexpr double kTukeyC = 4.685;

struct LossResult {
    double loss = 0.0;
    Eigen::MatrixXd grad;  // d loss / d pred, same shape as pred
    double sigma = 1.0;
};

/// Residual scale 1.4826 * MAD over all entries of pred - target; 1 when the
/// MAD is zero.
double mad_scale(const Eigen::MatrixXd& pred, const Eigen::MatrixXd& target);

/// Mean Tukey biweight loss over all entries of (pred - target) / sigma.
/// sigma is treated as a constant; the gradient is exactly zero wherever
/// |r| > c.
LossResult tukey_biweight_loss(const Eigen::MatrixXd& pred, const Eigen::MatrixXd& target, double sigma);
/// Same with sigma = mad_scale(pred, target).
LossResult tukey_biweight_loss(const Eigen::MatrixXd& pred, const Eigen::MatrixXd& target);

/// Conv filters of one layer as (out, in * k * k) rows; used to install priors.
using FilterMatrix = Eigen::MatrixXd;

class RegressionNet {
public:
    /// Random initialization: He-normal conv kernels, scaled-uniform FC
    /// weights, zero biases.
    RegressionNet(NetConfig config, std::uint64_t seed);

    const NetConfig& config() const { return config_; }
    InitMode init_mode() const { return init_mode_; }
    void set_dropout_keep(double keep);

    /// Parameter order: conv{3..6}.weight, conv{3..6}.bias, fc7/fc8 weight
    /// and bias, interleaved per layer.
    std::vector<Param>& params() { return params_; }
    const std::vector<Param>& params() const { return params_; }

    /// (batch x output_width) predictions.
    Eigen::MatrixXd forward(const Tensor& input, bool train_mode, std::uint64_t dropout_seed) const;

    /// Output of the first `blocks` conv blocks (conv, ReLU, LRN, optional pool).
    Tensor forward_blocks(const Tensor& input, int blocks) const;

    /// fc1 activations after ReLU and dropout (train mode) or dropout
    /// scaling (inference mode), (batch x fc1_width).
    Eigen::MatrixXd fc1_activations(const Tensor& input, bool train_mode, std::uint64_t dropout_seed) const;

    /// Batch loss and exact gradients for every parameter (same order as
    /// params()). With `fixed_sigma` unset the Tukey scale comes from the
    /// batch MAD.
    double loss_and_gradients(const Tensor& input, const Eigen::MatrixXd& targets, bool train_mode,
                              std::uint64_t dropout_seed, std::vector<Eigen::MatrixXd>& grads,
                              std::optional<double> fixed_sigma = std::nullopt,
                              Eigen::MatrixXd* predictions = nullptr) const;

    /// Installs one (out, in*k*k) filter matrix per conv layer, zeroes conv
    /// biases and redraws FC layers. Throws ConfigError on any shape
    /// mismatch, leaving the net unchanged.
    void init_with_priors(const std::vector<FilterMatrix>& filters, std::uint64_t seed);

    /// Rounds every parameter to float32 precision.
    void round_to_f32();

    void save(const std::filesystem::path& stem, const nlohmann::json& extra) const;
    static RegressionNet load(const std::filesystem::path& stem, nlohmann::json* extra = nullptr);

private:
    struct Cache;
    void forward_impl(const Tensor& input, bool train_mode, std::uint64_t dropout_seed, int blocks, Cache& cache) const;
    void randomize_fc(std::uint64_t seed);
    void check_input(const Tensor& input) const;

    NetConfig config_;
    InitMode init_mode_ = InitMode::random;
    std::vector<Param> params_;
};

/// Per-channel standardization fitted on training features.
struct FeatureNormalizer {
    std::vector<double> mean;
    std::vector<double> inv_std;

    static FeatureNormalizer fit(const Tensor& features);
    void apply(Tensor& features) const;
    nlohmann::json to_json() const;
    static FeatureNormalizer from_json(const nlohmann::json& j);
};

struct RegressionData {
    Tensor features;
    Eigen::MatrixXd targets;  // (batch x output_width), coordinates normalized to [0, 1]

    int size() const { return features.batch; }
};

struct EpochRecord {
    int epoch = 0;
    double train_loss = 0.0;
    double val_loss = 0.0;
};

struct TrainResult {
    RegressionNet net;
    std::vector<EpochRecord> curve;
    int best_epoch = 0;
    double best_val_loss = 0.0;
    double sigma_ref = 1.0;  // scale used for the curve and validation losses
    bool diverged = false;
    std::string diagnostic;
};

/// Tukey loss at a fixed residual scale, used for validation and for the
/// reported loss curves so values are comparable across epochs and runs.
double evaluation_loss(const RegressionNet& net, const RegressionData& data, double sigma);

/// Residual scale for evaluation_loss: 1.4826 * MAD of the training targets
/// around their per-coordinate mean. Depends on the data only.
double reference_sigma(const RegressionData& train);

/// One SGD step; returns the batch loss. Throws std::runtime_error when the
/// loss is not finite, leaving the net unchanged.
/// With `velocity` given, applies classical momentum: v = momentum * v - lr * g.
double sgd_step(RegressionNet& net, const Tensor& batch, const Eigen::MatrixXd& targets, double lr,
                std::uint64_t dropout_seed, std::vector<Eigen::MatrixXd>* velocity = nullptr, double momentum = 0.0,
                Eigen::MatrixXd* predictions = nullptr);

/// Trains for config.epochs epochs with a step lr schedule and returns the
/// weights with the best validation loss.
TrainResult train(RegressionNet net, const RegressionData& train_set, const RegressionData& val_set,
                  const TrainConfig& config);

}  // namespace shdl::net
