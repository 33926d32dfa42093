#pragma once

#include "shdl/grid.hpp"
#include "shdl/pose.hpp"

#include <Eigen/Dense>

#include <array>
#include <cstdint>
#include <filesystem>
#include <stdexcept>
#include <string>
#include <vector>

namespace shdl::svm {

struct SvmError : std::runtime_error {
    using std::runtime_error::runtime_error;
};

enum class ActivityLabel { punching, stabbing, shooting, kicking, strangling, neutral };
inline constexpr int kNumClasses = 6;
inline constexpr std::array<ActivityLabel, kNumClasses> kAllLabels{
    ActivityLabel::punching, ActivityLabel::stabbing,   ActivityLabel::shooting,
    ActivityLabel::kicking,  ActivityLabel::strangling, ActivityLabel::neutral};

std::string to_string(ActivityLabel label);
/// Throws ParameterError for names outside the closed set.
ActivityLabel label_from_string(const std::string& name);
bool is_violent(ActivityLabel label);
inline int index_of(ActivityLabel label) { return static_cast<int>(label); }

/// SVM input built from an AngleVector: (cos, sin) of each absolute limb
/// angle, so 359 and 1 degree are neighbours, followed by the relative
/// angles in degrees.
inline constexpr int kSvmFeatureSize = 2 * pose::kNumEdges + pose::kNumJointPairs;
Eigen::VectorXd svm_features(const pose::AngleVector& angles);

struct SvmHyperparams {
    double c = 14.0;
    double gamma = 2e-5;
    double kkt_tolerance = 1e-3;

    void validate() const;
};

/// exp(-gamma * ||a - b||^2).
double gaussian_kernel(const Eigen::VectorXd& a, const Eigen::VectorXd& b, double gamma);
/// Kernel matrix between the rows of `a` and the rows of `b`.
Eigen::MatrixXd gaussian_gram(const Eigen::MatrixXd& a, const Eigen::MatrixXd& b, double gamma);

/// Solution of max sum(alpha) - 1/2 alpha' Q alpha, Q = y y' .* K,
/// 0 <= alpha <= C, y' alpha = 0. Decision values are K alpha.*y + bias.
struct DualSolution {
    Eigen::VectorXd alpha;
    double bias = 0.0;
    double objective = 0.0;
    long iterations = 0;
};

/// SMO with maximal-violating-pair selection, run until the pair's violation
/// drops below `tolerance`.
DualSolution solve_dual(const Eigen::MatrixXd& kernel, const std::vector<int>& labels, double c, double tolerance);

/// Largest KKT violation of (alpha, bias) in margin units: alpha = 0 needs
/// y f >= 1, 0 < alpha < C needs y f = 1, alpha = C needs y f <= 1.
double kkt_violation(const Eigen::MatrixXd& kernel, const std::vector<int>& labels, double c,
                     const Eigen::VectorXd& alpha, double bias);

struct BinaryModel {
    Eigen::MatrixXd support_vectors;  // one per row
    Eigen::VectorXd alpha;
    std::vector<int> labels;  // +1 / -1 per support vector
    double bias = 0.0;
    double gamma = 0.0;
    double c = 0.0;

    double decision(const Eigen::VectorXd& x) const;
};

/// Labels must be +1 or -1 with both present; throws SvmError otherwise.
/// The KKT audit at hp.kkt_tolerance is enforced before returning.
BinaryModel train_binary(const Eigen::MatrixXd& x, const std::vector<int>& labels, const SvmHyperparams& hp);

struct PairModel {
    ActivityLabel positive;
    ActivityLabel negative;
    BinaryModel model;
};

struct SvmModel {
    SvmHyperparams hyperparams;
    bool standardized = true;
    Eigen::VectorXd mean;
    Eigen::VectorXd inv_std;
    std::vector<PairModel> pairs;
    std::vector<std::string> warnings;

    int dimension() const { return static_cast<int>(mean.size()); }
    Eigen::VectorXd standardize(const Eigen::VectorXd& x) const;
};

/// One-vs-one over every class pair in kAllLabels order. Pairs missing a
/// class are skipped with a warning. Features are standardized with the
/// training statistics unless `standardize` is false.
SvmModel train_multiclass(const Eigen::MatrixXd& x, const std::vector<ActivityLabel>& labels,
                          const SvmHyperparams& hp, bool standardize = true);

struct Prediction {
    ActivityLabel label = ActivityLabel::neutral;
    std::array<int, kNumClasses> votes{};
    std::array<double, kNumClasses> margins{};
};

/// Majority vote; ties go to the larger summed margin, then the earlier class.
Prediction predict(const SvmModel& model, const Eigen::VectorXd& x);
/// Predicts from svm_features(angles).
Prediction predict(const SvmModel& model, const pose::AngleVector& angles);

struct CvEntry {
    double c = 0.0;
    double gamma = 0.0;
    double mean_accuracy = 0.0;
};

struct CvResult {
    SvmHyperparams best;
    std::vector<CvEntry> table;
};

/// Stratified k-fold grid search. Ties go to the smaller C, then the smaller
/// gamma. Throws SvmError naming any present class with fewer than `folds`
/// samples.
CvResult cross_validate(const Eigen::MatrixXd& x, const std::vector<ActivityLabel>& labels,
                        const std::vector<double>& c_grid, const std::vector<double>& gamma_grid, int folds,
                        std::uint64_t seed, const SvmHyperparams& base = {}, bool standardize = true);

/// Fold index per sample: classes are shuffled independently and dealt round
/// robin, continuing the deal across classes.
std::vector<int> stratified_folds(const std::vector<ActivityLabel>& labels, int folds, std::uint64_t seed);

/// Rounds stored vectors and coefficients to float32, the on-disk precision.
void round_to_f32(SvmModel& model);

void save_model(const std::filesystem::path& stem, const SvmModel& model);
SvmModel load_model(const std::filesystem::path& stem);

}  // namespace shdl::svm
