#pragma once

#include "shdl/datasets.hpp"
#include "shdl/priors.hpp"
#include "shdl/regression_net.hpp"
#include "shdl/scatternet.hpp"
#include "shdl/svm.hpp"

#include <cstdint>
#include <filesystem>
#include <iosfwd>
#include <optional>
#include <stdexcept>
#include <string>
#include <vector>

namespace shdl::pipeline {

/// Process exit codes of the CLI.
inline constexpr int kExitOk = 0;
inline constexpr int kExitFailure = 1;
inline constexpr int kExitInput = 2;
inline constexpr int kExitDiverged = 3;

/// Missing or unusable inputs (dataset, labels, models); exit code 2.
struct InputError : std::runtime_error {
    using std::runtime_error::runtime_error;
};

/// Training diverged; exit code 3. The partial loss curve is already on disk.
struct DivergenceError : std::runtime_error {
    using std::runtime_error::runtime_error;
};

enum class PoseSource { ground_truth, model };
std::string to_string(PoseSource source);
PoseSource pose_source_from_string(const std::string& name);

/// Desk-scale training defaults: momentum SGD with a step drop after a
/// quarter of the epochs (the paper's lr of 1e-5 without momentum barely
/// moves the loss on this data).
net::TrainConfig default_training();

struct PipelineConfig {
    scatternet::ScatterConfig scatter;
    net::NetConfig net;
    net::TrainConfig train = default_training();
    priors::PriorConfig priors;
    svm::SvmHyperparams svm;
    std::vector<double> svm_c_grid;      // empty: no cross-validation
    std::vector<double> svm_gamma_grid;
    int svm_folds = 5;
    datasets::SyntheticConfig synthetic;
    int synthetic_images = 560;
    std::filesystem::path dataset = "data/annotations.jsonl";
    std::filesystem::path models = "models";
    std::filesystem::path outputs = "outputs";
    int max_regions = 0;  // use only the first N person regions; 0 = all
    int calibration_regions = 200;
    std::vector<double> pck_distances{1, 2, 3, 4, 5, 6, 7, 8, 9, 10, 12, 14, 16, 18, 20};
    std::uint64_t seed = 0;

    void validate() const;
    /// Propagates `seed` into every seeded sub-config.
    void apply_seed(std::uint64_t s);
};

/// Plain text, one `key = value` per line, dotted section prefixes
/// (train.base_lr, svm.c, paths.dataset, ...), `#` comments. Lists are
/// comma separated. Relative paths resolve against `base_dir`. Throws
/// ConfigError naming the line for unknown keys or bad values.
PipelineConfig parse_config(std::istream& in, const std::filesystem::path& base_dir = {});
PipelineConfig load_config(const std::filesystem::path& path);

/// A loaded dataset with its region list and split.
struct Dataset {
    std::filesystem::path root;  // image paths are relative to this directory
    std::vector<datasets::AnnotationRecord> records;
    std::vector<datasets::RegionRef> regions;
    datasets::DatasetSplit split;

    const datasets::PersonAnnotation& person(int region) const;
    const datasets::AnnotationRecord& record(int region) const;
};

/// Loads annotations, truncates to config.max_regions and splits with the
/// config seed. Throws InputError when the file is missing or empty.
Dataset load_dataset(const PipelineConfig& config);

/// Region pixels as the network sees them: cropped to the box, resized to
/// 120x80 and normalized to zero mean and unit deviation.
Grid prepare_region(const Grid& image, const pose::BoundingBox& box);

/// Scatter features for the given regions, one batch item each, images read
/// once per record.
net::Tensor region_features(const Dataset& data, const std::vector<int>& regions,
                            const scatternet::ScatterConfig& scatter, const scatternet::DtcwtFilterBank& bank);

/// Log offsets frozen from the first calibration_regions training regions.
std::vector<double> calibrate(const Dataset& data, const PipelineConfig& config,
                              const scatternet::DtcwtFilterBank& bank);

/// Everything needed to run the pose model on new regions.
struct PoseModel {
    net::RegressionNet net;
    scatternet::ScatterConfig scatter;
    net::FeatureNormalizer normalizer;

    /// Region keypoints (region pixels) for each prepared region feature.
    std::vector<pose::KeypointSet> predict(const net::Tensor& normalized_features) const;
};

PoseModel load_pose_model(const std::filesystem::path& stem);

struct PriorsReport {
    std::vector<priors::PriorFilterSet> sets;
    double max_gram_error = 0.0;
};

struct PoseTrainReport {
    net::TrainResult result;
    std::filesystem::path curve_csv;
    std::filesystem::path checkpoint;
    double saved_val_loss = 0.0;  // float32-rounded weights before saving
    double reloaded_val_loss = 0.0;
};

struct PoseEvalReport {
    pose::PckCurve curve;
    std::filesystem::path csv;
    double mean_at_5 = 0.0;
};

struct SvmTrainReport {
    svm::SvmModel model;
    std::optional<svm::CvResult> cv;
    double training_accuracy = 0.0;
    std::filesystem::path model_stem;
};

struct ActivityReport {
    double overall = 0.0;
    std::array<double, svm::kNumClasses> per_class{};
    std::array<int, svm::kNumClasses> per_class_count{};
    std::vector<std::pair<int, double>> by_persons;  // (persons in image, accuracy)
    std::filesystem::path per_class_csv;
    std::filesystem::path by_persons_csv;
    std::filesystem::path by_violent_csv;
    std::filesystem::path summary_csv;
};

struct InferReport {
    int images = 0;
    int regions = 0;
    int skipped = 0;
    double regions_per_second = 0.0;
    std::filesystem::path results;
};

/// Writes `<models>/priors.{json,bin}`; logs rejected counts and the
/// orthonormality audit to `log`.
PriorsReport cmd_train_priors(const PipelineConfig& config, std::ostream& log);

/// Trains on the training split, validating on the validation split. Writes
/// `<models>/pose_<init>.{json,bin}` and `<outputs>/loss_curve_<init>.csv`.
/// Throws DivergenceError after saving the partial curve.
PoseTrainReport cmd_train_pose(const PipelineConfig& config, bool random_init, std::ostream& log);

/// PCK on the test split at every configured distance; writes
/// `<outputs>/pck_<name>.csv` where name is the model file stem.
PoseEvalReport cmd_eval_pose(const PipelineConfig& config, const std::filesystem::path& model_stem,
                             std::ostream& log);

/// Trains the activity SVM on AngleVectors of the training split from the
/// chosen pose source, with cross-validation when grids are configured.
/// Writes `<models>/svm_<source>` and, with CV, `<outputs>/svm_cv_<source>.csv`.
SvmTrainReport cmd_train_svm(const PipelineConfig& config, PoseSource source,
                             const std::filesystem::path& pose_model_stem, std::ostream& log);

/// Activity accuracy on the test split with poses from the chosen source.
/// Writes `<outputs>/activity_<source>_{per_class,by_persons,by_violent,summary}.csv`.
ActivityReport cmd_eval_activity(const PipelineConfig& config, PoseSource source,
                                 const std::filesystem::path& pose_model_stem,
                                 const std::filesystem::path& svm_stem, std::ostream& log);

/// Runs detection-stub boxes through the pose model and SVM; writes one
/// results object per image to `<outputs>/results.jsonl`. Boxes outside the
/// image are skipped with a warning.
InferReport cmd_infer(const PipelineConfig& config, const std::filesystem::path& boxes_file,
                      const std::filesystem::path& pose_model_stem, const std::filesystem::path& svm_stem,
                      std::ostream& log);

/// Renders config.synthetic_images images under `out` and writes
/// `out/annotations.jsonl`.
std::vector<datasets::AnnotationRecord> cmd_generate_data(const PipelineConfig& config,
                                                          const std::filesystem::path& out, std::ostream& log);

/// Writes rows with a header line; numbers use %.10g.
void write_csv(const std::filesystem::path& path, const std::vector<std::string>& header,
               const std::vector<std::vector<std::string>>& rows);
std::string format_number(double v);

}  // namespace shdl::pipeline
