#include "shdl/pipeline.hpp"

#include <CLI11.hpp>

#include <iostream>

namespace {

using namespace shdl;
using namespace shdl::pipeline;

struct Options {
    std::string config;
    std::optional<std::uint64_t> seed;
    std::string out;
    bool random_init = false;
    std::string model;
    std::string poses = "ground-truth";
    std::string pose_model;
    std::string svm;
    std::string boxes;
};

void add_common(CLI::App* cmd, Options& o) {
    cmd->add_option("--config", o.config, "Pipeline config file (key = value)")->required()->check(CLI::ExistingFile);
    cmd->add_option("--seed", o.seed, "Overrides the config seed");
    cmd->add_option("--out", o.out, "Output directory");
}

std::filesystem::path or_default(const std::string& given, const std::filesystem::path& fallback) {
    return given.empty() ? fallback : std::filesystem::path(given);
}

int run(const std::string& command, const Options& o) {
    PipelineConfig config = load_config(o.config);
    if (o.seed) config.apply_seed(*o.seed);
    if (!o.out.empty() && command != "generate-data") config.outputs = o.out;
    const std::filesystem::path pose_model = or_default(o.pose_model, config.models / "pose_prior");
    std::ostream& log = std::cout;
    if (command == "generate-data") {
        cmd_generate_data(config, or_default(o.out, config.dataset.parent_path()), log);
    } else if (command == "train-priors") {
        cmd_train_priors(config, log);
    } else if (command == "train-pose") {
        cmd_train_pose(config, o.random_init, log);
    } else if (command == "eval-pose") {
        cmd_eval_pose(config, or_default(o.model, pose_model), log);
    } else if (command == "train-svm") {
        cmd_train_svm(config, pose_source_from_string(o.poses), pose_model, log);
    } else if (command == "eval-activity") {
        const PoseSource source = pose_source_from_string(o.poses);
        cmd_eval_activity(config, source, pose_model, or_default(o.svm, config.models / ("svm_" + to_string(source))), log);
    } else if (command == "infer") {
        cmd_infer(config, o.boxes, pose_model, or_default(o.svm, config.models / "svm_ground-truth"), log);
    }
    return kExitOk;
}

}  // namespace

int main(int argc, char** argv) {
    CLI::App app{"Drone surveillance pipeline: ScatterNet hybrid pose estimation and violent activity classification"};
    app.require_subcommand(1);
    Options o;

    auto* gen = app.add_subcommand("generate-data", "Render a synthetic stick-figure dataset");
    add_common(gen, o);
    auto* priors = app.add_subcommand("train-priors", "Learn PCA structural priors for L3-L6");
    add_common(priors, o);
    auto* train_pose = app.add_subcommand("train-pose", "Train the pose regression network");
    add_common(train_pose, o);
    train_pose->add_flag("--random-init", o.random_init, "Use He-random conv weights instead of priors");
    auto* eval_pose = app.add_subcommand("eval-pose", "PCK of a pose model on the test split");
    add_common(eval_pose, o);
    eval_pose->add_option("--model", o.model, "Pose model stem (default <models>/pose_prior)");
    auto* train_svm = app.add_subcommand("train-svm", "Train the activity SVM");
    add_common(train_svm, o);
    auto* eval_activity = app.add_subcommand("eval-activity", "Activity accuracy on the test split");
    add_common(eval_activity, o);
    auto* infer = app.add_subcommand("infer", "Pose and activity for detection boxes");
    add_common(infer, o);
    infer->add_option("--boxes", o.boxes, "Boxes file (JSON lines)")->required();
    for (auto* cmd : {train_svm, eval_activity}) {
        cmd->add_option("--poses", o.poses, "Pose source")->check(CLI::IsMember({"ground-truth", "model"}));
    }
    for (auto* cmd : {train_svm, eval_activity, infer}) {
        cmd->add_option("--pose-model", o.pose_model, "Pose model stem (default <models>/pose_prior)");
    }
    for (auto* cmd : {eval_activity, infer}) cmd->add_option("--svm", o.svm, "SVM model stem");

    try {
        app.parse(argc, argv);
    } catch (const CLI::ParseError& e) {
        const int code = app.exit(e);
        return code == 0 ? kExitOk : kExitInput;
    }
    try {
        return run(app.get_subcommands().front()->get_name(), o);
    } catch (const DivergenceError& e) {
        std::cerr << "error: " << e.what() << '\n';
        return kExitDiverged;
    } catch (const InputError& e) {
        std::cerr << "error: " << e.what() << '\n';
        return kExitInput;
    } catch (const std::invalid_argument& e) {  // ConfigError, ParameterError, DimensionError
        std::cerr << "error: " << e.what() << '\n';
        return kExitInput;
    } catch (const std::exception& e) {
        std::cerr << "error: " << e.what() << '\n';
        return kExitFailure;
    }
}
