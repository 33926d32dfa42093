#include "shdl/pipeline.hpp"

#include "shdl/float_array.hpp"
#include "shdl/png_io.hpp"

#include <json.hpp>

#include <algorithm>
#include <chrono>
#include <cmath>
#include <cstdio>
#include <fstream>
#include <functional>
#include <map>
#include <numeric>
#include <set>
#include <sstream>

namespace shdl::pipeline {

namespace {

using datasets::kRegionCols;
using datasets::kRegionRows;

constexpr int kPredictChunk = 50;

// Paper reference values printed next to the synthetic results.
const std::map<svm::ActivityLabel, double> kPaperPerClass{{svm::ActivityLabel::punching, 89.0},
                                                          {svm::ActivityLabel::kicking, 94.0},
                                                          {svm::ActivityLabel::strangling, 85.0},
                                                          {svm::ActivityLabel::shooting, 82.0},
                                                          {svm::ActivityLabel::stabbing, 92.0}};
const std::array<double, 5> kPaperByViolent{94.1, 90.6, 88.3, 87.8, 84.0};
constexpr double kPaperOverall = 88.8;

std::string trim(const std::string& s) {
    const auto b = s.find_first_not_of(" \t\r");
    if (b == std::string::npos) return {};
    const auto e = s.find_last_not_of(" \t\r");
    return s.substr(b, e - b + 1);
}

std::vector<std::string> split_list(const std::string& s) {
    std::vector<std::string> out;
    std::stringstream ss(s);
    std::string item;
    while (std::getline(ss, item, ',')) {
        item = trim(item);
        if (!item.empty()) out.push_back(item);
    }
    return out;
}

double parse_double(const std::string& s) {
    std::size_t used = 0;
    const double v = std::stod(s, &used);
    if (used != s.size()) throw std::invalid_argument("trailing characters");
    return v;
}

long long parse_int(const std::string& s) {
    std::size_t used = 0;
    const long long v = std::stoll(s, &used);
    if (used != s.size()) throw std::invalid_argument("trailing characters");
    return v;
}

bool parse_bool(const std::string& s) {
    if (s == "true" || s == "1") return true;
    if (s == "false" || s == "0") return false;
    throw std::invalid_argument("expected true or false");
}

std::vector<double> parse_doubles(const std::string& s) {
    std::vector<double> out;
    for (const auto& item : split_list(s)) out.push_back(parse_double(item));
    return out;
}

std::vector<int> parse_ints(const std::string& s) {
    std::vector<int> out;
    for (const auto& item : split_list(s)) out.push_back(static_cast<int>(parse_int(item)));
    return out;
}

template <std::size_t N, typename T>
std::array<T, N> to_array(const std::vector<T>& v) {
    if (v.size() != N) throw std::invalid_argument("expected " + std::to_string(N) + " values");
    std::array<T, N> out{};
    std::copy(v.begin(), v.end(), out.begin());
    return out;
}

using Setter = std::function<void(PipelineConfig&, const std::string&, const std::filesystem::path&)>;

template <typename F>
Setter plain(F f) {
    return [f](PipelineConfig& c, const std::string& v, const std::filesystem::path&) { f(c, v); };
}

Setter path_setter(std::filesystem::path PipelineConfig::*member) {
    return [member](PipelineConfig& c, const std::string& v, const std::filesystem::path& base) {
        const std::filesystem::path p(v);
        c.*member = p.is_relative() && !base.empty() ? base / p : p;
    };
}

const std::map<std::string, Setter>& setters() {
    static const std::map<std::string, Setter> table = [] {
        std::map<std::string, Setter> t;
        t["seed"] = plain([](PipelineConfig& c, const std::string& v) { c.apply_seed(static_cast<std::uint64_t>(parse_int(v))); });
        t["paths.dataset"] = path_setter(&PipelineConfig::dataset);
        t["paths.models"] = path_setter(&PipelineConfig::models);
        t["paths.outputs"] = path_setter(&PipelineConfig::outputs);
        t["dataset.max_regions"] = plain([](PipelineConfig& c, const std::string& v) { c.max_regions = static_cast<int>(parse_int(v)); });
        t["dataset.calibration_regions"] = plain([](PipelineConfig& c, const std::string& v) { c.calibration_regions = static_cast<int>(parse_int(v)); });
        t["scatter.num_scales"] = plain([](PipelineConfig& c, const std::string& v) { c.scatter.num_scales = static_cast<int>(parse_int(v)); });
        t["scatter.log_offsets"] = plain([](PipelineConfig& c, const std::string& v) { c.scatter.log_offsets = parse_doubles(v); });
        t["scatter.resolution_factors"] = plain([](PipelineConfig& c, const std::string& v) { c.scatter.resolution_factors = parse_doubles(v); });
        t["scatter.border_crop"] = plain([](PipelineConfig& c, const std::string& v) { c.scatter.border_crop = static_cast<int>(parse_int(v)); });
        t["scatter.joint_invariance"] = plain([](PipelineConfig& c, const std::string& v) { c.scatter.joint_invariance_enabled = parse_bool(v); });
        t["net.conv_widths"] = plain([](PipelineConfig& c, const std::string& v) { c.net.conv_widths = to_array<4>(parse_ints(v)); });
        t["net.pool_after"] = plain([](PipelineConfig& c, const std::string& v) {
            std::vector<bool> flags;
            for (const auto& item : split_list(v)) flags.push_back(parse_bool(item));
            c.net.pool_after = to_array<4>(flags);
        });
        t["net.kernel"] = plain([](PipelineConfig& c, const std::string& v) { c.net.kernel = static_cast<int>(parse_int(v)); });
        t["net.fc1_width"] = plain([](PipelineConfig& c, const std::string& v) { c.net.fc1_width = static_cast<int>(parse_int(v)); });
        t["net.lrn_size"] = plain([](PipelineConfig& c, const std::string& v) { c.net.lrn_size = static_cast<int>(parse_int(v)); });
        t["net.lrn_alpha"] = plain([](PipelineConfig& c, const std::string& v) { c.net.lrn_alpha = parse_double(v); });
        t["net.lrn_beta"] = plain([](PipelineConfig& c, const std::string& v) { c.net.lrn_beta = parse_double(v); });
        t["net.lrn_k"] = plain([](PipelineConfig& c, const std::string& v) { c.net.lrn_k = parse_double(v); });
        t["train.base_lr"] = plain([](PipelineConfig& c, const std::string& v) { c.train.base_lr = parse_double(v); });
        t["train.lr_after_drop"] = plain([](PipelineConfig& c, const std::string& v) { c.train.lr_after_drop = parse_double(v); });
        t["train.drop_epoch"] = plain([](PipelineConfig& c, const std::string& v) { c.train.drop_epoch = static_cast<int>(parse_int(v)); });
        t["train.dropout_keep"] = plain([](PipelineConfig& c, const std::string& v) { c.train.dropout_keep = parse_double(v); });
        t["train.batch_size"] = plain([](PipelineConfig& c, const std::string& v) { c.train.batch_size = static_cast<int>(parse_int(v)); });
        t["train.epochs"] = plain([](PipelineConfig& c, const std::string& v) { c.train.epochs = static_cast<int>(parse_int(v)); });
        t["train.momentum"] = plain([](PipelineConfig& c, const std::string& v) { c.train.momentum = parse_double(v); });
        t["priors.patches"] = plain([](PipelineConfig& c, const std::string& v) { c.priors.patches = static_cast<int>(parse_int(v)); });
        t["svm.c"] = plain([](PipelineConfig& c, const std::string& v) { c.svm.c = parse_double(v); });
        t["svm.gamma"] = plain([](PipelineConfig& c, const std::string& v) { c.svm.gamma = parse_double(v); });
        t["svm.kkt_tolerance"] = plain([](PipelineConfig& c, const std::string& v) { c.svm.kkt_tolerance = parse_double(v); });
        t["svm.c_grid"] = plain([](PipelineConfig& c, const std::string& v) { c.svm_c_grid = parse_doubles(v); });
        t["svm.gamma_grid"] = plain([](PipelineConfig& c, const std::string& v) { c.svm_gamma_grid = parse_doubles(v); });
        t["svm.folds"] = plain([](PipelineConfig& c, const std::string& v) { c.svm_folds = static_cast<int>(parse_int(v)); });
        t["pose.pck_distances"] = plain([](PipelineConfig& c, const std::string& v) { c.pck_distances = parse_doubles(v); });
        t["synthetic.images"] = plain([](PipelineConfig& c, const std::string& v) { c.synthetic_images = static_cast<int>(parse_int(v)); });
        t["synthetic.min_persons"] = plain([](PipelineConfig& c, const std::string& v) { c.synthetic.min_persons = static_cast<int>(parse_int(v)); });
        t["synthetic.max_persons"] = plain([](PipelineConfig& c, const std::string& v) { c.synthetic.max_persons = static_cast<int>(parse_int(v)); });
        t["synthetic.heights_m"] = plain([](PipelineConfig& c, const std::string& v) { c.synthetic.heights_m = parse_ints(v); });
        t["synthetic.height_scales"] = plain([](PipelineConfig& c, const std::string& v) { c.synthetic.height_scales = parse_doubles(v); });
        t["synthetic.image_width"] = plain([](PipelineConfig& c, const std::string& v) { c.synthetic.image_width = static_cast<int>(parse_int(v)); });
        t["synthetic.image_height"] = plain([](PipelineConfig& c, const std::string& v) { c.synthetic.image_height = static_cast<int>(parse_int(v)); });
        t["synthetic.figure_height"] = plain([](PipelineConfig& c, const std::string& v) { c.synthetic.figure_height = parse_double(v); });
        t["synthetic.crowding"] = plain([](PipelineConfig& c, const std::string& v) { c.synthetic.crowding = parse_double(v); });
        t["synthetic.blur_min"] = plain([](PipelineConfig& c, const std::string& v) { c.synthetic.blur_min = parse_double(v); });
        t["synthetic.blur_max"] = plain([](PipelineConfig& c, const std::string& v) { c.synthetic.blur_max = parse_double(v); });
        t["synthetic.brightness_jitter"] = plain([](PipelineConfig& c, const std::string& v) { c.synthetic.brightness_jitter = parse_double(v); });
        t["synthetic.contrast_min"] = plain([](PipelineConfig& c, const std::string& v) { c.synthetic.contrast_min = parse_double(v); });
        t["synthetic.contrast_max"] = plain([](PipelineConfig& c, const std::string& v) { c.synthetic.contrast_max = parse_double(v); });
        t["synthetic.rotation_jitter_deg"] = plain([](PipelineConfig& c, const std::string& v) { c.synthetic.rotation_jitter_deg = parse_double(v); });
        t["synthetic.pose_jitter_deg"] = plain([](PipelineConfig& c, const std::string& v) { c.synthetic.pose_jitter_deg = parse_double(v); });
        t["synthetic.violent_fraction"] = plain([](PipelineConfig& c, const std::string& v) { c.synthetic.violent_fraction = parse_double(v); });
        t["synthetic.texture_amplitude"] = plain([](PipelineConfig& c, const std::string& v) { c.synthetic.texture_amplitude = parse_double(v); });
        t["synthetic.shadow_strength"] = plain([](PipelineConfig& c, const std::string& v) { c.synthetic.shadow_strength = parse_double(v); });
        t["synthetic.noise_sigma"] = plain([](PipelineConfig& c, const std::string& v) { c.synthetic.noise_sigma = parse_double(v); });
        return t;
    }();
    return table;
}

// Decimal without exponent, trailing zeros removed: 2e-05 prints as 0.00002.
std::string plain_decimal(double v) {
    char buf[64];
    std::snprintf(buf, sizeof buf, "%.12f", v);
    std::string s(buf);
    s.erase(s.find_last_not_of('0') + 1);
    if (!s.empty() && s.back() == '.') s.pop_back();
    return s;
}

nlohmann::json scatter_to_json(const scatternet::ScatterConfig& s) {
    return {{"num_scales", s.num_scales},
            {"log_offsets", s.log_offsets},
            {"resolution_factors", s.resolution_factors},
            {"border_crop", s.border_crop},
            {"joint_invariance", s.joint_invariance_enabled}};
}

scatternet::ScatterConfig scatter_from_json(const nlohmann::json& j) {
    scatternet::ScatterConfig s;
    s.num_scales = j.at("num_scales").get<int>();
    s.log_offsets = j.at("log_offsets").get<std::vector<double>>();
    s.resolution_factors = j.at("resolution_factors").get<std::vector<double>>();
    s.border_crop = j.at("border_crop").get<int>();
    s.joint_invariance_enabled = j.at("joint_invariance").get<bool>();
    s.validate();
    return s;
}

Eigen::MatrixXd region_targets(const Dataset& data, const std::vector<int>& regions) {
    Eigen::MatrixXd t(static_cast<Eigen::Index>(regions.size()), 2 * pose::kNumKeypoints);
    for (std::size_t i = 0; i < regions.size(); ++i) {
        const pose::KeypointSet k = datasets::region_keypoints(data.person(regions[i]));
        t.row(static_cast<Eigen::Index>(i)) = pose::encode_keypoints(k, kRegionCols, kRegionRows).transpose();
    }
    return t;
}

std::filesystem::path priors_stem(const PipelineConfig& c) { return c.models / "priors"; }

std::string init_name(bool random_init) { return random_init ? "random" : "prior"; }

// Training features: scatter config with frozen log offsets, normalized with
// statistics fitted on the training split.
struct PreparedSplit {
    scatternet::ScatterConfig scatter;
    net::FeatureNormalizer normalizer;
    net::RegressionData train;
    net::RegressionData val;
};

PreparedSplit prepare_training(const Dataset& data, const PipelineConfig& config, bool with_val, std::ostream& log) {
    const scatternet::DtcwtFilterBank bank = scatternet::build_filter_bank();
    PreparedSplit p;
    p.scatter = config.scatter;
    p.scatter.log_offsets = calibrate(data, config, bank);
    log << "log offsets:";
    for (double k : p.scatter.log_offsets) log << ' ' << format_number(k);
    log << '\n';
    p.train.features = region_features(data, data.split.train, p.scatter, bank);
    p.train.targets = region_targets(data, data.split.train);
    p.normalizer = net::FeatureNormalizer::fit(p.train.features);
    p.normalizer.apply(p.train.features);
    if (with_val) {
        p.val.features = region_features(data, data.split.val, p.scatter, bank);
        p.val.targets = region_targets(data, data.split.val);
        p.normalizer.apply(p.val.features);
    }
    return p;
}

net::NetConfig net_config_for(const PipelineConfig& config, const net::Tensor& features) {
    net::NetConfig nc = config.net;
    nc.input_channels = features.channels;
    nc.input_rows = features.rows;
    nc.input_cols = features.cols;
    nc.dropout_keep = config.train.dropout_keep;
    nc.validate();
    return nc;
}

void write_curve(const std::filesystem::path& path, const std::vector<net::EpochRecord>& curve) {
    std::vector<std::vector<std::string>> rows;
    for (const auto& r : curve) {
        rows.push_back({std::to_string(r.epoch), format_number(r.train_loss), format_number(r.val_loss)});
    }
    write_csv(path, {"epoch", "train_loss", "val_loss"}, rows);
}

void require_file(const std::filesystem::path& p, const std::string& what) {
    if (!std::filesystem::exists(p)) throw InputError(what + " not found: " + p.string());
}

// Angle vectors of the given regions, in image coordinates.
std::vector<pose::AngleVector> region_angles(const Dataset& data, const std::vector<int>& regions, PoseSource source,
                                             const std::filesystem::path& pose_model_stem) {
    std::vector<pose::AngleVector> out;
    out.reserve(regions.size());
    if (source == PoseSource::ground_truth) {
        for (int r : regions) out.push_back(pose::orientation_vector(pose::build_skeleton(data.person(r).keypoints)));
        return out;
    }
    require_file(std::filesystem::path(pose_model_stem).concat(".json"), "pose model");
    const PoseModel model = load_pose_model(pose_model_stem);
    const scatternet::DtcwtFilterBank bank = scatternet::build_filter_bank();
    net::Tensor features = region_features(data, regions, model.scatter, bank);
    model.normalizer.apply(features);
    const std::vector<pose::KeypointSet> predicted = model.predict(features);
    for (std::size_t i = 0; i < regions.size(); ++i) {
        const pose::KeypointSet image = pose::region_to_image(predicted[i], data.person(regions[i]).box, kRegionCols, kRegionRows);
        out.push_back(pose::orientation_vector(pose::build_skeleton(image)));
    }
    return out;
}

Eigen::MatrixXd feature_matrix(const std::vector<pose::AngleVector>& angles) {
    Eigen::MatrixXd x(static_cast<Eigen::Index>(angles.size()), svm::kSvmFeatureSize);
    for (std::size_t i = 0; i < angles.size(); ++i) x.row(static_cast<Eigen::Index>(i)) = svm::svm_features(angles[i]).transpose();
    return x;
}

std::string percent(double fraction) { return format_number(100.0 * fraction); }

}  // namespace

net::TrainConfig default_training() {
    net::TrainConfig t;
    t.base_lr = 1e-2;
    t.lr_after_drop = 1e-3;
    t.drop_epoch = 10;
    t.epochs = 40;
    t.momentum = 0.9;
    return t;
}

std::string to_string(PoseSource source) { return source == PoseSource::ground_truth ? "ground-truth" : "model"; }

PoseSource pose_source_from_string(const std::string& name) {
    if (name == "ground-truth") return PoseSource::ground_truth;
    if (name == "model") return PoseSource::model;
    throw ConfigError("pose source must be 'ground-truth' or 'model', got '" + name + "'");
}

void PipelineConfig::validate() const {
    scatter.validate();
    net::NetConfig probe = net;
    probe.validate();
    train.validate();
    svm.validate();
    synthetic.validate();
    if (priors.patches < 1) throw ConfigError("priors.patches must be positive");
    for (double c : svm_c_grid) {
        if (!(c > 0.0)) throw ConfigError("svm.c_grid values must be positive");
    }
    for (double g : svm_gamma_grid) {
        if (!(g > 0.0)) throw ConfigError("svm.gamma_grid values must be positive");
    }
    if (svm_c_grid.empty() != svm_gamma_grid.empty()) throw ConfigError("svm.c_grid and svm.gamma_grid go together");
    if (svm_folds < 2) throw ConfigError("svm.folds must be at least 2");
    if (synthetic_images < 1) throw ConfigError("synthetic.images must be positive");
    if (max_regions < 0) throw ConfigError("dataset.max_regions must be >= 0");
    if (calibration_regions < 1) throw ConfigError("dataset.calibration_regions must be positive");
    if (pck_distances.empty()) throw ConfigError("pose.pck_distances must not be empty");
    for (std::size_t i = 0; i < pck_distances.size(); ++i) {
        if (pck_distances[i] < 0.0 || (i > 0 && pck_distances[i] <= pck_distances[i - 1])) {
            throw ConfigError("pose.pck_distances must be nonnegative and increasing");
        }
    }
}

void PipelineConfig::apply_seed(std::uint64_t s) {
    seed = s;
    train.seed = s;
    priors.seed = s;
    synthetic.seed = s;
}

PipelineConfig parse_config(std::istream& in, const std::filesystem::path& base_dir) {
    PipelineConfig config;
    if (!base_dir.empty()) {
        config.dataset = base_dir / config.dataset;
        config.models = base_dir / config.models;
        config.outputs = base_dir / config.outputs;
    }
    std::set<std::string> seen;
    std::string text;
    int line = 0;
    while (std::getline(in, text)) {
        ++line;
        const auto hash = text.find('#');
        if (hash != std::string::npos) text.resize(hash);
        text = trim(text);
        if (text.empty()) continue;
        const auto eq = text.find('=');
        const std::string where = "config line " + std::to_string(line);
        if (eq == std::string::npos) throw ConfigError(where + ": expected key = value");
        const std::string key = trim(text.substr(0, eq));
        const std::string value = trim(text.substr(eq + 1));
        const auto it = setters().find(key);
        if (it == setters().end()) throw ConfigError(where + ": unknown key '" + key + "'");
        if (!seen.insert(key).second) throw ConfigError(where + ": duplicate key '" + key + "'");
        try {
            it->second(config, value, base_dir);
        } catch (const std::invalid_argument& e) {
            throw ConfigError(where + ": bad value for '" + key + "': " + e.what());
        } catch (const std::out_of_range&) {
            throw ConfigError(where + ": value out of range for '" + key + "'");
        }
    }
    config.validate();
    return config;
}

PipelineConfig load_config(const std::filesystem::path& path) {
    std::ifstream in(path);
    if (!in) throw InputError("cannot open config " + path.string());
    return parse_config(in, path.parent_path());
}

const datasets::PersonAnnotation& Dataset::person(int region) const {
    const datasets::RegionRef& r = regions.at(static_cast<std::size_t>(region));
    return records[static_cast<std::size_t>(r.record)].persons[static_cast<std::size_t>(r.person)];
}

const datasets::AnnotationRecord& Dataset::record(int region) const {
    return records[static_cast<std::size_t>(regions.at(static_cast<std::size_t>(region)).record)];
}

Dataset load_dataset(const PipelineConfig& config) {
    require_file(config.dataset, "dataset");
    Dataset d;
    d.root = config.dataset.parent_path();
    try {
        d.records = datasets::load_annotations(config.dataset);
    } catch (const datasets::AnnotationError& e) {
        throw InputError(config.dataset.string() + ": " + e.what());
    }
    if (config.max_regions > 0) {
        int kept = 0;
        std::size_t r = 0;
        for (; r < d.records.size() && kept < config.max_regions; ++r) {
            auto& persons = d.records[r].persons;
            const int room = config.max_regions - kept;
            if (static_cast<int>(persons.size()) > room) persons.resize(static_cast<std::size_t>(room));
            kept += static_cast<int>(persons.size());
        }
        d.records.resize(r);
    }
    d.regions = datasets::flatten_regions(d.records);
    if (d.records.size() < 5 || d.regions.empty()) {
        throw InputError("dataset " + config.dataset.string() + " needs at least 5 records with persons");
    }
    d.split = datasets::split(d.records, config.seed);
    return d;
}

Grid prepare_region(const Grid& image, const pose::BoundingBox& box) {
    return normalize(datasets::crop_region(image, box));
}

net::Tensor region_features(const Dataset& data, const std::vector<int>& regions,
                            const scatternet::ScatterConfig& scatter, const scatternet::DtcwtFilterBank& bank) {
    net::Tensor out;
    int loaded = -1;
    Grid image;
    for (std::size_t i = 0; i < regions.size(); ++i) {
        const int rec = data.regions.at(static_cast<std::size_t>(regions[i])).record;
        if (rec != loaded) {
            const std::filesystem::path path = data.root / data.records[static_cast<std::size_t>(rec)].image;
            require_file(path, "image");
            image = read_png_gray8(path) / 255.0;
            try {
                datasets::validate_record(data.records[static_cast<std::size_t>(rec)],
                                          std::pair{static_cast<int>(image.cols()), static_cast<int>(image.rows())});
            } catch (const datasets::AnnotationError& e) {
                throw InputError(path.string() + ": " + e.what());
            }
            loaded = rec;
        }
        const GrayImage region(prepare_region(image, data.person(regions[i]).box));
        const scatternet::ScatterFeatures f = scatternet::scatter(region, bank, scatter);
        if (i == 0) out = net::Tensor::zeros(static_cast<int>(regions.size()), static_cast<int>(f.maps.size()), f.rows(), f.cols());
        const std::vector<double> flat = f.flatten();
        std::copy(flat.begin(), flat.end(), out.sample(static_cast<int>(i)));
    }
    return out;
}

std::vector<double> calibrate(const Dataset& data, const PipelineConfig& config, const scatternet::DtcwtFilterBank& bank) {
    std::vector<GrayImage> images;
    int loaded = -1;
    Grid image;
    const std::size_t n = std::min(data.split.train.size(), static_cast<std::size_t>(config.calibration_regions));
    for (std::size_t i = 0; i < n; ++i) {
        const int region = data.split.train[i];
        const int rec = data.regions.at(static_cast<std::size_t>(region)).record;
        if (rec != loaded) {
            const std::filesystem::path path = data.root / data.records[static_cast<std::size_t>(rec)].image;
            require_file(path, "image");
            image = read_png_gray8(path) / 255.0;
            loaded = rec;
        }
        images.emplace_back(prepare_region(image, data.person(region).box));
    }
    if (images.empty()) throw InputError("no training regions for calibration");
    return scatternet::calibrate_log_offsets(images, bank, config.scatter);
}

std::vector<pose::KeypointSet> PoseModel::predict(const net::Tensor& features) const {
    std::vector<pose::KeypointSet> out;
    out.reserve(static_cast<std::size_t>(features.batch));
    for (int start = 0; start < features.batch; start += kPredictChunk) {
        std::vector<int> idx(static_cast<std::size_t>(std::min(kPredictChunk, features.batch - start)));
        std::iota(idx.begin(), idx.end(), start);
        const Eigen::MatrixXd pred = net.forward(features.gather(idx), false, 0);
        for (Eigen::Index r = 0; r < pred.rows(); ++r) {
            out.push_back(pose::decode_keypoints(pred.row(r).transpose(), kRegionCols, kRegionRows));
        }
    }
    return out;
}

PoseModel load_pose_model(const std::filesystem::path& stem) {
    require_file(std::filesystem::path(stem).concat(".json"), "pose model");
    nlohmann::json extra;
    net::RegressionNet n = net::RegressionNet::load(stem, &extra);
    return {std::move(n), scatter_from_json(extra.at("scatter")), net::FeatureNormalizer::from_json(extra.at("normalizer"))};
}

PriorsReport cmd_train_priors(const PipelineConfig& config, std::ostream& log) {
    const Dataset data = load_dataset(config);
    log << "regions: " << data.regions.size() << " (train " << data.split.train.size() << ")\n";
    const PreparedSplit prep = prepare_training(data, config, false, log);
    const net::NetConfig nc = net_config_for(config, prep.train.features);
    PriorsReport report;
    report.sets = priors::assemble_priors(prep.train.features, nc, config.priors);
    for (const auto& s : report.sets) {
        const Eigen::MatrixXd g = s.filters * s.filters.transpose();
        const double err = (g - Eigen::MatrixXd::Identity(g.rows(), g.cols())).cwiseAbs().maxCoeff();
        report.max_gram_error = std::max(report.max_gram_error, err);
        log << s.layer_id << ": K=" << s.k() << " rejected checkerboards=" << s.rejected_count
            << " shortfall=" << s.shortfall << " gain=" << format_number(s.gain) << '\n';
        if (!s.notice.empty()) log << s.layer_id << ": " << s.notice << '\n';
    }
    const bool pass = report.max_gram_error < 1e-6;
    log << "orthonormality audit: " << (pass ? "pass" : "FAIL") << " (max |VV^T - I| = "
        << format_number(report.max_gram_error) << ")\n";
    if (!pass) throw std::runtime_error("orthonormality audit failed");
    std::filesystem::create_directories(config.models);
    priors::save_priors(priors_stem(config), report.sets);
    log << "wrote " << priors_stem(config).string() << ".{json,bin}\n";
    return report;
}

PoseTrainReport cmd_train_pose(const PipelineConfig& config, bool random_init, std::ostream& log) {
    const Dataset data = load_dataset(config);
    std::vector<priors::PriorFilterSet> sets;
    if (!random_init) {
        require_file(std::filesystem::path(priors_stem(config)).concat(".json"), "priors (run train-priors or pass --random-init)");
        sets = priors::load_priors(priors_stem(config));
    }
    log << "regions: train " << data.split.train.size() << ", val " << data.split.val.size() << '\n';
    const PreparedSplit prep = prepare_training(data, config, true, log);
    const net::NetConfig nc = net_config_for(config, prep.train.features);
    net::RegressionNet model(nc, net::mix_seed(config.seed, 1));
    if (!random_init) model.init_with_priors(priors::to_filter_matrices(sets), net::mix_seed(config.seed, 1));
    log << "init: " << net::to_string(model.init_mode()) << ", epochs " << config.train.epochs << ", lr "
        << format_number(config.train.base_lr);
    if (config.train.drop_epoch < config.train.epochs) {
        log << " -> " << format_number(config.train.lr_after_drop) << " after epoch " << config.train.drop_epoch;
    }
    log << '\n';

    PoseTrainReport report{net::train(model, prep.train, prep.val, config.train), {}, {}, 0.0, 0.0};
    std::filesystem::create_directories(config.outputs);
    std::filesystem::create_directories(config.models);
    report.curve_csv = config.outputs / ("loss_curve_" + init_name(random_init) + ".csv");
    write_curve(report.curve_csv, report.result.curve);
    for (const auto& r : report.result.curve) {
        log << "epoch " << r.epoch << " train " << format_number(r.train_loss) << " val " << format_number(r.val_loss) << '\n';
    }
    if (report.result.diverged) {
        throw DivergenceError("training diverged (" + report.result.diagnostic + "); partial curve in " + report.curve_csv.string());
    }

    net::RegressionNet& best = report.result.net;
    best.round_to_f32();
    for (const net::Param& p : best.params()) {
        if (!p.value.allFinite()) throw DivergenceError("training diverged (" + p.name + " overflows float32); partial curve in " + report.curve_csv.string());
    }
    report.checkpoint = config.models / ("pose_" + init_name(random_init));
    const nlohmann::json extra = {{"scatter", scatter_to_json(prep.scatter)},
                                  {"normalizer", prep.normalizer.to_json()},
                                  {"seed", config.seed},
                                  {"best_epoch", report.result.best_epoch},
                                  {"sigma_ref", report.result.sigma_ref}};
    best.save(report.checkpoint, extra);
    report.saved_val_loss = net::evaluation_loss(best, prep.val, report.result.sigma_ref);
    const net::RegressionNet reloaded = net::RegressionNet::load(report.checkpoint);
    report.reloaded_val_loss = net::evaluation_loss(reloaded, prep.val, report.result.sigma_ref);
    log << "best epoch " << report.result.best_epoch << ", val loss " << format_number(report.saved_val_loss)
        << " (reloaded " << format_number(report.reloaded_val_loss) << ")\n";
    log << "wrote " << report.checkpoint.string() << ".{json,bin} and " << report.curve_csv.string() << '\n';
    return report;
}

PoseEvalReport cmd_eval_pose(const PipelineConfig& config, const std::filesystem::path& model_stem, std::ostream& log) {
    const Dataset data = load_dataset(config);
    const PoseModel model = load_pose_model(model_stem);
    const scatternet::DtcwtFilterBank bank = scatternet::build_filter_bank();
    net::Tensor features = region_features(data, data.split.test, model.scatter, bank);
    model.normalizer.apply(features);
    const std::vector<pose::KeypointSet> predicted = model.predict(features);
    std::vector<pose::KeypointSet> truth;
    for (int r : data.split.test) truth.push_back(datasets::region_keypoints(data.person(r)));

    PoseEvalReport report;
    report.curve = pose::pck_curve(predicted, truth, config.pck_distances);
    std::filesystem::create_directories(config.outputs);
    report.csv = config.outputs / ("pck_" + model_stem.filename().string() + ".csv");
    pose::write_pck_csv(report.csv, report.curve);
    report.mean_at_5 = pose::pck_curve(predicted, truth, {5.0}).mean.front();
    log << "test regions: " << truth.size() << '\n';
    for (std::size_t i = 0; i < report.curve.distances.size(); ++i) {
        log << "PCK@" << format_number(report.curve.distances[i]) << ": " << percent(report.curve.mean[i]) << "%\n";
    }
    log << "mean PCK@5: " << percent(report.mean_at_5) << "% (paper reference 87.6%)\n";
    log << "wrote " << report.csv.string() << '\n';
    return report;
}

SvmTrainReport cmd_train_svm(const PipelineConfig& config, PoseSource source, const std::filesystem::path& pose_model_stem,
                             std::ostream& log) {
    const Dataset data = load_dataset(config);
    std::vector<svm::ActivityLabel> labels;
    std::set<svm::ActivityLabel> present;
    for (int r : data.split.train) {
        labels.push_back(data.person(r).label);
        present.insert(data.person(r).label);
    }
    if (present.size() < 2) throw InputError("training split needs at least two activity labels");
    const Eigen::MatrixXd x = feature_matrix(region_angles(data, data.split.train, source, pose_model_stem));

    SvmTrainReport report;
    svm::SvmHyperparams hp = config.svm;
    std::filesystem::create_directories(config.outputs);
    std::filesystem::create_directories(config.models);
    if (!config.svm_c_grid.empty()) {
        report.cv = svm::cross_validate(x, labels, config.svm_c_grid, config.svm_gamma_grid, config.svm_folds, config.seed,
                                        config.svm);
        hp = report.cv->best;
        std::vector<std::vector<std::string>> rows;
        for (const auto& e : report.cv->table) rows.push_back({format_number(e.c), format_number(e.gamma), format_number(e.mean_accuracy)});
        const auto cv_csv = config.outputs / ("svm_cv_" + to_string(source) + ".csv");
        write_csv(cv_csv, {"c", "gamma", "mean_accuracy"}, rows);
        log << config.svm_folds << "-fold cross-validation over " << rows.size() << " grid points; wrote " << cv_csv.string() << '\n';
    }
    log << "hyperparameters: C=" << plain_decimal(hp.c) << ", gamma=" << plain_decimal(hp.gamma) << '\n';
    report.model = svm::train_multiclass(x, labels, hp);
    svm::round_to_f32(report.model);
    for (const auto& w : report.model.warnings) log << "warning: " << w << '\n';
    int correct = 0;
    for (Eigen::Index i = 0; i < x.rows(); ++i) {
        if (svm::predict(report.model, Eigen::VectorXd(x.row(i).transpose())).label == labels[static_cast<std::size_t>(i)]) ++correct;
    }
    report.training_accuracy = static_cast<double>(correct) / static_cast<double>(x.rows());
    report.model_stem = config.models / ("svm_" + to_string(source));
    svm::save_model(report.model_stem, report.model);
    log << "pose source: " << to_string(source) << ", training regions: " << x.rows() << ", training accuracy: "
        << percent(report.training_accuracy) << "%\n";
    log << "wrote " << report.model_stem.string() << ".{json,bin}\n";
    return report;
}

ActivityReport cmd_eval_activity(const PipelineConfig& config, PoseSource source, const std::filesystem::path& pose_model_stem,
                                 const std::filesystem::path& svm_stem, std::ostream& log) {
    const Dataset data = load_dataset(config);
    require_file(std::filesystem::path(svm_stem).concat(".json"), "SVM model");
    const svm::SvmModel model = svm::load_model(svm_stem);
    const std::vector<int>& test = data.split.test;
    const std::vector<pose::AngleVector> angles = region_angles(data, test, source, pose_model_stem);

    std::array<int, svm::kNumClasses> hits{};
    std::map<int, std::pair<int, int>> by_persons;  // persons in image -> (correct, total)
    std::map<int, std::pair<int, int>> by_violent;  // violent persons in image -> (correct, total), violent regions only
    ActivityReport report;
    int correct = 0;
    for (std::size_t i = 0; i < test.size(); ++i) {
        const datasets::PersonAnnotation& p = data.person(test[i]);
        const bool ok = svm::predict(model, angles[i]).label == p.label;
        const auto c = static_cast<std::size_t>(svm::index_of(p.label));
        ++report.per_class_count[c];
        hits[c] += ok;
        correct += ok;
        const auto& rec = data.record(test[i]);
        auto& bp = by_persons[static_cast<int>(rec.persons.size())];
        bp.first += ok;
        ++bp.second;
        if (svm::is_violent(p.label)) {
            const int violent = static_cast<int>(std::count_if(rec.persons.begin(), rec.persons.end(),
                                                               [](const auto& q) { return svm::is_violent(q.label); }));
            auto& bv = by_violent[violent];
            bv.first += ok;
            ++bv.second;
        }
    }
    report.overall = test.empty() ? 0.0 : static_cast<double>(correct) / static_cast<double>(test.size());
    const std::string prefix = "activity_" + to_string(source) + "_";
    std::filesystem::create_directories(config.outputs);

    std::vector<std::vector<std::string>> rows;
    for (svm::ActivityLabel label : svm::kAllLabels) {
        const auto c = static_cast<std::size_t>(svm::index_of(label));
        report.per_class[c] = report.per_class_count[c] ? static_cast<double>(hits[c]) / report.per_class_count[c] : 0.0;
        const auto ref = kPaperPerClass.find(label);
        rows.push_back({svm::to_string(label), std::to_string(report.per_class_count[c]), percent(report.per_class[c]),
                        ref == kPaperPerClass.end() ? "" : format_number(ref->second)});
        log << svm::to_string(label) << ": " << percent(report.per_class[c]) << "% of " << report.per_class_count[c] << '\n';
    }
    report.per_class_csv = config.outputs / (prefix + "per_class.csv");
    write_csv(report.per_class_csv, {"label", "regions", "accuracy_percent", "paper_reference_percent"}, rows);

    rows.clear();
    for (const auto& [n, ct] : by_persons) {
        const double acc = static_cast<double>(ct.first) / ct.second;
        report.by_persons.emplace_back(n, acc);
        rows.push_back({std::to_string(n), std::to_string(ct.second), percent(acc)});
        log << n << " persons per image: " << percent(acc) << "% of " << ct.second << '\n';
    }
    report.by_persons_csv = config.outputs / (prefix + "by_persons.csv");
    write_csv(report.by_persons_csv, {"persons_in_image", "regions", "accuracy_percent"}, rows);

    rows.clear();
    for (const auto& [n, ct] : by_violent) {
        const bool has_ref = n >= 1 && n <= static_cast<int>(kPaperByViolent.size());
        rows.push_back({std::to_string(n), std::to_string(ct.second), percent(static_cast<double>(ct.first) / ct.second),
                        has_ref ? format_number(kPaperByViolent[static_cast<std::size_t>(n - 1)]) : ""});
    }
    report.by_violent_csv = config.outputs / (prefix + "by_violent.csv");
    write_csv(report.by_violent_csv, {"violent_in_image", "violent_regions", "accuracy_percent", "paper_reference_percent"}, rows);

    report.summary_csv = config.outputs / (prefix + "summary.csv");
    write_csv(report.summary_csv, {"pose_source", "regions", "accuracy_percent", "paper_reference_percent"},
              {{to_string(source), std::to_string(test.size()), percent(report.overall), format_number(kPaperOverall)}});
    log << "overall accuracy (" << to_string(source) << " poses): " << percent(report.overall) << "% (paper reference "
        << format_number(kPaperOverall) << "%)\n";
    return report;
}

InferReport cmd_infer(const PipelineConfig& config, const std::filesystem::path& boxes_file,
                      const std::filesystem::path& pose_model_stem, const std::filesystem::path& svm_stem, std::ostream& log) {
    require_file(boxes_file, "boxes file");
    const PoseModel pose_model = load_pose_model(pose_model_stem);
    require_file(std::filesystem::path(svm_stem).concat(".json"), "SVM model");
    const svm::SvmModel svm_model = svm::load_model(svm_stem);
    const scatternet::DtcwtFilterBank bank = scatternet::build_filter_bank();

    InferReport report;
    std::filesystem::create_directories(config.outputs);
    report.results = config.outputs / "results.jsonl";
    std::ofstream out(report.results);
    if (!out) throw std::runtime_error("cannot write " + report.results.string());
    std::ifstream in(boxes_file);
    std::string text;
    int line = 0;
    double seconds = 0.0;
    while (std::getline(in, text)) {
        ++line;
        if (trim(text).empty()) continue;
        nlohmann::json j;
        try {
            j = nlohmann::json::parse(text);
        } catch (const nlohmann::json::parse_error& e) {
            throw InputError(boxes_file.string() + " line " + std::to_string(line) + ": invalid JSON: " + e.what());
        }
        if (!j.is_object() || !j.contains("image") || !j.at("image").is_string() || !j.contains("boxes") ||
            !j.at("boxes").is_array()) {
            throw InputError(boxes_file.string() + " line " + std::to_string(line) + ": expected {\"image\", \"boxes\"}");
        }
        const std::string image_name = j.at("image").get<std::string>();
        const std::filesystem::path image_path = boxes_file.parent_path() / image_name;
        require_file(image_path, "image");
        const Grid image = read_png_gray8(image_path) / 255.0;
        nlohmann::ordered_json result;
        result["image"] = image_name;
        result["persons"] = nlohmann::ordered_json::array();
        for (const auto& b : j.at("boxes")) {
            if (!b.is_array() || b.size() != 4 || !std::all_of(b.begin(), b.end(), [](const auto& v) { return v.is_number(); })) {
                throw InputError(boxes_file.string() + " line " + std::to_string(line) + ": boxes are [x, y, w, h]");
            }
            const pose::BoundingBox box{b[0].get<double>(), b[1].get<double>(), b[2].get<double>(), b[3].get<double>()};
            if (!(box.w > 0.0) || !(box.h > 0.0) || box.x < 0.0 || box.y < 0.0 || box.x + box.w > image.cols() ||
                box.y + box.h > image.rows()) {
                log << "warning: " << image_name << ": skipping box [" << format_number(box.x) << ", " << format_number(box.y)
                    << ", " << format_number(box.w) << ", " << format_number(box.h) << "] outside the image\n";
                ++report.skipped;
                continue;
            }
            const auto start = std::chrono::steady_clock::now();
            const GrayImage region(prepare_region(image, box));
            const std::vector<double> flat = scatternet::scatter(region, bank, pose_model.scatter).flatten();
            const net::NetConfig& nc = pose_model.net.config();
            net::Tensor t = net::Tensor::zeros(1, nc.input_channels, nc.input_rows, nc.input_cols);
            if (flat.size() != t.data.size()) throw DimensionError("infer: scatter output does not match the pose model input");
            std::copy(flat.begin(), flat.end(), t.data.begin());
            pose_model.normalizer.apply(t);
            const pose::KeypointSet image_kps = pose::region_to_image(pose_model.predict(t).front(), box, kRegionCols, kRegionRows);
            const svm::Prediction pred = svm::predict(svm_model, pose::orientation_vector(pose::build_skeleton(image_kps)));
            seconds += std::chrono::duration<double>(std::chrono::steady_clock::now() - start).count();

            nlohmann::ordered_json person;
            person["box"] = {box.x, box.y, box.w, box.h};
            nlohmann::ordered_json kps = nlohmann::ordered_json::array();
            for (const auto& p : image_kps.points) kps.push_back({p.x, p.y});
            person["keypoints"] = kps;
            person["label"] = svm::to_string(pred.label);
            person["violent"] = svm::is_violent(pred.label);
            result["persons"].push_back(person);
            ++report.regions;
        }
        out << result.dump() << '\n';
        ++report.images;
    }
    report.regions_per_second = seconds > 0.0 ? report.regions / seconds : 0.0;
    log << "images: " << report.images << ", regions: " << report.regions << ", skipped boxes: " << report.skipped << '\n';
    log << "throughput: " << format_number(report.regions_per_second) << " regions/s (local, single thread)\n";
    log << "wrote " << report.results.string() << '\n';
    return report;
}

std::vector<datasets::AnnotationRecord> cmd_generate_data(const PipelineConfig& config, const std::filesystem::path& out,
                                                          std::ostream& log) {
    const auto records = datasets::generate_dataset(config.synthetic, config.synthetic_images, out);
    datasets::save_annotations(out / "annotations.jsonl", records);
    std::size_t persons = 0;
    std::size_t violent = 0;
    for (const auto& r : records) {
        persons += r.persons.size();
        for (const auto& p : r.persons) violent += svm::is_violent(p.label);
    }
    log << "images: " << records.size() << ", persons: " << persons << ", violent: " << violent << '\n';
    log << "wrote " << (out / "annotations.jsonl").string() << '\n';
    return records;
}

void write_csv(const std::filesystem::path& path, const std::vector<std::string>& header,
               const std::vector<std::vector<std::string>>& rows) {
    std::ofstream out(path);
    if (!out) throw std::runtime_error("cannot write " + path.string());
    auto line = [&out](const std::vector<std::string>& cells) {
        for (std::size_t i = 0; i < cells.size(); ++i) out << (i ? "," : "") << cells[i];
        out << '\n';
    };
    line(header);
    for (const auto& r : rows) line(r);
}

std::string format_number(double v) {
    char buf[32];
    std::snprintf(buf, sizeof buf, "%.10g", v);
    return buf;
}

}  // namespace shdl::pipeline
