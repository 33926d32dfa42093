#include "shdl/datasets.hpp"

#include "shdl/png_io.hpp"
#include "shdl/regression_net.hpp"

#include <json.hpp>

#include <algorithm>
#include <cmath>
#include <cstdio>
#include <fstream>
#include <numbers>
#include <numeric>
#include <sstream>

namespace shdl::datasets {

namespace {

using pose::KeypointSet;
using pose::Point;
using svm::ActivityLabel;

constexpr double kTrainFraction = 0.6;
constexpr double kValFraction = 0.2;

// Body proportions in units of body height.
constexpr double kNeckHeight = 0.30;
constexpr double kHeadLength = 0.13;
constexpr double kClavicle = 0.10;
constexpr double kUpperArm = 0.17;
constexpr double kForearm = 0.15;
constexpr double kHipHalfWidth = 0.06;
constexpr double kThigh = 0.24;
constexpr double kShin = 0.24;
constexpr double kLimbLengthJitter = 0.08;

// Drawing proportions in units of rendered body height.
constexpr double kLimbThickness = 0.035;
constexpr double kHeadRadius = 0.065;
constexpr double kBoxMargin = 0.04;
constexpr double kBackgroundLevel = 0.3;
constexpr double kTextureCell = 8.0;

enum Limb { kUpperArmR, kForearmR, kUpperArmL, kForearmL, kThighR, kShinR, kThighL, kShinL, kLimbCount };

struct Template {
    std::array<double, kLimbCount> directions;
    double torso = 90.0;
};

Template template_for(ActivityLabel label) {
    switch (label) {
        case ActivityLabel::neutral: return {{265, 268, 275, 272, 268, 270, 272, 270}, 90.0};
        case ActivityLabel::punching: return {{180, 180, 250, 110, 255, 265, 285, 275}, 90.0};
        case ActivityLabel::stabbing: return {{120, 250, 230, 200, 260, 270, 280, 270}, 90.0};
        case ActivityLabel::shooting: return {{180, 180, 190, 180, 265, 270, 275, 270}, 90.0};
        case ActivityLabel::kicking: return {{220, 200, 330, 310, 165, 150, 275, 270}, 80.0};
        case ActivityLabel::strangling: return {{215, 160, 200, 165, 262, 270, 278, 270}, 90.0};
    }
    throw ParameterError("unknown activity label");
}

Point along(const Point& from, double length, double degrees) {
    const double t = degrees * std::numbers::pi / 180.0;
    return {from.x + length * std::cos(t), from.y + length * std::sin(t)};
}

// Body frame (y up, unit height) to image pixels.
struct Placement {
    double cx = 0.0;
    double cy = 0.0;
    double pixels = 1.0;  // rendered body height
    double rotation_deg = 0.0;

    Point map(const Point& p) const {
        const double t = rotation_deg * std::numbers::pi / 180.0;
        const double x = std::cos(t) * p.x - std::sin(t) * p.y;
        const double y = std::sin(t) * p.x + std::cos(t) * p.y;
        return {cx + pixels * x, cy - pixels * y};
    }
};

KeypointSet place(const KeypointSet& body, const Placement& at) {
    KeypointSet out;
    for (int i = 0; i < pose::kNumKeypoints; ++i) out.points[static_cast<std::size_t>(i)] = at.map(body.points[static_cast<std::size_t>(i)]);
    return out;
}

struct Extent {
    double x0 = 0.0;
    double y0 = 0.0;
    double x1 = 0.0;
    double y1 = 0.0;
};

Extent extent_of(const KeypointSet& k, double pad) {
    Extent e{k.points[0].x, k.points[0].y, k.points[0].x, k.points[0].y};
    for (const Point& p : k.points) {
        e.x0 = std::min(e.x0, p.x);
        e.y0 = std::min(e.y0, p.y);
        e.x1 = std::max(e.x1, p.x);
        e.y1 = std::max(e.y1, p.y);
    }
    e.x0 -= pad;
    e.y0 -= pad;
    e.x1 += pad;
    e.y1 += pad;
    return e;
}

double segment_distance(double px, double py, const Point& a, const Point& b) {
    const double dx = b.x - a.x;
    const double dy = b.y - a.y;
    const double len2 = dx * dx + dy * dy;
    double t = len2 > 0.0 ? ((px - a.x) * dx + (py - a.y) * dy) / len2 : 0.0;
    t = std::clamp(t, 0.0, 1.0);
    return std::hypot(px - (a.x + t * dx), py - (a.y + t * dy));
}

void blend(Grid& canvas, int r, int c, double coverage, double intensity) {
    if (coverage <= 0.0) return;
    const double cov = std::min(coverage, 1.0);
    canvas(r, c) = canvas(r, c) * (1.0 - cov) + intensity * cov;
}

// Anti-aliased figure in image pixels; pixel (r, c) is centred at (c + 0.5, r + 0.5).
void draw_figure(Grid& canvas, const KeypointSet& k, double pixels, double intensity) {
    const double half = std::max(0.75, 0.5 * kLimbThickness * pixels);
    const double radius = std::max(2.0, kHeadRadius * pixels);
    for (const pose::Edge& e : pose::skeleton_edges()) {
        const Point& a = k.points[static_cast<std::size_t>(e.from)];
        const Point& b = k.points[static_cast<std::size_t>(e.to)];
        const int r0 = std::max(0, static_cast<int>(std::floor(std::min(a.y, b.y) - half - 1)));
        const int r1 = std::min(static_cast<int>(canvas.rows()) - 1, static_cast<int>(std::ceil(std::max(a.y, b.y) + half + 1)));
        const int c0 = std::max(0, static_cast<int>(std::floor(std::min(a.x, b.x) - half - 1)));
        const int c1 = std::min(static_cast<int>(canvas.cols()) - 1, static_cast<int>(std::ceil(std::max(a.x, b.x) + half + 1)));
        for (int r = r0; r <= r1; ++r) {
            for (int c = c0; c <= c1; ++c) blend(canvas, r, c, half + 0.5 - segment_distance(c + 0.5, r + 0.5, a, b), intensity);
        }
    }
    const Point& h = k.points[0];
    const int r0 = std::max(0, static_cast<int>(std::floor(h.y - radius - 1)));
    const int r1 = std::min(static_cast<int>(canvas.rows()) - 1, static_cast<int>(std::ceil(h.y + radius + 1)));
    const int c0 = std::max(0, static_cast<int>(std::floor(h.x - radius - 1)));
    const int c1 = std::min(static_cast<int>(canvas.cols()) - 1, static_cast<int>(std::ceil(h.x + radius + 1)));
    for (int r = r0; r <= r1; ++r) {
        for (int c = c0; c <= c1; ++c) blend(canvas, r, c, radius + 0.5 - std::hypot(c + 0.5 - h.x, r + 0.5 - h.y), intensity);
    }
}

// Smooth background: coarse white noise upsampled bilinearly.
Grid texture(int rows, int cols, double amplitude, std::mt19937_64& rng) {
    const int tr = std::max(2, static_cast<int>(std::ceil(rows / kTextureCell)) + 1);
    const int tc = std::max(2, static_cast<int>(std::ceil(cols / kTextureCell)) + 1);
    std::uniform_real_distribution<double> u(-1.0, 1.0);
    Grid coarse(tr, tc);
    for (int r = 0; r < tr; ++r)
        for (int c = 0; c < tc; ++c) coarse(r, c) = u(rng);
    Grid out = resize_bilinear(coarse, rows, cols);
    out = out.array() * amplitude + kBackgroundLevel;
    return out;
}

void finish(Grid& canvas, const RenderParams& p, std::mt19937_64& rng) {
    canvas = (canvas.array() - 0.5) * p.contrast + 0.5 + p.brightness;
    canvas = gaussian_blur(canvas, p.blur_sigma);
    if (p.noise_sigma > 0.0) {
        std::normal_distribution<double> noise(0.0, p.noise_sigma);
        for (Eigen::Index i = 0; i < canvas.size(); ++i) canvas.data()[i] += noise(rng);
    }
    canvas = canvas.cwiseMax(0.0).cwiseMin(1.0);
}

std::string field_error(int line, const std::string& field, const std::string& what) {
    return "line " + std::to_string(line) + ": field '" + field + "': " + what;
}

const nlohmann::json& require(const nlohmann::json& obj, const std::string& key, int line, const std::string& path) {
    if (!obj.is_object() || !obj.contains(key)) throw AnnotationError(field_error(line, path + key, "missing"));
    return obj.at(key);
}

double number(const nlohmann::json& v, int line, const std::string& field) {
    if (!v.is_number()) throw AnnotationError(field_error(line, field, "expected a number"));
    return v.get<double>();
}

}  // namespace

void validate_record(const AnnotationRecord& record, std::optional<std::pair<int, int>> image_size) {
    if (record.image.empty()) throw AnnotationError("field 'image': empty path");
    if (record.height_m) {
        const int h = *record.height_m;
        if (h != 2 && h != 4 && h != 6 && h != 8) throw AnnotationError("field 'height_m': must be 2, 4, 6 or 8");
    }
    for (std::size_t p = 0; p < record.persons.size(); ++p) {
        const PersonAnnotation& person = record.persons[p];
        const std::string prefix = "persons[" + std::to_string(p) + "].";
        const pose::BoundingBox& b = person.box;
        if (!std::isfinite(b.x) || !std::isfinite(b.y) || !(b.w > 0.0) || !(b.h > 0.0) || !std::isfinite(b.w) ||
            !std::isfinite(b.h)) {
            throw AnnotationError("field '" + prefix + "box': must be finite with positive size");
        }
        if (image_size && (b.x < 0.0 || b.y < 0.0 || b.x + b.w > image_size->first || b.y + b.h > image_size->second)) {
            throw AnnotationError("field '" + prefix + "box': outside the image");
        }
        for (int k = 0; k < pose::kNumKeypoints; ++k) {
            const Point& q = person.keypoints.points[static_cast<std::size_t>(k)];
            const std::string field = prefix + "keypoints[" + std::to_string(k) + "]";
            if (!std::isfinite(q.x) || !std::isfinite(q.y) || q.x < 0.0 || q.y < 0.0) {
                throw AnnotationError("field '" + field + "': must be finite and nonnegative");
            }
            if (image_size && (q.x > image_size->first || q.y > image_size->second)) {
                throw AnnotationError("field '" + field + "': outside the image");
            }
            if (q.x < b.x || q.y < b.y || q.x > b.x + b.w || q.y > b.y + b.h) {
                throw AnnotationError("field '" + field + "': outside the box");
            }
        }
    }
}

std::vector<AnnotationRecord> load_annotations(const std::filesystem::path& path) {
    std::ifstream in(path);
    if (!in) throw AnnotationError("cannot open annotations " + path.string());
    std::vector<AnnotationRecord> records;
    std::string text;
    int line = 0;
    while (std::getline(in, text)) {
        ++line;
        if (text.find_first_not_of(" \t\r") == std::string::npos) continue;
        nlohmann::json j;
        try {
            j = nlohmann::json::parse(text);
        } catch (const nlohmann::json::parse_error& e) {
            throw AnnotationError("line " + std::to_string(line) + ": invalid JSON: " + e.what());
        }
        if (!j.is_object()) throw AnnotationError("line " + std::to_string(line) + ": expected an object");
        AnnotationRecord r;
        const auto& image = require(j, "image", line, "");
        if (!image.is_string()) throw AnnotationError(field_error(line, "image", "expected a string"));
        r.image = image.get<std::string>();
        if (j.contains("height_m") && !j.at("height_m").is_null()) {
            if (!j.at("height_m").is_number_integer()) throw AnnotationError(field_error(line, "height_m", "expected an integer or null"));
            r.height_m = j.at("height_m").get<int>();
        }
        const auto& persons = require(j, "persons", line, "");
        if (!persons.is_array()) throw AnnotationError(field_error(line, "persons", "expected an array"));
        for (std::size_t p = 0; p < persons.size(); ++p) {
            const std::string prefix = "persons[" + std::to_string(p) + "].";
            PersonAnnotation person;
            const auto& box = require(persons[p], "box", line, prefix);
            if (!box.is_array() || box.size() != 4) throw AnnotationError(field_error(line, prefix + "box", "expected [x, y, w, h]"));
            person.box = {number(box[0], line, prefix + "box"), number(box[1], line, prefix + "box"),
                          number(box[2], line, prefix + "box"), number(box[3], line, prefix + "box")};
            const auto& kps = require(persons[p], "keypoints", line, prefix);
            if (!kps.is_array() || kps.size() != pose::kNumKeypoints) {
                throw AnnotationError(field_error(line, prefix + "keypoints",
                                                  "expected 14 points, got " + std::to_string(kps.is_array() ? kps.size() : 0)));
            }
            for (int k = 0; k < pose::kNumKeypoints; ++k) {
                const auto& pt = kps[static_cast<std::size_t>(k)];
                const std::string field = prefix + "keypoints[" + std::to_string(k) + "]";
                if (!pt.is_array() || pt.size() != 2) throw AnnotationError(field_error(line, field, "expected [x, y]"));
                person.keypoints.points[static_cast<std::size_t>(k)] = {number(pt[0], line, field), number(pt[1], line, field)};
            }
            const auto& label = require(persons[p], "label", line, prefix);
            if (!label.is_string()) throw AnnotationError(field_error(line, prefix + "label", "expected a string"));
            try {
                person.label = svm::label_from_string(label.get<std::string>());
            } catch (const ParameterError&) {
                throw AnnotationError(field_error(line, prefix + "label", "unknown label '" + label.get<std::string>() + "'"));
            }
            r.persons.push_back(person);
        }
        try {
            validate_record(r);
        } catch (const AnnotationError& e) {
            throw AnnotationError("line " + std::to_string(line) + ": " + e.what());
        }
        records.push_back(std::move(r));
    }
    return records;
}

void save_annotations(const std::filesystem::path& path, const std::vector<AnnotationRecord>& records) {
    std::ofstream out(path);
    if (!out) throw AnnotationError("cannot write annotations " + path.string());
    for (const AnnotationRecord& r : records) {
        nlohmann::ordered_json j;
        j["image"] = r.image;
        j["height_m"] = r.height_m ? nlohmann::ordered_json(*r.height_m) : nlohmann::ordered_json(nullptr);
        nlohmann::ordered_json persons = nlohmann::ordered_json::array();
        for (const PersonAnnotation& p : r.persons) {
            nlohmann::ordered_json person;
            person["box"] = {p.box.x, p.box.y, p.box.w, p.box.h};
            nlohmann::ordered_json kps = nlohmann::ordered_json::array();
            for (const Point& q : p.keypoints.points) kps.push_back({q.x, q.y});
            person["keypoints"] = kps;
            person["label"] = svm::to_string(p.label);
            persons.push_back(person);
        }
        j["persons"] = persons;
        out << j.dump() << '\n';
    }
}

std::vector<RegionRef> flatten_regions(const std::vector<AnnotationRecord>& records) {
    std::vector<RegionRef> out;
    for (std::size_t r = 0; r < records.size(); ++r) {
        for (std::size_t p = 0; p < records[r].persons.size(); ++p) out.push_back({static_cast<int>(r), static_cast<int>(p)});
    }
    return out;
}

DatasetSplit split(const std::vector<AnnotationRecord>& records, std::uint64_t seed) {
    if (records.size() < 5) throw ParameterError("split: need at least 5 records");
    const std::vector<RegionRef> regions = flatten_regions(records);
    const int n = static_cast<int>(regions.size());
    std::array<std::vector<int>, svm::kNumClasses> members;
    for (int i = 0; i < n; ++i) {
        const PersonAnnotation& p = records[static_cast<std::size_t>(regions[static_cast<std::size_t>(i)].record)]
                                        .persons[static_cast<std::size_t>(regions[static_cast<std::size_t>(i)].person)];
        members[static_cast<std::size_t>(svm::index_of(p.label))].push_back(i);
    }
    // position (k + 0.5) / n_c spreads each label evenly through the ordering
    struct Keyed {
        double key;
        int label;
        int index;
    };
    std::vector<Keyed> order;
    std::mt19937_64 rng(seed);
    for (int c = 0; c < svm::kNumClasses; ++c) {
        auto& m = members[static_cast<std::size_t>(c)];
        std::shuffle(m.begin(), m.end(), rng);
        for (std::size_t k = 0; k < m.size(); ++k) {
            order.push_back({(static_cast<double>(k) + 0.5) / static_cast<double>(m.size()), c, m[k]});
        }
    }
    std::sort(order.begin(), order.end(), [](const Keyed& a, const Keyed& b) {
        return a.key != b.key ? a.key < b.key : a.label < b.label;
    });
    const int n_train = static_cast<int>(std::floor(kTrainFraction * n));
    const int n_val = static_cast<int>(std::floor(kValFraction * n));
    DatasetSplit s;
    s.seed = seed;
    for (int i = 0; i < n; ++i) {
        const int idx = order[static_cast<std::size_t>(i)].index;
        (i < n_train ? s.train : i < n_train + n_val ? s.val : s.test).push_back(idx);
    }
    std::sort(s.train.begin(), s.train.end());
    std::sort(s.val.begin(), s.val.end());
    std::sort(s.test.begin(), s.test.end());
    return s;
}

BodyPose sample_activity_pose(ActivityLabel label, std::mt19937_64& rng, double jitter_deg) {
    const Template t = template_for(label);
    std::normal_distribution<double> jitter(0.0, 1.0);
    std::uniform_real_distribution<double> stretch(1.0 - kLimbLengthJitter, 1.0 + kLimbLengthJitter);
    auto angle = [&](double mean, double spread) { return mean + spread * jitter_deg * jitter(rng); };
    auto length = [&](double nominal) { return nominal * stretch(rng); };

    BodyPose pose;
    pose.label = label;
    std::array<Point, pose::kNumKeypoints>& k = pose.keypoints.points;
    const Point hip_mid{0.0, 0.0};
    k[1] = along(hip_mid, length(kNeckHeight), angle(t.torso, 0.5));
    k[0] = along(k[1], length(kHeadLength), angle(90.0, 0.5));
    k[2] = along(k[1], length(kClavicle), angle(180.0, 0.3));
    k[5] = along(k[1], length(kClavicle), angle(0.0, 0.3));
    k[3] = along(k[2], length(kUpperArm), angle(t.directions[kUpperArmR], 1.0));
    k[4] = along(k[3], length(kForearm), angle(t.directions[kForearmR], 1.0));
    k[6] = along(k[5], length(kUpperArm), angle(t.directions[kUpperArmL], 1.0));
    k[7] = along(k[6], length(kForearm), angle(t.directions[kForearmL], 1.0));
    k[8] = {-kHipHalfWidth, 0.0};
    k[11] = {kHipHalfWidth, 0.0};
    k[9] = along(k[8], length(kThigh), angle(t.directions[kThighR], 1.0));
    k[10] = along(k[9], length(kShin), angle(t.directions[kShinR], 1.0));
    k[12] = along(k[11], length(kThigh), angle(t.directions[kThighL], 1.0));
    k[13] = along(k[12], length(kShin), angle(t.directions[kShinL], 1.0));
    return pose;
}

void SyntheticConfig::validate() const {
    if (min_persons < 1 || max_persons < min_persons) throw ConfigError("synthetic: invalid persons range");
    if (min_persons < 2 || max_persons > 10) throw ConfigError("synthetic: persons per image must lie in [2, 10]");
    if (heights_m.empty() || heights_m.size() != height_scales.size()) throw ConfigError("synthetic: heights and scales must pair up");
    for (double s : height_scales) {
        if (!(s > 0.0)) throw ConfigError("synthetic: height scales must be positive");
    }
    if (image_width < kRegionCols || image_height < 32) throw ConfigError("synthetic: image too small");
    if (!(figure_height > 0.0)) throw ConfigError("synthetic: figure_height must be positive");
    if (crowding < 0.0 || crowding * (max_persons - min_persons) >= 1.0) throw ConfigError("synthetic: crowding out of range");
    if (blur_min < 0.0 || blur_max < blur_min) throw ConfigError("synthetic: invalid blur range");
    if (contrast_min <= 0.0 || contrast_max < contrast_min) throw ConfigError("synthetic: invalid contrast range");
    if (brightness_jitter < 0.0 || rotation_jitter_deg < 0.0 || pose_jitter_deg < 0.0 || texture_amplitude < 0.0 ||
        shadow_strength < 0.0 || noise_sigma < 0.0) {
        throw ConfigError("synthetic: jitter ranges must be nonnegative");
    }
    if (violent_fraction < 0.0 || violent_fraction > 1.0) throw ConfigError("synthetic: violent_fraction must be in [0, 1]");
}

RenderParams draw_render_params(const SyntheticConfig& config, double scale, std::mt19937_64& rng) {
    std::uniform_real_distribution<double> u(0.0, 1.0);
    RenderParams p;
    p.scale = scale;
    p.rotation_deg = (2.0 * u(rng) - 1.0) * config.rotation_jitter_deg;
    p.blur_sigma = config.blur_min + (config.blur_max - config.blur_min) * u(rng);
    p.brightness = (2.0 * u(rng) - 1.0) * config.brightness_jitter;
    p.contrast = config.contrast_min + (config.contrast_max - config.contrast_min) * u(rng);
    p.texture_amplitude = config.texture_amplitude;
    p.noise_sigma = config.noise_sigma;
    return p;
}

RenderedPerson render_stick_figure(const BodyPose& pose, const RenderParams& params, double figure_height,
                                   std::mt19937_64& rng) {
    if (!(params.scale > 0.0) || !(figure_height > 0.0)) throw ParameterError("render_stick_figure: scale must be positive");
    const double pixels = params.scale * figure_height;
    Placement at{0.0, 0.0, pixels, params.rotation_deg};
    const Extent e = extent_of(place(pose.keypoints, at), 0.0);
    at.cx = 0.5 * kRegionCols - 0.5 * (e.x0 + e.x1);
    at.cy = 0.5 * kRegionRows - 0.5 * (e.y0 + e.y1);

    RenderedPerson out;
    out.label = pose.label;
    out.keypoints = place(pose.keypoints, at);
    out.region = texture(kRegionRows, kRegionCols, params.texture_amplitude, rng);
    draw_figure(out.region, out.keypoints, pixels, 0.85);
    finish(out.region, params, rng);
    return out;
}

SyntheticImage render_image(const SyntheticConfig& config, int index) {
    config.validate();
    std::mt19937_64 rng(net::mix_seed(config.seed, static_cast<std::uint64_t>(index)));
    std::uniform_real_distribution<double> u(0.0, 1.0);
    const int n = std::uniform_int_distribution<int>(config.min_persons, config.max_persons)(rng);
    const auto level = static_cast<std::size_t>(std::uniform_int_distribution<int>(0, static_cast<int>(config.heights_m.size()) - 1)(rng));
    const double crowd = 1.0 - config.crowding * (n - config.min_persons);
    const RenderParams look = draw_render_params(config, config.height_scales[level] * crowd, rng);

    SyntheticImage img;
    char name[32];
    std::snprintf(name, sizeof name, "images/img_%05d.png", index);
    img.record.image = name;
    img.record.height_m = config.heights_m[level];
    const int rows = config.image_height;
    const int cols = config.image_width;
    img.pixels = texture(rows, cols, config.texture_amplitude, rng);
    // shadow: a brightness ramp along a random direction
    const double dir = 2.0 * std::numbers::pi * u(rng);
    const double shade = config.shadow_strength * u(rng);
    for (int r = 0; r < rows; ++r) {
        for (int c = 0; c < cols; ++c) {
            const double t = ((c - 0.5 * cols) * std::cos(dir) + (r - 0.5 * rows) * std::sin(dir)) / std::max(rows, cols);
            img.pixels(r, c) += shade * t;
        }
    }

    for (int k = 0; k < n; ++k) {
        ActivityLabel label = ActivityLabel::neutral;
        if (u(rng) < config.violent_fraction) label = svm::kAllLabels[static_cast<std::size_t>(std::uniform_int_distribution<int>(0, 4)(rng))];
        const BodyPose body = sample_activity_pose(label, rng, config.pose_jitter_deg);
        const double pixels = look.scale * (0.95 + 0.1 * u(rng)) * config.figure_height;
        Placement at{0.0, 0.0, pixels, (2.0 * u(rng) - 1.0) * config.rotation_jitter_deg};
        const double pad = std::max(2.0, kHeadRadius * pixels) + 1.0;
        const Extent e = extent_of(place(body.keypoints, at), pad);
        const double w = e.x1 - e.x0;
        const double h = e.y1 - e.y0;
        // people stand anywhere, so neighbours overlap more often as the crowd grows
        const double cx = w < cols ? 0.5 * w + u(rng) * (cols - w) : 0.5 * cols;
        const double cy = h < rows ? 0.5 * h + u(rng) * (rows - h) : 0.5 * rows;
        at.cx = cx - 0.5 * (e.x0 + e.x1);
        at.cy = cy - 0.5 * (e.y0 + e.y1);
        PersonAnnotation person;
        person.label = label;
        person.keypoints = place(body.keypoints, at);
        for (Point& p : person.keypoints.points) {
            p.x = std::clamp(p.x, 0.0, static_cast<double>(cols));
            p.y = std::clamp(p.y, 0.0, static_cast<double>(rows));
        }
        const Extent b = extent_of(person.keypoints, pad + kBoxMargin * pixels);
        person.box.x = std::max(0.0, b.x0);
        person.box.y = std::max(0.0, b.y0);
        person.box.w = std::min(static_cast<double>(cols), b.x1) - person.box.x;
        person.box.h = std::min(static_cast<double>(rows), b.y1) - person.box.y;
        draw_figure(img.pixels, person.keypoints, pixels, 0.75 + 0.2 * u(rng));
        img.record.persons.push_back(person);
    }
    finish(img.pixels, look, rng);
    return img;
}

std::vector<AnnotationRecord> generate_dataset(const SyntheticConfig& config, int size, const std::filesystem::path& root) {
    if (size < 1) throw ParameterError("generate_dataset: size must be at least 1");
    config.validate();
    std::filesystem::create_directories(root / "images");
    std::vector<AnnotationRecord> records;
    records.reserve(static_cast<std::size_t>(size));
    for (int i = 0; i < size; ++i) {
        SyntheticImage img = render_image(config, i);
        write_png_gray8(root / img.record.image, img.pixels * 255.0);
        records.push_back(std::move(img.record));
    }
    return records;
}

Grid crop_region(const Grid& image, const pose::BoundingBox& box) {
    return crop_resize(image, box.x, box.y, box.w, box.h, kRegionRows, kRegionCols);
}

pose::KeypointSet region_keypoints(const PersonAnnotation& person) {
    return pose::image_to_region(person.keypoints, person.box, kRegionCols, kRegionRows);
}

}  // namespace shdl::datasets
