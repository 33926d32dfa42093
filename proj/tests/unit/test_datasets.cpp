#include "shdl/datasets.hpp"
#include "shdl/png_io.hpp"

#include <doctest.h>

#include <algorithm>
#include <cmath>
#include <filesystem>
#include <fstream>
#include <map>
#include <random>
#include <set>
#include <sstream>

using namespace shdl;
using namespace shdl::datasets;
using pose::KeypointSet;
using pose::Point;
using svm::ActivityLabel;

namespace {

std::filesystem::path temp_dir(const std::string& name) {
    const auto dir = std::filesystem::temp_directory_path() / ("shdl_datasets_" + name);
    std::filesystem::remove_all(dir);
    std::filesystem::create_directories(dir);
    return dir;
}

std::string read_file(const std::filesystem::path& p) {
    std::ifstream in(p);
    std::stringstream ss;
    ss << in.rdbuf();
    return ss.str();
}

std::string strip_whitespace(std::string s) {
    s.erase(std::remove_if(s.begin(), s.end(), [](unsigned char c) { return std::isspace(c) != 0; }), s.end());
    return s;
}

// Body frame (y up) to image orientation (y down) for angle extraction.
KeypointSet flip_y(const KeypointSet& k) {
    KeypointSet out = k;
    for (Point& p : out.points) p.y = -p.y;
    return out;
}

double dist(const Point& a, const Point& b) { return std::hypot(a.x - b.x, a.y - b.y); }

AnnotationRecord single_person(ActivityLabel label) {
    AnnotationRecord r;
    r.image = "x.png";
    PersonAnnotation p;
    p.box = {0.0, 0.0, 10.0, 10.0};
    for (Point& q : p.keypoints.points) q = {5.0, 5.0};
    p.label = label;
    r.persons.push_back(p);
    return r;
}

std::string person_json(int keypoints, const std::string& label = "punching") {
    std::string kps;
    for (int i = 0; i < keypoints; ++i) kps += std::string(i ? "," : "") + "[5,5]";
    return R"({"box":[0,0,10,10],"keypoints":[)" + kps + R"(],"label":")" + label + R"("})";
}

SyntheticConfig quiet_config() {
    SyntheticConfig c;
    c.seed = 17;
    return c;
}

RenderParams clean_params(double scale, double rotation = 0.0) {
    RenderParams p;
    p.scale = scale;
    p.rotation_deg = rotation;
    p.noise_sigma = 0.0;
    p.blur_sigma = 0.0;
    return p;
}

}  // namespace

TEST_CASE("empty annotation file gives an empty list") {
    const auto dir = temp_dir("empty");
    std::ofstream(dir / "a.jsonl").close();
    CHECK(load_annotations(dir / "a.jsonl").empty());
}

TEST_CASE("schema violations name the line and field") {
    const auto dir = temp_dir("schema");
    auto expect_error = [&](const std::string& body, const std::string& line, const std::string& field) {
        std::ofstream(dir / "a.jsonl") << body;
        try {
            load_annotations(dir / "a.jsonl");
            FAIL("expected AnnotationError");
        } catch (const AnnotationError& e) {
            const std::string msg = e.what();
            CHECK(msg.find(line) != std::string::npos);
            CHECK(msg.find(field) != std::string::npos);
        }
    };
    const std::string good = R"({"image":"a.png","height_m":2,"persons":[)" + person_json(14) + "]}\n";
    expect_error(good + R"({"image":"b.png","height_m":4,"persons":[)" + person_json(13) + "]}\n", "line 2",
                 "persons[0].keypoints");
    expect_error(R"({"image":"a.png","height_m":2,"persons":[)" + person_json(14, "dancing") + "]}\n", "line 1",
                 "persons[0].label");
    expect_error(R"({"image":"a.png","height_m":3,"persons":[]})" "\n", "line 1", "height_m");
    expect_error(good + "\n" + R"({"height_m":2,"persons":[]})" "\n", "line 3", "image");
    expect_error("{not json\n", "line 1", "invalid JSON");
    expect_error(R"({"image":"a.png","height_m":2,"persons":[{"box":[0,0,4,4],"keypoints":[)" +
                     std::string("[5,5],[1,1],[1,1],[1,1],[1,1],[1,1],[1,1],[1,1],[1,1],[1,1],[1,1],[1,1],[1,1],[1,1]") +
                     R"(],"label":"neutral"}]})" "\n",
                 "line 1", "persons[0].keypoints[0]");

    std::ofstream(dir / "ok.jsonl") << good << "\n" << R"({"image":"c.png","height_m":null,"persons":[]})" << "\n";
    const auto records = load_annotations(dir / "ok.jsonl");
    REQUIRE(records.size() == 2);
    CHECK(records[0].height_m == 2);
    CHECK_FALSE(records[1].height_m.has_value());
    CHECK(records[0].persons[0].label == ActivityLabel::punching);
}

TEST_CASE("validation against image bounds") {
    AnnotationRecord r = single_person(ActivityLabel::neutral);
    CHECK_NOTHROW(validate_record(r, std::pair{20, 20}));
    CHECK_THROWS_AS(validate_record(r, std::pair{8, 8}), AnnotationError);
}

TEST_CASE("annotations round-trip byte for byte modulo whitespace") {
    const auto dir = temp_dir("roundtrip");
    std::vector<AnnotationRecord> records;
    for (int i = 0; i < 5; ++i) records.push_back(render_image(quiet_config(), i).record);
    records[2].height_m.reset();
    save_annotations(dir / "a.jsonl", records);

    // reformatted copy with extra whitespace must load to the same records
    std::string text = read_file(dir / "a.jsonl");
    std::string spaced;
    for (char c : text) {
        spaced += c;
        if (c == ',' || c == ':') spaced += ' ';
    }
    std::ofstream(dir / "b.jsonl") << spaced << "\n\n";
    save_annotations(dir / "c.jsonl", load_annotations(dir / "b.jsonl"));
    CHECK(strip_whitespace(read_file(dir / "c.jsonl")) == strip_whitespace(text));
    save_annotations(dir / "d.jsonl", load_annotations(dir / "a.jsonl"));
    CHECK(read_file(dir / "d.jsonl") == text);
}

TEST_CASE("split sizes, determinism, disjointness") {
    std::vector<AnnotationRecord> ten;
    for (int i = 0; i < 10; ++i) ten.push_back(single_person(svm::kAllLabels[static_cast<std::size_t>(i % 6)]));
    const DatasetSplit s = split(ten, 3);
    CHECK(s.train.size() == 6);
    CHECK(s.val.size() == 2);
    CHECK(s.test.size() == 2);

    // 10558 person regions spread over two-person records
    std::vector<AnnotationRecord> big;
    for (int i = 0; i < 5279; ++i) {
        AnnotationRecord r = single_person(svm::kAllLabels[static_cast<std::size_t>(i % 6)]);
        r.persons.push_back(single_person(svm::kAllLabels[static_cast<std::size_t>((i * 7 + 3) % 6)]).persons[0]);
        big.push_back(r);
    }
    const DatasetSplit b = split(big, 11);
    CHECK(b.train.size() == 6334);
    CHECK(b.val.size() == 2111);
    CHECK(b.test.size() == 2113);

    const DatasetSplit again = split(big, 11);
    CHECK(again.train == b.train);
    CHECK(again.val == b.val);
    CHECK(again.test == b.test);
    CHECK(split(big, 12).train != b.train);

    std::set<int> all;
    for (const auto* part : {&b.train, &b.val, &b.test}) all.insert(part->begin(), part->end());
    CHECK(all.size() == 10558);
    CHECK(*all.begin() == 0);
    CHECK(*all.rbegin() == 10557);

    std::vector<AnnotationRecord> four(4, single_person(ActivityLabel::neutral));
    CHECK_THROWS_AS(split(four, 0), ParameterError);
}

TEST_CASE("split is label-stratified") {
    std::mt19937_64 rng(5);
    std::vector<AnnotationRecord> records;
    std::discrete_distribution<int> pick({1, 2, 3, 4, 5, 20});
    for (int i = 0; i < 700; ++i) records.push_back(single_person(svm::kAllLabels[static_cast<std::size_t>(pick(rng))]));
    const auto regions = flatten_regions(records);
    const DatasetSplit s = split(records, 42);
    std::array<int, svm::kNumClasses> total{};
    for (const auto& r : regions) ++total[static_cast<std::size_t>(svm::index_of(records[static_cast<std::size_t>(r.record)].persons[0].label))];
    auto counts = [&](const std::vector<int>& idx) {
        std::array<int, svm::kNumClasses> c{};
        for (int i : idx) {
            const auto& r = regions[static_cast<std::size_t>(i)];
            ++c[static_cast<std::size_t>(svm::index_of(records[static_cast<std::size_t>(r.record)].persons[0].label))];
        }
        return c;
    };
    const auto tr = counts(s.train);
    const auto va = counts(s.val);
    for (int c = 0; c < svm::kNumClasses; ++c) {
        CHECK(std::abs(tr[static_cast<std::size_t>(c)] - 0.6 * total[static_cast<std::size_t>(c)]) <= 2.0);
        CHECK(std::abs(va[static_cast<std::size_t>(c)] - 0.2 * total[static_cast<std::size_t>(c)]) <= 2.0);
    }
}

TEST_CASE("neutral template with zero jitter stands upright") {
    std::mt19937_64 rng(1);
    const BodyPose p = sample_activity_pose(ActivityLabel::neutral, rng, 0.0);
    const auto& k = p.keypoints.points;
    CHECK(k[0].y > k[1].y);
    CHECK(k[1].y > 0.5 * (k[8].y + k[11].y));
    const pose::AngleVector a = pose::orientation_vector(pose::build_skeleton(flip_y(p.keypoints)));
    // upper arm, forearm, thigh and shin edges on both sides
    for (int e : {2, 3, 5, 6, 10, 11, 12, 13}) CHECK(std::abs(a.values[static_cast<std::size_t>(e)] - 270.0) <= 10.0);
}

TEST_CASE("kicking raises an ankle above the hips") {
    std::mt19937_64 rng(2);
    int satisfied = 0;
    for (int i = 0; i < 1000; ++i) {
        const auto& k = sample_activity_pose(ActivityLabel::kicking, rng).keypoints.points;
        if (std::max(k[10].y, k[13].y) > std::min(k[8].y, k[11].y)) ++satisfied;
    }
    CHECK(satisfied >= 990);
}

TEST_CASE("pose sampling is deterministic and limb lengths stay bounded") {
    std::mt19937_64 a(9);
    std::mt19937_64 b(9);
    for (ActivityLabel label : svm::kAllLabels) {
        const BodyPose pa = sample_activity_pose(label, a);
        const BodyPose pb = sample_activity_pose(label, b);
        for (int i = 0; i < pose::kNumKeypoints; ++i) {
            CHECK(pa.keypoints.points[static_cast<std::size_t>(i)].x == pb.keypoints.points[static_cast<std::size_t>(i)].x);
            CHECK(pa.keypoints.points[static_cast<std::size_t>(i)].y == pb.keypoints.points[static_cast<std::size_t>(i)].y);
        }
    }
    std::mt19937_64 rng(4);
    const auto& edges = pose::skeleton_edges();
    std::vector<double> lo(edges.size(), 1e9);
    std::vector<double> hi(edges.size(), 0.0);
    for (int i = 0; i < 3000; ++i) {
        const auto& k = sample_activity_pose(svm::kAllLabels[static_cast<std::size_t>(i % 6)], rng).keypoints.points;
        for (std::size_t e = 0; e < edges.size(); ++e) {
            const double len = dist(k[static_cast<std::size_t>(edges[e].from)], k[static_cast<std::size_t>(edges[e].to)]);
            lo[e] = std::min(lo[e], len);
            hi[e] = std::max(hi[e], len);
        }
    }
    // every edge except the two shoulder-to-hip sides is a directly sampled limb
    for (std::size_t e = 0; e < edges.size(); ++e) {
        CHECK(lo[e] > 0.0);
        if (e == 7 || e == 8) continue;
        CHECK(hi[e] / lo[e] <= 1.1 / 0.9 + 1e-12);
    }
}

TEST_CASE("keypoints lie on rendered limb pixels") {
    std::mt19937_64 prng(3);
    for (ActivityLabel label : svm::kAllLabels) {
        const BodyPose p = sample_activity_pose(label, prng);
        std::mt19937_64 rng(8);
        const RenderedPerson r = render_stick_figure(p, clean_params(0.7), 100.0, rng);
        CHECK(r.region.rows() == kRegionRows);
        CHECK(r.region.cols() == kRegionCols);
        CHECK(r.label == label);
        const double background_max = 0.3 + 0.06;
        for (const Point& q : r.keypoints.points) {
            const int row = static_cast<int>(std::floor(q.y));
            const int col = static_cast<int>(std::floor(q.x));
            REQUIRE(row >= 0);
            REQUIRE(row < kRegionRows);
            REQUIRE(col >= 0);
            REQUIRE(col < kRegionCols);
            CHECK(r.region(row, col) > background_max);
        }
    }
}

TEST_CASE("keypoints track scale and rotation") {
    std::mt19937_64 prng(6);
    const BodyPose p = sample_activity_pose(ActivityLabel::punching, prng);
    std::mt19937_64 rng(1);
    const RenderedPerson full = render_stick_figure(p, clean_params(1.0), 60.0, rng);
    const RenderedPerson half = render_stick_figure(p, clean_params(0.5), 60.0, rng);
    const RenderedPerson turned = render_stick_figure(p, clean_params(1.0, 25.0), 60.0, rng);
    for (int i = 0; i < pose::kNumKeypoints; ++i) {
        for (int j = i + 1; j < pose::kNumKeypoints; ++j) {
            const auto ui = static_cast<std::size_t>(i);
            const auto uj = static_cast<std::size_t>(j);
            const double d = dist(full.keypoints.points[ui], full.keypoints.points[uj]);
            CHECK(std::abs(dist(half.keypoints.points[ui], half.keypoints.points[uj]) - 0.5 * d) <= 0.5);
            CHECK(std::abs(dist(turned.keypoints.points[ui], turned.keypoints.points[uj]) - d) <= 0.5);
        }
    }
    // rotating by +25 degrees (counter-clockwise, y up) turns the neck-to-head direction
    const pose::AngleVector a0 = pose::orientation_vector(pose::build_skeleton(full.keypoints));
    const pose::AngleVector a1 = pose::orientation_vector(pose::build_skeleton(turned.keypoints));
    CHECK(std::abs(std::remainder(a1.values[0] - a0.values[0] - 25.0, 360.0)) < 1e-9);
}

TEST_CASE("rendering is reproducible from the seed") {
    std::mt19937_64 prng(2);
    const BodyPose p = sample_activity_pose(ActivityLabel::stabbing, prng);
    RenderParams params = clean_params(0.8, 5.0);
    params.blur_sigma = 0.7;
    params.noise_sigma = 0.02;
    std::mt19937_64 a(77);
    std::mt19937_64 b(77);
    const Grid ia = quantize_gray8(render_stick_figure(p, params, 100.0, a).region * 255.0);
    const Grid ib = quantize_gray8(render_stick_figure(p, params, 100.0, b).region * 255.0);
    CHECK(ia == ib);

    const SyntheticConfig config = quiet_config();
    const SyntheticImage x = render_image(config, 12);
    const SyntheticImage y = render_image(config, 12);
    CHECK(x.pixels == y.pixels);
    CHECK(x.pixels != render_image(config, 13).pixels);
}

TEST_CASE("synthetic composition: person counts, violent share, label balance") {
    const SyntheticConfig config = quiet_config();
    int persons = 0;
    int violent = 0;
    std::map<ActivityLabel, int> per_label;
    std::set<int> counts;
    for (int i = 0; i < 200; ++i) {
        const SyntheticImage img = render_image(config, i);
        CHECK(img.pixels.rows() == config.image_height);
        CHECK(img.pixels.cols() == config.image_width);
        CHECK(img.pixels.minCoeff() >= 0.0);
        CHECK(img.pixels.maxCoeff() <= 1.0);
        CHECK_NOTHROW(validate_record(img.record, std::pair{config.image_width, config.image_height}));
        const int n = static_cast<int>(img.record.persons.size());
        counts.insert(n);
        CHECK(n >= 2);
        CHECK(n <= 10);
        if (i == 99) {
            CHECK(persons + n >= 200);
            CHECK(persons + n <= 1000);
        }
        persons += n;
        for (const auto& p : img.record.persons) {
            ++per_label[p.label];
            if (svm::is_violent(p.label)) ++violent;
        }
    }
    CHECK(counts.size() == 9);
    const double share = static_cast<double>(violent) / persons;
    CHECK(share >= 0.43);
    CHECK(share <= 0.53);
    for (ActivityLabel label : svm::kAllLabels) {
        if (!svm::is_violent(label)) continue;
        const double f = static_cast<double>(per_label[label]) / violent;
        CHECK(f >= 0.15);
        CHECK(f <= 0.25);
    }
}

TEST_CASE("generated datasets survive disk and reload") {
    const auto dir = temp_dir("generate");
    SyntheticConfig config = quiet_config();
    config.seed = 23;
    const auto records = generate_dataset(config, 4, dir);
    REQUIRE(records.size() == 4);
    save_annotations(dir / "annotations.jsonl", records);
    const auto loaded = load_annotations(dir / "annotations.jsonl");
    REQUIRE(loaded.size() == 4);
    for (std::size_t i = 0; i < loaded.size(); ++i) {
        const Grid png = read_png_gray8(dir / loaded[i].image);
        CHECK(png == quantize_gray8(render_image(config, static_cast<int>(i)).pixels * 255.0));
        CHECK_NOTHROW(validate_record(loaded[i], std::pair{static_cast<int>(png.cols()), static_cast<int>(png.rows())}));
        CHECK(loaded[i].persons.size() == records[i].persons.size());
    }
    const auto again = generate_dataset(config, 4, temp_dir("generate2"));
    save_annotations(dir / "again.jsonl", again);
    CHECK(read_file(dir / "again.jsonl") == read_file(dir / "annotations.jsonl"));
    CHECK_THROWS_AS(generate_dataset(config, 0, dir), ParameterError);
}

TEST_CASE("crop_region and region_keypoints agree") {
    const SyntheticImage img = render_image(quiet_config(), 3);
    for (const auto& person : img.record.persons) {
        const Grid region = crop_region(img.pixels, person.box);
        CHECK(region.rows() == kRegionRows);
        CHECK(region.cols() == kRegionCols);
        const KeypointSet k = region_keypoints(person);
        const KeypointSet back = pose::region_to_image(k, person.box, kRegionCols, kRegionRows);
        for (int i = 0; i < pose::kNumKeypoints; ++i) {
            const auto u = static_cast<std::size_t>(i);
            CHECK(k.points[u].x >= 0.0);
            CHECK(k.points[u].x <= kRegionCols);
            CHECK(k.points[u].y >= 0.0);
            CHECK(k.points[u].y <= kRegionRows);
            CHECK(dist(back.points[u], person.keypoints.points[u]) < 1e-9);
        }
    }
}

TEST_CASE("config validation") {
    SyntheticConfig c;
    CHECK_NOTHROW(c.validate());
    c.max_persons = 11;
    CHECK_THROWS_AS(c.validate(), ConfigError);
    c = {};
    c.min_persons = 1;
    CHECK_THROWS_AS(c.validate(), ConfigError);
    c = {};
    c.blur_max = -1.0;
    CHECK_THROWS_AS(c.validate(), ConfigError);
    c = {};
    c.height_scales.pop_back();
    CHECK_THROWS_AS(c.validate(), ConfigError);
}

TEST_CASE("templates are linearly separable from ground-truth angles") {
    // ridge regression onto one-hot targets over standardized features
    std::mt19937_64 rng(31);
    auto features = [&](int per_class, std::vector<int>& y) {
        Eigen::MatrixXd x(per_class * svm::kNumClasses, svm::kSvmFeatureSize);
        int row = 0;
        for (int i = 0; i < per_class; ++i) {
            for (int c = 0; c < svm::kNumClasses; ++c) {
                const BodyPose p = sample_activity_pose(svm::kAllLabels[static_cast<std::size_t>(c)], rng);
                x.row(row++) = svm::svm_features(pose::orientation_vector(pose::build_skeleton(flip_y(p.keypoints)))).transpose();
                y.push_back(c);
            }
        }
        return x;
    };
    std::vector<int> ytr;
    std::vector<int> yte;
    Eigen::MatrixXd xtr = features(300, ytr);
    Eigen::MatrixXd xte = features(300, yte);
    const Eigen::RowVectorXd mean = xtr.colwise().mean();
    const Eigen::RowVectorXd sd = ((xtr.rowwise() - mean).array().square().colwise().mean().sqrt() + 1e-12).matrix();
    auto prep = [&](const Eigen::MatrixXd& x) {
        Eigen::MatrixXd z(x.rows(), x.cols() + 1);
        z.leftCols(x.cols()) = ((x.rowwise() - mean).array().rowwise() / sd.array()).matrix();
        z.col(x.cols()).setOnes();
        return z;
    };
    const Eigen::MatrixXd ztr = prep(xtr);
    Eigen::MatrixXd t = Eigen::MatrixXd::Zero(ztr.rows(), svm::kNumClasses);
    for (std::size_t i = 0; i < ytr.size(); ++i) t(static_cast<Eigen::Index>(i), ytr[i]) = 1.0;
    const Eigen::MatrixXd a = ztr.transpose() * ztr + 1e-3 * Eigen::MatrixXd::Identity(ztr.cols(), ztr.cols());
    const Eigen::MatrixXd w = a.ldlt().solve(ztr.transpose() * t);
    const Eigen::MatrixXd scores = prep(xte) * w;
    int correct = 0;
    for (Eigen::Index i = 0; i < scores.rows(); ++i) {
        Eigen::Index best = 0;
        scores.row(i).maxCoeff(&best);
        if (best == yte[static_cast<std::size_t>(i)]) ++correct;
    }
    CHECK(static_cast<double>(correct) / static_cast<double>(scores.rows()) >= 0.95);
}
