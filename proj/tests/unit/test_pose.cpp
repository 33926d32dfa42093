#include "shdl/pose.hpp"

#include <doctest.h>

#include <cmath>
#include <filesystem>
#include <fstream>
#include <numbers>
#include <random>
#include <set>
#include <sstream>

using namespace shdl;
using namespace shdl::pose;

namespace {

KeypointSet random_keypoints(std::mt19937_64& rng, double w = 80.0, double h = 120.0) {
    std::uniform_real_distribution<double> ux(0.0, w);
    std::uniform_real_distribution<double> uy(0.0, h);
    KeypointSet k;
    for (Point& p : k.points) p = {ux(rng), uy(rng)};
    return k;
}

// Circular distance between two angles in degrees.
double angle_gap(double a, double b) {
    const double d = std::fmod(std::abs(a - b), 360.0);
    return std::min(d, 360.0 - d);
}

KeypointSet transform(const KeypointSet& k, double rot_deg, double scale, Point shift) {
    Point c{};
    for (const Point& p : k.points) {
        c.x += p.x / kNumKeypoints;
        c.y += p.y / kNumKeypoints;
    }
    // counter-clockwise on screen, i.e. positive in the y-up convention
    const double t = rot_deg * std::numbers::pi / 180.0;
    KeypointSet out;
    for (int i = 0; i < kNumKeypoints; ++i) {
        const Point& p = k.points[static_cast<std::size_t>(i)];
        const double dx = p.x - c.x;
        const double dy = -(p.y - c.y);
        const double rx = std::cos(t) * dx - std::sin(t) * dy;
        const double ry = std::sin(t) * dx + std::cos(t) * dy;
        out.points[static_cast<std::size_t>(i)] = {c.x + scale * rx + shift.x, c.y - scale * ry + shift.y};
    }
    return out;
}

std::vector<std::string> read_lines(const std::filesystem::path& p) {
    std::ifstream in(p);
    std::vector<std::string> lines;
    for (std::string l; std::getline(in, l);) lines.push_back(l);
    return lines;
}

}  // namespace

TEST_CASE("decode_keypoints scales, clamps and round trips") {
    const Eigen::VectorXd half = Eigen::VectorXd::Constant(28, 0.5);
    const KeypointSet k = decode_keypoints(half, 120, 80);
    for (const Point& p : k.points) {
        CHECK(p.x == 60.0);
        CHECK(p.y == 40.0);
    }
    Eigen::VectorXd v = half;
    v(6) = 1.2;
    v(7) = -0.1;
    const KeypointSet c = decode_keypoints(v, 120, 80);
    CHECK(c.points[3].x == 120.0);
    CHECK(c.points[3].y == 0.0);

    std::mt19937_64 rng(1);
    std::uniform_real_distribution<double> u(-0.3, 1.3);
    for (int t = 0; t < 50; ++t) {
        Eigen::VectorXd r(28);
        for (int i = 0; i < 28; ++i) r(i) = u(rng);
        const Eigen::VectorXd back = encode_keypoints(decode_keypoints(r, 80, 120), 80, 120);
        const Eigen::VectorXd clamped = r.cwiseMax(0.0).cwiseMin(1.0);
        CHECK((back - clamped).cwiseAbs().maxCoeff() < 1e-15);
    }
    CHECK_THROWS_AS(decode_keypoints(Eigen::VectorXd::Zero(27), 80, 120), DimensionError);
}

TEST_CASE("region and image coordinates are inverse maps") {
    std::mt19937_64 rng(2);
    const BoundingBox box{31.5, 12.0, 47.0, 90.0};
    const KeypointSet k = random_keypoints(rng);
    const KeypointSet img = region_to_image(k, box, 80, 120);
    CHECK(img.points[0].x == doctest::Approx(box.x + k.points[0].x * 47.0 / 80.0));
    const KeypointSet back = image_to_region(img, box, 80, 120);
    for (int i = 0; i < kNumKeypoints; ++i) {
        CHECK(back.points[static_cast<std::size_t>(i)].x == doctest::Approx(k.points[static_cast<std::size_t>(i)].x));
        CHECK(back.points[static_cast<std::size_t>(i)].y == doctest::Approx(k.points[static_cast<std::size_t>(i)].y));
    }
}

TEST_CASE("skeleton has the fixed 14-edge list with valid endpoints") {
    std::mt19937_64 rng(3);
    const Skeleton a = build_skeleton(random_keypoints(rng));
    const Skeleton b = build_skeleton(random_keypoints(rng));
    CHECK(a.edges.size() == 14);
    std::set<std::pair<int, int>> unique;
    for (int e = 0; e < kNumEdges; ++e) {
        const Edge& x = a.edges[static_cast<std::size_t>(e)];
        CHECK(x.from >= 0);
        CHECK(x.to < kNumKeypoints);
        CHECK(x.from != x.to);
        CHECK(x.from == b.edges[static_cast<std::size_t>(e)].from);
        CHECK(x.to == b.edges[static_cast<std::size_t>(e)].to);
        unique.insert({x.from, x.to});
    }
    CHECK(unique.size() == 14);
    // every keypoint is on the skeleton
    std::set<int> touched;
    for (const Edge& x : a.edges) {
        touched.insert(x.from);
        touched.insert(x.to);
    }
    CHECK(touched.size() == 14);
    // joint pairs share a keypoint
    for (const auto& p : joint_pairs()) {
        const Edge& e0 = a.edges[static_cast<std::size_t>(p[0])];
        const Edge& e1 = a.edges[static_cast<std::size_t>(p[1])];
        CHECK((e0.from == e1.from || e0.from == e1.to || e0.to == e1.from || e0.to == e1.to));
    }
}

TEST_CASE("coincident head and neck give a flagged degenerate limb") {
    std::mt19937_64 rng(4);
    KeypointSet k = random_keypoints(rng);
    k.points[0] = k.points[1];
    const Skeleton s = build_skeleton(k);
    CHECK(s.degenerate[0]);
    for (int e = 1; e < kNumEdges; ++e) CHECK_FALSE(s.degenerate[static_cast<std::size_t>(e)]);
    const AngleVector a = orientation_vector(s);
    CHECK(a.values[0] == 0.0);
    CHECK(a.degenerate[0]);
    for (int j = 0; j < kNumJointPairs; ++j) {
        const auto& p = joint_pairs()[static_cast<std::size_t>(j)];
        const bool uses_head = p[0] == 0 || p[1] == 0;
        CHECK(a.degenerate[static_cast<std::size_t>(kNumEdges + j)] == uses_head);
        if (uses_head) CHECK(a.values[static_cast<std::size_t>(kNumEdges + j)] == 0.0);
    }
}

TEST_CASE("angle convention: image-up limb is 90 degrees") {
    KeypointSet k;
    for (int i = 0; i < kNumKeypoints; ++i) k.points[static_cast<std::size_t>(i)] = {10.0 * i, 3.0 * i * i};
    k.points[0] = {0.0, 0.0};
    k.points[1] = {0.0, -5.0};
    CHECK(orientation_vector(build_skeleton(k)).values[0] == doctest::Approx(90.0));
    k.points[1] = {5.0, 0.0};
    CHECK(orientation_vector(build_skeleton(k)).values[0] == doctest::Approx(0.0));
    k.points[1] = {0.0, 5.0};
    CHECK(orientation_vector(build_skeleton(k)).values[0] == doctest::Approx(270.0));
    k.points[1] = {-5.0, 0.0};
    CHECK(orientation_vector(build_skeleton(k)).values[0] == doctest::Approx(180.0));
}

TEST_CASE("angle vector ranges and column layout") {
    CHECK(angle_vector_columns().size() == static_cast<std::size_t>(kAngleVectorSize));
    CHECK(angle_vector_columns()[0] == "abs_head-neck");
    std::mt19937_64 rng(5);
    for (int t = 0; t < 200; ++t) {
        const AngleVector a = orientation_vector(build_skeleton(random_keypoints(rng)));
        for (int i = 0; i < kNumEdges; ++i) {
            CHECK(a.values[static_cast<std::size_t>(i)] >= 0.0);
            CHECK(a.values[static_cast<std::size_t>(i)] < 360.0);
        }
        for (int i = kNumEdges; i < kAngleVectorSize; ++i) {
            CHECK(a.values[static_cast<std::size_t>(i)] >= 0.0);
            CHECK(a.values[static_cast<std::size_t>(i)] <= 180.0);
        }
    }
}

TEST_CASE("angle vector is invariant to translation and scale, equivariant to rotation") {
    std::mt19937_64 rng(6);
    std::uniform_real_distribution<double> shift(-50.0, 50.0);
    std::uniform_real_distribution<double> scale(0.2, 5.0);
    std::uniform_real_distribution<double> rot(-180.0, 180.0);
    for (int t = 0; t < 1000; ++t) {
        const KeypointSet k = random_keypoints(rng);
        const AngleVector base = orientation_vector(build_skeleton(k));

        const Point s{shift(rng), shift(rng)};
        KeypointSet moved = k;
        for (Point& p : moved.points) {
            p.x += s.x;
            p.y += s.y;
        }
        const AngleVector tr = orientation_vector(build_skeleton(moved));
        const AngleVector sc = orientation_vector(build_skeleton(transform(k, 0.0, scale(rng), {0.0, 0.0})));
        const double deg = t == 0 ? 30.0 : rot(rng);
        const AngleVector ro = orientation_vector(build_skeleton(transform(k, deg, 1.0, {0.0, 0.0})));
        for (int i = 0; i < kAngleVectorSize; ++i) {
            const auto ui = static_cast<std::size_t>(i);
            CHECK(angle_gap(tr.values[ui], base.values[ui]) < 1e-9);
            CHECK(angle_gap(sc.values[ui], base.values[ui]) < 1e-9);
            if (i < kNumEdges) {
                CHECK(angle_gap(ro.values[ui], base.values[ui] + deg) < 1e-9);
            } else {
                CHECK(std::abs(ro.values[ui] - base.values[ui]) < 1e-9);
            }
        }
    }
}

TEST_CASE("pck examples and monotonicity") {
    std::mt19937_64 rng(7);
    const KeypointSet truth = random_keypoints(rng);
    const PckResult same = pck_at_d(truth, truth, 0.0);
    CHECK(same.accuracy == 1.0);
    KeypointSet off = truth;
    off.points[5].x += 6.0;
    const PckResult r = pck_at_d(off, truth, 5.0);
    CHECK(r.accuracy == doctest::Approx(13.0 / 14.0));
    CHECK_FALSE(r.hits[5]);
    CHECK(pck_at_d(off, truth, 6.0).accuracy == 1.0);
    CHECK_THROWS_AS(pck_at_d(off, truth, -1.0), ParameterError);

    std::vector<KeypointSet> preds, truths;
    std::normal_distribution<double> noise(0.0, 4.0);
    for (int p = 0; p < 30; ++p) {
        KeypointSet t = random_keypoints(rng);
        KeypointSet q = t;
        for (Point& x : q.points) {
            x.x += noise(rng);
            x.y += noise(rng);
        }
        truths.push_back(t);
        preds.push_back(q);
    }
    const std::vector<double> ds{0, 1, 2, 3, 5, 8, 12, 20};
    const PckCurve c = pck_curve(preds, truths, ds);
    for (std::size_t i = 1; i < ds.size(); ++i) {
        CHECK(c.mean[i] >= c.mean[i - 1]);
        for (int k = 0; k < kNumKeypoints; ++k)
            CHECK(c.per_keypoint[i][static_cast<std::size_t>(k)] >= c.per_keypoint[i - 1][static_cast<std::size_t>(k)]);
    }
    const PckCurve perfect = pck_curve(truths, truths, ds);
    for (double m : perfect.mean) CHECK(m == 1.0);
}

TEST_CASE("pck and angle CSV exports have the documented headers") {
    std::mt19937_64 rng(8);
    const KeypointSet t = random_keypoints(rng);
    const auto dir = std::filesystem::temp_directory_path();
    write_pck_csv(dir / "shdl_pck.csv", pck_curve({t}, {t}, {0.0, 5.0}));
    const auto pck = read_lines(dir / "shdl_pck.csv");
    REQUIRE(pck.size() == 3);
    CHECK(pck[0].rfind("d,head,neck,", 0) == 0);
    CHECK(pck[0].find(",facial,arms,legs,mean") != std::string::npos);
    CHECK(pck[2].rfind("5,1,", 0) == 0);

    write_angle_csv(dir / "shdl_angles.csv", {orientation_vector(build_skeleton(t))});
    const auto ang = read_lines(dir / "shdl_angles.csv");
    REQUIRE(ang.size() == 2);
    std::stringstream header(ang[0]);
    int cols = 0;
    for (std::string f; std::getline(header, f, ',');) ++cols;
    CHECK(cols == 1 + kAngleVectorSize);
}
