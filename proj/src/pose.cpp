#include "shdl/pose.hpp"

#include <algorithm>
#include <cmath>
#include <cstdio>
#include <fstream>
#include <numbers>
#include <stdexcept>

namespace shdl::pose {

namespace {

constexpr int kGroupCount = 3;

double wrap_degrees(double a) {
    double w = std::fmod(a, 360.0);
    if (w < 0.0) w += 360.0;
    if (w >= 360.0) w -= 360.0;
    return w;
}

double fold_difference(double a, double b) {
    const double d = std::fmod(std::abs(a - b), 360.0);
    return d > 180.0 ? 360.0 - d : d;
}

std::string format_number(double v) {
    char buf[32];
    std::snprintf(buf, sizeof buf, "%.10g", v);
    return buf;
}

std::ofstream open_csv(const std::filesystem::path& path) {
    std::ofstream out(path);
    if (!out) throw std::runtime_error("cannot write " + path.string());
    return out;
}

double group_mean(const std::array<double, kNumKeypoints>& acc, const std::vector<int>& group) {
    double s = 0.0;
    for (int i : group) s += acc[static_cast<std::size_t>(i)];
    return s / static_cast<double>(group.size());
}

}  // namespace

const std::array<std::string, kNumKeypoints>& keypoint_names() {
    static const std::array<std::string, kNumKeypoints> names{
        "head",      "neck",      "r_shoulder", "r_elbow", "r_wrist", "l_shoulder", "l_elbow",
        "l_wrist",   "r_hip",     "r_knee",     "r_ankle", "l_hip",   "l_knee",     "l_ankle"};
    return names;
}

const std::array<Edge, kNumEdges>& skeleton_edges() {
    static const std::array<Edge, kNumEdges> edges{{{0, 1},
                                                    {1, 2},
                                                    {2, 3},
                                                    {3, 4},
                                                    {1, 5},
                                                    {5, 6},
                                                    {6, 7},
                                                    {2, 8},
                                                    {5, 11},
                                                    {8, 11},
                                                    {8, 9},
                                                    {9, 10},
                                                    {11, 12},
                                                    {12, 13}}};
    return edges;
}

const std::array<std::array<int, 2>, kNumJointPairs>& joint_pairs() {
    static const std::array<std::array<int, 2>, kNumJointPairs> pairs{{{0, 1},
                                                                       {0, 4},
                                                                       {1, 4},
                                                                       {1, 2},
                                                                       {2, 7},
                                                                       {2, 3},
                                                                       {4, 5},
                                                                       {5, 8},
                                                                       {5, 6},
                                                                       {7, 10},
                                                                       {10, 11},
                                                                       {8, 12},
                                                                       {12, 13}}};
    return pairs;
}

const std::vector<int>& facial_group() {
    static const std::vector<int> g{0, 1};
    return g;
}

const std::vector<int>& arms_group() {
    static const std::vector<int> g{2, 3, 4, 5, 6, 7};
    return g;
}

const std::vector<int>& legs_group() {
    static const std::vector<int> g{8, 9, 10, 11, 12, 13};
    return g;
}

KeypointSet decode_keypoints(const Eigen::VectorXd& v, double region_w, double region_h) {
    if (v.size() != 2 * kNumKeypoints) {
        throw DimensionError("decode_keypoints: expected 28 values, got " + std::to_string(v.size()));
    }
    if (!(region_w > 0.0) || !(region_h > 0.0)) throw ParameterError("decode_keypoints: region size must be positive");
    KeypointSet k;
    for (int i = 0; i < kNumKeypoints; ++i) {
        k.points[static_cast<std::size_t>(i)] = {std::clamp(v(2 * i) * region_w, 0.0, region_w),
                                                 std::clamp(v(2 * i + 1) * region_h, 0.0, region_h)};
    }
    return k;
}

Eigen::VectorXd encode_keypoints(const KeypointSet& kps, double region_w, double region_h) {
    if (!(region_w > 0.0) || !(region_h > 0.0)) throw ParameterError("encode_keypoints: region size must be positive");
    Eigen::VectorXd v(2 * kNumKeypoints);
    for (int i = 0; i < kNumKeypoints; ++i) {
        v(2 * i) = kps.points[static_cast<std::size_t>(i)].x / region_w;
        v(2 * i + 1) = kps.points[static_cast<std::size_t>(i)].y / region_h;
    }
    return v;
}

KeypointSet region_to_image(const KeypointSet& kps, const BoundingBox& box, double region_w, double region_h) {
    KeypointSet out;
    for (int i = 0; i < kNumKeypoints; ++i) {
        const Point& p = kps.points[static_cast<std::size_t>(i)];
        out.points[static_cast<std::size_t>(i)] = {box.x + p.x * box.w / region_w, box.y + p.y * box.h / region_h};
    }
    return out;
}

KeypointSet image_to_region(const KeypointSet& kps, const BoundingBox& box, double region_w, double region_h) {
    if (!(box.w > 0.0) || !(box.h > 0.0)) throw ParameterError("image_to_region: empty box");
    KeypointSet out;
    for (int i = 0; i < kNumKeypoints; ++i) {
        const Point& p = kps.points[static_cast<std::size_t>(i)];
        out.points[static_cast<std::size_t>(i)] = {(p.x - box.x) * region_w / box.w, (p.y - box.y) * region_h / box.h};
    }
    return out;
}

Skeleton build_skeleton(const KeypointSet& kps) {
    Skeleton s;
    s.keypoints = kps;
    s.edges = skeleton_edges();
    for (int e = 0; e < kNumEdges; ++e) {
        const Point& a = kps.points[static_cast<std::size_t>(s.edges[static_cast<std::size_t>(e)].from)];
        const Point& b = kps.points[static_cast<std::size_t>(s.edges[static_cast<std::size_t>(e)].to)];
        s.degenerate[static_cast<std::size_t>(e)] = std::hypot(b.x - a.x, b.y - a.y) < kDegenerateLength;
    }
    return s;
}

Eigen::VectorXd AngleVector::to_eigen() const {
    Eigen::VectorXd v(kAngleVectorSize);
    for (int i = 0; i < kAngleVectorSize; ++i) v(i) = values[static_cast<std::size_t>(i)];
    return v;
}

const std::vector<std::string>& angle_vector_columns() {
    static const std::vector<std::string> columns = [] {
        const auto& names = keypoint_names();
        auto edge_name = [&](int e) {
            const Edge& edge = skeleton_edges()[static_cast<std::size_t>(e)];
            return names[static_cast<std::size_t>(edge.from)] + "-" + names[static_cast<std::size_t>(edge.to)];
        };
        std::vector<std::string> c;
        for (int e = 0; e < kNumEdges; ++e) c.push_back("abs_" + edge_name(e));
        for (const auto& p : joint_pairs()) c.push_back("rel_" + edge_name(p[0]) + "_" + edge_name(p[1]));
        return c;
    }();
    return columns;
}

AngleVector orientation_vector(const Skeleton& skel) {
    AngleVector out;
    for (int e = 0; e < kNumEdges; ++e) {
        const auto ue = static_cast<std::size_t>(e);
        if (skel.degenerate[ue]) {
            out.values[ue] = 0.0;
            out.degenerate[ue] = true;
            continue;
        }
        const Point& a = skel.keypoints.points[static_cast<std::size_t>(skel.edges[ue].from)];
        const Point& b = skel.keypoints.points[static_cast<std::size_t>(skel.edges[ue].to)];
        // image rows grow downwards; flip so that up is +90 degrees
        out.values[ue] = wrap_degrees(std::atan2(-(b.y - a.y), b.x - a.x) * 180.0 / std::numbers::pi);
    }
    for (int j = 0; j < kNumJointPairs; ++j) {
        const auto& p = joint_pairs()[static_cast<std::size_t>(j)];
        const auto slot = static_cast<std::size_t>(kNumEdges + j);
        const bool degenerate = out.degenerate[static_cast<std::size_t>(p[0])] || out.degenerate[static_cast<std::size_t>(p[1])];
        out.degenerate[slot] = degenerate;
        out.values[slot] =
            degenerate ? 0.0 : fold_difference(out.values[static_cast<std::size_t>(p[0])], out.values[static_cast<std::size_t>(p[1])]);
    }
    return out;
}

PckResult pck_at_d(const KeypointSet& pred, const KeypointSet& truth, double d) {
    if (!(d >= 0.0)) throw ParameterError("pck_at_d: d must be nonnegative");
    PckResult r;
    int hits = 0;
    for (int i = 0; i < kNumKeypoints; ++i) {
        const Point& a = pred.points[static_cast<std::size_t>(i)];
        const Point& b = truth.points[static_cast<std::size_t>(i)];
        const bool hit = std::hypot(a.x - b.x, a.y - b.y) <= d;
        r.hits[static_cast<std::size_t>(i)] = hit;
        hits += hit ? 1 : 0;
    }
    r.accuracy = static_cast<double>(hits) / kNumKeypoints;
    return r;
}

PckCurve pck_curve(const std::vector<KeypointSet>& preds, const std::vector<KeypointSet>& truths,
                   const std::vector<double>& distances) {
    if (preds.size() != truths.size()) throw DimensionError("pck_curve: prediction and truth counts differ");
    if (preds.empty()) throw DimensionError("pck_curve: no persons");
    PckCurve c;
    c.distances = distances;
    for (double d : distances) {
        std::array<double, kNumKeypoints> acc{};
        for (std::size_t p = 0; p < preds.size(); ++p) {
            const PckResult r = pck_at_d(preds[p], truths[p], d);
            for (int i = 0; i < kNumKeypoints; ++i) acc[static_cast<std::size_t>(i)] += r.hits[static_cast<std::size_t>(i)] ? 1.0 : 0.0;
        }
        double mean = 0.0;
        for (double& a : acc) {
            a /= static_cast<double>(preds.size());
            mean += a;
        }
        c.per_keypoint.push_back(acc);
        c.mean.push_back(mean / kNumKeypoints);
    }
    return c;
}

void write_pck_csv(const std::filesystem::path& path, const PckCurve& curve) {
    std::ofstream out = open_csv(path);
    out << "d";
    for (const std::string& n : keypoint_names()) out << ',' << n;
    out << ",facial,arms,legs,mean\n";
    for (std::size_t r = 0; r < curve.distances.size(); ++r) {
        out << format_number(curve.distances[r]);
        for (double a : curve.per_keypoint[r]) out << ',' << format_number(a);
        const std::array<double, kGroupCount> groups{group_mean(curve.per_keypoint[r], facial_group()),
                                                     group_mean(curve.per_keypoint[r], arms_group()),
                                                     group_mean(curve.per_keypoint[r], legs_group())};
        for (double g : groups) out << ',' << format_number(g);
        out << ',' << format_number(curve.mean[r]) << '\n';
    }
}

void write_angle_csv(const std::filesystem::path& path, const std::vector<AngleVector>& rows) {
    std::ofstream out = open_csv(path);
    out << "person";
    for (const std::string& c : angle_vector_columns()) out << ',' << c;
    out << '\n';
    for (std::size_t p = 0; p < rows.size(); ++p) {
        out << p;
        for (double v : rows[p].values) out << ',' << format_number(v);
        out << '\n';
    }
}

}  // namespace shdl::pose
