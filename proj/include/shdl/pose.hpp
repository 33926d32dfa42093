#pragma once

#include "shdl/grid.hpp"

#include <Eigen/Dense>

#include <array>
#include <filesystem>
#include <string>
#include <vector>

namespace shdl::pose {

inline constexpr int kNumKeypoints = 14;
inline constexpr int kNumEdges = 14;
inline constexpr int kNumJointPairs = 13;
/// Absolute edge angles followed by joint relative angles.
inline constexpr int kAngleVectorSize = kNumEdges + kNumJointPairs;
/// Limbs shorter than this (pixels) are degenerate.
inline constexpr double kDegenerateLength = 1e-9;

struct Point {
    double x = 0.0;
    double y = 0.0;
};

/// P1 head, P2 neck, P3/P6 shoulders, P4/P7 elbows, P5/P8 wrists,
/// P9/P12 hips, P10/P13 knees, P11/P14 ankles; stored 0-based. The first
/// point of each pair is named as the right side.
struct KeypointSet {
    std::array<Point, kNumKeypoints> points{};
};

const std::array<std::string, kNumKeypoints>& keypoint_names();

struct Edge {
    int from = 0;
    int to = 0;
};

/// P1-P2, P2-P3, P3-P4, P4-P5, P2-P6, P6-P7, P7-P8, P3-P9, P6-P12, P9-P12,
/// P9-P10, P10-P11, P12-P13, P13-P14.
const std::array<Edge, kNumEdges>& skeleton_edges();

/// Edge index pairs meeting at a joint: neck (head/right clavicle, head/left
/// clavicle, right/left clavicle), shoulders (clavicle/upper arm, upper
/// arm/flank), elbows, hips (flank/thigh) and knees.
const std::array<std::array<int, 2>, kNumJointPairs>& joint_pairs();

/// Keypoint groups for summaries: facial (head, neck), arms (shoulders,
/// elbows, wrists) and legs (hips, knees, ankles).
const std::vector<int>& facial_group();
const std::vector<int>& arms_group();
const std::vector<int>& legs_group();

struct Skeleton {
    KeypointSet keypoints;
    std::array<Edge, kNumEdges> edges{};
    std::array<bool, kNumEdges> degenerate{};
};

struct BoundingBox {
    double x = 0.0;
    double y = 0.0;
    double w = 0.0;
    double h = 0.0;
};

/// (x_i, y_i) = (v[2i] * region_w, v[2i+1] * region_h), clamped to
/// [0, region_w] x [0, region_h]. Throws DimensionError unless v has 28 entries.
KeypointSet decode_keypoints(const Eigen::VectorXd& v, double region_w, double region_h);
/// Inverse of decode_keypoints for in-bounds points.
Eigen::VectorXd encode_keypoints(const KeypointSet& kps, double region_w, double region_h);

/// Maps region pixel coordinates to image pixels through the box the region
/// was resampled from, and back.
KeypointSet region_to_image(const KeypointSet& kps, const BoundingBox& box, double region_w, double region_h);
KeypointSet image_to_region(const KeypointSet& kps, const BoundingBox& box, double region_w, double region_h);

Skeleton build_skeleton(const KeypointSet& kps);

/// Column order: abs_<edge> for the 14 edges in skeleton_edges() order,
/// degrees in [0, 360) with the y axis pointing up (an upward limb is 90);
/// then rel_<edge>_<edge> for joint_pairs(), the absolute difference folded
/// to [0, 180]. Degenerate limbs give 0 and set the mask for every entry
/// they feed.
struct AngleVector {
    std::array<double, kAngleVectorSize> values{};
    std::array<bool, kAngleVectorSize> degenerate{};

    Eigen::VectorXd to_eigen() const;
};

const std::vector<std::string>& angle_vector_columns();

AngleVector orientation_vector(const Skeleton& skel);

struct PckResult {
    std::array<bool, kNumKeypoints> hits{};
    double accuracy = 0.0;
};

/// A keypoint is a hit when its Euclidean error is at most d.
PckResult pck_at_d(const KeypointSet& pred, const KeypointSet& truth, double d);

/// Accuracy per keypoint and mean, pooled over many persons, for each d.
struct PckCurve {
    std::vector<double> distances;
    std::vector<std::array<double, kNumKeypoints>> per_keypoint;
    std::vector<double> mean;
};

PckCurve pck_curve(const std::vector<KeypointSet>& preds, const std::vector<KeypointSet>& truths,
                   const std::vector<double>& distances);

/// Columns: d, one per keypoint name, facial, arms, legs, mean.
void write_pck_csv(const std::filesystem::path& path, const PckCurve& curve);

/// Columns: person, then angle_vector_columns().
void write_angle_csv(const std::filesystem::path& path, const std::vector<AngleVector>& rows);

}  // namespace shdl::pose
