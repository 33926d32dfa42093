#pragma once

#include "shdl/grid.hpp"
#include "shdl/pose.hpp"
#include "shdl/svm.hpp"

#include <cstdint>
#include <filesystem>
#include <optional>
#include <random>
#include <string>
#include <vector>

namespace shdl::datasets {

/// Schema violation in an annotation file; the message names line and field.
struct AnnotationError : std::runtime_error {
    using std::runtime_error::runtime_error;
};

/// Network input region: rows x cols after resizing a detection box.
inline constexpr int kRegionRows = 120;
inline constexpr int kRegionCols = 80;

struct PersonAnnotation {
    pose::BoundingBox box;
    pose::KeypointSet keypoints;  // image pixels
    svm::ActivityLabel label = svm::ActivityLabel::neutral;
};

struct AnnotationRecord {
    std::string image;
    std::optional<int> height_m;
    std::vector<PersonAnnotation> persons;
};

/// Checks one record: 14 finite, nonnegative keypoints inside the box,
/// nonempty box, height in {2, 4, 6, 8}. With image dimensions given, also
/// checks that keypoints and box lie inside the image. Throws
/// AnnotationError naming the field.
void validate_record(const AnnotationRecord& record, std::optional<std::pair<int, int>> image_size = std::nullopt);

/// JSON lines: {"image", "height_m", "persons": [{"box", "keypoints", "label"}]}.
/// Blank lines are skipped; errors name the 1-based line and the field.
std::vector<AnnotationRecord> load_annotations(const std::filesystem::path& path);
void save_annotations(const std::filesystem::path& path, const std::vector<AnnotationRecord>& records);

/// A person region: record index and person index within it.
struct RegionRef {
    int record = 0;
    int person = 0;
};

std::vector<RegionRef> flatten_regions(const std::vector<AnnotationRecord>& records);

/// Indices into flatten_regions(records).
struct DatasetSplit {
    std::vector<int> train;
    std::vector<int> val;
    std::vector<int> test;
    std::uint64_t seed = 0;
};

/// Sizes floor(0.6 n), floor(0.2 n) and the remainder over person regions.
/// Needs at least 5 records; throws ParameterError otherwise.
/// Each label is shuffled with the seed and spread evenly through the
/// ordering, so every split receives its share of each label.
DatasetSplit split(const std::vector<AnnotationRecord>& records, std::uint64_t seed);

/// Keypoints in the body frame: origin at the hip midpoint, y up, unit =
/// nominal body height.
struct BodyPose {
    pose::KeypointSet keypoints;
    svm::ActivityLabel label = svm::ActivityLabel::neutral;
};

/// Draws limb directions from the activity template with Gaussian jitter of
/// `jitter_deg` (degrees) and limb lengths within 10% of nominal.
///
/// Templates (directions in the body frame, 270 = straight down; the figure
/// acts towards -x):
///   neutral    arms and legs hanging within 10 degrees of vertical
///   punching   right arm straight out to the side, left fist guarding the chin
///   stabbing   right arm raised overhead with the forearm striking down
///   shooting   both arms straight and level, pointing the same way
///   kicking    right leg raised with the ankle above hip height
///   strangling both arms forward at chest height with bent elbows
BodyPose sample_activity_pose(svm::ActivityLabel label, std::mt19937_64& rng, double jitter_deg = 6.0);

struct SyntheticConfig {
    int min_persons = 2;
    int max_persons = 10;
    std::vector<int> heights_m{2, 4, 6, 8};
    std::vector<double> height_scales{1.0, 0.7, 0.5, 0.35};
    int image_width = 640;
    int image_height = 150;
    double figure_height = 110.0;  // pixels at scale 1
    double crowding = 0.03;        // relative shrink per person beyond the minimum
    double blur_min = 0.0;
    double blur_max = 1.0;
    double brightness_jitter = 0.08;
    double contrast_min = 0.8;
    double contrast_max = 1.2;
    double rotation_jitter_deg = 8.0;
    double pose_jitter_deg = 6.0;
    double violent_fraction = 0.48;
    double texture_amplitude = 0.06;
    double shadow_strength = 0.15;
    double noise_sigma = 0.02;
    std::uint64_t seed = 0;

    void validate() const;
};

/// Appearance of one rendering.
struct RenderParams {
    double scale = 1.0;
    double rotation_deg = 0.0;
    double blur_sigma = 0.0;
    double brightness = 0.0;
    double contrast = 1.0;
    double texture_amplitude = 0.06;
    double noise_sigma = 0.0;
};

struct RenderedPerson {
    Grid region;  // kRegionRows x kRegionCols, values in [0, 1]
    pose::KeypointSet keypoints;  // region pixels
    svm::ActivityLabel label = svm::ActivityLabel::neutral;
};

/// Renders one figure centred in a region with anti-aliased limbs and a head
/// disc over a smooth texture; keypoints follow every geometric transform.
RenderedPerson render_stick_figure(const BodyPose& pose, const RenderParams& params, double figure_height,
                                   std::mt19937_64& rng);

/// Draws jittered appearance parameters for one image.
RenderParams draw_render_params(const SyntheticConfig& config, double scale, std::mt19937_64& rng);

struct SyntheticImage {
    Grid pixels;  // values in [0, 1]
    AnnotationRecord record;
};

/// Renders image `index` from its own RNG stream (seed, index), so images can
/// be produced in any order.
SyntheticImage render_image(const SyntheticConfig& config, int index);

/// Renders `size` images, writes them as 8-bit PNGs under
/// `root/images/` and returns their records with paths relative to `root`.
std::vector<AnnotationRecord> generate_dataset(const SyntheticConfig& config, int size, const std::filesystem::path& root);

/// Resizes a person box to the kRegionRows x kRegionCols network input.
Grid crop_region(const Grid& image, const pose::BoundingBox& box);

/// Region keypoints of a person, in region pixels.
pose::KeypointSet region_keypoints(const PersonAnnotation& person);

}  // namespace shdl::datasets
