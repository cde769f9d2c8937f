#pragma once

#include <cstdint>
#include <filesystem>
#include <optional>
#include <span>
#include <string>
#include <vector>

#include <opencv2/core.hpp>

#include "amr/annotations.hpp"
#include "json.hpp"

namespace amr {

struct GenConfig {
  int count = 100;
  int image_w = 640;
  int image_h = 480;
  double illegible_fraction = 0.2;
  double rotating_digit_prob = 0.05;
  // Per-corner perspective displacement bound, as a fraction of counter height.
  double max_perspective_jitter = 0.15;
  // In-plane rotation of the whole meter face.
  double max_rotation_deg = 10.0;
  int min_digits = 5;
  int max_digits = 5;
  // Counter height range in output pixels.
  int min_counter_height = 24;
  int max_counter_height = 60;
  // Probability that a sample is rendered in portrait (h x w) orientation.
  double portrait_prob = 0.0;
  std::uint64_t seed = 0;
  std::optional<std::filesystem::path> background_dir;
  int workers = 1;

  void validate() const;
};

nlohmann::json to_json(const GenConfig& cfg);
GenConfig gen_config_from_json(const nlohmann::json& j, GenConfig base = {});

enum class Palette { dark_on_light, light_on_dark };
enum class FaultMode { none, blank_display, occluded, heavy_blur };

struct CounterStyle {
  int digit_count = 5;
  Palette palette = Palette::dark_on_light;
  int cell_gap = 2;
  int font_id = 0;
};

/// An image together with its annotation, in that image's coordinates.
struct AnnotatedImage {
  cv::Mat image;
  MeterSample sample;
};

/// Label for a digit wheel caught between `lower` and `upper = lower + 1 (mod
/// 10)`: the lower digit, except that the 9 -> 0 transition is labelled 9.
/// Throws ParameterError for non-adjacent pairs.
int label_rotating_digit(int lower, int upper);

/// Indices (ascending) of the samples rendered illegible: round(count *
/// fraction) of them, chosen by seed.
std::vector<std::size_t> illegible_indices(int count, double fraction, std::uint64_t seed);

/// Renders sample `index` of the dataset described by cfg. Deterministic in
/// (cfg, index) and independent of worker count.
AnnotatedImage render_sample(const GenConfig& cfg, std::size_t index, bool illegible,
                             const std::vector<cv::Mat>* backgrounds = nullptr);

/// Writes cfg.count PNG images under out_dir/images plus out_dir/annotations.json.
std::vector<MeterSample> generate_dataset(const GenConfig& cfg, const std::filesystem::path& out_dir);

// --- Training-time augmentation -------------------------------------------

struct HsvGeomConfig {
  double hue_shift = 6.0;         // OpenCV hue units (0-180 scale), +-
  double saturation_scale = 0.3;  // factor drawn from [1-s, 1+s]
  double value_scale = 0.3;
  double max_rotation_deg = 15.0;
  double crop_fraction = 0.1;     // max fraction of each margin removed
};

/// Photometric jitter, rotation about the counter centre and a crop that
/// keeps the counter quad inside; annotations follow the geometry.
AnnotatedImage augment_hsv_geom(const AnnotatedImage& in, std::uint64_t seed, const HsvGeomConfig& cfg = {});

/// Rotates image and annotations by `degrees` (counter-clockwise) about the
/// image centre. With expand_canvas the output is enlarged to hold the whole
/// rotated image; multiples of 90 degrees are pixel-exact.
AnnotatedImage rotate_annotated(const AnnotatedImage& in, double degrees, bool expand_canvas);

/// Cuts `rect` (clipped to the image) out; annotations shift with it.
AnnotatedImage crop_annotated(const AnnotatedImage& in, cv::Rect rect);

struct PermuteResult {
  AnnotatedImage sample;
  std::vector<int> permutation;  // new position i shows the patch from position permutation[i]
  bool applied = false;
  std::string notice;
};

/// Swaps digit patches by a random permutation; classes follow the patches,
/// boxes stay where they are and the reading is rebuilt left to right.
/// Skipped (applied = false) when any two digit boxes overlap with IoU > 0.2.
PermuteResult permute_digits(const AnnotatedImage& in, std::uint64_t seed);
/// Same, with an explicit permutation over the left-to-right digit order.
PermuteResult permute_digits_with(const AnnotatedImage& in, std::span<const int> permutation);

struct LabeledImage {
  cv::Mat image;
  std::vector<BBox> boxes;
};

struct DetectorAugmentConfig {
  double crop_prob = 0.5;
  double min_crop_keep = 0.7;  // fraction of each dimension kept by a crop
  double shear_prob = 0.3;
  double max_shear = 0.15;
  double grayscale_prob = 0.1;
  double hsv_prob = 0.5;
  double hue_shift = 8.0;
  double saturation_scale = 0.4;
  double value_scale = 0.4;
  double min_box_area_kept = 0.2;  // boxes shrunk below this fraction are dropped

  static DetectorAugmentConfig disabled();
};

/// Cuts `rect` out of the image; boxes are shifted, clipped and dropped when
/// less than min_area_kept of their area survives.
LabeledImage crop_labeled(const LabeledImage& in, cv::Rect rect, double min_area_kept = 0.2);

/// Random crop, shear, grayscale and HSV perturbation with the configured
/// probabilities.
LabeledImage augment_detector(const LabeledImage& in, std::uint64_t seed, const DetectorAugmentConfig& cfg = {});

/// Multiplies hue/saturation/value channels; identity when all are neutral.
cv::Mat jitter_hsv(const cv::Mat& bgr, double hue_shift, double saturation_factor, double value_factor);

/// Deterministic 64-bit mix of a seed and a stream index.
std::uint64_t mix_seed(std::uint64_t seed, std::uint64_t stream);

}  // namespace amr
