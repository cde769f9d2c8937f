#pragma once

#include <array>
#include <optional>
#include <span>
#include <string>
#include <vector>

#include <opencv2/core.hpp>

#include "amr/annotations.hpp"
#include "amr/geometry.hpp"
#include "json.hpp"

namespace amr {

// Network input sizes and the counter aspect ratio shared by training and
// inference.
inline constexpr int kDetectorInputW = 384;
inline constexpr int kDetectorInputH = 384;
inline constexpr int kCdccInputW = 192;
inline constexpr int kCdccInputH = 64;
inline constexpr int kOcrInputW = 384;
inline constexpr int kOcrInputH = 128;
inline constexpr double kCounterAspect = 3.0;

struct Detection {
  BBox bbox;
  int class_id = 0;
  double confidence = 0.0;

  friend bool operator==(const Detection&, const Detection&) = default;
};

/// CDCC output: corner fractions (x0/w, y0/h, ..., x3/w, y3/h) over the padded
/// crop canvas and the (legible, illegible) probability pair.
struct CounterVerdict {
  std::array<double, 8> corners_norm{};
  double p_legible = 1.0;
  double p_illegible = 0.0;
};

enum class ReadingStatus { accepted, rejected_illegible, rejected_low_confidence, rejected_no_counter };

std::string to_string(ReadingStatus status);
ReadingStatus reading_status_from_string(const std::string& text);

struct ReadingResult {
  std::string reading;
  std::vector<double> digit_confidences;
  double reading_confidence = 0.0;
  ReadingStatus status = ReadingStatus::rejected_no_counter;
  std::optional<BBox> counter_bbox;
  std::optional<Quad> corners;
  // Set when the predicted quad was unusable and the unrectified crop was read.
  bool rectification_fallback = false;
  double ms = 0.0;
};

struct PipelineConfig {
  double detector_conf_threshold = 0.25;
  double expand_factor = 0.10;
  double legibility_threshold = 0.5;
  double digit_conf_threshold = 0.5;
  double nms_iou_threshold = 0.45;
  std::optional<int> expected_digits = 5;
  std::optional<double> rejection_threshold;
  // Ablation switch: false feeds the expanded detection crop to the recognizer.
  bool rectify = true;
  // Border kept around the predicted quad when rectifying, as a fraction of
  // counter height; absorbs corner error. Recognizer training uses the same.
  double quad_margin = 0.25;

  /// Throws ParameterError on out-of-range thresholds.
  void validate() const;
};

nlohmann::json to_json(const PipelineConfig& cfg);
/// Overlays keys present in `j` onto `base`.
PipelineConfig pipeline_config_from_json(const nlohmann::json& j, PipelineConfig base = {});

struct Anchor {
  double w = 0.0;
  double h = 0.0;

  friend bool operator==(const Anchor&, const Anchor&) = default;
};

/// One detection-head output in row-major H x W x channels layout; channel
/// k of anchor a sits at a * (5 + C) + k with k = tx, ty, tw, th, obj, classes.
struct GridTensor {
  int h = 0;
  int w = 0;
  int channels = 0;
  std::vector<float> data;

  float at(int y, int x, int c) const {
    return data[(static_cast<std::size_t>(y) * static_cast<std::size_t>(w) + static_cast<std::size_t>(x)) *
                    static_cast<std::size_t>(channels) +
                static_cast<std::size_t>(c)];
  }
  float& at(int y, int x, int c) {
    return data[(static_cast<std::size_t>(y) * static_cast<std::size_t>(w) + static_cast<std::size_t>(x)) *
                    static_cast<std::size_t>(channels) +
                static_cast<std::size_t>(c)];
  }
};

double sigmoid(double v);
double logit(double p);

/// Decodes every cell/anchor of a head into a detection in network-input
/// pixels: centre (cell + sigmoid(t)) / grid * input, size anchor * exp(t),
/// confidence sigmoid(obj) * max softmax(class). Throws ShapeError when the
/// channel count is not anchors * (5 + classes).
std::vector<Detection> decode_grid(const GridTensor& raw, std::span<const Anchor> anchors, cv::Size net_input,
                                   int num_classes);

/// Inverse of the box part of decode_grid for a given cell and anchor:
/// returns (tx, ty, tw, th).
std::array<double, 4> encode_box(const BBox& box, int cell_x, int cell_y, const Anchor& anchor, int grid_w,
                                 int grid_h, cv::Size net_input);

/// Greedy suppression by descending confidence; per class unless
/// class_agnostic. Output is sorted by descending confidence.
std::vector<Detection> nms(std::vector<Detection> dets, double iou_threshold, bool class_agnostic = false);

/// Highest-confidence detection; ties go to the smaller (y, x) box origin.
std::optional<Detection> select_counter(std::span<const Detection> dets);

/// Maps corner fractions of the padded canvas back to full-image pixels.
Quad verdict_to_quad(const CounterVerdict& v, Point crop_origin, cv::Size2d canvas, Point pad_offset);

/// Confidence filter, class-agnostic NMS, top-k cut, left-to-right ordering.
/// Empty survivors give rejected_low_confidence.
ReadingResult assemble_reading(std::span<const Detection> digits, const PipelineConfig& cfg);

/// Expanded, black-padded counter crop as fed to the corner network.
struct CounterCrop {
  cv::Mat canvas;        // padded crop at native resolution, aspect ~3
  Point origin;          // crop top-left in the full image
  AspectPadding padding; // padding applied around the crop
  BBox crop_box;         // integer crop rectangle in the full image
};

/// Crops `box` grown by expand_factor, clipped to the image, and pads it to
/// the counter aspect ratio. Returns nullopt when the clipped crop is empty.
std::optional<CounterCrop> make_counter_crop(const cv::Mat& image, const BBox& box, double expand_factor);

/// Pads to the counter aspect and resizes to width x height. `scale_x/scale_y`
/// map source pixels to output pixels after the padding offset.
struct ResizedPatch {
  cv::Mat image;
  AspectPadding padding;
  double scale_x = 1.0;
  double scale_y = 1.0;
};
ResizedPatch pad_and_resize(const cv::Mat& image, int width, int height);

// Model handles. Implementations are confined to one worker at a time.
class CounterDetector {
 public:
  virtual ~CounterDetector() = default;
  /// Candidate counter boxes in full-image pixels.
  virtual std::vector<Detection> detect(const cv::Mat& image) = 0;
};

class CornerClassifier {
 public:
  virtual ~CornerClassifier() = default;
  /// `patch` is a 192x64 BGR image.
  virtual CounterVerdict classify(const cv::Mat& patch) = 0;
};

class DigitRecognizer {
 public:
  virtual ~DigitRecognizer() = default;
  /// `patch` is a 384x128 BGR image; boxes are in patch pixels.
  virtual std::vector<Detection> recognize(const cv::Mat& patch) = 0;
};

struct ModelSet {
  CounterDetector* detector = nullptr;
  CornerClassifier* cdcc = nullptr;
  DigitRecognizer* ocr = nullptr;
};

/// Detector -> counter selection -> corner/legibility network -> (legible
/// only) rectification -> digit recognizer -> reading assembly.
ReadingResult run_pipeline(const cv::Mat& image, const ModelSet& models, const PipelineConfig& cfg);

nlohmann::json result_to_json(const std::string& image, const ReadingResult& r);
/// Parses one inference record; returns the image name through `image`.
ReadingResult result_from_json(const nlohmann::json& j, std::string* image);

}  // namespace amr
