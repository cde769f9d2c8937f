#pragma once

#include <cstddef>
#include <functional>
#include <optional>
#include <span>
#include <string>
#include <utility>
#include <vector>

#include <opencv2/core.hpp>

#include "amr/annotations.hpp"
#include "amr/cascade.hpp"
#include "json.hpp"

namespace amr {

/// An exact correct/total tally. percent() rounds half-up with integer
/// arithmetic so reported figures such as 799/800 -> "99.88" reproduce.
struct Tally {
  std::size_t correct = 0;
  std::size_t total = 0;

  double rate() const { return total == 0 ? 0.0 : static_cast<double>(correct) / static_cast<double>(total); }
  std::string percent(int decimals) const;
};

struct ThresholdScore {
  double threshold = 0.0;
  Tally tally;
  double f_measure = 0.0;
};

struct DetectionEvalReport {
  std::vector<ThresholdScore> per_threshold;  // IoU 0.50, 0.55, ..., 0.95
  double aggregate = 0.0;                     // mean over the ten thresholds

  /// Score at the threshold closest to t.
  const ThresholdScore& at(double t) const;
  std::string to_csv() const;
};

using DetectionPrediction = std::pair<std::string, std::optional<Detection>>;
using GroundTruthBox = std::pair<std::string, BBox>;

/// One object and at most one prediction per image: a prediction counts when
/// IoU > t, so precision, recall and F-measure coincide. Images without a
/// prediction are misses. Raises PairingError when the image sets differ.
DetectionEvalReport eval_detection(std::span<const DetectionPrediction> preds, std::span<const GroundTruthBox> gts);

struct ImageDims {
  double w = 0.0;
  double h = 0.0;
};

struct CornerEvalReport {
  double mean = 0.0;
  std::vector<double> per_image;
};

/// Per image: mean over the four corners of the distance with x scaled by 1/w
/// and y by 1/h.
CornerEvalReport eval_corners(std::span<const Quad> preds, std::span<const Quad> gts, std::span<const ImageDims> dims);

struct ClassificationReport {
  Tally legible;
  Tally illegible;
};

/// Accuracy per ground-truth class.
ClassificationReport eval_classification(std::span<const Legibility> preds, std::span<const Legibility> gts);

struct ScoredReading {
  bool correct = false;
  double confidence = 0.0;
};

struct RejectionPoint {
  double rejection_rate = 0.0;
  double recognition_rate = 0.0;
  std::size_t kept = 0;
};

/// For each rate r drops the floor(r*N) lowest-confidence items (ties keep
/// input order, earliest dropped first) and scores the rest. Rates must lie
/// in [0, 1).
std::vector<RejectionPoint> rejection_sweep(std::span<const ScoredReading> results, std::span<const double> rates);

struct EndToEndReport {
  Tally recognition;  // over legible ground truth only
  ClassificationReport classification;
  std::vector<RejectionPoint> rejection_curve;
  double fps = 0.0;

  double recognition_rate() const { return recognition.rate(); }
};

/// Legibility the pipeline effectively assigned: illegible when it rejected
/// the image as illegible or found no counter.
Legibility predicted_legibility(const ReadingResult& r);

/// Whether a result counts as a correct reading of `gt`.
bool reading_correct(const ReadingResult& r, const MeterSample& gt);

EndToEndReport eval_end_to_end(std::span<const ReadingResult> results, std::span<const MeterSample> gts,
                               std::span<const double> rejection_rates = {});

std::string rejection_curve_to_csv(std::span<const RejectionPoint> curve);

struct ThroughputReport {
  int runs = 0;
  double fps_with_load_mean = 0.0;
  double fps_with_load_std = 0.0;
  double fps_steady_mean = 0.0;
  double fps_steady_std = 0.0;
};

using PipelineFn = std::function<ReadingResult(const cv::Mat&)>;

/// Runs `load` then the returned pipeline over every image, `runs` times.
/// Reports images/second with and without the load time.
ThroughputReport measure_throughput(const std::function<PipelineFn()>& load, std::span<const cv::Mat> images,
                                    int runs);

nlohmann::json to_json(const DetectionEvalReport& r);
nlohmann::json to_json(const EndToEndReport& r);

}  // namespace amr
