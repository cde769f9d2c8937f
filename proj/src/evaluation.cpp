#include "amr/evaluation.hpp"

#include <algorithm>
#include <chrono>
#include <cmath>
#include <map>
#include <numeric>
#include <sstream>

#include "amr/errors.hpp"
#include "amr/geometry.hpp"

namespace amr {

std::string Tally::percent(int decimals) const {
  if (total == 0) return "n/a";
  unsigned long long scale = 100;
  for (int i = 0; i < decimals; ++i) scale *= 10;
  const unsigned long long scaled = (2ULL * correct * scale + total) / (2ULL * total);
  unsigned long long pow10 = 1;
  for (int i = 0; i < decimals; ++i) pow10 *= 10;
  std::string out = std::to_string(scaled / pow10);
  if (decimals > 0) {
    std::string frac = std::to_string(scaled % pow10);
    frac.insert(0, static_cast<std::size_t>(decimals) - frac.size(), '0');
    out += "." + frac;
  }
  return out;
}

const ThresholdScore& DetectionEvalReport::at(double t) const {
  if (per_threshold.empty()) throw ParameterError("empty detection report");
  return *std::min_element(per_threshold.begin(), per_threshold.end(), [t](const auto& a, const auto& b) {
    return std::abs(a.threshold - t) < std::abs(b.threshold - t);
  });
}

std::string DetectionEvalReport::to_csv() const {
  std::ostringstream out;
  out << "iou_threshold,correct,total,f_measure\n";
  for (const auto& s : per_threshold) {
    out << s.threshold << ',' << s.tally.correct << ',' << s.tally.total << ',' << s.f_measure << '\n';
  }
  out << "0.50:0.95,,," << aggregate << '\n';
  return out.str();
}

DetectionEvalReport eval_detection(std::span<const DetectionPrediction> preds, std::span<const GroundTruthBox> gts) {
  std::map<std::string, const std::optional<Detection>*> by_image;
  for (const auto& [image, det] : preds) {
    if (!by_image.emplace(image, &det).second) throw PairingError("duplicate prediction for image " + image);
  }
  std::vector<std::string> unpaired;
  for (const auto& [image, box] : gts) {
    if (!by_image.count(image)) unpaired.push_back(image);
  }
  if (!unpaired.empty() || by_image.size() != gts.size()) {
    std::string msg = "prediction and ground-truth image sets differ";
    if (!unpaired.empty()) msg += " (no prediction for " + unpaired.front() + ")";
    throw PairingError(msg);
  }

  DetectionEvalReport report;
  double sum = 0.0;
  for (int i = 0; i < 10; ++i) {
    ThresholdScore s;
    s.threshold = (50 + 5 * i) / 100.0;
    s.tally.total = gts.size();
    for (const auto& [image, box] : gts) {
      const auto& det = *by_image.at(image);
      if (det && iou(det->bbox, box) > s.threshold) ++s.tally.correct;
    }
    s.f_measure = s.tally.rate();
    sum += s.f_measure;
    report.per_threshold.push_back(s);
  }
  report.aggregate = sum / 10.0;
  return report;
}

CornerEvalReport eval_corners(std::span<const Quad> preds, std::span<const Quad> gts, std::span<const ImageDims> dims) {
  if (preds.size() != gts.size() || preds.size() != dims.size()) {
    throw PairingError("corner evaluation needs aligned prediction, ground-truth and size lists");
  }
  CornerEvalReport report;
  for (std::size_t i = 0; i < preds.size(); ++i) {
    double acc = 0.0;
    for (std::size_t c = 0; c < 4; ++c) {
      const double dx = (preds[i].corners[c].x - gts[i].corners[c].x) / dims[i].w;
      const double dy = (preds[i].corners[c].y - gts[i].corners[c].y) / dims[i].h;
      acc += std::sqrt(dx * dx + dy * dy);
    }
    report.per_image.push_back(acc / 4.0);
  }
  if (!report.per_image.empty()) {
    report.mean = std::accumulate(report.per_image.begin(), report.per_image.end(), 0.0) /
                  static_cast<double>(report.per_image.size());
  }
  return report;
}

ClassificationReport eval_classification(std::span<const Legibility> preds, std::span<const Legibility> gts) {
  if (preds.size() != gts.size()) throw PairingError("classification lists differ in length");
  ClassificationReport r;
  for (std::size_t i = 0; i < gts.size(); ++i) {
    Tally& t = gts[i] == Legibility::legible_operational ? r.legible : r.illegible;
    ++t.total;
    if (preds[i] == gts[i]) ++t.correct;
  }
  return r;
}

std::vector<RejectionPoint> rejection_sweep(std::span<const ScoredReading> results, std::span<const double> rates) {
  for (const auto& r : results) {
    if (!std::isfinite(r.confidence)) throw ParameterError("rejection sweep needs finite confidences");
  }
  for (double rate : rates) {
    if (!(rate >= 0.0 && rate < 1.0)) throw ParameterError("rejection rate must lie in [0, 1)");
  }
  std::vector<std::size_t> order(results.size());
  std::iota(order.begin(), order.end(), 0);
  std::stable_sort(order.begin(), order.end(),
                   [&](std::size_t a, std::size_t b) { return results[a].confidence < results[b].confidence; });
  const std::size_t n = results.size();
  std::vector<RejectionPoint> curve;
  for (double rate : rates) {
    // The epsilon keeps products such as 0.29 * 100 from flooring to 28.
    const auto drop = std::min(n, static_cast<std::size_t>(std::floor(rate * static_cast<double>(n) + 1e-9)));
    std::size_t correct = 0;
    for (std::size_t k = drop; k < n; ++k) correct += results[order[k]].correct ? 1 : 0;
    RejectionPoint p;
    p.rejection_rate = rate;
    p.kept = n - drop;
    p.recognition_rate = p.kept == 0 ? 0.0 : static_cast<double>(correct) / static_cast<double>(p.kept);
    curve.push_back(p);
  }
  return curve;
}

Legibility predicted_legibility(const ReadingResult& r) {
  return (r.status == ReadingStatus::rejected_illegible || r.status == ReadingStatus::rejected_no_counter)
             ? Legibility::illegible_faulty
             : Legibility::legible_operational;
}

bool reading_correct(const ReadingResult& r, const MeterSample& gt) {
  return gt.legible() && r.status == ReadingStatus::accepted && r.reading == gt.reading;
}

EndToEndReport eval_end_to_end(std::span<const ReadingResult> results, std::span<const MeterSample> gts,
                               std::span<const double> rejection_rates) {
  if (results.size() != gts.size()) throw PairingError("result and ground-truth lists differ in length");
  EndToEndReport report;
  std::vector<Legibility> predicted;
  std::vector<Legibility> truth;
  std::vector<ScoredReading> scored;
  double total_ms = 0.0;
  for (std::size_t i = 0; i < gts.size(); ++i) {
    const auto& r = results[i];
    predicted.push_back(predicted_legibility(r));
    truth.push_back(gts[i].legibility);
    total_ms += r.ms;
    if (!gts[i].legible()) continue;
    ++report.recognition.total;
    const bool ok = reading_correct(r, gts[i]);
    if (ok) ++report.recognition.correct;
    const bool has_reading =
        r.status == ReadingStatus::accepted || r.status == ReadingStatus::rejected_low_confidence;
    scored.push_back({ok, has_reading ? r.reading_confidence : 0.0});
  }
  report.classification = eval_classification(predicted, truth);
  report.rejection_curve = rejection_sweep(scored, rejection_rates);
  if (total_ms > 0.0) report.fps = static_cast<double>(results.size()) / (total_ms / 1000.0);
  return report;
}

std::string rejection_curve_to_csv(std::span<const RejectionPoint> curve) {
  std::ostringstream out;
  out << "rejection_rate,recognition_rate,kept\n";
  for (const auto& p : curve) out << p.rejection_rate << ',' << p.recognition_rate << ',' << p.kept << '\n';
  return out.str();
}

namespace {

std::pair<double, double> mean_std(const std::vector<double>& v) {
  const double mean = std::accumulate(v.begin(), v.end(), 0.0) / static_cast<double>(v.size());
  double var = 0.0;
  for (double x : v) var += (x - mean) * (x - mean);
  return {mean, v.size() > 1 ? std::sqrt(var / static_cast<double>(v.size() - 1)) : 0.0};
}

}  // namespace

ThroughputReport measure_throughput(const std::function<PipelineFn()>& load, std::span<const cv::Mat> images,
                                    int runs) {
  if (runs < 1) throw ParameterError("throughput needs at least one run");
  if (images.empty()) throw ParameterError("throughput needs at least one image");
  using clock = std::chrono::steady_clock;
  std::vector<double> with_load;
  std::vector<double> steady;
  for (int run = 0; run < runs; ++run) {
    const auto t0 = clock::now();
    PipelineFn pipeline = load();
    const auto t1 = clock::now();
    for (const auto& img : images) pipeline(img);
    const auto t2 = clock::now();
    const double n = static_cast<double>(images.size());
    with_load.push_back(n / std::max(1e-9, std::chrono::duration<double>(t2 - t0).count()));
    steady.push_back(n / std::max(1e-9, std::chrono::duration<double>(t2 - t1).count()));
  }
  ThroughputReport r;
  r.runs = runs;
  std::tie(r.fps_with_load_mean, r.fps_with_load_std) = mean_std(with_load);
  std::tie(r.fps_steady_mean, r.fps_steady_std) = mean_std(steady);
  return r;
}

nlohmann::json to_json(const DetectionEvalReport& r) {
  nlohmann::json per = nlohmann::json::object();
  for (const auto& s : r.per_threshold) {
    char key[16];
    std::snprintf(key, sizeof key, "%.2f", s.threshold);
    per[key] = s.f_measure;
  }
  return {{"f_measure", per}, {"aggregate_0.50_0.95", r.aggregate}};
}

nlohmann::json to_json(const EndToEndReport& r) {
  nlohmann::json curve = nlohmann::json::array();
  for (const auto& p : r.rejection_curve) {
    curve.push_back({{"rejection_rate", p.rejection_rate}, {"recognition_rate", p.recognition_rate}, {"kept", p.kept}});
  }
  return {{"recognition_rate", r.recognition.rate()},
          {"recognized", r.recognition.correct},
          {"legible_total", r.recognition.total},
          {"legible_accuracy", r.classification.legible.rate()},
          {"illegible_accuracy", r.classification.illegible.rate()},
          {"rejection_curve", curve},
          {"fps", r.fps}};
}

}  // namespace amr
