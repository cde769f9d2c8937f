#include "amr/cascade.hpp"

#include <algorithm>
#include <chrono>
#include <cmath>
#include <numeric>

#include <opencv2/imgproc.hpp>

#include "amr/errors.hpp"

namespace amr {

std::string to_string(ReadingStatus status) {
  switch (status) {
    case ReadingStatus::accepted: return "accepted";
    case ReadingStatus::rejected_illegible: return "rejected_illegible";
    case ReadingStatus::rejected_low_confidence: return "rejected_low_confidence";
    case ReadingStatus::rejected_no_counter: return "rejected_no_counter";
  }
  return "?";
}

ReadingStatus reading_status_from_string(const std::string& text) {
  for (auto s : {ReadingStatus::accepted, ReadingStatus::rejected_illegible, ReadingStatus::rejected_low_confidence,
                 ReadingStatus::rejected_no_counter}) {
    if (to_string(s) == text) return s;
  }
  throw ParseError("unknown reading status '" + text + "'");
}

void PipelineConfig::validate() const {
  auto unit = [](double v, const char* name) {
    if (!(v >= 0.0 && v <= 1.0)) throw ParameterError(std::string(name) + " must lie in [0, 1]");
  };
  unit(detector_conf_threshold, "detector_conf_threshold");
  unit(legibility_threshold, "legibility_threshold");
  unit(digit_conf_threshold, "digit_conf_threshold");
  unit(nms_iou_threshold, "nms_iou_threshold");
  if (rejection_threshold) unit(*rejection_threshold, "rejection_threshold");
  if (!(expand_factor >= 0.0)) throw ParameterError("expand_factor must be non-negative");
  if (!(quad_margin >= 0.0)) throw ParameterError("quad_margin must be non-negative");
  if (expected_digits && *expected_digits < 1) throw ParameterError("expected_digits must be at least 1");
}

nlohmann::json to_json(const PipelineConfig& cfg) {
  return {{"detector_conf_threshold", cfg.detector_conf_threshold},
          {"expand_factor", cfg.expand_factor},
          {"legibility_threshold", cfg.legibility_threshold},
          {"digit_conf_threshold", cfg.digit_conf_threshold},
          {"nms_iou_threshold", cfg.nms_iou_threshold},
          {"expected_digits", cfg.expected_digits ? nlohmann::json(*cfg.expected_digits) : nlohmann::json(nullptr)},
          {"rejection_threshold",
           cfg.rejection_threshold ? nlohmann::json(*cfg.rejection_threshold) : nlohmann::json(nullptr)},
          {"rectify", cfg.rectify},
          {"quad_margin", cfg.quad_margin}};
}

PipelineConfig pipeline_config_from_json(const nlohmann::json& j, PipelineConfig cfg) {
  auto num = [&](const char* key, double& field) {
    if (j.contains(key)) field = j.at(key).get<double>();
  };
  num("detector_conf_threshold", cfg.detector_conf_threshold);
  num("expand_factor", cfg.expand_factor);
  num("legibility_threshold", cfg.legibility_threshold);
  num("digit_conf_threshold", cfg.digit_conf_threshold);
  num("nms_iou_threshold", cfg.nms_iou_threshold);
  num("quad_margin", cfg.quad_margin);
  if (j.contains("expected_digits")) {
    const auto& v = j.at("expected_digits");
    cfg.expected_digits = v.is_null() ? std::nullopt : std::optional<int>(v.get<int>());
  }
  if (j.contains("rejection_threshold")) {
    const auto& v = j.at("rejection_threshold");
    cfg.rejection_threshold = v.is_null() ? std::nullopt : std::optional<double>(v.get<double>());
  }
  if (j.contains("rectify")) cfg.rectify = j.at("rectify").get<bool>();
  cfg.validate();
  return cfg;
}

double sigmoid(double v) { return 1.0 / (1.0 + std::exp(-v)); }

double logit(double p) {
  p = std::clamp(p, 1e-12, 1.0 - 1e-12);
  return std::log(p / (1.0 - p));
}

std::vector<Detection> decode_grid(const GridTensor& raw, std::span<const Anchor> anchors, cv::Size net_input,
                                   int num_classes) {
  const int per_anchor = 5 + num_classes;
  const int num_anchors = static_cast<int>(anchors.size());
  if (num_classes < 1 || raw.channels != num_anchors * per_anchor) {
    throw ShapeError("grid has " + std::to_string(raw.channels) + " channels, expected " +
                     std::to_string(num_anchors) + " x (5 + " + std::to_string(num_classes) + ")");
  }
  if (raw.data.size() != static_cast<std::size_t>(raw.h) * raw.w * raw.channels) {
    throw ShapeError("grid data size does not match its dimensions");
  }
  std::vector<Detection> out;
  out.reserve(static_cast<std::size_t>(raw.h * raw.w * num_anchors));
  std::vector<double> probs(static_cast<std::size_t>(num_classes));
  for (int y = 0; y < raw.h; ++y) {
    for (int x = 0; x < raw.w; ++x) {
      for (int a = 0; a < num_anchors; ++a) {
        const int base = a * per_anchor;
        const double cx = (x + sigmoid(raw.at(y, x, base + 0))) / raw.w * net_input.width;
        const double cy = (y + sigmoid(raw.at(y, x, base + 1))) / raw.h * net_input.height;
        const double bw = anchors[static_cast<std::size_t>(a)].w * std::exp(std::min(raw.at(y, x, base + 2), 20.0f));
        const double bh = anchors[static_cast<std::size_t>(a)].h * std::exp(std::min(raw.at(y, x, base + 3), 20.0f));
        const double obj = sigmoid(raw.at(y, x, base + 4));
        double mx = -1e300;
        for (int c = 0; c < num_classes; ++c) mx = std::max(mx, static_cast<double>(raw.at(y, x, base + 5 + c)));
        double sum = 0.0;
        for (int c = 0; c < num_classes; ++c) {
          probs[static_cast<std::size_t>(c)] = std::exp(raw.at(y, x, base + 5 + c) - mx);
          sum += probs[static_cast<std::size_t>(c)];
        }
        const auto best = static_cast<int>(std::max_element(probs.begin(), probs.end()) - probs.begin());
        Detection d;
        d.bbox = BBox{cx - bw / 2.0, cy - bh / 2.0, bw, bh};
        d.class_id = best;
        d.confidence = std::clamp(obj * probs[static_cast<std::size_t>(best)] / sum, 0.0, 1.0);
        out.push_back(d);
      }
    }
  }
  return out;
}

std::array<double, 4> encode_box(const BBox& box, int cell_x, int cell_y, const Anchor& anchor, int grid_w,
                                 int grid_h, cv::Size net_input) {
  const Point c = box.center();
  const double fx = c.x / net_input.width * grid_w - cell_x;
  const double fy = c.y / net_input.height * grid_h - cell_y;
  return {logit(fx), logit(fy), std::log(box.w / anchor.w), std::log(box.h / anchor.h)};
}

std::vector<Detection> nms(std::vector<Detection> dets, double iou_threshold, bool class_agnostic) {
  std::stable_sort(dets.begin(), dets.end(),
                   [](const Detection& a, const Detection& b) { return a.confidence > b.confidence; });
  std::vector<Detection> kept;
  for (const auto& d : dets) {
    const bool suppressed = std::any_of(kept.begin(), kept.end(), [&](const Detection& k) {
      return (class_agnostic || k.class_id == d.class_id) && iou(k.bbox, d.bbox) > iou_threshold;
    });
    if (!suppressed) kept.push_back(d);
  }
  return kept;
}

std::optional<Detection> select_counter(std::span<const Detection> dets) {
  if (dets.empty()) return std::nullopt;
  const Detection* best = &dets.front();
  for (const auto& d : dets.subspan(1)) {
    if (d.confidence > best->confidence ||
        (d.confidence == best->confidence &&
         (d.bbox.y < best->bbox.y || (d.bbox.y == best->bbox.y && d.bbox.x < best->bbox.x)))) {
      best = &d;
    }
  }
  return *best;
}

Quad verdict_to_quad(const CounterVerdict& v, Point crop_origin, cv::Size2d canvas, Point pad_offset) {
  Quad q;
  for (std::size_t i = 0; i < 4; ++i) {
    q.corners[i] = {crop_origin.x + v.corners_norm[2 * i] * canvas.width - pad_offset.x,
                    crop_origin.y + v.corners_norm[2 * i + 1] * canvas.height - pad_offset.y};
  }
  return q;
}

ReadingResult assemble_reading(std::span<const Detection> digits, const PipelineConfig& cfg) {
  std::vector<Detection> kept;
  for (const auto& d : digits) {
    if (d.confidence >= cfg.digit_conf_threshold) kept.push_back(d);
  }
  kept = nms(std::move(kept), cfg.nms_iou_threshold, /*class_agnostic=*/true);
  if (cfg.expected_digits && kept.size() > static_cast<std::size_t>(*cfg.expected_digits)) {
    kept.resize(static_cast<std::size_t>(*cfg.expected_digits));  // already sorted by confidence
  }
  std::stable_sort(kept.begin(), kept.end(), [](const Detection& a, const Detection& b) {
    return a.bbox.center().x < b.bbox.center().x;
  });

  ReadingResult r;
  if (kept.empty()) {
    r.status = ReadingStatus::rejected_low_confidence;
    return r;
  }
  r.status = ReadingStatus::accepted;
  double lowest = 1.0;
  for (const auto& d : kept) {
    r.reading.push_back(static_cast<char>('0' + std::clamp(d.class_id, 0, 9)));
    r.digit_confidences.push_back(d.confidence);
    lowest = std::min(lowest, d.confidence);
  }
  r.reading_confidence = lowest;
  return r;
}

std::optional<CounterCrop> make_counter_crop(const cv::Mat& image, const BBox& box, double expand_factor) {
  const BBox grown = expand_box(box, expand_factor, image.cols, image.rows);
  const int x0 = std::clamp(static_cast<int>(std::floor(grown.x)), 0, image.cols);
  const int y0 = std::clamp(static_cast<int>(std::floor(grown.y)), 0, image.rows);
  const int x1 = std::clamp(static_cast<int>(std::ceil(grown.right())), 0, image.cols);
  const int y1 = std::clamp(static_cast<int>(std::ceil(grown.bottom())), 0, image.rows);
  if (x1 - x0 < 2 || y1 - y0 < 2) return std::nullopt;
  CounterCrop crop;
  crop.crop_box = BBox{static_cast<double>(x0), static_cast<double>(y0), static_cast<double>(x1 - x0),
                       static_cast<double>(y1 - y0)};
  crop.origin = {static_cast<double>(x0), static_cast<double>(y0)};
  crop.canvas = pad_image_to_aspect(image(cv::Rect(x0, y0, x1 - x0, y1 - y0)), kCounterAspect, &crop.padding);
  return crop;
}

ResizedPatch pad_and_resize(const cv::Mat& image, int width, int height) {
  ResizedPatch out;
  const cv::Mat canvas = pad_image_to_aspect(image, static_cast<double>(width) / height, &out.padding);
  cv::resize(canvas, out.image, cv::Size(width, height), 0, 0, cv::INTER_LINEAR);
  out.scale_x = static_cast<double>(width) / out.padding.canvas_w;
  out.scale_y = static_cast<double>(height) / out.padding.canvas_h;
  return out;
}

namespace {

// Rectified counters far larger than the image come from corner predictions
// that are technically simple but nonsensical.
bool plausible_frame(const RectifiedFrame& f, const cv::Mat& image) {
  return f.max_w >= 4 && f.max_h >= 4 && f.max_w <= 2 * image.cols && f.max_h <= 2 * image.rows;
}

}  // namespace

ReadingResult run_pipeline(const cv::Mat& image, const ModelSet& models, const PipelineConfig& cfg) {
  const auto start = std::chrono::steady_clock::now();
  auto finish = [&](ReadingResult r) {
    r.ms = std::chrono::duration<double, std::milli>(std::chrono::steady_clock::now() - start).count();
    return r;
  };
  if (image.empty()) throw InferenceError("empty input image");
  if (!models.detector || !models.cdcc || !models.ocr) throw InferenceError("pipeline models are not loaded");

  std::vector<Detection> candidates;
  for (const auto& d : models.detector->detect(image)) {
    if (d.confidence >= cfg.detector_conf_threshold) candidates.push_back(d);
  }
  const auto counter = select_counter(candidates);
  if (!counter) return finish(ReadingResult{});

  const auto crop = make_counter_crop(image, counter->bbox, cfg.expand_factor);
  if (!crop) return finish(ReadingResult{});

  cv::Mat cdcc_input;
  cv::resize(crop->canvas, cdcc_input, cv::Size(kCdccInputW, kCdccInputH), 0, 0, cv::INTER_LINEAR);
  const CounterVerdict verdict = models.cdcc->classify(cdcc_input);
  const Quad quad =
      verdict_to_quad(verdict, crop->origin, cv::Size2d(crop->padding.canvas_w, crop->padding.canvas_h),
                      Point{static_cast<double>(crop->padding.offset_x), static_cast<double>(crop->padding.offset_y)});

  ReadingResult base;
  base.counter_bbox = counter->bbox;
  base.corners = quad;
  if (verdict.p_illegible > cfg.legibility_threshold) {
    base.status = ReadingStatus::rejected_illegible;
    return finish(base);
  }

  const cv::Mat unrectified = image(cv::Rect(static_cast<int>(crop->crop_box.x), static_cast<int>(crop->crop_box.y),
                                             static_cast<int>(crop->crop_box.w), static_cast<int>(crop->crop_box.h)));
  cv::Mat counter_patch = unrectified;
  bool fallback = false;
  if (cfg.rectify) {
    try {
      const auto frame = rectified_frame(inflate_quad(quad, cfg.quad_margin));
      if (plausible_frame(frame, image)) {
        counter_patch = warp_image(image, frame);
      } else {
        fallback = true;
      }
    } catch (const DegenerateQuadError&) {
      fallback = true;
    } catch (const HorizonError&) {
      fallback = true;
    }
  }

  const auto ocr_input = pad_and_resize(counter_patch, kOcrInputW, kOcrInputH);
  const auto digits = models.ocr->recognize(ocr_input.image);
  ReadingResult r = assemble_reading(digits, cfg);
  r.counter_bbox = base.counter_bbox;
  r.corners = base.corners;
  r.rectification_fallback = fallback;
  if (r.status == ReadingStatus::accepted && cfg.rejection_threshold &&
      r.reading_confidence < *cfg.rejection_threshold) {
    r.status = ReadingStatus::rejected_low_confidence;
  }
  return finish(r);
}

nlohmann::json result_to_json(const std::string& image, const ReadingResult& r) {
  using nlohmann::json;
  json bbox = nullptr;
  if (r.counter_bbox) bbox = {r.counter_bbox->x, r.counter_bbox->y, r.counter_bbox->w, r.counter_bbox->h};
  return {{"image", image},
          {"status", to_string(r.status)},
          {"reading", r.reading},
          {"confidence", r.reading_confidence},
          {"counter_bbox", bbox},
          {"corners", r.corners ? quad_to_json(*r.corners) : json(nullptr)},
          {"ms", r.ms}};
}

ReadingResult result_from_json(const nlohmann::json& j, std::string* image) {
  try {
    ReadingResult r;
    if (image) *image = j.at("image").get<std::string>();
    r.status = reading_status_from_string(j.at("status").get<std::string>());
    r.reading = j.value("reading", std::string{});
    r.reading_confidence = j.value("confidence", 0.0);
    if (j.contains("counter_bbox") && !j.at("counter_bbox").is_null()) {
      const auto& b = j.at("counter_bbox");
      if (!b.is_array() || b.size() != 4) throw ParseError("counter_bbox must be [x, y, w, h]");
      r.counter_bbox = BBox{b[0].get<double>(), b[1].get<double>(), b[2].get<double>(), b[3].get<double>()};
    }
    if (j.contains("corners") && !j.at("corners").is_null()) r.corners = quad_from_json(j.at("corners"));
    r.ms = j.value("ms", 0.0);
    return r;
  } catch (const nlohmann::json::exception& e) {
    throw ParseError(std::string("malformed inference record: ") + e.what());
  }
}

}  // namespace amr
