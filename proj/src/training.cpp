#include "amr/training.hpp"

#include <algorithm>
#include <cmath>
#include <cstdio>
#include <fstream>
#include <iostream>
#include <limits>
#include <numeric>
#include <random>

#include <opencv2/imgcodecs.hpp>
#include <opencv2/imgproc.hpp>

#include "amr/errors.hpp"
#include "amr/geometry.hpp"

namespace amr {

namespace fs = std::filesystem;
using json = nlohmann::json;

// --- Configuration ----------------------------------------------------------

TrainConfig TrainConfig::defaults_for(ModelKind model) {
  TrainConfig c;
  c.model = model;
  switch (model) {
    case ModelKind::detector:
      c.batch_size = 8;
      c.max_iterations = 1500;
      c.lr_schedule = {{0, 1e-3}, {1200, 1e-4}};
      c.burn_in = 50;
      c.weight_decay = 0.0;
      c.eval_interval = 250;
      break;
    case ModelKind::ocr:
      c.batch_size = 8;
      c.max_iterations = 2000;
      c.lr_schedule = {{0, 1e-3}, {1600, 1e-4}};
      c.burn_in = 50;
      c.weight_decay = 0.0;
      c.eval_interval = 250;
      break;
    case ModelKind::cdcc:
      c.batch_size = 32;
      c.max_epochs = 80;
      c.lr_schedule = {{0, 1e-3}};
      c.weight_decay = 0.0;
      // Validation loss is noisy epoch to epoch; wait longer before giving up.
      c.early_stop_patience = 15;
      c.plateau_patience = 5;
      break;
  }
  return c;
}

void TrainConfig::validate() const {
  auto fail = [](const std::string& m) { throw ParameterError("training: " + m); };
  if (batch_size < 1) fail("batch_size must be positive");
  if (max_iterations < 0 || max_epochs < 0) fail("iteration and epoch limits must not be negative");
  if (lr_schedule.empty() || lr_schedule.front().step != 0) fail("learning-rate schedule must start at step 0");
  for (std::size_t i = 0; i < lr_schedule.size(); ++i) {
    if (!(lr_schedule[i].lr >= 0.0) || !std::isfinite(lr_schedule[i].lr)) fail("learning rates must be finite and >= 0");
    if (i > 0 && lr_schedule[i].step <= lr_schedule[i - 1].step) fail("schedule steps must increase");
  }
  if (burn_in < 0) fail("burn_in must not be negative");
  if (early_stop_patience < 1 || plateau_patience < 1) fail("patience values must be positive");
  if (!(plateau_factor > 0.0 && plateau_factor <= 1.0)) fail("plateau_factor must lie in (0, 1]");
  if (eval_interval < 1) fail("eval_interval must be positive");
  if (!(scale_factor > 0.0)) fail("scale_factor must be positive");
  if (threads < 1) fail("threads must be positive");
  if (corner_weight < 0.0 || class_weight < 0.0) fail("loss weights must not be negative");
  if (ocr_quad_jitter < 0.0 || ocr_quad_jitter > 0.3) fail("ocr_quad_jitter must lie in [0, 0.3]");
}

double TrainConfig::lr_at(long long step) const {
  double lr = lr_schedule.front().lr;
  for (const auto& s : lr_schedule) {
    if (s.step <= step) lr = s.lr;
  }
  return lr;
}

json to_json(const TrainConfig& c) {
  json schedule = json::array();
  for (const auto& s : c.lr_schedule) schedule.push_back({s.step, s.lr});
  return {{"model", to_string(c.model)},
          {"batch_size", c.batch_size},
          {"max_iterations", c.max_iterations},
          {"max_epochs", c.max_epochs},
          {"lr_schedule", schedule},
          {"burn_in", c.burn_in},
          {"optimizer", c.optimizer == OptimizerKind::sgd ? "sgd" : "adam"},
          {"momentum", c.momentum},
          {"weight_decay", c.weight_decay},
          {"early_stop_patience", c.early_stop_patience},
          {"plateau_patience", c.plateau_patience},
          {"plateau_factor", c.plateau_factor},
          {"eval_interval", c.eval_interval},
          {"max_val_samples", c.max_val_samples},
          {"corner_weight", c.corner_weight},
          {"class_weight", c.class_weight},
          {"ocr_quad_jitter", c.ocr_quad_jitter},
          {"augment", c.augment},
          {"seed", c.seed},
          {"scale_factor", c.scale_factor},
          {"threads", c.threads}};
}

TrainConfig train_config_from_json(const json& j, TrainConfig c) {
  if (!j.is_object()) throw ParseError("training config must be a JSON object");
  try {
    auto get = [&](const char* key, auto& field) {
      if (j.contains(key)) field = j.at(key).get<std::decay_t<decltype(field)>>();
    };
    if (j.contains("model")) c.model = model_kind_from_string(j.at("model").get<std::string>());
    get("batch_size", c.batch_size);
    get("max_iterations", c.max_iterations);
    get("max_epochs", c.max_epochs);
    if (j.contains("lr_schedule")) {
      c.lr_schedule.clear();
      for (const auto& s : j.at("lr_schedule")) c.lr_schedule.push_back({s.at(0).get<long long>(), s.at(1).get<double>()});
    }
    get("burn_in", c.burn_in);
    if (j.contains("optimizer")) {
      const auto o = j.at("optimizer").get<std::string>();
      if (o == "sgd") c.optimizer = OptimizerKind::sgd;
      else if (o == "adam") c.optimizer = OptimizerKind::adam;
      else throw ParseError("unknown optimizer '" + o + "'");
    }
    get("momentum", c.momentum);
    get("weight_decay", c.weight_decay);
    get("early_stop_patience", c.early_stop_patience);
    get("plateau_patience", c.plateau_patience);
    get("plateau_factor", c.plateau_factor);
    get("eval_interval", c.eval_interval);
    get("max_val_samples", c.max_val_samples);
    get("corner_weight", c.corner_weight);
    get("class_weight", c.class_weight);
    get("ocr_quad_jitter", c.ocr_quad_jitter);
    get("augment", c.augment);
    get("seed", c.seed);
    get("scale_factor", c.scale_factor);
    get("threads", c.threads);
  } catch (const json::exception& e) {
    throw ParseError(std::string("training config: ") + e.what());
  }
  return c;
}

std::string config_hash(const TrainConfig& cfg) {
  std::uint64_t h = 0xcbf29ce484222325ULL;
  for (unsigned char ch : to_json(cfg).dump()) {
    h ^= ch;
    h *= 0x100000001b3ULL;
  }
  char buf[17];
  std::snprintf(buf, sizeof buf, "%016llx", static_cast<unsigned long long>(h));
  return buf;
}

TrainingData load_training_data(const fs::path& annotation_file, std::uint64_t seed) {
  TrainingData d;
  d.split = split_dataset(load_annotations(annotation_file), seed);
  d.image_root = annotation_file.parent_path();
  return d;
}

// --- Anchors ----------------------------------------------------------------

namespace {

double shape_iou(const Anchor& a, const Anchor& b) {
  const double inter = std::min(a.w, b.w) * std::min(a.h, b.h);
  return inter / (a.w * a.h + b.w * b.h - inter);
}

}  // namespace

std::vector<Anchor> kmeans_anchors(std::span<const Anchor> sizes, int num) {
  if (num < 1) throw ParameterError("anchor count must be positive");
  if (sizes.size() < static_cast<std::size_t>(num)) {
    throw DataError("need at least " + std::to_string(num) + " boxes to estimate anchors, got " +
                    std::to_string(sizes.size()));
  }
  for (const auto& s : sizes) {
    if (!(s.w > 0.0 && s.h > 0.0)) throw DataError("anchor estimation needs positive box sizes");
  }
  std::vector<Anchor> sorted(sizes.begin(), sizes.end());
  std::stable_sort(sorted.begin(), sorted.end(), [](const Anchor& a, const Anchor& b) { return a.w * a.h < b.w * b.h; });
  std::vector<Anchor> centres;
  for (int k = 0; k < num; ++k) {
    const auto idx = static_cast<std::size_t>((2 * k + 1) * sorted.size() / (2 * static_cast<std::size_t>(num)));
    centres.push_back(sorted[idx]);
  }
  std::vector<int> assign(sorted.size(), -1);
  for (int iter = 0; iter < 300; ++iter) {
    bool changed = false;
    for (std::size_t i = 0; i < sorted.size(); ++i) {
      int best = 0;
      double best_iou = -1.0;
      for (int k = 0; k < num; ++k) {
        const double v = shape_iou(sorted[i], centres[static_cast<std::size_t>(k)]);
        if (v > best_iou) {
          best_iou = v;
          best = k;
        }
      }
      if (assign[i] != best) {
        assign[i] = best;
        changed = true;
      }
    }
    if (!changed) break;
    std::vector<double> sw(static_cast<std::size_t>(num), 0.0), sh(sw), cnt(sw);
    for (std::size_t i = 0; i < sorted.size(); ++i) {
      const auto k = static_cast<std::size_t>(assign[i]);
      sw[k] += sorted[i].w;
      sh[k] += sorted[i].h;
      cnt[k] += 1.0;
    }
    for (std::size_t k = 0; k < centres.size(); ++k) {
      if (cnt[k] > 0.0) centres[k] = {sw[k] / cnt[k], sh[k] / cnt[k]};
    }
  }
  std::stable_sort(centres.begin(), centres.end(), [](const Anchor& a, const Anchor& b) { return a.w * a.h < b.w * b.h; });
  return centres;
}

std::vector<Anchor> estimate_anchors(const std::vector<MeterSample>& samples, int num, cv::Size net_input) {
  std::vector<Anchor> sizes;
  for (const auto& s : samples) {
    if (!s.counter_quad || s.width <= 0 || s.height <= 0) continue;
    const BBox b = quad_to_bbox(*s.counter_quad);
    sizes.push_back({b.w * net_input.width / s.width, b.h * net_input.height / s.height});
  }
  return kmeans_anchors(sizes, num);
}

// --- Losses -----------------------------------------------------------------

YoloLoss yolo_loss(const std::vector<torch::Tensor>& heads, const std::vector<std::vector<BoxTarget>>& targets,
                   const AnchorSet& anchors, const std::vector<int>& groups, cv::Size net_input, int num_classes) {
  if (heads.empty() || heads.size() != groups.size()) throw ShapeError("head count does not match anchor groups");
  const auto B = heads.front().size(0);
  if (static_cast<std::size_t>(B) != targets.size()) throw ShapeError("target list does not match the batch size");
  const int A = static_cast<int>(anchors.per_scale.front().size());
  const auto flat = anchors.flat();
  const double W = net_input.width, H = net_input.height;

  // Best anchor over all scales for every target box.
  std::vector<std::vector<int>> best(targets.size());
  for (std::size_t b = 0; b < targets.size(); ++b) {
    for (const auto& t : targets[b]) {
      int arg = 0;
      double top = -1.0;
      for (std::size_t k = 0; k < flat.size(); ++k) {
        const double v = shape_iou({t.box.w, t.box.h}, flat[k]);
        if (v > top) {
          top = v;
          arg = static_cast<int>(k);
        }
      }
      best[b].push_back(arg);
    }
  }

  torch::Tensor box_loss = torch::zeros({});
  torch::Tensor obj_loss = torch::zeros({});
  torch::Tensor cls_loss = torch::zeros({});
  for (std::size_t h = 0; h < heads.size(); ++h) {
    const int g = groups[h];
    const auto& anchors_h = anchors.per_scale[static_cast<std::size_t>(g)];
    const auto gh = heads[h].size(2), gw = heads[h].size(3);
    if (heads[h].size(1) != A * (5 + num_classes)) throw ShapeError("head channel count does not match anchors");
    const torch::Tensor p = heads[h].view({B, A, 5 + num_classes, gh, gw}).permute({0, 1, 3, 4, 2});

    torch::Tensor obj_t = torch::zeros({B, A, gh, gw});
    torch::Tensor keep_neg = torch::ones({B, A, gh, gw});
    torch::Tensor box_t = torch::zeros({B, A, gh, gw, 4});
    torch::Tensor scale_t = torch::zeros({B, A, gh, gw});
    torch::Tensor cls_t = torch::zeros({B, A, gh, gw}, torch::kLong);
    auto obj_a = obj_t.accessor<float, 4>();
    auto neg_a = keep_neg.accessor<float, 4>();
    auto box_a = box_t.accessor<float, 5>();
    auto scale_a = scale_t.accessor<float, 4>();
    auto cls_a = cls_t.accessor<long, 4>();
    for (std::size_t b = 0; b < targets.size(); ++b) {
      for (std::size_t i = 0; i < targets[b].size(); ++i) {
        if (best[b][i] / A != g) continue;
        const int a = best[b][i] % A;
        const auto& t = targets[b][i];
        const Point c = t.box.center();
        const double fx = c.x / W * static_cast<double>(gw), fy = c.y / H * static_cast<double>(gh);
        const auto cx = std::clamp<long>(static_cast<long>(std::floor(fx)), 0, gw - 1);
        const auto cy = std::clamp<long>(static_cast<long>(std::floor(fy)), 0, gh - 1);
        const auto& an = anchors_h[static_cast<std::size_t>(a)];
        obj_a[static_cast<long>(b)][a][cy][cx] = 1.0f;
        neg_a[static_cast<long>(b)][a][cy][cx] = 0.0f;
        box_a[static_cast<long>(b)][a][cy][cx][0] = static_cast<float>(std::clamp(fx - cx, 0.0, 1.0));
        box_a[static_cast<long>(b)][a][cy][cx][1] = static_cast<float>(std::clamp(fy - cy, 0.0, 1.0));
        box_a[static_cast<long>(b)][a][cy][cx][2] = static_cast<float>(std::log(t.box.w / an.w));
        box_a[static_cast<long>(b)][a][cy][cx][3] = static_cast<float>(std::log(t.box.h / an.h));
        scale_a[static_cast<long>(b)][a][cy][cx] = static_cast<float>(2.0 - t.box.w * t.box.h / (W * H));
        cls_a[static_cast<long>(b)][a][cy][cx] = t.class_id;
      }
    }

    // Predictions already overlapping a target are not pushed to background.
    {
      torch::NoGradGuard guard;
      const auto gx = torch::arange(gw, torch::kFloat32).view({1, 1, 1, gw});
      const auto gy = torch::arange(gh, torch::kFloat32).view({1, 1, gh, 1});
      std::vector<float> aw, ah;
      for (const auto& an : anchors_h) {
        aw.push_back(static_cast<float>(an.w));
        ah.push_back(static_cast<float>(an.h));
      }
      const auto aw_t = torch::tensor(aw).view({1, A, 1, 1});
      const auto ah_t = torch::tensor(ah).view({1, A, 1, 1});
      const auto pd = p.detach();
      const auto px = (torch::sigmoid(pd.select(4, 0)) + gx) / static_cast<double>(gw) * W;
      const auto py = (torch::sigmoid(pd.select(4, 1)) + gy) / static_cast<double>(gh) * H;
      const auto pw = aw_t * torch::exp(pd.select(4, 2).clamp_max(20.0));
      const auto ph = ah_t * torch::exp(pd.select(4, 3).clamp_max(20.0));
      for (std::size_t b = 0; b < targets.size(); ++b) {
        if (targets[b].empty()) continue;
        const auto bi = static_cast<long>(b);
        const auto x1 = (px[bi] - pw[0] / 2).reshape({-1, 1}), x2 = (px[bi] + pw[0] / 2).reshape({-1, 1});
        const auto y1 = (py[bi] - ph[0] / 2).reshape({-1, 1}), y2 = (py[bi] + ph[0] / 2).reshape({-1, 1});
        std::vector<float> g4;
        for (const auto& t : targets[b]) {
          g4.insert(g4.end(), {static_cast<float>(t.box.x), static_cast<float>(t.box.y), static_cast<float>(t.box.right()),
                               static_cast<float>(t.box.bottom())});
        }
        const auto gt = torch::tensor(g4).view({-1, 4});
        const auto iw = (torch::min(x2, gt.select(1, 2).view({1, -1})) - torch::max(x1, gt.select(1, 0).view({1, -1}))).clamp_min(0);
        const auto ih = (torch::min(y2, gt.select(1, 3).view({1, -1})) - torch::max(y1, gt.select(1, 1).view({1, -1}))).clamp_min(0);
        const auto inter = iw * ih;
        const auto area_p = (x2 - x1) * (y2 - y1);
        const auto area_g = ((gt.select(1, 2) - gt.select(1, 0)) * (gt.select(1, 3) - gt.select(1, 1))).view({1, -1});
        const auto iou = inter / (area_p + area_g - inter + 1e-9);
        const auto overlapping = std::get<0>(iou.max(1)).gt(0.5).view({A, gh, gw});
        keep_neg[bi].masked_fill_(overlapping, 0.0);
      }
    }

    const auto weight = obj_t + keep_neg;
    obj_loss = obj_loss + torch::binary_cross_entropy_with_logits(p.select(4, 4), obj_t, weight, {},
                                                                  torch::Reduction::Sum);
    const auto mask = obj_t.gt(0.5);
    if (mask.any().item<bool>()) {
      const auto ps = p.index({mask});
      const auto bt = box_t.index({mask});
      const auto sc = scale_t.index({mask});
      const auto xy = (torch::sigmoid(ps.slice(1, 0, 2)) - bt.slice(1, 0, 2)).pow(2).sum(1);
      const auto wh = (ps.slice(1, 2, 4) - bt.slice(1, 2, 4)).pow(2).sum(1);
      box_loss = box_loss + (sc * (xy + wh)).sum();
      if (num_classes > 1) {
        cls_loss = cls_loss + torch::nn::functional::cross_entropy(
                                  ps.slice(1, 5, 5 + num_classes), cls_t.index({mask}),
                                  torch::nn::functional::CrossEntropyFuncOptions().reduction(torch::kSum));
      }
    }
  }
  const double inv = 1.0 / static_cast<double>(B);
  YoloLoss out;
  out.box = box_loss * inv;
  out.obj = obj_loss * inv;
  out.cls = cls_loss * inv;
  out.total = out.box + out.obj + out.cls;
  return out;
}

CdccLoss cdcc_loss(const CdccOutputs& out, const torch::Tensor& corner_targets, const torch::Tensor& labels,
                   double corner_weight, double class_weight) {
  const auto per_coord = (out.corners - corner_targets).pow(2).mean(0);
  CdccLoss l;
  torch::Tensor total = torch::zeros({});
  for (int k = 0; k < 8; ++k) {
    l.corner[static_cast<std::size_t>(k)] = per_coord[k] * (corner_weight / 8.0);
    total = total + l.corner[static_cast<std::size_t>(k)];
  }
  l.cls = torch::nn::functional::cross_entropy(out.logits, labels) * class_weight;
  l.total = total + l.cls;
  return l;
}

// --- Sample preparation ---------------------------------------------------------

namespace {

struct Uniform {
  std::mt19937_64 eng;
  explicit Uniform(std::uint64_t seed) : eng(seed) {}
  double operator()(double a, double b) { return std::uniform_real_distribution<double>(a, b)(eng); }
};

cv::Mat load_image(const fs::path& root, const MeterSample& s) {
  const fs::path file = root / s.image_ref;
  cv::Mat img = cv::imread(file.string(), cv::IMREAD_COLOR);
  if (img.empty()) throw IoError("cannot read image " + file.string());
  return img;
}

BBox clip_to(const BBox& b, double w, double h) {
  const double x0 = std::clamp(b.x, 0.0, w), y0 = std::clamp(b.y, 0.0, h);
  const double x1 = std::clamp(b.right(), 0.0, w), y1 = std::clamp(b.bottom(), 0.0, h);
  return {x0, y0, x1 - x0, y1 - y0};
}

}  // namespace

DetectorExample make_detector_example(const cv::Mat& image, const MeterSample& sample, bool augment,
                                      std::uint64_t seed) {
  LabeledImage li{image, {}};
  if (sample.counter_quad) li.boxes.push_back(quad_to_bbox(*sample.counter_quad));
  if (augment) li = augment_detector(li, seed);
  DetectorExample ex;
  cv::resize(li.image, ex.image, cv::Size(kDetectorInputW, kDetectorInputH), 0, 0, cv::INTER_LINEAR);
  const double sx = static_cast<double>(kDetectorInputW) / li.image.cols;
  const double sy = static_cast<double>(kDetectorInputH) / li.image.rows;
  for (const auto& b : li.boxes) ex.boxes.push_back({{b.x * sx, b.y * sy, b.w * sx, b.h * sy}, 0});
  return ex;
}

AnnotatedImage counter_neighbourhood(const cv::Mat& image, const MeterSample& sample) {
  AnnotatedImage full{image, sample};
  if (!sample.counter_quad) return {image.clone(), sample};
  const BBox b = quad_to_bbox(*sample.counter_quad);
  const double mx = 0.5 * b.w + 8.0, my = 1.0 * b.h + 8.0;
  const int x0 = std::max(0, static_cast<int>(std::floor(b.x - mx)));
  const int y0 = std::max(0, static_cast<int>(std::floor(b.y - my)));
  const int x1 = std::min(image.cols, static_cast<int>(std::ceil(b.right() + mx)));
  const int y1 = std::min(image.rows, static_cast<int>(std::ceil(b.bottom() + my)));
  return crop_annotated(full, cv::Rect(x0, y0, x1 - x0, y1 - y0));
}

CdccExample make_cdcc_example(const AnnotatedImage& nb, bool augment, std::uint64_t seed) {
  if (!nb.sample.counter_quad) throw DataError("corner training needs counter corners for " + nb.sample.image_ref);
  Uniform u(seed);
  AnnotatedImage a = nb;
  if (augment) {
    HsvGeomConfig g;
    g.max_rotation_deg = 10.0;
    g.crop_fraction = 0.0;
    a = augment_hsv_geom(a, mix_seed(seed, 1), g);
    if (a.sample.legible() && u(0.0, 1.0) < 0.5) {
      auto p = permute_digits(a, mix_seed(seed, 2));
      if (p.applied) a = std::move(p.sample);
    }
  }
  const Quad& q = *a.sample.counter_quad;
  BBox box = quad_to_bbox(q);
  if (augment) {
    // Emulate detector localisation error.
    const Point c = box.center();
    const double w = box.w * u(0.92, 1.08), h = box.h * u(0.88, 1.12);
    box = {c.x + u(-0.06, 0.06) * box.w - w / 2.0, c.y + u(-0.1, 0.1) * box.h - h / 2.0, w, h};
  }
  auto crop = make_counter_crop(a.image, box, PipelineConfig{}.expand_factor);
  if (!crop) crop = make_counter_crop(a.image, quad_to_bbox(q), PipelineConfig{}.expand_factor);
  if (!crop) throw DataError("counter crop is empty for " + nb.sample.image_ref);
  CdccExample ex;
  cv::resize(crop->canvas, ex.image, cv::Size(kCdccInputW, kCdccInputH), 0, 0, cv::INTER_LINEAR);
  for (std::size_t k = 0; k < 4; ++k) {
    ex.corners[2 * k] = static_cast<float>((q.corners[k].x - crop->origin.x + crop->padding.offset_x) /
                                           crop->padding.canvas_w);
    ex.corners[2 * k + 1] = static_cast<float>((q.corners[k].y - crop->origin.y + crop->padding.offset_y) /
                                               crop->padding.canvas_h);
  }
  ex.label = a.sample.legible() ? 0 : 1;
  return ex;
}

OcrExample make_ocr_example(const AnnotatedImage& nb, bool augment, double quad_jitter, std::uint64_t seed) {
  if (!nb.sample.counter_quad) throw DataError("digit training needs counter corners for " + nb.sample.image_ref);
  Uniform u(seed);
  AnnotatedImage a = nb;
  if (augment) {
    HsvGeomConfig g;
    g.max_rotation_deg = 3.0;
    g.crop_fraction = 0.0;
    a = augment_hsv_geom(a, mix_seed(seed, 1), g);
    if (u(0.0, 1.0) < 0.5) {
      auto p = permute_digits(a, mix_seed(seed, 2));
      if (p.applied) a = std::move(p.sample);
    }
  }
  Quad q = *a.sample.counter_quad;
  if (augment && quad_jitter > 0.0) {
    const auto edge = [](const Point& p, const Point& r) { return std::hypot(p.x - r.x, p.y - r.y); };
    const double qh = 0.5 * (edge(q.tl(), q.bl()) + edge(q.tr(), q.br()));
    Quad j = q;
    for (auto& p : j.corners) {
      p.x += u(-quad_jitter, quad_jitter) * qh;
      p.y += u(-quad_jitter, quad_jitter) * qh;
    }
    if (j.is_simple()) q = j;
  }
  const RectifiedFrame frame = rectified_frame(inflate_quad(q, PipelineConfig{}.quad_margin));
  const cv::Mat patch = warp_image(a.image, frame);
  const ResizedPatch rp = pad_and_resize(patch, kOcrInputW, kOcrInputH);
  OcrExample ex;
  ex.image = rp.image;
  for (const auto& d : a.sample.digits) {
    const std::array<Point, 4> pts{Point{d.bbox.x, d.bbox.y}, Point{d.bbox.right(), d.bbox.y},
                                   Point{d.bbox.right(), d.bbox.bottom()}, Point{d.bbox.x, d.bbox.bottom()}};
    const auto t = transform_points(pts, frame.matrix);
    double x0 = t[0].x, y0 = t[0].y, x1 = t[0].x, y1 = t[0].y;
    for (const auto& p : t) {
      x0 = std::min(x0, p.x);
      y0 = std::min(y0, p.y);
      x1 = std::max(x1, p.x);
      y1 = std::max(y1, p.y);
    }
    const BBox b = clip_to({x0, y0, x1 - x0, y1 - y0}, frame.max_w, frame.max_h);
    if (b.w < 1.0 || b.h < 1.0) continue;
    ex.boxes.push_back({{(b.x + rp.padding.offset_x) * rp.scale_x, (b.y + rp.padding.offset_y) * rp.scale_y,
                         b.w * rp.scale_x, b.h * rp.scale_y},
                        d.digit_class});
  }
  return ex;
}

// --- Training loops -------------------------------------------------------------

namespace {

class LossLog {
 public:
  explicit LossLog(const fs::path& file) : path_(file) {
    out_.open(file);
    if (!out_) throw IoError("cannot write loss log " + file.string());
    out_ << "step,component,value\n";
  }
  void add(long long step, const std::string& component, double value) {
    out_ << step << ',' << component << ',' << value << '\n';
  }
  void flush() { out_.flush(); }
  const fs::path& path() const { return path_; }

 private:
  fs::path path_;
  std::ofstream out_;
};

std::unique_ptr<torch::optim::Optimizer> make_optimizer(const TrainConfig& cfg, GraphNet& net) {
  const double lr = cfg.lr_at(0);
  if (cfg.optimizer == OptimizerKind::sgd) {
    return std::make_unique<torch::optim::SGD>(
        net->parameters(), torch::optim::SGDOptions(lr).momentum(cfg.momentum).weight_decay(cfg.weight_decay));
  }
  return std::make_unique<torch::optim::Adam>(net->parameters(),
                                              torch::optim::AdamOptions(lr).weight_decay(cfg.weight_decay));
}

void set_lr(torch::optim::Optimizer& opt, double lr) {
  for (auto& group : opt.param_groups()) group.options().set_lr(lr);
}

torch::Tensor stack_images(const std::vector<cv::Mat>& images) {
  std::vector<torch::Tensor> ts;
  ts.reserve(images.size());
  for (const auto& m : images) ts.push_back(image_to_tensor(m));
  return torch::cat(ts, 0);
}

void check_finite(double loss, long long step, const std::optional<fs::path>& last_good) {
  if (std::isfinite(loss)) return;
  throw TrainingError("loss diverged at step " + std::to_string(step) + "; last good checkpoint: " +
                      (last_good ? last_good->string() : std::string("none")));
}

std::vector<std::size_t> limited_indices(std::size_t n, int limit) {
  std::vector<std::size_t> idx(n);
  std::iota(idx.begin(), idx.end(), 0);
  if (limit >= 0 && idx.size() > static_cast<std::size_t>(limit)) idx.resize(static_cast<std::size_t>(limit));
  return idx;
}

using ExampleFn = std::function<std::pair<cv::Mat, std::vector<BoxTarget>>(std::size_t index, std::uint64_t seed)>;
using ValFn = std::function<double(GraphNet&)>;

// Shared loop of the two grid detectors: iteration-based, piecewise LR with
// warm-up, periodic validation keeping the best weights.
TrainResult train_grid_model(const TrainConfig& cfg, GraphNet net, const AnchorSet& anchors, std::size_t n_train,
                             const ExampleFn& example, const ValFn& validate, const fs::path& out_dir,
                             const std::string& name) {
  fs::create_directories(out_dir);
  TrainResult res;
  res.checkpoint = out_dir / (name + ".pt");
  LossLog log(out_dir / (name + "_loss.csv"));
  res.loss_log = log.path();

  CheckpointInfo info;
  info.model = cfg.model;
  info.scale_factor = cfg.scale_factor;
  info.anchors = anchors;
  info.config_hash = config_hash(cfg);

  const auto groups = head_anchor_groups(net->spec());
  const cv::Size input(net->spec().input_w, net->spec().input_h);
  auto opt = make_optimizer(cfg, net);
  std::mt19937_64 order_rng(mix_seed(cfg.seed, 0x0D3E));
  std::vector<std::size_t> order(n_train);
  std::iota(order.begin(), order.end(), 0);
  std::size_t cursor = order.size();

  std::optional<fs::path> last_good;
  double best = std::numeric_limits<double>::infinity();
  int since_best = 0;
  long long it = 0;
  for (; it < cfg.max_iterations; ++it) {
    double lr = cfg.lr_at(it);
    if (it < cfg.burn_in) lr *= static_cast<double>(it + 1) / cfg.burn_in;
    set_lr(*opt, lr);

    std::vector<cv::Mat> images;
    std::vector<std::vector<BoxTarget>> targets;
    for (int k = 0; k < cfg.batch_size; ++k) {
      if (cursor >= order.size()) {
        std::shuffle(order.begin(), order.end(), order_rng);
        cursor = 0;
      }
      auto [img, boxes] = example(order[cursor++], mix_seed(cfg.seed, static_cast<std::uint64_t>(it) * 4096 + k));
      images.push_back(std::move(img));
      targets.push_back(std::move(boxes));
    }
    net->train();
    const auto heads = net->forward(stack_images(images));
    const YoloLoss loss = yolo_loss(heads, targets, anchors, groups, input, net->spec().num_classes);
    const double total = loss.total.item<double>();
    check_finite(total, it, last_good);
    opt->zero_grad();
    loss.total.backward();
    opt->step();
    log.add(it, "box", loss.box.item<double>());
    log.add(it, "obj", loss.obj.item<double>());
    log.add(it, "cls", loss.cls.item<double>());
    log.add(it, "total", total);
    res.final_train_loss = total;

    const bool last = it + 1 == cfg.max_iterations;
    if ((it + 1) % cfg.eval_interval == 0 || last) {
      const double v = validate(net);
      log.add(it, "val_total", v);
      log.flush();
      check_finite(v, it, last_good);
      if (v < best) {
        best = v;
        since_best = 0;
        info.iterations = it + 1;
        info.best_val_loss = v;
        save_checkpoint(net, info, res.checkpoint);
        last_good = res.checkpoint;
      } else if (++since_best >= cfg.early_stop_patience) {
        res.early_stopped = true;
        ++it;
        break;
      }
    }
  }
  if (!last_good) {
    info.iterations = it;
    info.best_val_loss = validate(net);
    save_checkpoint(net, info, res.checkpoint);
    best = info.best_val_loss;
  }
  res.iterations = it;
  res.best_val_loss = best;
  return res;
}

std::vector<AnnotatedImage> neighbourhoods(const std::vector<MeterSample>& samples, const fs::path& root,
                                           bool legible_only) {
  std::vector<AnnotatedImage> out;
  for (const auto& s : samples) {
    if (legible_only && !s.legible()) continue;
    if (!s.counter_quad) continue;
    out.push_back(counter_neighbourhood(load_image(root, s), s));
  }
  return out;
}

}  // namespace

double detector_validation_loss(GraphNet& net, const AnchorSet& anchors, const std::vector<MeterSample>& samples,
                                const fs::path& image_root, int limit) {
  const auto idx = limited_indices(samples.size(), limit);
  if (idx.empty()) return 0.0;
  torch::NoGradGuard guard;
  net->eval();
  const auto groups = head_anchor_groups(net->spec());
  double sum = 0.0;
  constexpr std::size_t kChunk = 16;
  for (std::size_t start = 0; start < idx.size(); start += kChunk) {
    std::vector<cv::Mat> images;
    std::vector<std::vector<BoxTarget>> targets;
    for (std::size_t i = start; i < std::min(idx.size(), start + kChunk); ++i) {
      const auto& s = samples[idx[i]];
      auto ex = make_detector_example(load_image(image_root, s), s, false, 0);
      images.push_back(ex.image);
      targets.push_back(ex.boxes);
    }
    const auto heads = net->forward(stack_images(images));
    const auto loss = yolo_loss(heads, targets, anchors, groups, cv::Size(kDetectorInputW, kDetectorInputH),
                                net->spec().num_classes);
    sum += loss.total.item<double>() * static_cast<double>(images.size());
  }
  return sum / static_cast<double>(idx.size());
}

double ocr_validation_loss(GraphNet& net, const AnchorSet& anchors, const std::vector<MeterSample>& samples,
                           const fs::path& image_root, int limit) {
  std::vector<MeterSample> legible;
  for (const auto& s : samples) {
    if (s.legible() && s.counter_quad) legible.push_back(s);
  }
  const auto idx = limited_indices(legible.size(), limit);
  if (idx.empty()) return 0.0;
  torch::NoGradGuard guard;
  net->eval();
  const auto groups = head_anchor_groups(net->spec());
  double sum = 0.0;
  constexpr std::size_t kChunk = 16;
  for (std::size_t start = 0; start < idx.size(); start += kChunk) {
    std::vector<cv::Mat> images;
    std::vector<std::vector<BoxTarget>> targets;
    for (std::size_t i = start; i < std::min(idx.size(), start + kChunk); ++i) {
      const auto& s = legible[idx[i]];
      auto ex = make_ocr_example(counter_neighbourhood(load_image(image_root, s), s), false, 0.0, 0);
      images.push_back(ex.image);
      targets.push_back(ex.boxes);
    }
    const auto heads = net->forward(stack_images(images));
    const auto loss =
        yolo_loss(heads, targets, anchors, groups, cv::Size(kOcrInputW, kOcrInputH), net->spec().num_classes);
    sum += loss.total.item<double>() * static_cast<double>(images.size());
  }
  return sum / static_cast<double>(idx.size());
}

double cdcc_validation_loss(GraphNet& net, const std::vector<MeterSample>& samples, const fs::path& image_root,
                            const TrainConfig& cfg, int limit) {
  std::vector<MeterSample> usable;
  for (const auto& s : samples) {
    if (s.counter_quad) usable.push_back(s);
  }
  const auto idx = limited_indices(usable.size(), limit);
  if (idx.empty()) return 0.0;
  torch::NoGradGuard guard;
  net->eval();
  double sum = 0.0;
  constexpr std::size_t kChunk = 64;
  for (std::size_t start = 0; start < idx.size(); start += kChunk) {
    std::vector<cv::Mat> images;
    std::vector<float> corners;
    std::vector<long> labels;
    for (std::size_t i = start; i < std::min(idx.size(), start + kChunk); ++i) {
      const auto& s = usable[idx[i]];
      const auto ex = make_cdcc_example(counter_neighbourhood(load_image(image_root, s), s), false, 0);
      images.push_back(ex.image);
      corners.insert(corners.end(), ex.corners.begin(), ex.corners.end());
      labels.push_back(ex.label);
    }
    const auto n = static_cast<long>(images.size());
    const auto out = cdcc_outputs(net, stack_images(images));
    const auto loss = cdcc_loss(out, torch::tensor(corners).view({n, 8}), torch::tensor(labels, torch::kLong),
                                cfg.corner_weight, cfg.class_weight);
    sum += loss.total.item<double>() * static_cast<double>(n);
  }
  return sum / static_cast<double>(idx.size());
}

TrainResult train_detector(const TrainConfig& cfg, const TrainingData& data, const fs::path& out_dir) {
  cfg.validate();
  if (cfg.model != ModelKind::detector) throw ParameterError("train_detector needs a detector config");
  std::vector<MeterSample> train;
  for (const auto& s : data.split.train) {
    if (s.counter_quad) train.push_back(s);
  }
  if (train.empty()) throw DataError("no training samples with counter corners");
  torch::set_num_threads(cfg.threads);
  torch::manual_seed(cfg.seed);
  const cv::Size input(kDetectorInputW, kDetectorInputH);
  const NetworkSpec spec = build_detector_spec(cfg.scale_factor);
  const AnchorSet anchors = AnchorSet::from_sorted(estimate_anchors(train, 9, input), spec.anchors_per_scale);
  GraphNet net(spec);
  const auto& root = data.image_root;
  const auto& val = data.split.validation.empty() ? train : data.split.validation;
  auto example = [&](std::size_t i, std::uint64_t seed) {
    auto ex = make_detector_example(load_image(root, train[i]), train[i], cfg.augment, seed);
    return std::make_pair(ex.image, ex.boxes);
  };
  auto validate = [&](GraphNet& n) { return detector_validation_loss(n, anchors, val, root, cfg.max_val_samples); };
  return train_grid_model(cfg, net, anchors, train.size(), example, validate, out_dir, "detector");
}

TrainResult train_ocr(const TrainConfig& cfg, const TrainingData& data, const fs::path& out_dir) {
  cfg.validate();
  if (cfg.model != ModelKind::ocr) throw ParameterError("train_ocr needs an OCR config");
  const auto train = neighbourhoods(data.split.train, data.image_root, true);
  if (train.empty()) throw DataError("no legible training samples with counter corners");
  torch::set_num_threads(cfg.threads);
  torch::manual_seed(cfg.seed);
  const NetworkSpec spec = build_ocr_spec(cfg.scale_factor);

  std::vector<Anchor> sizes;
  for (const auto& nb : train) {
    for (const auto& b : make_ocr_example(nb, false, 0.0, 0).boxes) sizes.push_back({b.box.w, b.box.h});
  }
  const int num_anchors = spec.anchors_per_scale * static_cast<int>(spec.output_layers().size());
  const AnchorSet anchors = AnchorSet::from_sorted(kmeans_anchors(sizes, num_anchors), spec.anchors_per_scale);
  GraphNet net(spec);

  std::vector<MeterSample> val;
  for (const auto& s : data.split.validation) {
    if (s.legible()) val.push_back(s);
  }
  if (val.empty()) {
    for (const auto& nb : train) val.push_back(nb.sample);
  }
  auto example = [&](std::size_t i, std::uint64_t seed) {
    auto ex = make_ocr_example(train[i], cfg.augment, cfg.augment ? cfg.ocr_quad_jitter : 0.0, seed);
    return std::make_pair(ex.image, ex.boxes);
  };
  ValFn validate = [&](GraphNet& n) {
    return ocr_validation_loss(n, anchors, val, data.image_root, cfg.max_val_samples);
  };
  if (data.split.validation.empty()) {
    // Neighbourhood samples carry shifted coordinates; validate on them directly.
    validate = [&](GraphNet& n) {
      torch::NoGradGuard guard;
      n->eval();
      const auto groups = head_anchor_groups(n->spec());
      double sum = 0.0;
      const auto idx = limited_indices(train.size(), cfg.max_val_samples);
      for (auto i : idx) {
        const auto ex = make_ocr_example(train[i], false, 0.0, 0);
        const auto heads = n->forward(image_to_tensor(ex.image));
        sum += yolo_loss(heads, {ex.boxes}, anchors, groups, cv::Size(kOcrInputW, kOcrInputH), n->spec().num_classes)
                   .total.item<double>();
      }
      return sum / static_cast<double>(idx.size());
    };
  }
  return train_grid_model(cfg, net, anchors, train.size(), example, validate, out_dir, "ocr");
}

TrainResult train_cdcc(const TrainConfig& cfg, const TrainingData& data, const fs::path& out_dir) {
  cfg.validate();
  if (cfg.model != ModelKind::cdcc) throw ParameterError("train_cdcc needs a CDCC config");
  const auto train = neighbourhoods(data.split.train, data.image_root, false);
  if (train.empty()) throw DataError("no training samples with counter corners");
  torch::set_num_threads(cfg.threads);
  torch::manual_seed(cfg.seed);
  GraphNet net(build_cdcc_spec(cfg.scale_factor));
  fs::create_directories(out_dir);

  TrainResult res;
  res.checkpoint = out_dir / "cdcc.pt";
  LossLog log(out_dir / "cdcc_loss.csv");
  res.loss_log = log.path();
  CheckpointInfo info;
  info.model = ModelKind::cdcc;
  info.scale_factor = cfg.scale_factor;
  info.config_hash = config_hash(cfg);

  const bool own_val = data.split.validation.empty();
  std::vector<CdccExample> val_examples;
  {
    const auto& src = data.split.validation;
    const auto idx = limited_indices(own_val ? train.size() : src.size(), cfg.max_val_samples);
    for (auto i : idx) {
      if (own_val) {
        val_examples.push_back(make_cdcc_example(train[i], false, 0));
      } else if (src[i].counter_quad) {
        val_examples.push_back(make_cdcc_example(counter_neighbourhood(load_image(data.image_root, src[i]), src[i]), false, 0));
      }
    }
  }
  auto batch_loss = [&](const std::vector<CdccExample>& exs) {
    std::vector<cv::Mat> images;
    std::vector<float> corners;
    std::vector<long> labels;
    for (const auto& ex : exs) {
      images.push_back(ex.image);
      corners.insert(corners.end(), ex.corners.begin(), ex.corners.end());
      labels.push_back(ex.label);
    }
    const auto n = static_cast<long>(exs.size());
    return cdcc_loss(cdcc_outputs(net, stack_images(images)), torch::tensor(corners).view({n, 8}),
                     torch::tensor(labels, torch::kLong), cfg.corner_weight, cfg.class_weight);
  };
  auto validate = [&]() {
    if (val_examples.empty()) return 0.0;
    torch::NoGradGuard guard;
    net->eval();
    double sum = 0.0;
    for (std::size_t s = 0; s < val_examples.size(); s += 64) {
      std::vector<CdccExample> chunk(val_examples.begin() + static_cast<long>(s),
                                     val_examples.begin() + static_cast<long>(std::min(val_examples.size(), s + 64)));
      sum += batch_loss(chunk).total.item<double>() * static_cast<double>(chunk.size());
    }
    return sum / static_cast<double>(val_examples.size());
  };

  auto opt = make_optimizer(cfg, net);
  std::mt19937_64 order_rng(mix_seed(cfg.seed, 0x0D3E));
  std::vector<std::size_t> order(train.size());
  std::iota(order.begin(), order.end(), 0);
  double lr_scale = 1.0;
  double best = std::numeric_limits<double>::infinity();
  int since_best = 0;
  int since_plateau = 0;
  std::optional<fs::path> last_good;
  long long step = 0;
  int epoch = 0;
  for (; epoch < cfg.max_epochs; ++epoch) {
    std::shuffle(order.begin(), order.end(), order_rng);
    for (std::size_t s = 0; s < order.size(); s += static_cast<std::size_t>(cfg.batch_size)) {
      set_lr(*opt, cfg.lr_at(step) * lr_scale);
      std::vector<CdccExample> batch;
      for (std::size_t k = s; k < std::min(order.size(), s + static_cast<std::size_t>(cfg.batch_size)); ++k) {
        batch.push_back(make_cdcc_example(train[order[k]], cfg.augment,
                                          mix_seed(cfg.seed, static_cast<std::uint64_t>(step) * 4096 + (k - s))));
      }
      net->train();
      const CdccLoss loss = batch_loss(batch);
      const double total = loss.total.item<double>();
      check_finite(total, step, last_good);
      opt->zero_grad();
      loss.total.backward();
      opt->step();
      for (int k = 0; k < 8; ++k) log.add(step, "corner_" + std::to_string(k), loss.corner[static_cast<std::size_t>(k)].item<double>());
      log.add(step, "class", loss.cls.item<double>());
      log.add(step, "total", total);
      res.final_train_loss = total;
      ++step;
    }
    const double v = validate();
    log.add(step, "val_total", v);
    log.flush();
    check_finite(v, step, last_good);
    if (v < best) {
      best = v;
      since_best = 0;
      since_plateau = 0;
      info.iterations = step;
      info.best_val_loss = v;
      save_checkpoint(net, info, res.checkpoint);
      last_good = res.checkpoint;
    } else {
      ++since_best;
      if (++since_plateau >= cfg.plateau_patience) {
        lr_scale *= cfg.plateau_factor;
        since_plateau = 0;
      }
      if (since_best >= cfg.early_stop_patience) {
        res.early_stopped = true;
        ++epoch;
        break;
      }
    }
  }
  if (!last_good) {
    info.iterations = step;
    info.best_val_loss = validate();
    best = info.best_val_loss;
    save_checkpoint(net, info, res.checkpoint);
  }
  res.iterations = step;
  res.best_val_loss = best;
  return res;
}

TrainResult train_model(const TrainConfig& cfg, const TrainingData& data, const fs::path& out_dir) {
  switch (cfg.model) {
    case ModelKind::detector: return train_detector(cfg, data, out_dir);
    case ModelKind::cdcc: return train_cdcc(cfg, data, out_dir);
    case ModelKind::ocr: return train_ocr(cfg, data, out_dir);
  }
  throw ParameterError("unknown model");
}

}  // namespace amr
