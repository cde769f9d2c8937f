#include "amr/models.hpp"

#include <algorithm>
#include <fstream>

#include <opencv2/imgproc.hpp>

#include "amr/errors.hpp"

namespace amr {

namespace fs = std::filesystem;
using json = nlohmann::json;

GraphNetImpl::GraphNetImpl(NetworkSpec spec) : spec_(std::move(spec)) {
  const ShapeReport shapes = shape_and_flops(spec_);
  const std::size_t n = spec_.layers.size();
  convs_.resize(n, nullptr);
  norms_.resize(n, nullptr);
  dense_.resize(n, nullptr);
  for (std::size_t i = 0; i < n; ++i) {
    const auto& l = spec_.layers[i];
    const Shape& in = shapes.layers[i].input;
    const std::string tag = "l" + std::to_string(i);
    if (l.kind == LayerKind::conv) {
      const bool normed = l.activation == Activation::leaky;
      auto opts = torch::nn::Conv2dOptions(in.c, *l.filters_or_units, *l.kernel)
                      .stride(*l.stride)
                      .padding(*l.kernel / 2)
                      .bias(!normed);
      convs_[i] = register_module(tag + "_conv", torch::nn::Conv2d(opts));
      if (normed) norms_[i] = register_module(tag + "_bn", torch::nn::BatchNorm2d(*l.filters_or_units));
    } else if (l.kind == LayerKind::dense) {
      dense_[i] = register_module(tag + "_dense", torch::nn::Linear(in.c, *l.filters_or_units));
    }
  }
  // Start objectness near a 1% prior so the many empty cells do not swamp the
  // first iterations.
  torch::NoGradGuard guard;
  const int stride = 5 + spec_.num_classes;
  for (const auto& l : spec_.layers) {
    if (l.kind != LayerKind::detection) continue;
    auto& head = convs_[static_cast<std::size_t>(l.inputs.front())];
    if (!head || !head->bias.defined()) continue;
    for (int a = 0; a < spec_.anchors_per_scale; ++a) head->bias[a * stride + 4].fill_(-4.6);
  }
}

std::vector<torch::Tensor> GraphNetImpl::forward_all(const torch::Tensor& x) {
  std::vector<torch::Tensor> outs;
  outs.reserve(spec_.layers.size());
  for (std::size_t i = 0; i < spec_.layers.size(); ++i) {
    const auto& l = spec_.layers[i];
    const torch::Tensor in = l.inputs.empty() ? x : outs[static_cast<std::size_t>(l.inputs.front())];
    torch::Tensor y;
    switch (l.kind) {
      case LayerKind::conv:
        y = convs_[i]->forward(in);
        if (norms_[i]) y = norms_[i]->forward(y);
        break;
      case LayerKind::max_pool:
        y = torch::max_pool2d(in, l.kernel.value_or(2), l.stride.value_or(2));
        break;
      case LayerKind::route: {
        std::vector<torch::Tensor> parts;
        for (int k : l.inputs) parts.push_back(outs[static_cast<std::size_t>(k)]);
        y = parts.size() == 1 ? parts.front() : torch::cat(parts, 1);
        if (l.groups > 1) y = y.chunk(l.groups, 1)[static_cast<std::size_t>(l.group_id)];
        break;
      }
      case LayerKind::upsample:
        y = torch::upsample_nearest2d(in, {in.size(2) * l.scale, in.size(3) * l.scale});
        break;
      case LayerKind::flatten:
        y = in.flatten(1);
        break;
      case LayerKind::dense:
        y = dense_[i]->forward(in);
        break;
      case LayerKind::detection:
        y = in;
        break;
      case LayerKind::softmax_head:
        y = torch::softmax(in, 1);
        break;
    }
    if (l.activation == Activation::leaky) y = torch::leaky_relu(y, 0.1);
    outs.push_back(y);
  }
  return outs;
}

std::vector<torch::Tensor> GraphNetImpl::forward(const torch::Tensor& x) {
  auto all = forward_all(x);
  std::vector<torch::Tensor> out;
  for (int i : spec_.output_layers()) out.push_back(all[static_cast<std::size_t>(i)]);
  return out;
}

torch::Tensor image_to_tensor(const cv::Mat& bgr) {
  if (bgr.type() != CV_8UC3) throw InferenceError("expected an 8-bit 3-channel image");
  cv::Mat contiguous = bgr.isContinuous() ? bgr : bgr.clone();
  auto t = torch::from_blob(contiguous.data, {contiguous.rows, contiguous.cols, 3}, torch::kUInt8);
  return t.permute({2, 0, 1}).to(torch::kFloat32).div(255.0).unsqueeze(0).contiguous();
}

GridTensor to_grid(const torch::Tensor& head, int b) {
  const torch::Tensor hwc = head[b].permute({1, 2, 0}).contiguous().to(torch::kFloat32);
  GridTensor g;
  g.h = static_cast<int>(hwc.size(0));
  g.w = static_cast<int>(hwc.size(1));
  g.channels = static_cast<int>(hwc.size(2));
  g.data.assign(hwc.data_ptr<float>(), hwc.data_ptr<float>() + hwc.numel());
  return g;
}

AnchorSet AnchorSet::from_sorted(const std::vector<Anchor>& sorted, int per_scale) {
  if (per_scale < 1 || sorted.empty() || sorted.size() % static_cast<std::size_t>(per_scale) != 0) {
    throw ParameterError("anchor count must be a multiple of the per-scale count");
  }
  AnchorSet set;
  for (std::size_t i = 0; i < sorted.size(); i += static_cast<std::size_t>(per_scale)) {
    set.per_scale.emplace_back(sorted.begin() + static_cast<long>(i),
                               sorted.begin() + static_cast<long>(i) + per_scale);
  }
  return set;
}

std::vector<Anchor> AnchorSet::flat() const {
  std::vector<Anchor> out;
  for (const auto& s : per_scale) out.insert(out.end(), s.begin(), s.end());
  return out;
}

void AnchorSet::validate() const {
  double prev = 0.0;
  for (const auto& s : per_scale) {
    if (s.size() != per_scale.front().size()) throw ValidationError("anchor scales differ in size");
    for (const auto& a : s) {
      if (!(a.w > 0.0 && a.h > 0.0)) throw ValidationError("anchor dimensions must be positive");
      if (a.w * a.h + 1e-9 < prev) throw ValidationError("anchors must be sorted by area");
      prev = a.w * a.h;
    }
  }
}

json to_json(const AnchorSet& a) {
  json out = json::array();
  for (const auto& s : a.per_scale) {
    json scale = json::array();
    for (const auto& an : s) scale.push_back({an.w, an.h});
    out.push_back(scale);
  }
  return out;
}

AnchorSet anchor_set_from_json(const json& j) {
  AnchorSet a;
  try {
    for (const auto& scale : j) {
      std::vector<Anchor> s;
      for (const auto& an : scale) s.push_back({an.at(0).get<double>(), an.at(1).get<double>()});
      a.per_scale.push_back(s);
    }
  } catch (const json::exception& e) {
    throw ParseError(std::string("anchors: ") + e.what());
  }
  return a;
}

std::vector<int> head_anchor_groups(const NetworkSpec& spec) {
  const auto shapes = shape_and_flops(spec);
  const auto outs = spec.output_layers();
  std::vector<int> order(outs.size());
  for (std::size_t i = 0; i < outs.size(); ++i) order[i] = static_cast<int>(i);
  // Finest grid (largest width) first.
  std::stable_sort(order.begin(), order.end(), [&](int a, int b) {
    return shapes.layers[static_cast<std::size_t>(outs[static_cast<std::size_t>(a)])].output.w >
           shapes.layers[static_cast<std::size_t>(outs[static_cast<std::size_t>(b)])].output.w;
  });
  std::vector<int> groups(outs.size());
  for (std::size_t rank = 0; rank < order.size(); ++rank) groups[static_cast<std::size_t>(order[rank])] = static_cast<int>(rank);
  return groups;
}

json to_json(const CheckpointInfo& info) {
  return {{"model", to_string(info.model)},
          {"scale_factor", info.scale_factor},
          {"anchors", to_json(info.anchors)},
          {"config_hash", info.config_hash},
          {"iterations", info.iterations},
          {"best_val_loss", info.best_val_loss}};
}

CheckpointInfo checkpoint_info_from_json(const json& j) {
  CheckpointInfo info;
  try {
    info.model = model_kind_from_string(j.at("model").get<std::string>());
    info.scale_factor = j.at("scale_factor").get<double>();
    info.anchors = anchor_set_from_json(j.at("anchors"));
    info.config_hash = j.value("config_hash", std::string{});
    info.iterations = j.value("iterations", 0LL);
    info.best_val_loss = j.value("best_val_loss", 0.0);
  } catch (const json::exception& e) {
    throw ParseError(std::string("checkpoint sidecar: ") + e.what());
  }
  return info;
}

fs::path sidecar_path(const fs::path& checkpoint) {
  fs::path p = checkpoint;
  p += ".json";
  return p;
}

void save_checkpoint(GraphNet& net, const CheckpointInfo& info, const fs::path& file) {
  if (file.has_parent_path()) fs::create_directories(file.parent_path());
  fs::path tmp = file;
  tmp += ".tmp";
  try {
    torch::serialize::OutputArchive archive;
    net->save(archive);
    archive.save_to(tmp.string());
  } catch (const c10::Error& e) {
    throw IoError("cannot write checkpoint " + file.string() + ": " + e.what_without_backtrace());
  }
  fs::rename(tmp, file);

  const fs::path side = sidecar_path(file);
  fs::path side_tmp = side;
  side_tmp += ".tmp";
  {
    std::ofstream out(side_tmp);
    if (!out) throw IoError("cannot write " + side_tmp.string());
    out << to_json(info).dump(2) << '\n';
    if (!out) throw IoError("cannot write " + side_tmp.string());
  }
  fs::rename(side_tmp, side);
}

GraphNet load_checkpoint(const fs::path& file, CheckpointInfo* info_out) {
  if (!fs::exists(file)) throw IoError("checkpoint not found: " + file.string());
  std::ifstream in(sidecar_path(file));
  if (!in) throw IoError("checkpoint sidecar not found: " + sidecar_path(file).string());
  json j;
  try {
    in >> j;
  } catch (const json::exception& e) {
    throw ParseError("checkpoint sidecar: " + std::string(e.what()));
  }
  const CheckpointInfo info = checkpoint_info_from_json(j);
  GraphNet net(build_spec(info.model, info.scale_factor));
  try {
    torch::serialize::InputArchive archive;
    archive.load_from(file.string());
    net->load(archive);
  } catch (const c10::Error& e) {
    throw IoError("cannot load checkpoint " + file.string() + ": " + e.what_without_backtrace());
  }
  net->eval();
  if (info_out) *info_out = info;
  return net;
}

std::vector<Detection> decode_heads(const std::vector<torch::Tensor>& heads, const AnchorSet& anchors,
                                    const std::vector<int>& groups, cv::Size net_input, int num_classes, int b) {
  if (heads.size() != groups.size()) throw ShapeError("head count does not match anchor groups");
  std::vector<Detection> all;
  for (std::size_t h = 0; h < heads.size(); ++h) {
    const auto group = static_cast<std::size_t>(groups[h]);
    if (group >= anchors.per_scale.size()) throw ShapeError("missing anchors for a detection scale");
    auto dets = decode_grid(to_grid(heads[h], b), anchors.per_scale[group], net_input, num_classes);
    all.insert(all.end(), dets.begin(), dets.end());
  }
  return all;
}

TorchDetector::TorchDetector(GraphNet net, AnchorSet anchors)
    : net_(std::move(net)), anchors_(std::move(anchors)), groups_(head_anchor_groups(net_->spec())) {
  net_->eval();
}

std::unique_ptr<TorchDetector> TorchDetector::load(const fs::path& checkpoint) {
  CheckpointInfo info;
  GraphNet net = load_checkpoint(checkpoint, &info);
  if (info.model != ModelKind::detector) throw ParameterError(checkpoint.string() + " is not a detector checkpoint");
  return std::make_unique<TorchDetector>(net, info.anchors);
}

std::vector<Detection> TorchDetector::detect(const cv::Mat& image) {
  const cv::Size input(kDetectorInputW, kDetectorInputH);
  cv::Mat resized;
  cv::resize(image, resized, input, 0, 0, cv::INTER_LINEAR);
  torch::NoGradGuard guard;
  const auto heads = net_->forward(image_to_tensor(resized));
  std::vector<Detection> dets;
  const double sx = static_cast<double>(image.cols) / input.width;
  const double sy = static_cast<double>(image.rows) / input.height;
  for (auto d : decode_heads(heads, anchors_, groups_, input, net_->spec().num_classes)) {
    if (d.confidence < min_confidence) continue;
    d.bbox = {d.bbox.x * sx, d.bbox.y * sy, d.bbox.w * sx, d.bbox.h * sy};
    dets.push_back(d);
  }
  return nms(std::move(dets), 0.45, true);
}

TorchCornerClassifier::TorchCornerClassifier(GraphNet net) : net_(std::move(net)) { net_->eval(); }

std::unique_ptr<TorchCornerClassifier> TorchCornerClassifier::load(const fs::path& checkpoint) {
  CheckpointInfo info;
  GraphNet net = load_checkpoint(checkpoint, &info);
  if (info.model != ModelKind::cdcc) throw ParameterError(checkpoint.string() + " is not a CDCC checkpoint");
  return std::make_unique<TorchCornerClassifier>(net);
}

CdccOutputs cdcc_outputs(GraphNet& net, const torch::Tensor& x) {
  auto all = net->forward_all(x);
  const auto outs = net->spec().output_layers();
  if (outs.size() != 9) throw ShapeError("corner network must have eight corner outputs and a class head");
  std::vector<torch::Tensor> corners;
  for (std::size_t i = 0; i < 8; ++i) corners.push_back(all[static_cast<std::size_t>(outs[i])]);
  // The class head ends in a softmax; train on the logits feeding it.
  const auto& head = net->spec().layers[static_cast<std::size_t>(outs[8])];
  return {torch::cat(corners, 1), all[static_cast<std::size_t>(head.inputs.front())]};
}

CounterVerdict TorchCornerClassifier::classify(const cv::Mat& patch) {
  cv::Mat input = patch;
  if (patch.cols != kCdccInputW || patch.rows != kCdccInputH) {
    cv::resize(patch, input, cv::Size(kCdccInputW, kCdccInputH), 0, 0, cv::INTER_LINEAR);
  }
  torch::NoGradGuard guard;
  const auto out = cdcc_outputs(net_, image_to_tensor(input));
  const auto corners = out.corners[0].contiguous();
  const auto probs = torch::softmax(out.logits[0], 0).contiguous();
  CounterVerdict v;
  for (int i = 0; i < 8; ++i) v.corners_norm[static_cast<std::size_t>(i)] = corners[i].item<double>();
  v.p_legible = probs[0].item<double>();
  v.p_illegible = probs[1].item<double>();
  return v;
}

TorchDigitRecognizer::TorchDigitRecognizer(GraphNet net, AnchorSet anchors)
    : net_(std::move(net)), anchors_(std::move(anchors)), groups_(head_anchor_groups(net_->spec())) {
  net_->eval();
}

std::unique_ptr<TorchDigitRecognizer> TorchDigitRecognizer::load(const fs::path& checkpoint) {
  CheckpointInfo info;
  GraphNet net = load_checkpoint(checkpoint, &info);
  if (info.model != ModelKind::ocr) throw ParameterError(checkpoint.string() + " is not an OCR checkpoint");
  return std::make_unique<TorchDigitRecognizer>(net, info.anchors);
}

std::vector<Detection> TorchDigitRecognizer::recognize(const cv::Mat& patch) {
  cv::Mat input = patch;
  if (patch.cols != kOcrInputW || patch.rows != kOcrInputH) {
    cv::resize(patch, input, cv::Size(kOcrInputW, kOcrInputH), 0, 0, cv::INTER_LINEAR);
  }
  torch::NoGradGuard guard;
  const auto heads = net_->forward(image_to_tensor(input));
  std::vector<Detection> out;
  for (const auto& d :
       decode_heads(heads, anchors_, groups_, cv::Size(kOcrInputW, kOcrInputH), net_->spec().num_classes)) {
    if (d.confidence >= min_confidence) out.push_back(d);
  }
  return out;
}

LoadedModels load_models(const fs::path& dir) {
  LoadedModels m;
  m.detector = TorchDetector::load(dir / "detector.pt");
  m.cdcc = TorchCornerClassifier::load(dir / "cdcc.pt");
  m.ocr = TorchDigitRecognizer::load(dir / "ocr.pt");
  return m;
}

}  // namespace amr
