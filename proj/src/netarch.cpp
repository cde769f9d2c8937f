#include "amr/netarch.hpp"

#include <cmath>
#include <cstdio>
#include <sstream>

#include "amr/errors.hpp"

namespace amr {

std::string to_string(LayerKind kind) {
  switch (kind) {
    case LayerKind::conv: return "conv";
    case LayerKind::max_pool: return "max";
    case LayerKind::route: return "route";
    case LayerKind::upsample: return "upsample";
    case LayerKind::dense: return "dense";
    case LayerKind::flatten: return "flatten";
    case LayerKind::detection: return "detection";
    case LayerKind::softmax_head: return "softmax";
  }
  return "?";
}

std::string to_string(ModelKind kind) {
  switch (kind) {
    case ModelKind::detector: return "detector";
    case ModelKind::cdcc: return "cdcc";
    case ModelKind::ocr: return "ocr";
  }
  return "?";
}

ModelKind model_kind_from_string(const std::string& text) {
  if (text == "detector") return ModelKind::detector;
  if (text == "cdcc") return ModelKind::cdcc;
  if (text == "ocr") return ModelKind::ocr;
  throw ParameterError("unknown model '" + text + "' (expected detector, cdcc or ocr)");
}

std::vector<int> NetworkSpec::output_layers() const {
  std::vector<bool> consumed(layers.size(), false);
  for (const auto& l : layers) {
    for (int in : l.inputs) {
      if (in >= 0 && static_cast<std::size_t>(in) < layers.size()) consumed[static_cast<std::size_t>(in)] = true;
    }
  }
  std::vector<int> out;
  for (std::size_t i = 0; i < layers.size(); ++i) {
    if (!consumed[i]) out.push_back(static_cast<int>(i));
  }
  return out;
}

std::string Shape::to_string() const {
  if (flat) return std::to_string(c);
  return std::to_string(w) + "x" + std::to_string(h) + "x" + std::to_string(c);
}

double ShapeReport::total_bflop() const {
  double total = 0.0;
  for (const auto& l : layers) total += l.bflop;
  return total;
}

std::string ShapeReport::to_csv() const {
  std::ostringstream out;
  out << "index,kind,in_shape,out_shape,bflop\n";
  for (const auto& l : layers) {
    char buf[32];
    std::snprintf(buf, sizeof buf, "%.3f", l.bflop);
    out << l.index << ',' << to_string(l.kind) << ',' << l.input.to_string() << ','
        << l.output.to_string() << ',' << buf << '\n';
  }
  return out.str();
}

int scaled_filters(int filters, double scale_factor) {
  const int rounded = static_cast<int>(std::floor(filters * scale_factor / 8.0 + 0.5)) * 8;
  return std::max(8, rounded);
}

namespace {

void check_scale(double s) {
  if (!(s > 0.0 && s <= 1.0)) {
    throw ParameterError("scale factor must lie in (0, 1], got " + std::to_string(s));
  }
}

// Appends layers with implicit "previous layer" inputs unless told otherwise.
class Builder {
 public:
  explicit Builder(double scale) : scale_(scale) {}

  int conv(int filters, int k, int stride, bool head = false, int branch = -1) {
    LayerSpec l = next(LayerKind::conv);
    l.filters_or_units = head ? filters : scaled_filters(filters, scale_);
    l.kernel = k;
    l.stride = stride;
    l.activation = head ? Activation::linear : Activation::leaky;
    l.branch = branch;
    return push(l);
  }
  int max_pool() {
    LayerSpec l = next(LayerKind::max_pool);
    l.kernel = 2;
    l.stride = 2;
    return push(l);
  }
  int route(std::vector<int> inputs, int groups = 1, int group_id = 0) {
    LayerSpec l = next(LayerKind::route);
    l.inputs = std::move(inputs);
    l.groups = groups;
    l.group_id = group_id;
    return push(l);
  }
  int upsample() { return push(next(LayerKind::upsample)); }
  int flatten() { return push(next(LayerKind::flatten)); }
  int detection(int branch) {
    LayerSpec l = next(LayerKind::detection);
    l.branch = branch;
    return push(l);
  }
  int dense(int units, int input, Activation act, int branch, bool scaled) {
    LayerSpec l = next(LayerKind::dense);
    l.filters_or_units = scaled ? scaled_filters(units, scale_) : units;
    l.inputs = {input};
    l.activation = act;
    l.branch = branch;
    return push(l);
  }
  int softmax(int input, int branch) {
    LayerSpec l = next(LayerKind::softmax_head);
    l.inputs = {input};
    l.activation = Activation::softmax;
    l.branch = branch;
    return push(l);
  }

  std::vector<LayerSpec> take() { return std::move(layers_); }

 private:
  LayerSpec next(LayerKind kind) const {
    LayerSpec l;
    l.index = static_cast<int>(layers_.size());
    l.kind = kind;
    if (!layers_.empty()) l.inputs = {l.index - 1};
    return l;
  }
  int push(const LayerSpec& l) {
    layers_.push_back(l);
    return l.index;
  }

  double scale_;
  std::vector<LayerSpec> layers_;
};

}  // namespace

NetworkSpec build_detector_spec(double scale_factor) {
  check_scale(scale_factor);
  NetworkSpec spec;
  spec.name = ModelKind::detector;
  spec.input_w = 384;
  spec.input_h = 384;
  spec.scale_factor = scale_factor;
  spec.num_classes = 1;
  const int head = spec.anchors_per_scale * (5 + spec.num_classes);

  Builder b(scale_factor);
  b.conv(32, 3, 2);       // 0
  b.conv(64, 3, 2);       // 1
  b.conv(64, 3, 1);       // 2
  b.route({2}, 2, 1);     // 3
  b.conv(32, 3, 1);       // 4
  b.conv(32, 3, 1);       // 5
  b.route({5, 4});        // 6
  b.conv(64, 1, 1);       // 7
  b.route({2, 7});        // 8
  b.max_pool();           // 9
  b.conv(128, 3, 1);      // 10
  b.route({10}, 2, 1);    // 11
  b.conv(64, 3, 1);       // 12
  b.conv(64, 3, 1);       // 13
  b.route({13, 12});      // 14
  b.conv(128, 1, 1);      // 15
  b.route({10, 15});      // 16
  b.max_pool();           // 17
  b.conv(256, 3, 1);      // 18
  b.route({18}, 2, 1);    // 19
  b.conv(128, 3, 1);      // 20
  b.conv(128, 3, 1);      // 21
  b.route({21, 20});      // 22
  b.conv(256, 1, 1);      // 23
  b.route({18, 23});      // 24
  b.max_pool();           // 25
  b.conv(512, 3, 1);      // 26
  b.conv(256, 1, 1);      // 27
  b.conv(512, 3, 1);      // 28
  b.conv(head, 1, 1, true, 0);  // 29
  b.detection(0);         // 30
  b.route({27});          // 31
  b.conv(128, 1, 1);      // 32
  b.upsample();           // 33
  b.route({33, 23});      // 34
  b.conv(256, 3, 1);      // 35
  b.conv(head, 1, 1, true, 1);  // 36
  b.detection(1);         // 37
  b.route({35});          // 38
  b.conv(64, 1, 1);       // 39
  b.upsample();           // 40
  b.route({40, 15});      // 41
  b.conv(128, 3, 1);      // 42
  b.conv(head, 1, 1, true, 2);  // 43
  b.detection(2);         // 44
  spec.layers = b.take();
  return spec;
}

NetworkSpec build_cdcc_spec(double scale_factor) {
  check_scale(scale_factor);
  NetworkSpec spec;
  spec.name = ModelKind::cdcc;
  spec.input_w = 192;
  spec.input_h = 64;
  spec.scale_factor = scale_factor;
  spec.anchors_per_scale = 0;
  spec.num_classes = 2;

  Builder b(scale_factor);
  b.conv(16, 3, 1);
  b.max_pool();
  b.conv(32, 3, 1);
  b.max_pool();
  b.conv(64, 3, 1);
  b.max_pool();
  const int flat = b.flatten();  // 6
  std::vector<int> hidden;
  for (int head = 0; head < 9; ++head) hidden.push_back(b.dense(128, flat, Activation::leaky, head, true));
  for (int head = 0; head < 8; ++head) b.dense(1, hidden[static_cast<std::size_t>(head)], Activation::linear, head, false);
  const int logits = b.dense(2, hidden[8], Activation::linear, 8, false);
  b.softmax(logits, 8);
  spec.layers = b.take();
  return spec;
}

NetworkSpec build_ocr_spec(double scale_factor) {
  check_scale(scale_factor);
  NetworkSpec spec;
  spec.name = ModelKind::ocr;
  spec.input_w = 384;
  spec.input_h = 128;
  spec.scale_factor = scale_factor;
  spec.num_classes = 10;
  const int head = spec.anchors_per_scale * (5 + spec.num_classes);

  Builder b(scale_factor);
  b.conv(32, 3, 1);    // 0
  b.max_pool();        // 1
  b.conv(64, 3, 1);    // 2
  b.max_pool();        // 3
  b.conv(128, 3, 1);   // 4
  b.max_pool();        // 5
  b.conv(256, 3, 1);   // 6
  b.conv(128, 1, 1);   // 7
  b.conv(256, 3, 1);   // 8
  b.max_pool();        // 9
  b.conv(512, 3, 1);   // 10
  b.conv(256, 1, 1);   // 11
  b.conv(512, 3, 1);   // 12
  b.conv(head, 1, 1, true, 0);  // 13
  b.detection(0);      // 14
  b.route({11});       // 15
  b.conv(256, 1, 1);   // 16
  b.upsample();        // 17
  b.route({17, 6});    // 18
  b.conv(512, 3, 1);   // 19
  b.conv(head, 1, 1, true, 1);  // 20
  b.detection(1);      // 21
  spec.layers = b.take();
  return spec;
}

NetworkSpec build_spec(ModelKind kind, double scale_factor) {
  switch (kind) {
    case ModelKind::detector: return build_detector_spec(scale_factor);
    case ModelKind::cdcc: return build_cdcc_spec(scale_factor);
    case ModelKind::ocr: return build_ocr_spec(scale_factor);
  }
  throw ParameterError("unknown model kind");
}

ShapeReport shape_and_flops(const NetworkSpec& spec) {
  ShapeReport report;
  std::vector<Shape> out_shapes;
  const Shape net_input{spec.input_w, spec.input_h, spec.input_c, false};
  auto fail = [](const LayerSpec& l, const std::string& why) -> void {
    throw GraphError("layer " + std::to_string(l.index) + " (" + to_string(l.kind) + "): " + why);
  };

  for (std::size_t i = 0; i < spec.layers.size(); ++i) {
    const auto& l = spec.layers[i];
    if (l.index != static_cast<int>(i)) fail(l, "index does not match position");
    std::vector<Shape> ins;
    if (l.inputs.empty()) {
      if (i != 0) fail(l, "no inputs");
      ins.push_back(net_input);
    }
    for (int in : l.inputs) {
      if (in < 0 || in >= static_cast<int>(i)) fail(l, "input " + std::to_string(in) + " is not an earlier layer");
      ins.push_back(out_shapes[static_cast<std::size_t>(in)]);
    }
    if (l.kind != LayerKind::route && ins.size() != 1) fail(l, "expects exactly one input");

    LayerReport r;
    r.index = l.index;
    r.kind = l.kind;
    r.input = ins.front();
    Shape out = r.input;
    const Shape& in = ins.front();

    switch (l.kind) {
      case LayerKind::conv: {
        if (!l.kernel || !l.stride || !l.filters_or_units) fail(l, "conv needs kernel, stride and filters");
        if (in.flat) fail(l, "conv on a flat input");
        const int k = *l.kernel;
        const int s = *l.stride;
        const int pad = k / 2;
        out = {(in.w + 2 * pad - k) / s + 1, (in.h + 2 * pad - k) / s + 1, *l.filters_or_units, false};
        r.bflop = 2.0 * k * k * in.c * out.c * out.w * out.h / 1e9;
        break;
      }
      case LayerKind::max_pool: {
        if (in.flat) fail(l, "pooling on a flat input");
        const int k = l.kernel.value_or(2);
        const int s = l.stride.value_or(2);
        out = {(in.w - k) / s + 1, (in.h - k) / s + 1, in.c, false};
        r.bflop = static_cast<double>(k) * k * out.c * out.w * out.h / 1e9;
        break;
      }
      case LayerKind::route: {
        int channels = 0;
        for (const auto& s : ins) {
          if (s.flat || s.w != ins.front().w || s.h != ins.front().h) fail(l, "route inputs differ in spatial size");
          channels += s.c;
        }
        if (l.groups < 1 || channels % l.groups != 0 || l.group_id < 0 || l.group_id >= l.groups) {
          fail(l, "invalid channel grouping");
        }
        r.input = {ins.front().w, ins.front().h, channels, false};
        out = {ins.front().w, ins.front().h, channels / l.groups, false};
        break;
      }
      case LayerKind::upsample:
        if (in.flat) fail(l, "upsample on a flat input");
        out = {in.w * l.scale, in.h * l.scale, in.c, false};
        break;
      case LayerKind::flatten:
        out = {1, 1, static_cast<int>(in.volume()), true};
        break;
      case LayerKind::dense:
        if (!in.flat) fail(l, "dense layer needs a flat input");
        if (!l.filters_or_units) fail(l, "dense layer needs a unit count");
        out = {1, 1, *l.filters_or_units, true};
        r.bflop = 2.0 * in.c * out.c / 1e9;
        break;
      case LayerKind::detection: {
        const int expected = spec.anchors_per_scale * (5 + spec.num_classes);
        if (in.c != expected) {
          fail(l, "head has " + std::to_string(in.c) + " channels, expected " + std::to_string(expected));
        }
        break;
      }
      case LayerKind::softmax_head:
        if (!in.flat) fail(l, "softmax head needs a flat input");
        break;
    }
    r.output = out;
    out_shapes.push_back(out);
    report.layers.push_back(r);
  }
  return report;
}

}  // namespace amr
