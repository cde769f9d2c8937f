#pragma once

#include <optional>
#include <string>
#include <vector>

namespace amr {

enum class LayerKind { conv, max_pool, route, upsample, dense, flatten, detection, softmax_head };
enum class Activation { leaky, linear, softmax };
enum class ModelKind { detector, cdcc, ocr };

std::string to_string(LayerKind kind);
std::string to_string(ModelKind kind);
/// Accepts "detector", "cdcc" and "ocr"; throws ParameterError otherwise.
ModelKind model_kind_from_string(const std::string& text);

struct LayerSpec {
  int index = 0;
  LayerKind kind = LayerKind::conv;
  std::optional<int> filters_or_units;
  std::optional<int> kernel;
  std::optional<int> stride;
  std::vector<int> inputs;
  Activation activation = Activation::linear;
  // Channel-split route: keep group `group_id` of `groups` equal slices.
  int groups = 1;
  int group_id = 0;
  // Upsample factor.
  int scale = 2;
  // Detection/corner head this layer belongs to, -1 for shared trunk layers.
  int branch = -1;
};

struct NetworkSpec {
  ModelKind name = ModelKind::detector;
  int input_w = 0;
  int input_h = 0;
  int input_c = 3;
  std::vector<LayerSpec> layers;
  double scale_factor = 1.0;
  int anchors_per_scale = 3;
  int num_classes = 1;

  /// Indices of layers that nothing else consumes, in index order. These are
  /// the network outputs (detection layers, corner heads, class head).
  std::vector<int> output_layers() const;
};

struct Shape {
  int w = 0;
  int h = 0;
  int c = 0;
  bool flat = false;  // dense vector of c units

  std::string to_string() const;
  long long volume() const { return flat ? c : static_cast<long long>(w) * h * c; }

  friend bool operator==(const Shape&, const Shape&) = default;
};

struct LayerReport {
  int index = 0;
  LayerKind kind = LayerKind::conv;
  Shape input;
  Shape output;
  double bflop = 0.0;
};

struct ShapeReport {
  std::vector<LayerReport> layers;

  double total_bflop() const;
  /// CSV with header `index,kind,in_shape,out_shape,bflop`, BFLOP to 3 decimals.
  std::string to_csv() const;
};

/// Filter count under a width multiplier: rounded to a multiple of 8, floor 8.
int scaled_filters(int filters, double scale_factor);

NetworkSpec build_detector_spec(double scale_factor = 1.0);
NetworkSpec build_cdcc_spec(double scale_factor = 1.0);
NetworkSpec build_ocr_spec(double scale_factor = 1.0);
NetworkSpec build_spec(ModelKind kind, double scale_factor);

/// Validates the layer graph, chains shapes and counts FLOPs per layer:
/// conv 2*k^2*Cin*Cout*Hout*Wout, max-pool k^2*C*Hout*Wout, dense
/// 2*in*out, everything else zero. Throws GraphError naming the layer on an
/// inconsistent graph.
ShapeReport shape_and_flops(const NetworkSpec& spec);

}  // namespace amr
