#pragma once

#include <filesystem>
#include <memory>
#include <string>
#include <vector>

#include <opencv2/core.hpp>
#include <torch/torch.h>

#include "amr/cascade.hpp"
#include "amr/netarch.hpp"
#include "json.hpp"

namespace amr {

/// Trainable network assembled layer by layer from a NetworkSpec. Conv layers
/// with leaky activation carry batch normalisation; linear conv layers (the
/// detection heads) carry a bias instead.
class GraphNetImpl : public torch::nn::Module {
 public:
  explicit GraphNetImpl(NetworkSpec spec);

  /// Output of every layer, indexed like spec().layers.
  std::vector<torch::Tensor> forward_all(const torch::Tensor& x);
  /// Outputs of spec().output_layers(), in index order.
  std::vector<torch::Tensor> forward(const torch::Tensor& x);

  const NetworkSpec& spec() const { return spec_; }

 private:
  NetworkSpec spec_;
  std::vector<torch::nn::Conv2d> convs_;
  std::vector<torch::nn::BatchNorm2d> norms_;
  std::vector<torch::nn::Linear> dense_;
};
TORCH_MODULE(GraphNet);

/// 8-bit BGR image (already at network size) to a 1x3xHxW float tensor in [0, 1].
torch::Tensor image_to_tensor(const cv::Mat& bgr);

/// Converts one NCHW head output for batch item `b` to the HWC grid layout
/// used by decode_grid.
GridTensor to_grid(const torch::Tensor& head, int b = 0);

/// Anchors grouped per detection scale; scale 0 holds the smallest anchors and
/// belongs to the finest grid.
struct AnchorSet {
  std::vector<std::vector<Anchor>> per_scale;

  /// Groups area-sorted anchors into consecutive runs of `per_scale` each.
  static AnchorSet from_sorted(const std::vector<Anchor>& sorted, int per_scale);
  std::vector<Anchor> flat() const;
  void validate() const;
};

nlohmann::json to_json(const AnchorSet& a);
AnchorSet anchor_set_from_json(const nlohmann::json& j);

/// For each output head (in output_layers order) the anchor group index it
/// uses: the finest grid gets group 0.
std::vector<int> head_anchor_groups(const NetworkSpec& spec);

/// Metadata written next to every checkpoint.
struct CheckpointInfo {
  ModelKind model = ModelKind::detector;
  double scale_factor = 1.0;
  AnchorSet anchors;
  std::string config_hash;
  long long iterations = 0;
  double best_val_loss = 0.0;
};

nlohmann::json to_json(const CheckpointInfo& info);
CheckpointInfo checkpoint_info_from_json(const nlohmann::json& j);
std::filesystem::path sidecar_path(const std::filesystem::path& checkpoint);

/// Writes weights then sidecar, each through a temporary file and rename.
void save_checkpoint(GraphNet& net, const CheckpointInfo& info, const std::filesystem::path& file);
/// Rebuilds the network from the sidecar and loads the weights into it.
GraphNet load_checkpoint(const std::filesystem::path& file, CheckpointInfo* info = nullptr);

class TorchDetector : public CounterDetector {
 public:
  TorchDetector(GraphNet net, AnchorSet anchors);
  static std::unique_ptr<TorchDetector> load(const std::filesystem::path& checkpoint);
  std::vector<Detection> detect(const cv::Mat& image) override;

  // Detections below this confidence are never reported.
  double min_confidence = 0.01;

 private:
  GraphNet net_;
  AnchorSet anchors_;
  std::vector<int> groups_;
};

class TorchCornerClassifier : public CornerClassifier {
 public:
  explicit TorchCornerClassifier(GraphNet net);
  static std::unique_ptr<TorchCornerClassifier> load(const std::filesystem::path& checkpoint);
  CounterVerdict classify(const cv::Mat& patch) override;

 private:
  GraphNet net_;
};

class TorchDigitRecognizer : public DigitRecognizer {
 public:
  TorchDigitRecognizer(GraphNet net, AnchorSet anchors);
  static std::unique_ptr<TorchDigitRecognizer> load(const std::filesystem::path& checkpoint);
  std::vector<Detection> recognize(const cv::Mat& patch) override;

  double min_confidence = 0.05;

 private:
  GraphNet net_;
  AnchorSet anchors_;
  std::vector<int> groups_;
};

/// Decodes all heads of a detector-style network for batch item `b`.
std::vector<Detection> decode_heads(const std::vector<torch::Tensor>& heads, const AnchorSet& anchors,
                                    const std::vector<int>& groups, cv::Size net_input, int num_classes, int b = 0);

/// The CDCC head layout: eight corner outputs then the class logits layer.
struct CdccOutputs {
  torch::Tensor corners;  // N x 8
  torch::Tensor logits;   // N x 2
};
CdccOutputs cdcc_outputs(GraphNet& net, const torch::Tensor& x);

/// Loads the three checkpoints found in `dir` (detector.pt, cdcc.pt, ocr.pt).
struct LoadedModels {
  std::unique_ptr<TorchDetector> detector;
  std::unique_ptr<TorchCornerClassifier> cdcc;
  std::unique_ptr<TorchDigitRecognizer> ocr;

  ModelSet view() const { return {detector.get(), cdcc.get(), ocr.get()}; }
};
LoadedModels load_models(const std::filesystem::path& dir);

}  // namespace amr
