#pragma once

#include <array>
#include <cstdint>
#include <filesystem>
#include <span>
#include <string>
#include <vector>

#include <opencv2/core.hpp>
#include <torch/torch.h>

#include "amr/annotations.hpp"
#include "amr/models.hpp"
#include "amr/synthgen.hpp"
#include "json.hpp"

namespace amr {

enum class OptimizerKind { sgd, adam };

struct LrStep {
  long long step = 0;
  double lr = 0.0;
};

struct TrainConfig {
  ModelKind model = ModelKind::detector;
  int batch_size = 8;
  // Detector and OCR train for a number of iterations, the CDCC for epochs.
  long long max_iterations = 1500;
  int max_epochs = 40;
  // Piecewise-constant learning rate; the first step must be 0.
  std::vector<LrStep> lr_schedule{{0, 1e-3}};
  // Linear warm-up length in iterations.
  int burn_in = 0;
  OptimizerKind optimizer = OptimizerKind::adam;
  double momentum = 0.9;
  double weight_decay = 5e-4;
  // Validation passes without improvement before stopping. Counted in
  // evaluations (every eval_interval iterations, or every epoch for the CDCC).
  int early_stop_patience = 7;
  int plateau_patience = 3;
  double plateau_factor = 0.1;
  int eval_interval = 250;
  int max_val_samples = 200;
  // CDCC loss weights: corner mean and class cross-entropy.
  double corner_weight = 1.0;
  double class_weight = 1.0;
  // Bound on the random corner displacement applied to ground-truth quads
  // before rectifying OCR training crops, as a fraction of counter height.
  double ocr_quad_jitter = 0.12;
  bool augment = true;
  std::uint64_t seed = 0;
  double scale_factor = 0.25;
  int threads = 1;

  static TrainConfig defaults_for(ModelKind model);
  /// Throws ParameterError for non-positive sizes or a malformed schedule.
  void validate() const;
  double lr_at(long long step) const;
};

nlohmann::json to_json(const TrainConfig& cfg);
TrainConfig train_config_from_json(const nlohmann::json& j, TrainConfig base);
/// FNV-1a over the canonical JSON form, as 16 hex digits.
std::string config_hash(const TrainConfig& cfg);

/// Samples plus the directory their image_refs are relative to.
struct TrainingData {
  DatasetSplit split;
  std::filesystem::path image_root;
};

/// Loads an annotation file and splits it with the given seed.
TrainingData load_training_data(const std::filesystem::path& annotation_file, std::uint64_t seed);

struct TrainResult {
  std::filesystem::path checkpoint;
  std::filesystem::path loss_log;
  long long iterations = 0;
  double best_val_loss = 0.0;
  double final_train_loss = 0.0;
  bool early_stopped = false;
};

// --- Anchors ----------------------------------------------------------------

/// k-means with 1 - IoU distance over box sizes (boxes aligned at a common
/// centre). Initial centres are the area quantiles, so the result depends on
/// the data only. Returned sorted by area ascending. Throws DataError when
/// there are fewer boxes than clusters.
std::vector<Anchor> kmeans_anchors(std::span<const Anchor> sizes, int num);

/// Anchors for the counter detector: counter boxes rescaled to `net_input`.
std::vector<Anchor> estimate_anchors(const std::vector<MeterSample>& samples, int num, cv::Size net_input);

// --- Losses -----------------------------------------------------------------

struct BoxTarget {
  BBox box;  // network-input pixels
  int class_id = 0;
};

struct YoloLoss {
  torch::Tensor total;
  torch::Tensor box;
  torch::Tensor obj;
  torch::Tensor cls;
};

/// Composite detection loss: each ground-truth box is assigned to the cell
/// holding its centre and the best-matching anchor over all scales. Box
/// offsets use squared error on sigmoid(tx, ty) and on raw (tw, th),
/// objectness binary cross-entropy (predictions overlapping a box by IoU >
/// 0.5 are not pushed towards background), classes cross-entropy. Averaged
/// over the batch.
YoloLoss yolo_loss(const std::vector<torch::Tensor>& heads, const std::vector<std::vector<BoxTarget>>& targets,
                   const AnchorSet& anchors, const std::vector<int>& groups, cv::Size net_input, int num_classes);

struct CdccLoss {
  torch::Tensor total;
  // Weighted contributions that sum to total: eight corner terms then class.
  std::array<torch::Tensor, 8> corner;
  torch::Tensor cls;
};

/// total = corner_weight * mean_k(MSE_k) + class_weight * CE.
CdccLoss cdcc_loss(const CdccOutputs& out, const torch::Tensor& corner_targets, const torch::Tensor& labels,
                   double corner_weight, double class_weight);

// --- Sample preparation ---------------------------------------------------------

/// Detector input at 384x384 with its counter box.
struct DetectorExample {
  cv::Mat image;
  std::vector<BoxTarget> boxes;
};
DetectorExample make_detector_example(const cv::Mat& image, const MeterSample& sample, bool augment,
                                      std::uint64_t seed);

/// CDCC input at 192x64: crop around a (possibly perturbed) counter box,
/// targets are the quad corners as fractions of the padded crop canvas.
struct CdccExample {
  cv::Mat image;
  std::array<float, 8> corners{};
  int label = 0;  // 0 legible, 1 illegible
};
CdccExample make_cdcc_example(const AnnotatedImage& neighbourhood, bool augment, std::uint64_t seed);

/// OCR input at 384x128: the counter rectified from its (optionally
/// jittered) quad, with digit boxes mapped into the patch.
struct OcrExample {
  cv::Mat image;
  std::vector<BoxTarget> boxes;
};
OcrExample make_ocr_example(const AnnotatedImage& neighbourhood, bool augment, double quad_jitter,
                            std::uint64_t seed);

/// The sample cropped to its counter with a margin, small enough to keep in
/// memory for the counter-level networks.
AnnotatedImage counter_neighbourhood(const cv::Mat& image, const MeterSample& sample);

// --- Training -----------------------------------------------------------------

TrainResult train_detector(const TrainConfig& cfg, const TrainingData& data, const std::filesystem::path& out_dir);
TrainResult train_cdcc(const TrainConfig& cfg, const TrainingData& data, const std::filesystem::path& out_dir);
TrainResult train_ocr(const TrainConfig& cfg, const TrainingData& data, const std::filesystem::path& out_dir);
/// Dispatches on cfg.model.
TrainResult train_model(const TrainConfig& cfg, const TrainingData& data, const std::filesystem::path& out_dir);

/// Mean loss over samples without augmentation, in eval mode.
double detector_validation_loss(GraphNet& net, const AnchorSet& anchors, const std::vector<MeterSample>& samples,
                                const std::filesystem::path& image_root, int limit = -1);
double cdcc_validation_loss(GraphNet& net, const std::vector<MeterSample>& samples,
                            const std::filesystem::path& image_root, const TrainConfig& cfg, int limit = -1);
double ocr_validation_loss(GraphNet& net, const AnchorSet& anchors, const std::vector<MeterSample>& samples,
                           const std::filesystem::path& image_root, int limit = -1);

}  // namespace amr
