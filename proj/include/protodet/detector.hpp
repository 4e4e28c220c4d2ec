#pragma once

// Toy anchor-free detector: a strided conv backbone, a two-step top-down
// pathway, and per-level decoupled heads whose classification predictor is
// the prototype layer.

#include "protodet/autograd.hpp"
#include "protodet/data.hpp"
#include "protodet/losses.hpp"
#include "protodet/metrics.hpp"
#include "protodet/proto.hpp"
#include "protodet/splgs.hpp"

#include <optional>
#include <string>
#include <utility>
#include <vector>

namespace protodet {

struct ModelConfig {
  int image_size = 256;
  int num_classes = 4;  // including background
  int dim = 32;         // prototype / head channel count D
  int stem = 16;        // channels after the first stride-2 conv
  int width = 32;       // backbone channels from stride 4 on
  double tau1 = 4.0;
  double tau2 = 8.0;

  std::vector<LevelSpec> levels() const { return make_levels(image_size, image_size, tau1, tau2); }
  void validate() const;
  bool operator==(const ModelConfig&) const = default;
};

/// Bins per side at a level: tau + 1 (tau must be integral).
int dist_bins(const LevelSpec& level);

/// Named parameter tensors in a fixed order.
class ModelParams {
 public:
  ModelParams() = default;
  explicit ModelParams(ModelConfig config);

  const ModelConfig& config() const { return config_; }
  std::size_t size() const { return tensors_.size(); }
  const std::string& name(std::size_t i) const { return tensors_.at(i).first; }
  Tensor& tensor(std::size_t i) { return tensors_.at(i).second; }
  const Tensor& tensor(std::size_t i) const { return tensors_.at(i).second; }
  Tensor& operator[](const std::string& name);
  const Tensor& operator[](const std::string& name) const;
  std::size_t index_of(const std::string& name) const;
  bool decays(std::size_t i) const;  // weights decay, biases do not

  /// He-normal conv weights, prototypes with unit expected row norm, and
  /// prior-probability classification biases.
  static ModelParams initialize(const ModelConfig& config, std::uint64_t seed);

  /// Per-level prototype matrices (C x D) in double.
  std::vector<RowMatrixXd> prototypes() const;

 private:
  void add(std::string name, Shape shape);

  ModelConfig config_;
  std::vector<std::pair<std::string, Tensor>> tensors_;
};

template <typename S>
struct LevelOutputs {
  LevelSpec level;
  ag::BasicVar<S> cls_feat;     // D x h x w
  ag::BasicVar<S> reg_feat;     // D x h x w
  ag::BasicVar<S> scores;       // C x h x w
  ag::BasicVar<S> dist_logits;  // 4 (tau + 1) x h x w, side-major
  ag::BasicVar<S> proto_w, proto_b;
};

template <typename S>
struct ForwardResult {
  std::vector<ag::BasicVar<S>> params;  // leaves in ModelParams order
  std::vector<LevelOutputs<S>> levels;
};

/// Puts every parameter on the tape as a leaf and runs the network.
template <typename S>
ForwardResult<S> forward(ag::BasicTape<S>& tape, const ModelParams& params, const Image& image,
                         bool requires_grad = true);

/// Runs the network on already-bound parameter leaves.
template <typename S>
std::vector<LevelOutputs<S>> forward_with(ag::BasicTape<S>& tape, const ModelParams& params,
                                          const std::vector<ag::BasicVar<S>>& leaves, ag::BasicVar<S> image);

// ---- targets ----------------------------------------------------------------

struct Assignment {
  int row = 0;
  int col = 0;
  int class_id = 0;
  double ltrb[4] = {0, 0, 0, 0};  // side distances in stride units, within [0, tau]
  std::size_t box = 0;            // index into the source box list
};

/// Cell containing a coordinate; a centre on a boundary goes to the
/// lower-index cell.
int cell_of(double coord, int stride, int cells);

/// For every level admitting both sides of a box, the single cell holding
/// its centre. When two boxes claim one cell the smaller box wins.
std::vector<std::vector<Assignment>> assign_targets(const std::vector<BoxAnnotation>& boxes,
                                                    std::span<const LevelSpec> levels);

/// Centre cells are positives (one-hot class), cells covered by no box are
/// negatives (background one-hot); both groups are normalized to unit total
/// weight across levels. Everything else is unsupervised.
std::vector<ClsTargets> build_cls_targets(const std::vector<BoxAnnotation>& boxes,
                                          const std::vector<std::vector<Assignment>>& assignments,
                                          std::span<const LevelSpec> levels, int num_classes);

// ---- losses -----------------------------------------------------------------

struct LossToggles {
  bool rpc = true;
  bool splgs = true;
  PrVariant pr = PrVariant::Svd;
  bool rpc_stop_grad = false;  // RPC gradient reaches prototypes only
};

template <typename S>
struct ImageLoss {
  ag::BasicVar<S> total;  // cls + reg + dfl + sum of rpc terms
  ag::BasicVar<S> cls, reg, dfl;
  std::vector<ag::BasicVar<S>> rpc;  // one per level
};

template <typename S>
ImageLoss<S> image_loss(ag::BasicTape<S>& tape, const std::vector<LevelOutputs<S>>& outputs,
                        const std::vector<BoxAnnotation>& boxes, const LossToggles& toggles);

/// Per-level prototype regularizers on bound parameter leaves; empty when
/// the variant is Off.
template <typename S>
std::vector<ag::BasicVar<S>> prototype_losses(const ModelParams& params, const std::vector<ag::BasicVar<S>>& leaves,
                                              PrVariant variant);

// ---- inference ----------------------------------------------------------------

struct DecodeOptions {
  double score_threshold = 0.05;
  double nms_iou = 0.5;
  int max_candidates = 300;
  std::optional<int> level;  // 1-based; restricts decoding to one level
};

struct LevelPrediction {
  ScoreStack scores;
  Tensor dist_logits;
};

std::vector<LevelPrediction> predict(const ModelParams& params, const Image& image);

/// Argmax foreground class per cell, DFL expected distances times stride
/// around the cell centre, then class-wise greedy NMS.
std::vector<Detection> decode(const std::vector<LevelPrediction>& levels, int image_index, const DecodeOptions& options);

/// Greedy NMS within each class; input order does not matter.
std::vector<Detection> nms(std::vector<Detection> detections, double iou_threshold);

struct EvalOptions {
  DecodeOptions decode;
  SizeBuckets buckets;
  ApInterpolation interp = ApInterpolation::Points101;
  Interp saliency_interp = Interp::Bilinear;
};

MetricReport evaluate(const ModelParams& params, const std::vector<const DatasetSample*>& samples,
                      const std::vector<std::string>& class_names, const EvalOptions& options = {});

}  // namespace protodet
