#pragma once

// Prototype matching against pyramid feature grids, and the cross-level
// saliency aggregation every interpretability metric consumes.

#include "protodet/tensor.hpp"

#include <span>
#include <vector>

namespace protodet {

template <typename Scalar>
using PlaneT = Eigen::Array<Scalar, Eigen::Dynamic, Eigen::Dynamic, Eigen::RowMajor>;
using Plane = PlaneT<float>;

/// One pyramid level: stride in input pixels per cell, scale coefficient
/// tau and grid size. The admitted box-size range is [0, tau * stride].
struct LevelSpec {
  int index = 1;  // 1-based, finest level first
  int stride = 8;
  double tau = 4.0;
  int grid_h = 0;
  int grid_w = 0;

  double range_hi() const { return tau * stride; }
  bool operator==(const LevelSpec&) const = default;
};

/// Standard three-level layout at strides 8/16/32 with tau = (t1, t2, H/32).
std::vector<LevelSpec> make_levels(int image_h, int image_w, double tau1 = 4.0, double tau2 = 8.0);

/// Throws unless strides strictly increase, every tau is positive and the
/// range upper bound is non-decreasing with level.
void validate_levels(std::span<const LevelSpec> levels);

struct FeatureGrid {
  LevelSpec level;
  Tensor values;  // D x H x W

  int channels() const { return values.dim(0); }
};

/// Class prototypes of one level: rows of `prototypes` (C x D) plus one
/// bias per class. Class C - 1 (0-based) is background.
struct PrototypeSet {
  LevelSpec level;
  RowMatrixXf prototypes;
  Eigen::VectorXf biases;

  int class_count() const { return static_cast<int>(prototypes.rows()); }
  int dim() const { return static_cast<int>(prototypes.cols()); }
  int background() const { return class_count() - 1; }
};

struct ScoreStack {
  LevelSpec level;
  Tensor scores;  // C x H x W, entries in (0, 1)

  int class_count() const { return scores.dim(0); }
  Plane plane(int k) const;
};

struct SaliencyMap {
  int class_id = 0;
  Plane values;  // input resolution
};

enum class Interp { Bilinear, Nearest };

/// scores[k, i, j] = sigmoid(p_k . f_ij + b_k)
ScoreStack response_map(const PrototypeSet& protos, const FeatureGrid& grid);

/// Align-corners-false resize. Bilinear is exact on constant inputs.
Plane resize_plane(const Plane& src, int height, int width, Interp mode = Interp::Bilinear);

/// Averages the class-k plane of every level after resizing each to the
/// input size. Level order is fixed (1..L).
SaliencyMap aggregate_saliency(std::span<const ScoreStack> stacks, int k, int height, int width,
                               Interp mode = Interp::Bilinear);

}  // namespace protodet
