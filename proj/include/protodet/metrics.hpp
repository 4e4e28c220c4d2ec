#pragma once

// Interpretability metrics (discriminability, foreground/background AUC,
// prototype sparsity) and a toy mAP@0.5 evaluator.

#include "protodet/proto.hpp"
#include "protodet/splgs.hpp"

#include <optional>
#include <span>
#include <string>
#include <vector>

namespace protodet {

inline constexpr double kDiscEps = 1e-7;

/// Union of all class-k boxes rasterized at pixel centres (edges inclusive).
struct GroundTruthMask {
  int class_id = 0;
  Plane values;  // {0, 1}
};

GroundTruthMask make_mask(const std::vector<BoxAnnotation>& boxes, int class_id, int height, int width);

/// sum(S * M) / (sum(S) + eps)
template <typename Scalar>
double discriminability(const PlaneT<Scalar>& saliency, const PlaneT<Scalar>& mask) {
  if (saliency.rows() != mask.rows() || saliency.cols() != mask.cols()) {
    throw std::invalid_argument("discriminability: saliency and mask sizes differ");
  }
  const double num = (saliency.template cast<double>() * mask.template cast<double>()).sum();
  const double den = saliency.template cast<double>().sum() + kDiscEps;
  return num / den;
}

/// Probability that a random foreground pixel outscores a random background
/// pixel, ties counted one half. Rank-sum formulation, O(n log n).
/// nullopt when the mask is all foreground or all background.
std::optional<double> auc_ft(const Plane& saliency, const Plane& mask);

/// O(n^2) pairwise count of the same quantity; oracle for auc_ft.
std::optional<double> auc_pairwise(const Plane& saliency, const Plane& mask);

/// Mean over ordered pairs i != j of |cos(p_i, p_j)|.
double mean_abs_cosine(const RowMatrixXd& prototypes);

/// 1 - (1/L) sum_l mean_abs_cosine(P^l). Rejects zero-norm rows.
double sparsity(std::span<const RowMatrixXd> levels);

// ---- detection --------------------------------------------------------------

struct Detection {
  int image = 0;
  int class_id = 0;
  double score = 0;
  BoxAnnotation box;
};

struct SizeBuckets {
  double small_max_area = 24.0 * 24.0;   // area < this is small
  double medium_max_area = 64.0 * 64.0;  // area < this is medium
};

enum class SizeBucket { All, Small, Medium, Large };

enum class ApInterpolation { Points101, Continuous };

struct MapResult {
  double map = 0;
  std::vector<std::optional<double>> per_class;  // nullopt when the class has no GT
};

/// Greedy IoU >= 0.5 matching in descending confidence, each GT matched at
/// most once. For a size bucket, GT outside the bucket and unmatched
/// predictions outside it are ignored rather than counted.
MapResult map50(const std::vector<Detection>& detections, const std::vector<std::vector<BoxAnnotation>>& ground_truth,
                int num_classes, SizeBucket bucket = SizeBucket::All, const SizeBuckets& buckets = {},
                ApInterpolation interp = ApInterpolation::Points101);

SizeBucket bucket_of(double area, const SizeBuckets& buckets);

// ---- reporting --------------------------------------------------------------

struct ClassMetrics {
  std::string name;
  std::optional<double> ap50;
  double disc = 0;
  double auc_ft = 0;
  int disc_count = 0;
  int auc_count = 0;
};

struct MetricReport {
  double disc = 0;
  double auc_ft = 0;
  double spar = 0;
  double map50 = 0;
  double map_s = 0, map_m = 0, map_l = 0;
  int n_pairs = 0;      // N = sum over images of present classes
  int auc_pairs = 0;    // pairs where the AUC was defined
  int auc_skipped = 0;
  int images = 0;
  std::optional<int> level;  // set when inference used one level only
  std::vector<ClassMetrics> classes;
};

std::string to_json(const MetricReport& report);
MetricReport metric_report_from_json(const std::string& text);
/// Per-class table: class, AP50, Disc., AUC_ft, then an "all" row with
/// mAP, Disc., Spar. and AUC_ft.
std::string to_csv(const MetricReport& report);

}  // namespace protodet
