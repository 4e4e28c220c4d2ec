#pragma once

// Training objectives: region-prototype contrastive loss, prototype
// regularizers (spectral, plus cosine and POP baselines), the simplified
// detection losses and the composed total.

#include "protodet/autograd.hpp"
#include "protodet/proto.hpp"
#include "protodet/splgs.hpp"

#include <map>
#include <span>
#include <string>
#include <vector>

namespace protodet {

/// Epsilon inside both logarithms of the contrastive BCE.
inline constexpr double kBceEps = 1e-7;

// ---- region-prototype contrastive loss ------------------------------------

/// Mean BCE over C x H x W between a score stack (on the tape) and labels.
template <typename S>
ag::BasicVar<S> rpc_loss(ag::BasicVar<S> scores, const LabelMapStack& labels);

/// Value-only form on plain stacks.
double rpc_loss(const ScoreStack& scores, const LabelMapStack& labels);

// ---- prototype regularization ----------------------------------------------

enum class PrVariant { Off, Svd, Cosine, Pop };

PrVariant parse_pr_variant(const std::string& name);
std::string to_string(PrVariant v);

/// sum_k |sigma_k - 1| over the thin spectrum of P.
double pr_loss_svd(const RowMatrixXd& P);
/// U diag(sign(sigma_k - 1)) V^T with sign(0) = 0.
RowMatrixXd pr_loss_svd_grad(const RowMatrixXd& P);

/// Mean over i != j of |cos(p_i, p_j)|. Rejects zero rows.
double pr_loss_cosine(const RowMatrixXd& P);
RowMatrixXd pr_loss_cosine_grad(const RowMatrixXd& P);

/// Mean over i != j of cos(p_i, p_j)^2, i.e. the mean squared off-diagonal
/// of the row-normalized Gram matrix.
double pr_loss_pop(const RowMatrixXd& P);
RowMatrixXd pr_loss_pop_grad(const RowMatrixXd& P);

/// Prototype regularizer as a tape op on a C x D prototype matrix.
template <typename S>
ag::BasicVar<S> pr_loss(ag::BasicVar<S> prototypes, PrVariant variant);

// ---- distribution focal loss ------------------------------------------------

struct DflSplit {
  int lo = 0;
  int hi = 1;
  double w_lo = 1.0;
  double w_hi = 0.0;
};

/// Linear split of a continuous target over its two neighbouring bins.
/// Rejects targets outside [0, max_bin].
DflSplit dfl_split(double target, int max_bin);

/// -(w_lo log p_lo + w_hi log p_hi), p = softmax(logits).
double dfl_loss(std::span<const double> logits, double target);

/// Expected bin index sum_b b * softmax(logits)_b.
double dfl_decode(std::span<const double> logits);

/// DFL over N rows of per-side logits on the tape (mean over rows).
template <typename S>
ag::BasicVar<S> dfl_loss(ag::BasicVar<S> logits, std::span<const double> targets);

// ---- simplified detection losses --------------------------------------------

/// Constant per-cell classification supervision for one level.
struct ClsTargets {
  Tensor target;  // C x H x W
  Tensor weight;  // C x H x W, zero where unsupervised
  int positives = 0;
};

/// BCE over weighted entries (positives and negatives each normalized to
/// unit total weight). Zero when there are no positives.
template <typename S>
ag::BasicVar<S> cls_loss(std::span<const ag::BasicVar<S>> scores, std::span<const ClsTargets> targets);

/// 1 - IoU of two boxes.
double iou_reg_loss(const BoxAnnotation& pred, const BoxAnnotation& gt);
double box_iou(const BoxAnnotation& a, const BoxAnnotation& b);

// ---- total ------------------------------------------------------------------

struct LossWeights {
  double cls = 1, reg = 1, dfl = 1, rpc = 1, pr = 1;
};

struct LossPieces {
  double cls = 0, reg = 0, dfl = 0;
  std::vector<double> rpc;  // one per level
  std::vector<double> pr;   // one per level
};

struct LossReport {
  double total = 0;
  std::map<std::string, double> components;
};

/// cls + reg + dfl + sum_l rpc_l + sum_l pr_l with the given weights.
/// Requires exactly three levels of rpc and pr terms.
LossReport total_loss(const LossPieces& pieces, const LossWeights& weights = {});

}  // namespace protodet
