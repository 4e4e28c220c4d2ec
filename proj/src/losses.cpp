#include "protodet/losses.hpp"

#include "protodet/linalg.hpp"

#include <algorithm>
#include <cmath>
#include <numeric>
#include <stdexcept>

namespace protodet {

// ---- RPC --------------------------------------------------------------------

template <typename S>
ag::BasicVar<S> rpc_loss(ag::BasicVar<S> scores, const LabelMapStack& labels) {
  if (scores.shape() != labels.maps.shape()) {
    throw ShapeError("rpc_loss: scores " + shape_str(scores.shape()) + " vs labels " +
                     shape_str(labels.maps.shape()));
  }
  return ag::bce(scores, labels.maps.template cast<S>(), static_cast<S>(kBceEps));
}

double rpc_loss(const ScoreStack& scores, const LabelMapStack& labels) {
  require_same_shape(scores.scores, labels.maps, "rpc_loss");
  double acc = 0;
  for (std::size_t i = 0; i < scores.scores.numel(); ++i) {
    const double s = scores.scores[i];
    const double y = labels.maps[i];
    acc += y * std::log(s + kBceEps) + (1 - y) * std::log(1 - s + kBceEps);
  }
  return -acc / static_cast<double>(scores.scores.numel());
}

// ---- PR ---------------------------------------------------------------------

PrVariant parse_pr_variant(const std::string& name) {
  if (name == "svd") return PrVariant::Svd;
  if (name == "cosine") return PrVariant::Cosine;
  if (name == "pop") return PrVariant::Pop;
  if (name == "off" || name == "none") return PrVariant::Off;
  throw std::invalid_argument("unknown prototype regularizer '" + name + "' (expected svd, cosine, pop or off)");
}

std::string to_string(PrVariant v) {
  switch (v) {
    case PrVariant::Off: return "off";
    case PrVariant::Svd: return "svd";
    case PrVariant::Cosine: return "cosine";
    case PrVariant::Pop: return "pop";
  }
  return "off";
}

double pr_loss_svd(const RowMatrixXd& P) {
  const auto f = linalg::svd(P);
  return (f.sigma.array() - 1.0).abs().sum();
}

RowMatrixXd pr_loss_svd_grad(const RowMatrixXd& P) {
  const auto f = linalg::svd(P);
  const Eigen::VectorXd sign = (f.sigma.array() - 1.0).unaryExpr([](double d) {
    return d > 0 ? 1.0 : (d < 0 ? -1.0 : 0.0);
  });
  return f.U * sign.asDiagonal() * f.V.transpose();
}

namespace {

struct CosineTerms {
  Eigen::VectorXd norms;
  RowMatrixXd cos;  // C x C
};

CosineTerms cosine_terms(const RowMatrixXd& P) {
  CosineTerms t;
  t.norms = P.rowwise().norm();
  for (Eigen::Index i = 0; i < P.rows(); ++i) {
    if (!(t.norms[i] > 1e-12)) {
      throw std::invalid_argument("prototype row " + std::to_string(i) + " has zero norm");
    }
  }
  const RowMatrixXd G = P * P.transpose();
  t.cos = G.array() / (t.norms * t.norms.transpose()).array();
  return t;
}

// Gradient of sum_{i != j} phi(cos_ij) given dphi(cos) per pair.
template <typename DPhi>
RowMatrixXd pairwise_cos_grad(const RowMatrixXd& P, const CosineTerms& t, DPhi dphi, double scale) {
  const Eigen::Index c = P.rows();
  RowMatrixXd g = RowMatrixXd::Zero(P.rows(), P.cols());
  for (Eigen::Index i = 0; i < c; ++i) {
    for (Eigen::Index j = 0; j < c; ++j) {
      if (i == j) continue;
      // both ordered pairs (i, j) and (j, i) depend on p_i
      const double coef = 2.0 * scale * dphi(t.cos(i, j));
      g.row(i) += coef * (P.row(j) / (t.norms[i] * t.norms[j]) - t.cos(i, j) * P.row(i) / (t.norms[i] * t.norms[i]));
    }
  }
  return g;
}

double pair_count(const RowMatrixXd& P) {
  const double c = static_cast<double>(P.rows());
  if (c < 2) throw std::invalid_argument("pairwise prototype loss needs at least two rows");
  return c * (c - 1);
}

}  // namespace

double pr_loss_cosine(const RowMatrixXd& P) {
  const auto t = cosine_terms(P);
  const double total = t.cos.cwiseAbs().sum() - t.cos.diagonal().cwiseAbs().sum();
  return total / pair_count(P);
}

RowMatrixXd pr_loss_cosine_grad(const RowMatrixXd& P) {
  const auto t = cosine_terms(P);
  return pairwise_cos_grad(
      P, t, [](double c) { return c > 0 ? 1.0 : (c < 0 ? -1.0 : 0.0); }, 1.0 / pair_count(P));
}

double pr_loss_pop(const RowMatrixXd& P) {
  const auto t = cosine_terms(P);
  const double total = t.cos.squaredNorm() - t.cos.diagonal().squaredNorm();
  return total / pair_count(P);
}

RowMatrixXd pr_loss_pop_grad(const RowMatrixXd& P) {
  const auto t = cosine_terms(P);
  return pairwise_cos_grad(P, t, [](double c) { return 2.0 * c; }, 1.0 / pair_count(P));
}

template <typename S>
ag::BasicVar<S> pr_loss(ag::BasicVar<S> prototypes, PrVariant variant) {
  const auto& pv = prototypes.value();
  if (pv.rank() != 2) throw ShapeError("pr_loss: expected C x D prototypes, got " + shape_str(pv.shape()));
  require_finite(pv, "pr_loss");
  const int rows = pv.dim(0);
  const RowMatrixXd P = pv.matrix(rows).template cast<double>();
  double value = 0;
  switch (variant) {
    case PrVariant::Svd: value = pr_loss_svd(P); break;
    case PrVariant::Cosine: value = pr_loss_cosine(P); break;
    case PrVariant::Pop: value = pr_loss_pop(P); break;
    case PrVariant::Off: break;
  }
  auto backward = [variant, rows](ag::BasicTape<S>& t, int self) {
    const auto& n = t.node(self);
    const RowMatrixXd P = t.node(n.inputs[0]).value.matrix(rows).template cast<double>();
    RowMatrixXd g;
    switch (variant) {
      case PrVariant::Svd: g = pr_loss_svd_grad(P); break;
      case PrVariant::Cosine: g = pr_loss_cosine_grad(P); break;
      case PrVariant::Pop: g = pr_loss_pop_grad(P); break;
      case PrVariant::Off: g = RowMatrixXd::Zero(P.rows(), P.cols()); break;
    }
    g *= static_cast<double>(t.upstream(self)[0]);
    const RowMatrix<S> gs = g.template cast<S>();
    t.accumulate(n.inputs[0], Eigen::Map<const typename BasicTensor<S>::Vector>(gs.data(), gs.size()));
  };
  return prototypes.tape->record(ag::OpKind::Custom, {prototypes.id}, BasicTensor<S>::scalar(static_cast<S>(value)),
                                 backward);
}

// ---- DFL --------------------------------------------------------------------

DflSplit dfl_split(double target, int max_bin) {
  if (max_bin < 1) throw std::invalid_argument("dfl: need at least two bins");
  if (!(target >= 0.0 && target <= max_bin)) {
    throw std::out_of_range("dfl: target " + std::to_string(target) + " outside [0, " + std::to_string(max_bin) + "]");
  }
  int lo = static_cast<int>(std::floor(target));
  lo = std::min(lo, max_bin - 1);
  const int hi = lo + 1;
  return {lo, hi, hi - target, target - lo};
}

namespace {
Eigen::VectorXd log_softmax(std::span<const double> logits) {
  Eigen::Map<const Eigen::VectorXd> z(logits.data(), static_cast<Eigen::Index>(logits.size()));
  const double mx = z.maxCoeff();
  const double lse = mx + std::log((z.array() - mx).exp().sum());
  return z.array() - lse;
}
}  // namespace

double dfl_loss(std::span<const double> logits, double target) {
  const auto split = dfl_split(target, static_cast<int>(logits.size()) - 1);
  const auto lp = log_softmax(logits);
  return -(split.w_lo * lp[split.lo] + split.w_hi * lp[split.hi]);
}

double dfl_decode(std::span<const double> logits) {
  const Eigen::VectorXd p = log_softmax(logits).array().exp();
  return (p.array() * Eigen::VectorXd::LinSpaced(p.size(), 0.0, static_cast<double>(p.size() - 1)).array()).sum();
}

template <typename S>
ag::BasicVar<S> dfl_loss(ag::BasicVar<S> logits, std::span<const double> targets) {
  const auto& lv = logits.value();
  if (lv.rank() != 2 || static_cast<std::size_t>(lv.dim(0)) != targets.size()) {
    throw ShapeError("dfl_loss: logits " + shape_str(lv.shape()) + " vs " + std::to_string(targets.size()) +
                     " targets");
  }
  const int bins = lv.dim(1);
  BasicTensor<S> soft(lv.shape());
  for (std::size_t r = 0; r < targets.size(); ++r) {
    const auto split = dfl_split(targets[r], bins - 1);
    soft[r * static_cast<std::size_t>(bins) + static_cast<std::size_t>(split.lo)] = static_cast<S>(split.w_lo);
    soft[r * static_cast<std::size_t>(bins) + static_cast<std::size_t>(split.hi)] = static_cast<S>(split.w_hi);
  }
  return ag::soft_cross_entropy(logits, soft);
}

// ---- detection losses -------------------------------------------------------

template <typename S>
ag::BasicVar<S> cls_loss(std::span<const ag::BasicVar<S>> scores, std::span<const ClsTargets> targets) {
  if (scores.empty() || scores.size() != targets.size()) {
    throw std::invalid_argument("cls_loss: need one target set per level");
  }
  int positives = 0;
  for (const auto& t : targets) positives += t.positives;
  auto* tape = scores[0].tape;
  if (positives == 0) return tape->constant(BasicTensor<S>::scalar(S(0)));
  ag::BasicVar<S> total{};
  for (std::size_t l = 0; l < scores.size(); ++l) {
    auto term = ag::bce_weighted(scores[l], targets[l].target.template cast<S>(), targets[l].weight.template cast<S>(),
                                 static_cast<S>(kBceEps));
    total = total.valid() ? ag::add(total, term) : term;
  }
  return total;
}

double box_iou(const BoxAnnotation& a, const BoxAnnotation& b) {
  const double iw = std::max(0.0, std::min(a.x1(), b.x1()) - std::max(a.x0(), b.x0()));
  const double ih = std::max(0.0, std::min(a.y1(), b.y1()) - std::max(a.y0(), b.y0()));
  const double inter = iw * ih;
  const double uni = a.area() + b.area() - inter;
  return uni > 0 ? inter / uni : 0.0;
}

double iou_reg_loss(const BoxAnnotation& pred, const BoxAnnotation& gt) { return 1.0 - box_iou(pred, gt); }

// ---- total ------------------------------------------------------------------

LossReport total_loss(const LossPieces& pieces, const LossWeights& weights) {
  if (pieces.rpc.size() != 3 || pieces.pr.size() != 3) {
    throw std::invalid_argument("total_loss: expected rpc and pr terms for exactly 3 levels, got " +
                                std::to_string(pieces.rpc.size()) + " and " + std::to_string(pieces.pr.size()));
  }
  LossReport r;
  r.components["cls"] = pieces.cls;
  r.components["reg"] = pieces.reg;
  r.components["dfl"] = pieces.dfl;
  double total = weights.cls * pieces.cls + weights.reg * pieces.reg + weights.dfl * pieces.dfl;
  for (int l = 0; l < 3; ++l) {
    r.components["rpc_l" + std::to_string(l + 1)] = pieces.rpc[static_cast<std::size_t>(l)];
    r.components["pr_l" + std::to_string(l + 1)] = pieces.pr[static_cast<std::size_t>(l)];
    total += weights.rpc * pieces.rpc[static_cast<std::size_t>(l)] + weights.pr * pieces.pr[static_cast<std::size_t>(l)];
  }
  for (const auto& [name, v] : r.components) {
    if (!std::isfinite(v)) throw NonFiniteError("total_loss: component " + name + " is not finite");
  }
  r.total = total;
  return r;
}

#define PROTODET_INSTANTIATE(S)                                                                           \
  template ag::BasicVar<S> rpc_loss<S>(ag::BasicVar<S>, const LabelMapStack&);                            \
  template ag::BasicVar<S> pr_loss<S>(ag::BasicVar<S>, PrVariant);                                        \
  template ag::BasicVar<S> dfl_loss<S>(ag::BasicVar<S>, std::span<const double>);                         \
  template ag::BasicVar<S> cls_loss<S>(std::span<const ag::BasicVar<S>>, std::span<const ClsTargets>);

PROTODET_INSTANTIATE(float)
PROTODET_INSTANTIATE(double)

#undef PROTODET_INSTANTIATE

}  // namespace protodet
