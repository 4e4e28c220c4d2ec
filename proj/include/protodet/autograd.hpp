#pragma once

// Reverse-mode differentiation over a fixed operator set. A tape records
// nodes in execution order; backward() visits them in strict reverse order
// and accumulates (sums) gradients into every input that requires them.
//
// Everything is templated on the scalar: float for training, double for
// the finite-difference gradient checks.

#include "protodet/tensor.hpp"

#include <functional>
#include <string>
#include <utility>
#include <vector>

namespace protodet::ag {

enum class OpKind {
  Leaf,
  Constant,
  Conv3x3,
  Conv1x1,
  Relu,
  Sigmoid,
  Add,
  Scale,
  Matmul,
  Upsample2x,
  Resize,
  Sum,
  Mean,
  Softmax,
  Bce,
  Gather,
  Reshape,
  SoftCrossEntropy,
  IouLoss,
  Custom,
};

const char* op_name(OpKind kind);

template <typename Scalar>
class BasicTape;

/// Handle to a node on a tape. Cheap to copy; valid while its tape lives.
template <typename Scalar>
struct BasicVar {
  BasicTape<Scalar>* tape = nullptr;
  int id = -1;

  const BasicTensor<Scalar>& value() const { return tape->value(*this); }
  const Shape& shape() const { return value().shape(); }
  bool valid() const { return tape != nullptr && id >= 0; }
};

template <typename Scalar>
class BasicTape {
 public:
  using TensorT = BasicTensor<Scalar>;
  using Var = BasicVar<Scalar>;
  // Reads the node's own gradient and accumulates into its inputs.
  using BackwardFn = std::function<void(BasicTape&, int self)>;

  struct Node {
    OpKind kind = OpKind::Leaf;
    std::vector<int> inputs;
    TensorT value;
    std::vector<TensorT> saved;
    BackwardFn backward;
    bool requires_grad = false;
  };

  BasicTape() = default;
  BasicTape(const BasicTape&) = delete;
  BasicTape& operator=(const BasicTape&) = delete;

  Var leaf(TensorT value, bool requires_grad = true);
  Var constant(TensorT value);

  /// Appends an operator node. Inputs must already be on this tape. The
  /// value must be finite.
  Var record(OpKind kind, std::vector<int> inputs, TensorT value, BackwardFn backward,
             std::vector<TensorT> saved = {});

  const TensorT& value(Var v) const { return node(v).value; }
  const Node& node(Var v) const;
  const Node& node(int id) const { return nodes_.at(static_cast<std::size_t>(id)); }
  std::size_t size() const { return nodes_.size(); }

  /// Gradient of the last backward() loss w.r.t. v; zeros if v did not
  /// participate.
  TensorT grad(Var v) const;
  bool has_grad(Var v) const;

  /// Runs reverse accumulation from a scalar (single-element) node.
  void backward(Var loss);

  /// Upstream gradient of node `self` inside a BackwardFn.
  const TensorT& upstream(int self) const { return grads_.at(static_cast<std::size_t>(self)); }
  /// Adds g into the gradient slot of node `id` when it requires grad.
  void accumulate(int id, const TensorT& g);
  void accumulate(int id, const typename TensorT::Vector& g);
  bool requires_grad(int id) const { return node(id).requires_grad; }

 private:
  void check_owned(Var v) const;

  std::vector<Node> nodes_;
  std::vector<TensorT> grads_;
  std::vector<bool> grad_set_;
};

using Tape = BasicTape<float>;
using Var = BasicVar<float>;
using TapeD = BasicTape<double>;
using VarD = BasicVar<double>;

// ---- operators ------------------------------------------------------------
// Maps are C x H x W. Conv kernels are Cout x Cin x 3 x 3 (conv3x3) or
// Cout x Cin (conv1x1); biases have Cout entries.

/// 3x3 convolution, zero padding 1, stride 1 or 2.
template <typename S>
BasicVar<S> conv3x3(BasicVar<S> x, BasicVar<S> weight, BasicVar<S> bias, int stride = 1);
template <typename S>
BasicVar<S> conv1x1(BasicVar<S> x, BasicVar<S> weight, BasicVar<S> bias);
template <typename S>
BasicVar<S> relu(BasicVar<S> x);
template <typename S>
BasicVar<S> sigmoid(BasicVar<S> x);
template <typename S>
BasicVar<S> add(BasicVar<S> a, BasicVar<S> b);
template <typename S>
BasicVar<S> scale(BasicVar<S> x, S factor);
/// [M, K] x [K, N] -> [M, N]
template <typename S>
BasicVar<S> matmul(BasicVar<S> a, BasicVar<S> b);
/// Nearest-neighbour 2x upsampling of a C x H x W map.
template <typename S>
BasicVar<S> upsample2x(BasicVar<S> x);
/// Bilinear, align-corners-false resize of a C x H x W map.
template <typename S>
BasicVar<S> resize_bilinear(BasicVar<S> x, int height, int width);
template <typename S>
BasicVar<S> sum(BasicVar<S> x);
template <typename S>
BasicVar<S> mean(BasicVar<S> x);
/// Softmax over the last axis of a rank-2 tensor.
template <typename S>
BasicVar<S> softmax(BasicVar<S> x);
/// Mean binary cross-entropy with epsilon inside both logs:
///   -mean(y log(p + eps) + (1 - y) log(1 - p + eps))
template <typename S>
BasicVar<S> bce(BasicVar<S> p, const BasicTensor<S>& target, S eps);
/// Weighted-sum variant: sum(w * bce_elementwise). Weights are constants.
template <typename S>
BasicVar<S> bce_weighted(BasicVar<S> p, const BasicTensor<S>& target, const BasicTensor<S>& weight, S eps);
/// Picks cells (row, col) from a C x H x W map into an N x C matrix.
template <typename S>
BasicVar<S> gather_cells(BasicVar<S> x, const std::vector<std::pair<int, int>>& cells);
template <typename S>
BasicVar<S> reshape(BasicVar<S> x, Shape shape);
/// Cuts the graph: the result carries x's value with no gradient path.
template <typename S>
BasicVar<S> detach(BasicVar<S> x);
/// mean over rows of -sum_b target[n,b] * log softmax(logits)[n,b].
template <typename S>
BasicVar<S> soft_cross_entropy(BasicVar<S> logits, const BasicTensor<S>& target);
/// mean over rows of 1 - IoU between boxes given as (left, top, right,
/// bottom) distances from a shared anchor point. N x 4 each.
template <typename S>
BasicVar<S> iou_loss(BasicVar<S> pred, const BasicTensor<S>& target);

/// Linear interpolation taps for align-corners-false resizing of one axis.
struct ResizeTap {
  int lo = 0;
  int hi = 0;
  double frac = 0.0;  // weight on `hi`
};
std::vector<ResizeTap> resize_taps(int in_size, int out_size);

// ---- gradient checking ----------------------------------------------------

template <typename S>
using ScalarFn = std::function<BasicVar<S>(BasicTape<S>&, BasicVar<S>)>;

struct GradCheckResult {
  double max_rel_error = 0.0;
  std::size_t worst_index = 0;
  double analytic = 0.0;
  double numeric = 0.0;
};

/// Compares the tape gradient of fn at x against central differences.
/// Relative error per element is |a - b| / max(|a|, |b|, 1e-8).
template <typename S>
GradCheckResult finite_diff_check(const ScalarFn<S>& fn, const BasicTensor<S>& x, double eps);

}  // namespace protodet::ag
