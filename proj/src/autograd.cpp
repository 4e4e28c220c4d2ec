#include "protodet/autograd.hpp"

#include <algorithm>
#include <cmath>
#include <stdexcept>

namespace protodet::ag {

const char* op_name(OpKind kind) {
  switch (kind) {
    case OpKind::Leaf: return "leaf";
    case OpKind::Constant: return "constant";
    case OpKind::Conv3x3: return "conv3x3";
    case OpKind::Conv1x1: return "conv1x1";
    case OpKind::Relu: return "relu";
    case OpKind::Sigmoid: return "sigmoid";
    case OpKind::Add: return "add";
    case OpKind::Scale: return "scale";
    case OpKind::Matmul: return "matmul";
    case OpKind::Upsample2x: return "upsample2x";
    case OpKind::Resize: return "resize_bilinear";
    case OpKind::Sum: return "sum";
    case OpKind::Mean: return "mean";
    case OpKind::Softmax: return "softmax";
    case OpKind::Bce: return "bce";
    case OpKind::Gather: return "gather_cells";
    case OpKind::Reshape: return "reshape";
    case OpKind::SoftCrossEntropy: return "soft_cross_entropy";
    case OpKind::IouLoss: return "iou_loss";
    case OpKind::Custom: return "custom";
  }
  return "?";
}

// ---- tape -----------------------------------------------------------------

template <typename S>
typename BasicTape<S>::Var BasicTape<S>::leaf(TensorT value, bool requires_grad) {
  require_finite(value, "leaf");
  Node n;
  n.kind = OpKind::Leaf;
  n.value = std::move(value);
  n.requires_grad = requires_grad;
  nodes_.push_back(std::move(n));
  return Var{this, static_cast<int>(nodes_.size()) - 1};
}

template <typename S>
typename BasicTape<S>::Var BasicTape<S>::constant(TensorT value) {
  Var v = leaf(std::move(value), false);
  nodes_.back().kind = OpKind::Constant;
  return v;
}

template <typename S>
typename BasicTape<S>::Var BasicTape<S>::record(OpKind kind, std::vector<int> inputs, TensorT value,
                                                BackwardFn backward, std::vector<TensorT> saved) {
  if (!value.all_finite()) {
    throw NonFiniteError(std::string(op_name(kind)) + ": produced a non-finite value");
  }
  Node n;
  n.kind = kind;
  for (int id : inputs) {
    if (id < 0 || static_cast<std::size_t>(id) >= nodes_.size()) {
      throw std::invalid_argument(std::string(op_name(kind)) + ": input is not on this tape");
    }
    n.requires_grad = n.requires_grad || nodes_[static_cast<std::size_t>(id)].requires_grad;
  }
  n.inputs = std::move(inputs);
  n.value = std::move(value);
  n.saved = std::move(saved);
  n.backward = std::move(backward);
  nodes_.push_back(std::move(n));
  return Var{this, static_cast<int>(nodes_.size()) - 1};
}

template <typename S>
void BasicTape<S>::check_owned(Var v) const {
  if (v.tape != this || v.id < 0 || static_cast<std::size_t>(v.id) >= nodes_.size()) {
    throw std::invalid_argument("variable does not belong to this tape");
  }
}

template <typename S>
const typename BasicTape<S>::Node& BasicTape<S>::node(Var v) const {
  check_owned(v);
  return nodes_[static_cast<std::size_t>(v.id)];
}

template <typename S>
bool BasicTape<S>::has_grad(Var v) const {
  check_owned(v);
  return static_cast<std::size_t>(v.id) < grad_set_.size() && grad_set_[static_cast<std::size_t>(v.id)];
}

template <typename S>
typename BasicTape<S>::TensorT BasicTape<S>::grad(Var v) const {
  if (has_grad(v)) return grads_[static_cast<std::size_t>(v.id)];
  return TensorT(node(v).value.shape());
}

template <typename S>
void BasicTape<S>::accumulate(int id, const typename TensorT::Vector& g) {
  const auto k = static_cast<std::size_t>(id);
  if (!nodes_[k].requires_grad) return;
  if (!grad_set_[k]) {
    grads_[k] = TensorT(nodes_[k].value.shape());
    grad_set_[k] = true;
  }
  grads_[k].data() += g;
}

template <typename S>
void BasicTape<S>::accumulate(int id, const TensorT& g) {
  accumulate(id, g.data());
}

template <typename S>
void BasicTape<S>::backward(Var loss) {
  check_owned(loss);
  const auto& root = nodes_[static_cast<std::size_t>(loss.id)];
  if (root.value.numel() != 1) {
    throw ShapeError("backward: loss must be a scalar, got shape " + shape_str(root.value.shape()));
  }
  grads_.assign(nodes_.size(), TensorT());
  grad_set_.assign(nodes_.size(), false);
  if (!root.requires_grad) return;
  grads_[static_cast<std::size_t>(loss.id)] = TensorT(root.value.shape(), S(1));
  grad_set_[static_cast<std::size_t>(loss.id)] = true;
  for (int id = loss.id; id >= 0; --id) {
    const auto k = static_cast<std::size_t>(id);
    if (!grad_set_[k] || !nodes_[k].requires_grad || !nodes_[k].backward) continue;
    nodes_[k].backward(*this, id);
  }
}

// ---- helpers --------------------------------------------------------------

namespace {

template <typename S>
void same_tape(BasicVar<S> a, BasicVar<S> b, const char* what) {
  if (a.tape != b.tape) throw std::invalid_argument(std::string(what) + ": operands live on different tapes");
}

template <typename S>
void require_rank(const BasicTensor<S>& t, std::size_t rank, const char* what) {
  if (t.rank() != rank) {
    throw ShapeError(std::string(what) + ": expected rank " + std::to_string(rank) + ", got shape " +
                     shape_str(t.shape()));
  }
}

template <typename S>
void check_inputs(const char* what, std::initializer_list<BasicVar<S>> vars) {
  for (const auto& v : vars) require_finite(v.value(), what);
}

// im2col for 3x3 / pad 1: rows are (ci, ky, kx), columns output pixels.
template <typename S>
RowMatrix<S> im2col3x3(const BasicTensor<S>& x, int stride, int out_h, int out_w) {
  const int cin = x.dim(0), h = x.dim(1), w = x.dim(2);
  RowMatrix<S> cols = RowMatrix<S>::Zero(cin * 9, out_h * out_w);
  for (int c = 0; c < cin; ++c) {
    for (int ky = 0; ky < 3; ++ky) {
      for (int kx = 0; kx < 3; ++kx) {
        S* row = cols.row((c * 3 + ky) * 3 + kx).data();
        for (int oy = 0; oy < out_h; ++oy) {
          const int iy = oy * stride + ky - 1;
          if (iy < 0 || iy >= h) continue;
          for (int ox = 0; ox < out_w; ++ox) {
            const int ix = ox * stride + kx - 1;
            if (ix < 0 || ix >= w) continue;
            row[oy * out_w + ox] = x.at(c, iy, ix);
          }
        }
      }
    }
  }
  return cols;
}

template <typename S>
void col2im3x3(const RowMatrix<S>& cols, int stride, int out_h, int out_w, BasicTensor<S>& dx) {
  const int cin = dx.dim(0), h = dx.dim(1), w = dx.dim(2);
  for (int c = 0; c < cin; ++c) {
    for (int ky = 0; ky < 3; ++ky) {
      for (int kx = 0; kx < 3; ++kx) {
        const S* row = cols.row((c * 3 + ky) * 3 + kx).data();
        for (int oy = 0; oy < out_h; ++oy) {
          const int iy = oy * stride + ky - 1;
          if (iy < 0 || iy >= h) continue;
          for (int ox = 0; ox < out_w; ++ox) {
            const int ix = ox * stride + kx - 1;
            if (ix < 0 || ix >= w) continue;
            dx.at(c, iy, ix) += row[oy * out_w + ox];
          }
        }
      }
    }
  }
}

}  // namespace

std::vector<ResizeTap> resize_taps(int in_size, int out_size) {
  if (in_size < 1 || out_size < 1) throw ShapeError("resize: sizes must be positive");
  std::vector<ResizeTap> taps(static_cast<std::size_t>(out_size));
  const double ratio = static_cast<double>(in_size) / out_size;
  for (int o = 0; o < out_size; ++o) {
    double src = (o + 0.5) * ratio - 0.5;
    src = std::clamp(src, 0.0, static_cast<double>(in_size - 1));
    const int lo = static_cast<int>(std::floor(src));
    const int hi = std::min(lo + 1, in_size - 1);
    taps[static_cast<std::size_t>(o)] = {lo, hi, hi == lo ? 0.0 : src - lo};
  }
  return taps;
}

// ---- operators ------------------------------------------------------------

template <typename S>
BasicVar<S> conv3x3(BasicVar<S> x, BasicVar<S> weight, BasicVar<S> bias, int stride) {
  same_tape(x, weight, "conv3x3");
  same_tape(x, bias, "conv3x3");
  check_inputs("conv3x3", {x, weight, bias});
  const auto& xv = x.value();
  const auto& wv = weight.value();
  require_rank(xv, 3, "conv3x3 input");
  if (stride != 1 && stride != 2) throw std::invalid_argument("conv3x3: stride must be 1 or 2");
  const int cin = xv.dim(0);
  if (wv.rank() != 4 || wv.dim(1) != cin || wv.dim(2) != 3 || wv.dim(3) != 3) {
    throw ShapeError("conv3x3: kernel " + shape_str(wv.shape()) + " incompatible with input " +
                     shape_str(xv.shape()));
  }
  const int cout = wv.dim(0);
  if (bias.value().numel() != static_cast<std::size_t>(cout)) {
    throw ShapeError("conv3x3: bias " + shape_str(bias.value().shape()) + " incompatible with kernel " +
                     shape_str(wv.shape()));
  }
  const int out_h = (xv.dim(1) - 1) / stride + 1;
  const int out_w = (xv.dim(2) - 1) / stride + 1;

  RowMatrix<S> cols = im2col3x3(xv, stride, out_h, out_w);
  BasicTensor<S> out(Shape{cout, out_h, out_w});
  auto om = out.matrix(cout);
  om.noalias() = wv.matrix(cout) * cols;
  om.colwise() += bias.value().data();

  BasicTensor<S> saved_cols(Shape{cin * 9, out_h * out_w}, Eigen::Map<const typename BasicTensor<S>::Vector>(
                                                                cols.data(), cols.size()));
  auto backward = [stride, out_h, out_w, cin, cout](BasicTape<S>& t, int self) {
    const auto& n = t.node(self);
    const auto& g = t.upstream(self).matrix(cout);
    const auto cols_m = n.saved[0].matrix(cin * 9);
    if (t.requires_grad(n.inputs[1])) {
      RowMatrix<S> dw = g * cols_m.transpose();
      t.accumulate(n.inputs[1], Eigen::Map<const typename BasicTensor<S>::Vector>(dw.data(), dw.size()));
    }
    if (t.requires_grad(n.inputs[2])) {
      typename BasicTensor<S>::Vector db = g.rowwise().sum();
      t.accumulate(n.inputs[2], db);
    }
    if (t.requires_grad(n.inputs[0])) {
      const auto& xv = t.node(n.inputs[0]).value;
      RowMatrix<S> dcols = t.node(n.inputs[1]).value.matrix(cout).transpose() * g;
      BasicTensor<S> dx(xv.shape());
      col2im3x3(dcols, stride, out_h, out_w, dx);
      t.accumulate(n.inputs[0], dx);
    }
  };
  return x.tape->record(OpKind::Conv3x3, {x.id, weight.id, bias.id}, std::move(out), backward, {std::move(saved_cols)});
}

template <typename S>
BasicVar<S> conv1x1(BasicVar<S> x, BasicVar<S> weight, BasicVar<S> bias) {
  same_tape(x, weight, "conv1x1");
  same_tape(x, bias, "conv1x1");
  check_inputs("conv1x1", {x, weight, bias});
  const auto& xv = x.value();
  const auto& wv = weight.value();
  require_rank(xv, 3, "conv1x1 input");
  const int cin = xv.dim(0);
  if (wv.rank() != 2 || wv.dim(1) != cin) {
    throw ShapeError("conv1x1: kernel " + shape_str(wv.shape()) + " incompatible with input " +
                     shape_str(xv.shape()));
  }
  const int cout = wv.dim(0);
  if (bias.value().numel() != static_cast<std::size_t>(cout)) {
    throw ShapeError("conv1x1: bias " + shape_str(bias.value().shape()) + " incompatible with kernel " +
                     shape_str(wv.shape()));
  }
  BasicTensor<S> out(Shape{cout, xv.dim(1), xv.dim(2)});
  auto om = out.matrix(cout);
  om.noalias() = wv.matrix(cout) * xv.matrix(cin);
  om.colwise() += bias.value().data();

  auto backward = [cin, cout](BasicTape<S>& t, int self) {
    const auto& n = t.node(self);
    const auto g = t.upstream(self).matrix(cout);
    const auto& xv = t.node(n.inputs[0]).value;
    if (t.requires_grad(n.inputs[1])) {
      RowMatrix<S> dw = g * xv.matrix(cin).transpose();
      t.accumulate(n.inputs[1], Eigen::Map<const typename BasicTensor<S>::Vector>(dw.data(), dw.size()));
    }
    if (t.requires_grad(n.inputs[2])) {
      typename BasicTensor<S>::Vector db = g.rowwise().sum();
      t.accumulate(n.inputs[2], db);
    }
    if (t.requires_grad(n.inputs[0])) {
      RowMatrix<S> dx = t.node(n.inputs[1]).value.matrix(cout).transpose() * g;
      t.accumulate(n.inputs[0], Eigen::Map<const typename BasicTensor<S>::Vector>(dx.data(), dx.size()));
    }
  };
  return x.tape->record(OpKind::Conv1x1, {x.id, weight.id, bias.id}, std::move(out), backward);
}

template <typename S>
BasicVar<S> relu(BasicVar<S> x) {
  check_inputs("relu", {x});
  BasicTensor<S> out(x.shape(), x.value().data().cwiseMax(S(0)));
  auto backward = [](BasicTape<S>& t, int self) {
    const auto& n = t.node(self);
    const auto& xv = t.node(n.inputs[0]).value.data();
    typename BasicTensor<S>::Vector g = (xv.array() > S(0)).select(t.upstream(self).data(), S(0));
    t.accumulate(n.inputs[0], g);
  };
  return x.tape->record(OpKind::Relu, {x.id}, std::move(out), backward);
}

template <typename S>
BasicVar<S> sigmoid(BasicVar<S> x) {
  check_inputs("sigmoid", {x});
  const auto& xv = x.value().data();
  typename BasicTensor<S>::Vector y(xv.size());
  for (Eigen::Index i = 0; i < xv.size(); ++i) {
    // Split by sign so neither branch overflows exp().
    const S v = xv[i];
    if (v >= 0) {
      y[i] = S(1) / (S(1) + std::exp(-v));
    } else {
      const S e = std::exp(v);
      y[i] = e / (S(1) + e);
    }
  }
  auto backward = [](BasicTape<S>& t, int self) {
    const auto& n = t.node(self);
    const auto& yv = n.value.data().array();
    typename BasicTensor<S>::Vector g = t.upstream(self).data().array() * yv * (S(1) - yv);
    t.accumulate(n.inputs[0], g);
  };
  return x.tape->record(OpKind::Sigmoid, {x.id}, BasicTensor<S>(x.shape(), std::move(y)), backward);
}

template <typename S>
BasicVar<S> add(BasicVar<S> a, BasicVar<S> b) {
  same_tape(a, b, "add");
  check_inputs("add", {a, b});
  require_same_shape(a.value(), b.value(), "add");
  BasicTensor<S> out(a.shape(), a.value().data() + b.value().data());
  auto backward = [](BasicTape<S>& t, int self) {
    const auto& n = t.node(self);
    t.accumulate(n.inputs[0], t.upstream(self));
    t.accumulate(n.inputs[1], t.upstream(self));
  };
  return a.tape->record(OpKind::Add, {a.id, b.id}, std::move(out), backward);
}

template <typename S>
BasicVar<S> scale(BasicVar<S> x, S factor) {
  check_inputs("scale", {x});
  BasicTensor<S> out(x.shape(), x.value().data() * factor);
  auto backward = [factor](BasicTape<S>& t, int self) {
    typename BasicTensor<S>::Vector g = t.upstream(self).data() * factor;
    t.accumulate(t.node(self).inputs[0], g);
  };
  return x.tape->record(OpKind::Scale, {x.id}, std::move(out), backward);
}

template <typename S>
BasicVar<S> matmul(BasicVar<S> a, BasicVar<S> b) {
  same_tape(a, b, "matmul");
  check_inputs("matmul", {a, b});
  const auto& av = a.value();
  const auto& bv = b.value();
  if (av.rank() != 2 || bv.rank() != 2 || av.dim(1) != bv.dim(0)) {
    throw ShapeError("matmul: shape mismatch " + shape_str(av.shape()) + " vs " + shape_str(bv.shape()));
  }
  const int m = av.dim(0), k = av.dim(1), nn = bv.dim(1);
  BasicTensor<S> out(Shape{m, nn});
  out.matrix(m).noalias() = av.matrix(m) * bv.matrix(k);
  auto backward = [m, k](BasicTape<S>& t, int self) {
    const auto& n = t.node(self);
    const auto g = t.upstream(self).matrix(m);
    const auto& av = t.node(n.inputs[0]).value;
    const auto& bv = t.node(n.inputs[1]).value;
    if (t.requires_grad(n.inputs[0])) {
      RowMatrix<S> da = g * bv.matrix(k).transpose();
      t.accumulate(n.inputs[0], Eigen::Map<const typename BasicTensor<S>::Vector>(da.data(), da.size()));
    }
    if (t.requires_grad(n.inputs[1])) {
      RowMatrix<S> db = av.matrix(m).transpose() * g;
      t.accumulate(n.inputs[1], Eigen::Map<const typename BasicTensor<S>::Vector>(db.data(), db.size()));
    }
  };
  return a.tape->record(OpKind::Matmul, {a.id, b.id}, std::move(out), backward);
}

template <typename S>
BasicVar<S> upsample2x(BasicVar<S> x) {
  check_inputs("upsample2x", {x});
  const auto& xv = x.value();
  require_rank(xv, 3, "upsample2x");
  const int c = xv.dim(0), h = xv.dim(1), w = xv.dim(2);
  BasicTensor<S> out(Shape{c, 2 * h, 2 * w});
  for (int k = 0; k < c; ++k)
    for (int i = 0; i < 2 * h; ++i)
      for (int j = 0; j < 2 * w; ++j) out.at(k, i, j) = xv.at(k, i / 2, j / 2);
  auto backward = [c, h, w](BasicTape<S>& t, int self) {
    const auto& g = t.upstream(self);
    BasicTensor<S> dx(Shape{c, h, w});
    for (int k = 0; k < c; ++k)
      for (int i = 0; i < 2 * h; ++i)
        for (int j = 0; j < 2 * w; ++j) dx.at(k, i / 2, j / 2) += g.at(k, i, j);
    t.accumulate(t.node(self).inputs[0], dx);
  };
  return x.tape->record(OpKind::Upsample2x, {x.id}, std::move(out), backward);
}

template <typename S>
BasicVar<S> resize_bilinear(BasicVar<S> x, int height, int width) {
  check_inputs("resize_bilinear", {x});
  const auto& xv = x.value();
  require_rank(xv, 3, "resize_bilinear");
  if (height < 1 || width < 1) throw ShapeError("resize_bilinear: zero target dimension");
  const int c = xv.dim(0), h = xv.dim(1), w = xv.dim(2);
  const auto ty = resize_taps(h, height);
  const auto tx = resize_taps(w, width);
  BasicTensor<S> out(Shape{c, height, width});
  for (int k = 0; k < c; ++k) {
    for (int i = 0; i < height; ++i) {
      const auto& a = ty[static_cast<std::size_t>(i)];
      for (int j = 0; j < width; ++j) {
        const auto& b = tx[static_cast<std::size_t>(j)];
        const S fy = S(a.frac), fx = S(b.frac);
        out.at(k, i, j) = (S(1) - fy) * ((S(1) - fx) * xv.at(k, a.lo, b.lo) + fx * xv.at(k, a.lo, b.hi)) +
                          fy * ((S(1) - fx) * xv.at(k, a.hi, b.lo) + fx * xv.at(k, a.hi, b.hi));
      }
    }
  }
  auto backward = [c, h, w, height, width, ty, tx](BasicTape<S>& t, int self) {
    const auto& g = t.upstream(self);
    BasicTensor<S> dx(Shape{c, h, w});
    for (int k = 0; k < c; ++k) {
      for (int i = 0; i < height; ++i) {
        const auto& a = ty[static_cast<std::size_t>(i)];
        for (int j = 0; j < width; ++j) {
          const auto& b = tx[static_cast<std::size_t>(j)];
          const S fy = S(a.frac), fx = S(b.frac);
          const S gv = g.at(k, i, j);
          dx.at(k, a.lo, b.lo) += gv * (S(1) - fy) * (S(1) - fx);
          dx.at(k, a.lo, b.hi) += gv * (S(1) - fy) * fx;
          dx.at(k, a.hi, b.lo) += gv * fy * (S(1) - fx);
          dx.at(k, a.hi, b.hi) += gv * fy * fx;
        }
      }
    }
    t.accumulate(t.node(self).inputs[0], dx);
  };
  return x.tape->record(OpKind::Resize, {x.id}, std::move(out), backward);
}

template <typename S>
BasicVar<S> sum(BasicVar<S> x) {
  check_inputs("sum", {x});
  auto backward = [](BasicTape<S>& t, int self) {
    const int in = t.node(self).inputs[0];
    const S g = t.upstream(self)[0];
    t.accumulate(in, BasicTensor<S>(t.node(in).value.shape(), g));
  };
  return x.tape->record(OpKind::Sum, {x.id}, BasicTensor<S>::scalar(x.value().data().sum()), backward);
}

template <typename S>
BasicVar<S> mean(BasicVar<S> x) {
  check_inputs("mean", {x});
  const auto n = static_cast<S>(x.value().numel());
  if (x.value().numel() == 0) throw ShapeError("mean: empty tensor");
  auto backward = [n](BasicTape<S>& t, int self) {
    const int in = t.node(self).inputs[0];
    t.accumulate(in, BasicTensor<S>(t.node(in).value.shape(), t.upstream(self)[0] / n));
  };
  return x.tape->record(OpKind::Mean, {x.id}, BasicTensor<S>::scalar(x.value().data().sum() / n), backward);
}

namespace {
template <typename S>
RowMatrix<S> row_softmax(const Eigen::Map<const RowMatrix<S>>& z) {
  RowMatrix<S> y = z;
  for (Eigen::Index r = 0; r < y.rows(); ++r) {
    const S mx = y.row(r).maxCoeff();
    y.row(r) = (y.row(r).array() - mx).exp();
    y.row(r) /= y.row(r).sum();
  }
  return y;
}
}  // namespace

template <typename S>
BasicVar<S> softmax(BasicVar<S> x) {
  check_inputs("softmax", {x});
  const auto& xv = x.value();
  require_rank(xv, 2, "softmax");
  const int rows = xv.dim(0);
  RowMatrix<S> y = row_softmax<S>(xv.matrix(rows));
  BasicTensor<S> out(xv.shape(), Eigen::Map<const typename BasicTensor<S>::Vector>(y.data(), y.size()));
  auto backward = [rows](BasicTape<S>& t, int self) {
    const auto& n = t.node(self);
    const auto yv = n.value.matrix(rows);
    const auto g = t.upstream(self).matrix(rows);
    RowMatrix<S> dx = yv.array() * (g.array().colwise() - (g.array() * yv.array()).rowwise().sum());
    t.accumulate(n.inputs[0], Eigen::Map<const typename BasicTensor<S>::Vector>(dx.data(), dx.size()));
  };
  return x.tape->record(OpKind::Softmax, {x.id}, std::move(out), backward);
}

template <typename S>
BasicVar<S> bce_weighted(BasicVar<S> p, const BasicTensor<S>& target, const BasicTensor<S>& weight, S eps) {
  check_inputs("bce", {p});
  require_same_shape(p.value(), target, "bce target");
  require_same_shape(p.value(), weight, "bce weight");
  const auto& pv = p.value().data().array();
  const auto& y = target.data().array();
  const auto& w = weight.data().array();
  const S loss = -(w * (y * (pv + eps).log() + (S(1) - y) * (S(1) - pv + eps).log())).sum();
  auto backward = [target, weight, eps](BasicTape<S>& t, int self) {
    const auto& n = t.node(self);
    const auto& pv = t.node(n.inputs[0]).value.data().array();
    const auto& y = target.data().array();
    const S g = t.upstream(self)[0];
    typename BasicTensor<S>::Vector dp =
        g * weight.data().array() * (-y / (pv + eps) + (S(1) - y) / (S(1) - pv + eps));
    t.accumulate(n.inputs[0], dp);
  };
  return p.tape->record(OpKind::Bce, {p.id}, BasicTensor<S>::scalar(loss), backward);
}

template <typename S>
BasicVar<S> bce(BasicVar<S> p, const BasicTensor<S>& target, S eps) {
  if (p.value().numel() == 0) throw ShapeError("bce: empty input");
  const BasicTensor<S> w(p.shape(), S(1) / static_cast<S>(p.value().numel()));
  return bce_weighted(p, target, w, eps);
}

template <typename S>
BasicVar<S> gather_cells(BasicVar<S> x, const std::vector<std::pair<int, int>>& cells) {
  check_inputs("gather_cells", {x});
  const auto& xv = x.value();
  require_rank(xv, 3, "gather_cells");
  const int c = xv.dim(0), h = xv.dim(1), w = xv.dim(2);
  for (const auto& [i, j] : cells) {
    if (i < 0 || i >= h || j < 0 || j >= w) {
      throw ShapeError("gather_cells: cell (" + std::to_string(i) + ", " + std::to_string(j) + ") outside " +
                       shape_str(xv.shape()));
    }
  }
  const int n = static_cast<int>(cells.size());
  BasicTensor<S> out(Shape{n, c});
  for (int r = 0; r < n; ++r)
    for (int k = 0; k < c; ++k) out[static_cast<std::size_t>(r * c + k)] = xv.at(k, cells[r].first, cells[r].second);
  auto backward = [cells, c](BasicTape<S>& t, int self) {
    const auto& n = t.node(self);
    const auto& g = t.upstream(self);
    BasicTensor<S> dx(t.node(n.inputs[0]).value.shape());
    for (std::size_t r = 0; r < cells.size(); ++r)
      for (int k = 0; k < c; ++k) dx.at(k, cells[r].first, cells[r].second) += g[r * static_cast<std::size_t>(c) + k];
    t.accumulate(n.inputs[0], dx);
  };
  return x.tape->record(OpKind::Gather, {x.id}, std::move(out), backward);
}

template <typename S>
BasicVar<S> reshape(BasicVar<S> x, Shape shape) {
  BasicTensor<S> out = x.value().reshaped(std::move(shape));
  auto backward = [](BasicTape<S>& t, int self) {
    t.accumulate(t.node(self).inputs[0], t.upstream(self).data());
  };
  return x.tape->record(OpKind::Reshape, {x.id}, std::move(out), backward);
}

template <typename S>
BasicVar<S> detach(BasicVar<S> x) {
  return x.tape->constant(x.value());
}

template <typename S>
BasicVar<S> soft_cross_entropy(BasicVar<S> logits, const BasicTensor<S>& target) {
  check_inputs("soft_cross_entropy", {logits});
  const auto& zv = logits.value();
  require_rank(zv, 2, "soft_cross_entropy");
  require_same_shape(zv, target, "soft_cross_entropy target");
  const int rows = zv.dim(0);
  if (rows == 0) throw ShapeError("soft_cross_entropy: no rows");
  const auto z = zv.matrix(rows);
  // log-sum-exp per row for a stable log-softmax
  S loss = 0;
  const auto tm = target.matrix(rows);
  for (int r = 0; r < rows; ++r) {
    const S mx = z.row(r).maxCoeff();
    const S lse = mx + std::log((z.row(r).array() - mx).exp().sum());
    loss -= (tm.row(r).array() * (z.row(r).array() - lse)).sum();
  }
  loss /= static_cast<S>(rows);
  auto backward = [rows, target](BasicTape<S>& t, int self) {
    const auto& n = t.node(self);
    const auto z = t.node(n.inputs[0]).value.matrix(rows);
    const auto tm = target.matrix(rows);
    RowMatrix<S> p = row_softmax<S>(z);
    // d/dz of -sum t log softmax(z) = p * sum(t) - t
    RowMatrix<S> dz = p.array().colwise() * tm.rowwise().sum().array();
    dz -= tm;
    dz *= t.upstream(self)[0] / static_cast<S>(rows);
    t.accumulate(n.inputs[0], Eigen::Map<const typename BasicTensor<S>::Vector>(dz.data(), dz.size()));
  };
  return logits.tape->record(OpKind::SoftCrossEntropy, {logits.id}, BasicTensor<S>::scalar(loss), backward);
}

template <typename S>
BasicVar<S> iou_loss(BasicVar<S> pred, const BasicTensor<S>& target) {
  check_inputs("iou_loss", {pred});
  const auto& pv = pred.value();
  require_rank(pv, 2, "iou_loss");
  require_same_shape(pv, target, "iou_loss target");
  if (pv.dim(1) != 4) throw ShapeError("iou_loss: expected N x 4 distances, got " + shape_str(pv.shape()));
  const int n = pv.dim(0);
  if (n == 0) throw ShapeError("iou_loss: no boxes");
  constexpr double kTiny = 1e-12;
  S loss = 0;
  for (int r = 0; r < n; ++r) {
    const S* p = pv.ptr() + 4 * r;
    const S* q = target.ptr() + 4 * r;
    const S iw = std::min(p[0], q[0]) + std::min(p[2], q[2]);
    const S ih = std::min(p[1], q[1]) + std::min(p[3], q[3]);
    const S inter = std::max(iw, S(0)) * std::max(ih, S(0));
    const S uni = (p[0] + p[2]) * (p[1] + p[3]) + (q[0] + q[2]) * (q[1] + q[3]) - inter + S(kTiny);
    loss += S(1) - inter / uni;
  }
  loss /= static_cast<S>(n);
  auto backward = [n, target](BasicTape<S>& t, int self) {
    const auto& node = t.node(self);
    const auto& pv = t.node(node.inputs[0]).value;
    const S g = t.upstream(self)[0] / static_cast<S>(n);
    BasicTensor<S> dp(pv.shape());
    for (int r = 0; r < n; ++r) {
      const S* p = pv.ptr() + 4 * r;
      const S* q = target.ptr() + 4 * r;
      const S iw = std::min(p[0], q[0]) + std::min(p[2], q[2]);
      const S ih = std::min(p[1], q[1]) + std::min(p[3], q[3]);
      if (iw <= 0 || ih <= 0) continue;  // IoU is identically 0 here
      const S inter = iw * ih;
      const S pw = p[0] + p[2], ph = p[1] + p[3];
      const S uni = pw * ph + (q[0] + q[2]) * (q[1] + q[3]) - inter + S(kTiny);
      // d inter / d p_side and d area_p / d p_side for (l, t, r, b)
      const S dinter[4] = {p[0] < q[0] ? ih : S(0), p[1] < q[1] ? iw : S(0), p[2] < q[2] ? ih : S(0),
                           p[3] < q[3] ? iw : S(0)};
      const S darea[4] = {ph, pw, ph, pw};
      for (int s = 0; s < 4; ++s) {
        const S dunion = darea[s] - dinter[s];
        const S diou = (dinter[s] * uni - inter * dunion) / (uni * uni);
        dp[static_cast<std::size_t>(4 * r + s)] = -g * diou;
      }
    }
    t.accumulate(node.inputs[0], dp);
  };
  return pred.tape->record(OpKind::IouLoss, {pred.id}, BasicTensor<S>::scalar(loss), backward);
}

// ---- gradient check -------------------------------------------------------

template <typename S>
GradCheckResult finite_diff_check(const ScalarFn<S>& fn, const BasicTensor<S>& x, double eps) {
  if (!(eps >= 1e-5 && eps <= 1e-2)) throw std::invalid_argument("finite_diff_check: eps outside [1e-5, 1e-2]");
  auto eval = [&fn](const BasicTensor<S>& at) -> double {
    BasicTape<S> tape;
    auto leaf = tape.leaf(at, true);
    auto out = fn(tape, leaf);
    const double v = static_cast<double>(out.value()[0]);
    if (!std::isfinite(v)) throw NonFiniteError("finite_diff_check: function returned a non-finite value");
    return v;
  };

  BasicTape<S> tape;
  auto leaf = tape.leaf(x, true);
  auto out = fn(tape, leaf);
  if (!std::isfinite(static_cast<double>(out.value()[0]))) {
    throw NonFiniteError("finite_diff_check: function returned a non-finite value");
  }
  tape.backward(out);
  const BasicTensor<S> analytic = tape.grad(leaf);

  GradCheckResult result;
  BasicTensor<S> probe = x;
  for (std::size_t i = 0; i < x.numel(); ++i) {
    const S orig = probe[i];
    probe[i] = static_cast<S>(orig + eps);
    const double fp = eval(probe);
    probe[i] = static_cast<S>(orig - eps);
    const double fm = eval(probe);
    probe[i] = orig;
    // Use the step actually representable in S.
    const double h = static_cast<double>(static_cast<S>(orig + eps)) - static_cast<double>(static_cast<S>(orig - eps));
    const double numeric = (fp - fm) / h;
    const double a = static_cast<double>(analytic[i]);
    const double rel = std::abs(a - numeric) / std::max({std::abs(a), std::abs(numeric), 1e-8});
    if (i == 0 || rel > result.max_rel_error) {
      result.max_rel_error = rel;
      result.worst_index = i;
      result.analytic = a;
      result.numeric = numeric;
    }
  }
  return result;
}

// ---- explicit instantiations ----------------------------------------------

#define PROTODET_INSTANTIATE(S)                                                                        \
  template class BasicTape<S>;                                                                         \
  template BasicVar<S> conv3x3<S>(BasicVar<S>, BasicVar<S>, BasicVar<S>, int);                         \
  template BasicVar<S> conv1x1<S>(BasicVar<S>, BasicVar<S>, BasicVar<S>);                              \
  template BasicVar<S> relu<S>(BasicVar<S>);                                                           \
  template BasicVar<S> sigmoid<S>(BasicVar<S>);                                                        \
  template BasicVar<S> add<S>(BasicVar<S>, BasicVar<S>);                                               \
  template BasicVar<S> scale<S>(BasicVar<S>, S);                                                       \
  template BasicVar<S> matmul<S>(BasicVar<S>, BasicVar<S>);                                            \
  template BasicVar<S> upsample2x<S>(BasicVar<S>);                                                     \
  template BasicVar<S> resize_bilinear<S>(BasicVar<S>, int, int);                                      \
  template BasicVar<S> sum<S>(BasicVar<S>);                                                            \
  template BasicVar<S> mean<S>(BasicVar<S>);                                                           \
  template BasicVar<S> softmax<S>(BasicVar<S>);                                                        \
  template BasicVar<S> bce<S>(BasicVar<S>, const BasicTensor<S>&, S);                                  \
  template BasicVar<S> bce_weighted<S>(BasicVar<S>, const BasicTensor<S>&, const BasicTensor<S>&, S);  \
  template BasicVar<S> gather_cells<S>(BasicVar<S>, const std::vector<std::pair<int, int>>&);          \
  template BasicVar<S> reshape<S>(BasicVar<S>, Shape);                                                 \
  template BasicVar<S> detach<S>(BasicVar<S>);                                                         \
  template BasicVar<S> soft_cross_entropy<S>(BasicVar<S>, const BasicTensor<S>&);                      \
  template BasicVar<S> iou_loss<S>(BasicVar<S>, const BasicTensor<S>&);                                \
  template GradCheckResult finite_diff_check<S>(const ScalarFn<S>&, const BasicTensor<S>&, double);

PROTODET_INSTANTIATE(float)
PROTODET_INSTANTIATE(double)

#undef PROTODET_INSTANTIATE

}  // namespace protodet::ag
