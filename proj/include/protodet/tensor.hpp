#pragma once

#include <Eigen/Dense>

#include <cstddef>
#include <initializer_list>
#include <stdexcept>
#include <string>
#include <vector>

namespace protodet {

using Shape = std::vector<int>;

template <typename Scalar>
using RowMatrix = Eigen::Matrix<Scalar, Eigen::Dynamic, Eigen::Dynamic, Eigen::RowMajor>;
using RowMatrixXf = RowMatrix<float>;
using RowMatrixXd = RowMatrix<double>;

/// Thrown on shape or value contract violations anywhere in the library.
class ShapeError : public std::invalid_argument {
 public:
  using std::invalid_argument::invalid_argument;
};

class NonFiniteError : public std::domain_error {
 public:
  using std::domain_error::domain_error;
};

std::string shape_str(const Shape& shape);
std::size_t shape_numel(const Shape& shape);

/// Dense row-major tensor. numel(shape) == data.size() holds after
/// construction and after every reshape. Maps are stored channel-first
/// (C x H x W).
template <typename Scalar>
class BasicTensor {
 public:
  using Vector = Eigen::Matrix<Scalar, Eigen::Dynamic, 1>;

  BasicTensor() = default;
  explicit BasicTensor(Shape shape, Scalar fill = Scalar(0))
      : shape_(std::move(shape)),
        data_(Vector::Constant(static_cast<Eigen::Index>(shape_numel(shape_)), fill)) {}

  BasicTensor(Shape shape, Vector data) : shape_(std::move(shape)), data_(std::move(data)) {
    if (shape_numel(shape_) != static_cast<std::size_t>(data_.size())) {
      throw ShapeError("tensor shape " + shape_str(shape_) + " does not match data length " +
                       std::to_string(data_.size()));
    }
  }

  BasicTensor(Shape shape, std::initializer_list<Scalar> values) : shape_(std::move(shape)) {
    if (shape_numel(shape_) != values.size()) {
      throw ShapeError("tensor shape " + shape_str(shape_) + " does not match " + std::to_string(values.size()) +
                       " values");
    }
    data_.resize(static_cast<Eigen::Index>(values.size()));
    Eigen::Index i = 0;
    for (Scalar v : values) data_[i++] = v;
  }

  static BasicTensor scalar(Scalar v) { return BasicTensor(Shape{1}, v); }

  /// Converts element type; used to lift float parameters into a double
  /// tape for gradient checks.
  template <typename Other>
  BasicTensor<Other> cast() const {
    return BasicTensor<Other>(shape_, data_.template cast<Other>());
  }

  const Shape& shape() const { return shape_; }
  int dim(std::size_t axis) const { return shape_.at(axis); }
  std::size_t rank() const { return shape_.size(); }
  std::size_t numel() const { return static_cast<std::size_t>(data_.size()); }

  Vector& data() { return data_; }
  const Vector& data() const { return data_; }
  Scalar* ptr() { return data_.data(); }
  const Scalar* ptr() const { return data_.data(); }

  Scalar& operator[](std::size_t i) { return data_[static_cast<Eigen::Index>(i)]; }
  Scalar operator[](std::size_t i) const { return data_[static_cast<Eigen::Index>(i)]; }

  Scalar& at(int c, int i, int j) { return data_[index3(c, i, j)]; }
  Scalar at(int c, int i, int j) const { return data_[index3(c, i, j)]; }

  /// Row-major matrix view: rows x (numel / rows).
  Eigen::Map<RowMatrix<Scalar>> matrix(int rows) {
    check_rows(rows);
    return {data_.data(), rows, static_cast<Eigen::Index>(numel() / static_cast<std::size_t>(rows))};
  }
  Eigen::Map<const RowMatrix<Scalar>> matrix(int rows) const {
    check_rows(rows);
    return {data_.data(), rows, static_cast<Eigen::Index>(numel() / static_cast<std::size_t>(rows))};
  }

  BasicTensor reshaped(Shape shape) const {
    if (shape_numel(shape) != numel()) {
      throw ShapeError("cannot reshape " + shape_str(shape_) + " to " + shape_str(shape));
    }
    return BasicTensor(std::move(shape), data_);
  }

  bool all_finite() const { return data_.allFinite(); }
  bool same_shape(const BasicTensor& other) const { return shape_ == other.shape_; }

 private:
  Eigen::Index index3(int c, int i, int j) const {
    return (static_cast<Eigen::Index>(c) * shape_[1] + i) * shape_[2] + j;
  }
  void check_rows(int rows) const {
    if (rows <= 0 || numel() % static_cast<std::size_t>(rows) != 0) {
      throw ShapeError("cannot view " + shape_str(shape_) + " with " + std::to_string(rows) + " rows");
    }
  }

  Shape shape_;
  Vector data_;
};

using Tensor = BasicTensor<float>;
using TensorD = BasicTensor<double>;

template <typename Scalar>
void require_same_shape(const BasicTensor<Scalar>& a, const BasicTensor<Scalar>& b, const char* what) {
  if (!a.same_shape(b)) {
    throw ShapeError(std::string(what) + ": shape mismatch " + shape_str(a.shape()) + " vs " +
                     shape_str(b.shape()));
  }
}

template <typename Scalar>
void require_finite(const BasicTensor<Scalar>& t, const char* what) {
  if (!t.all_finite()) throw NonFiniteError(std::string(what) + ": non-finite value in " + shape_str(t.shape()));
}

}  // namespace protodet
