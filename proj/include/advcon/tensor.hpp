#pragma once

#include <Eigen/Dense>

#include <span>
#include <stdexcept>
#include <string>
#include <vector>

namespace advcon {

using Index = Eigen::Index;
using Shape = std::vector<Index>;

using Matrix = Eigen::MatrixXd;
using Vector = Eigen::VectorXd;
using RowMatrix = Eigen::Matrix<double, Eigen::Dynamic, Eigen::Dynamic, Eigen::RowMajor>;

class Error : public std::runtime_error {
 public:
  using std::runtime_error::runtime_error;
};

// Tensor rank or extents disagree with what an operation requires.
class ShapeError : public Error {
 public:
  using Error::Error;
};

// Invalid user-supplied configuration or arguments.
class ConfigError : public Error {
 public:
  using Error::Error;
};

// NaN/Inf reached a place where finite values are required.
class NumericError : public Error {
 public:
  using Error::Error;
};

// A contract the code relies on was observed to be broken.
class InvariantError : public Error {
 public:
  using Error::Error;
};

class IoError : public Error {
 public:
  using Error::Error;
};

Index shape_size(const Shape& shape);
std::string shape_string(const Shape& shape);

/// Dense row-major n-d array. Element (i0, i1, ..., in) lives at the usual
/// C-order offset; batches are always the leading dimension.
template <typename Scalar>
class BasicTensor {
 public:
  using Array = Eigen::Array<Scalar, Eigen::Dynamic, 1>;

  BasicTensor() = default;

  explicit BasicTensor(Shape shape) : shape_(std::move(shape)), data_(Array::Zero(shape_size(shape_))) {}

  BasicTensor(Shape shape, Array data) : shape_(std::move(shape)), data_(std::move(data)) {
    if (shape_size(shape_) != data_.size()) {
      throw ShapeError("tensor payload of " + std::to_string(data_.size()) + " values does not fit shape " +
                       shape_string(shape_));
    }
  }

  static BasicTensor constant(Shape shape, Scalar value) {
    BasicTensor t(std::move(shape));
    t.data_.setConstant(value);
    return t;
  }

  const Shape& shape() const { return shape_; }
  Index rank() const { return static_cast<Index>(shape_.size()); }
  Index dim(Index axis) const { return shape_.at(static_cast<std::size_t>(axis)); }
  Index size() const { return data_.size(); }
  bool empty() const { return data_.size() == 0; }

  Array& array() { return data_; }
  const Array& array() const { return data_; }
  Scalar* data() { return data_.data(); }
  const Scalar* data() const { return data_.data(); }
  std::span<const Scalar> values() const { return {data_.data(), static_cast<std::size_t>(data_.size())}; }

  Scalar& operator[](Index i) { return data_[i]; }
  Scalar operator[](Index i) const { return data_[i]; }

  bool all_finite() const { return data_.allFinite(); }

  BasicTensor reshaped(Shape shape) const { return BasicTensor(std::move(shape), data_); }

  /// Number of elements in one batch item.
  Index item_size() const { return shape_.empty() ? 0 : data_.size() / shape_[0]; }

  /// Batch item `i` as a tensor with leading dimension 1.
  BasicTensor item(Index i) const {
    Shape s = shape_;
    s[0] = 1;
    const Index n = item_size();
    return BasicTensor(std::move(s), data_.segment(i * n, n));
  }

  void set_item(Index i, const BasicTensor& value) {
    const Index n = item_size();
    if (value.size() != n) throw ShapeError("set_item: item size mismatch");
    data_.segment(i * n, n) = value.array();
  }

  friend bool operator==(const BasicTensor& a, const BasicTensor& b) {
    return a.shape_ == b.shape_ && (a.data_ == b.data_).all();
  }

 private:
  Shape shape_;
  Array data_;
};

using Tensor = BasicTensor<double>;

/// Concatenate batches along the leading dimension.
Tensor concat_batch(std::span<const Tensor> parts);

/// Largest absolute elementwise difference; shapes must match.
double max_abs_diff(const Tensor& a, const Tensor& b);

void require_finite(const Tensor& t, const std::string& what);

}  // namespace advcon
