#include "advcon/tensor.hpp"

#include <sstream>

namespace advcon {

Index shape_size(const Shape& shape) {
  Index n = 1;
  for (Index d : shape) {
    if (d < 0) throw ShapeError("negative dimension in shape " + shape_string(shape));
    n *= d;
  }
  return shape.empty() ? 0 : n;
}

std::string shape_string(const Shape& shape) {
  std::ostringstream os;
  os << '(';
  for (std::size_t i = 0; i < shape.size(); ++i) {
    if (i) os << ", ";
    os << shape[i];
  }
  os << ')';
  return os.str();
}

Tensor concat_batch(std::span<const Tensor> parts) {
  if (parts.empty()) throw ShapeError("concat_batch: nothing to concatenate");
  Shape shape = parts.front().shape();
  Index batch = 0;
  for (const auto& p : parts) {
    if (p.rank() != static_cast<Index>(shape.size()) ||
        !std::equal(p.shape().begin() + 1, p.shape().end(), shape.begin() + 1)) {
      throw ShapeError("concat_batch: incompatible shapes " + shape_string(shape) + " and " +
                       shape_string(p.shape()));
    }
    batch += p.dim(0);
  }
  shape[0] = batch;
  Tensor out(shape);
  Index offset = 0;
  for (const auto& p : parts) {
    out.array().segment(offset, p.size()) = p.array();
    offset += p.size();
  }
  return out;
}

double max_abs_diff(const Tensor& a, const Tensor& b) {
  if (a.shape() != b.shape()) {
    throw ShapeError("max_abs_diff: " + shape_string(a.shape()) + " vs " + shape_string(b.shape()));
  }
  if (a.empty()) return 0.0;
  return (a.array() - b.array()).abs().maxCoeff();
}

void require_finite(const Tensor& t, const std::string& what) {
  if (!t.all_finite()) throw NumericError(what + " contains non-finite values");
}

}  // namespace advcon
