#pragma once

#include "advcon/tensor.hpp"

#include <algorithm>
#include <cmath>
#include <limits>
#include <numeric>
#include <vector>

namespace advcon {

template <typename Scalar>
struct SymmetricEigen {
  Eigen::Matrix<Scalar, Eigen::Dynamic, 1> values;                // descending
  Eigen::Matrix<Scalar, Eigen::Dynamic, Eigen::Dynamic> vectors;  // column i pairs with values(i)
  int sweeps = 0;
};

/// Cyclic Jacobi eigen-decomposition of a symmetric matrix. Sweeps rotate
/// every off-diagonal pair in a fixed order until the off-diagonal mass falls
/// below `tol` relative to the Frobenius norm, so results are deterministic.
template <typename Derived>
SymmetricEigen<typename Derived::Scalar> jacobi_eigen(const Eigen::MatrixBase<Derived>& input,
                                                      typename Derived::Scalar tol = 1e-15, int max_sweeps = 100) {
  using Scalar = typename Derived::Scalar;
  using Mat = Eigen::Matrix<Scalar, Eigen::Dynamic, Eigen::Dynamic>;
  if (input.rows() != input.cols()) throw ShapeError("jacobi_eigen: matrix must be square");
  Mat a = input;
  const Index n = a.rows();
  Mat v = Mat::Identity(n, n);
  const Scalar scale = std::max<Scalar>(a.norm(), std::numeric_limits<Scalar>::min());

  int sweep = 0;
  for (; sweep < max_sweeps; ++sweep) {
    Scalar off = 0;
    for (Index p = 0; p < n; ++p) {
      for (Index q = p + 1; q < n; ++q) off += a(p, q) * a(p, q);
    }
    if (std::sqrt(off) <= tol * scale) break;
    for (Index p = 0; p < n; ++p) {
      for (Index q = p + 1; q < n; ++q) {
        const Scalar apq = a(p, q);
        if (apq == Scalar(0)) continue;
        const Scalar theta = (a(q, q) - a(p, p)) / (Scalar(2) * apq);
        const Scalar t = (theta >= 0 ? Scalar(1) : Scalar(-1)) / (std::abs(theta) + std::sqrt(theta * theta + Scalar(1)));
        const Scalar c = Scalar(1) / std::sqrt(t * t + Scalar(1));
        const Scalar s = t * c;
        for (Index k = 0; k < n; ++k) {
          const Scalar akp = a(k, p), akq = a(k, q);
          a(k, p) = c * akp - s * akq;
          a(k, q) = s * akp + c * akq;
        }
        for (Index k = 0; k < n; ++k) {
          const Scalar apk = a(p, k), aqk = a(q, k);
          a(p, k) = c * apk - s * aqk;
          a(q, k) = s * apk + c * aqk;
        }
        for (Index k = 0; k < n; ++k) {
          const Scalar vkp = v(k, p), vkq = v(k, q);
          v(k, p) = c * vkp - s * vkq;
          v(k, q) = s * vkp + c * vkq;
        }
      }
    }
  }

  std::vector<Index> order(static_cast<std::size_t>(n));
  std::iota(order.begin(), order.end(), Index{0});
  std::stable_sort(order.begin(), order.end(), [&](Index i, Index j) { return a(i, i) > a(j, j); });
  SymmetricEigen<Scalar> out;
  out.values.resize(n);
  out.vectors.resize(n, n);
  out.sweeps = sweep;
  for (Index i = 0; i < n; ++i) {
    out.values(i) = a(order[static_cast<std::size_t>(i)], order[static_cast<std::size_t>(i)]);
    out.vectors.col(i) = v.col(order[static_cast<std::size_t>(i)]);
  }
  return out;
}

/// Sample covariance (divisor rows - 1) of the rows of `data` and their mean.
template <typename Derived>
Eigen::Matrix<typename Derived::Scalar, Eigen::Dynamic, Eigen::Dynamic> covariance(
    const Eigen::MatrixBase<Derived>& data, Eigen::Matrix<typename Derived::Scalar, Eigen::Dynamic, 1>* mean = nullptr) {
  using Scalar = typename Derived::Scalar;
  if (data.rows() < 2) throw ShapeError("covariance: need at least two rows");
  const Eigen::Matrix<Scalar, 1, Eigen::Dynamic> mu = data.colwise().mean();
  const Eigen::Matrix<Scalar, Eigen::Dynamic, Eigen::Dynamic> centered = data.rowwise() - mu;
  if (mean) *mean = mu.transpose();
  return (centered.transpose() * centered) / static_cast<Scalar>(data.rows() - 1);
}

/// Optimal assignment maximising sum_i scores(i, perm[i]) (Hungarian method,
/// O(n^3)). Returns perm with perm[row] = assigned column.
std::vector<int> max_weight_assignment(const Matrix& scores);

}  // namespace advcon
