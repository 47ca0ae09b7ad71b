#pragma once

// Independent reference implementations used as test oracles. They share no
// code with the library beyond the Tensor container.

#include "advcon/model.hpp"
#include "advcon/random.hpp"

#include <algorithm>
#include <cmath>
#include <numeric>
#include <vector>

namespace oracle {

using advcon::Index;
using advcon::Matrix;
using advcon::Tensor;

inline Tensor random_tensor(advcon::Shape shape, advcon::Rng& rng, double lo = -1.0, double hi = 1.0) {
  Tensor t(std::move(shape));
  for (Index i = 0; i < t.size(); ++i) t[i] = rng.uniform(lo, hi);
  return t;
}

inline Matrix random_matrix(Index rows, Index cols, advcon::Rng& rng, double lo = -1.0, double hi = 1.0) {
  Matrix m(rows, cols);
  for (Index j = 0; j < cols; ++j) {
    for (Index i = 0; i < rows; ++i) m(i, j) = rng.uniform(lo, hi);
  }
  return m;
}

// Direct six-loop convolution with zero padding.
inline Tensor naive_conv2d(const Tensor& x, const Tensor& w, const Tensor& b, Index stride, Index pad) {
  const Index n = x.dim(0), c = x.dim(1), h = x.dim(2), wd = x.dim(3);
  const Index o = w.dim(0), k = w.dim(2);
  const Index oh = (h + 2 * pad - k) / stride + 1, ow = (wd + 2 * pad - k) / stride + 1;
  Tensor y({n, o, oh, ow});
  auto at = [](const Tensor& t, Index a, Index bb, Index cc, Index d) {
    return t[((a * t.dim(1) + bb) * t.dim(2) + cc) * t.dim(3) + d];
  };
  for (Index s = 0; s < n; ++s)
    for (Index oc = 0; oc < o; ++oc)
      for (Index i = 0; i < oh; ++i)
        for (Index j = 0; j < ow; ++j) {
          double acc = b[oc];
          for (Index ic = 0; ic < c; ++ic)
            for (Index u = 0; u < k; ++u)
              for (Index v = 0; v < k; ++v) {
                const Index r = i * stride + u - pad, q = j * stride + v - pad;
                if (r < 0 || q < 0 || r >= h || q >= wd) continue;
                acc += at(x, s, ic, r, q) * at(w, oc, ic, u, v);
              }
          y[((s * o + oc) * oh + i) * ow + j] = acc;
        }
  return y;
}

// Number of window placements found by walking the padded input.
inline Index count_windows(Index in, Index kernel, Index stride, Index pad) {
  Index count = 0;
  for (Index start = 0; start + kernel <= in + 2 * pad; start += stride) ++count;
  return count;
}

// Mean cross-entropy computed straight from the logits, without any shared kernel.
inline double mean_cross_entropy(const Tensor& logits, const std::vector<int>& labels) {
  const Index n = logits.dim(0), k = logits.dim(1);
  double total = 0.0;
  for (Index i = 0; i < n; ++i) {
    double mx = -1e300;
    for (Index j = 0; j < k; ++j) mx = std::max(mx, logits[i * k + j]);
    double s = 0.0;
    for (Index j = 0; j < k; ++j) s += std::exp(logits[i * k + j] - mx);
    total += std::log(s) + mx - logits[i * k + labels[static_cast<std::size_t>(i)]];
  }
  return total / static_cast<double>(n);
}

// Relative error of two gradient vectors measured in the Euclidean norm.
inline double relative_error(const Eigen::ArrayXd& a, const Eigen::ArrayXd& b) {
  const double scale = std::max({a.matrix().norm(), b.matrix().norm(), 1e-12});
  return (a - b).matrix().norm() / scale;
}

// Central finite differences of `f` around the values of `t`.
template <typename F>
Eigen::ArrayXd central_differences(Tensor& t, F&& f, double h = 1e-5) {
  Eigen::ArrayXd g(t.size());
  for (Index i = 0; i < t.size(); ++i) {
    const double saved = t[i];
    t[i] = saved + h;
    const double up = f();
    t[i] = saved - h;
    const double down = f();
    t[i] = saved;
    g[i] = (up - down) / (2.0 * h);
  }
  return g;
}

struct GradCheck {
  double input_error = 0.0;
  double param_error = 0.0;  // worst over all weight and bias tensors
};

// Autodiff input and parameter gradients of the mean cross-entropy against
// central differences of the forward pass.
inline GradCheck check_gradients(advcon::Model& model, Tensor x, const std::vector<int>& labels) {
  using namespace advcon;
  Tape tape;
  const Var in = tape.variable(x);
  std::vector<Var> params;
  const Var logits = record_layers(tape, model, in, 0, model.layers().size(), true, &params);
  const Var loss = ops::cross_entropy(tape, logits, labels);
  tape.backward(loss);

  const auto objective = [&] { return mean_cross_entropy(forward(model, x), labels); };
  GradCheck out;
  out.input_error = relative_error(tape.grad(in).array(), central_differences(x, objective));
  std::size_t p = 0;
  for (auto& layer : model.layers()) {
    if (!layer.has_params()) continue;
    out.param_error = std::max(out.param_error,
                               relative_error(tape.grad(params[p++]).array(), central_differences(layer.weight, objective)));
    out.param_error = std::max(out.param_error,
                               relative_error(tape.grad(params[p++]).array(), central_differences(layer.bias, objective)));
  }
  return out;
}

// Small random network exercising every layer kind; `variant` picks the head.
inline advcon::Model random_model(advcon::Rng& rng, int variant, Index* channels_out = nullptr) {
  using advcon::LayerSpec;
  const Index c = 1 + static_cast<Index>(rng.below(3));
  const Index h = 6 + static_cast<Index>(rng.below(4));
  const Index w = 6 + static_cast<Index>(rng.below(4));
  const Index k = 1 + 2 * static_cast<Index>(rng.below(2));
  const Index stride = 1 + static_cast<Index>(rng.below(2));
  const Index pad = static_cast<Index>(rng.below(2));
  const Index units = 2 + static_cast<Index>(rng.below(3));
  const Index classes = 2 + static_cast<Index>(rng.below(3));
  std::vector<LayerSpec> specs{LayerSpec::conv2d("conv", units, k, stride, pad), LayerSpec::relu("relu")};
  if (variant % 2 == 0) {
    specs.push_back(LayerSpec::maxpool2d("pool", 2, 2));
    specs.push_back(LayerSpec::flatten("flat"));
  } else {
    specs.push_back(LayerSpec::global_avg_pool("gap"));
  }
  specs.push_back(LayerSpec::dense("fc", classes));
  if (channels_out) *channels_out = c;
  advcon::Model model({c, h, w}, specs, rng.next());
  // nonzero biases keep padded border pixels off the ReLU kink
  for (auto& layer : model.layers()) {
    if (layer.has_params()) layer.bias = random_tensor(layer.bias.shape(), rng, -0.5, 0.5);
  }
  return model;
}

// Exhaustive search over all column permutations.
inline double brute_force_best_trace(const Matrix& s) {
  std::vector<int> perm(static_cast<std::size_t>(s.rows()));
  std::iota(perm.begin(), perm.end(), 0);
  double best = -1e300;
  do {
    double t = 0.0;
    for (std::size_t i = 0; i < perm.size(); ++i) t += s(static_cast<Index>(i), perm[i]);
    best = std::max(best, t);
  } while (std::next_permutation(perm.begin(), perm.end()));
  return best;
}

}  // namespace oracle
