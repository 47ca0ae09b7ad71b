#include "advcon/autodiff.hpp"

#include <algorithm>
#include <cmath>
#include <limits>

namespace advcon {

Index conv_output_size(Index in, Index kernel, Index stride, Index pad) {
  if (stride <= 0) throw ConfigError("stride must be positive");
  const Index span = in + 2 * pad - kernel;
  if (span < 0) return 0;
  return span / stride + 1;
}

namespace kernels {
namespace {

void require_rank(const Tensor& t, Index rank, const char* what) {
  if (t.rank() != rank) {
    throw ShapeError(std::string(what) + ": expected rank " + std::to_string(rank) + ", got shape " +
                     shape_string(t.shape()));
  }
}

// Column layout: one row per output position, one column per (c, ki, kj).
void im2col(const double* x, Index channels, Index height, Index width, Index kernel, Conv2dGeometry geo,
            Index out_h, Index out_w, Matrix& col) {
  col.resize(out_h * out_w, channels * kernel * kernel);
  for (Index c = 0; c < channels; ++c) {
    for (Index ki = 0; ki < kernel; ++ki) {
      for (Index kj = 0; kj < kernel; ++kj) {
        double* dst = col.col((c * kernel + ki) * kernel + kj).data();
        for (Index oi = 0; oi < out_h; ++oi) {
          const Index ii = oi * geo.stride - geo.pad + ki;
          for (Index oj = 0; oj < out_w; ++oj) {
            const Index jj = oj * geo.stride - geo.pad + kj;
            const bool inside = ii >= 0 && ii < height && jj >= 0 && jj < width;
            dst[oi * out_w + oj] = inside ? x[(c * height + ii) * width + jj] : 0.0;
          }
        }
      }
    }
  }
}

void col2im(const Matrix& col, Index channels, Index height, Index width, Index kernel, Conv2dGeometry geo,
            Index out_h, Index out_w, double* dx) {
  for (Index c = 0; c < channels; ++c) {
    for (Index ki = 0; ki < kernel; ++ki) {
      for (Index kj = 0; kj < kernel; ++kj) {
        const double* src = col.col((c * kernel + ki) * kernel + kj).data();
        for (Index oi = 0; oi < out_h; ++oi) {
          const Index ii = oi * geo.stride - geo.pad + ki;
          if (ii < 0 || ii >= height) continue;
          for (Index oj = 0; oj < out_w; ++oj) {
            const Index jj = oj * geo.stride - geo.pad + kj;
            if (jj < 0 || jj >= width) continue;
            dx[(c * height + ii) * width + jj] += src[oi * out_w + oj];
          }
        }
      }
    }
  }
}

}  // namespace

Tensor conv2d(const Tensor& x, const Tensor& weight, const Tensor& bias, Conv2dGeometry geo) {
  require_rank(x, 4, "conv2d input");
  require_rank(weight, 4, "conv2d weight");
  const Index n = x.dim(0), c = x.dim(1), h = x.dim(2), w = x.dim(3);
  const Index out_c = weight.dim(0), k = weight.dim(2);
  if (weight.dim(1) != c || weight.dim(3) != k) {
    throw ShapeError("conv2d: weight " + shape_string(weight.shape()) + " incompatible with input " +
                     shape_string(x.shape()));
  }
  const Index oh = conv_output_size(h, k, geo.stride, geo.pad);
  const Index ow = conv_output_size(w, k, geo.stride, geo.pad);
  if (oh <= 0 || ow <= 0) throw ShapeError("conv2d: empty output for input " + shape_string(x.shape()));

  Eigen::Map<const RowMatrix> wmat(weight.data(), out_c, c * k * k);
  Tensor y({n, out_c, oh, ow});
  Matrix col;
  for (Index s = 0; s < n; ++s) {
    im2col(x.data() + s * c * h * w, c, h, w, k, geo, oh, ow, col);
    Eigen::Map<Matrix> out(y.data() + s * out_c * oh * ow, oh * ow, out_c);
    out.noalias() = col * wmat.transpose();
    out.rowwise() += bias.array().matrix().transpose();
  }
  return y;
}

Conv2dGrads conv2d_backward(const Tensor& x, const Tensor& weight, const Tensor& dy, Conv2dGeometry geo,
                            bool want_input, bool want_params) {
  const Index n = x.dim(0), c = x.dim(1), h = x.dim(2), w = x.dim(3);
  const Index out_c = weight.dim(0), k = weight.dim(2);
  const Index oh = dy.dim(2), ow = dy.dim(3);
  Eigen::Map<const RowMatrix> wmat(weight.data(), out_c, c * k * k);

  Conv2dGrads g;
  if (want_input) g.input = Tensor(x.shape());
  RowMatrix dw;
  Eigen::VectorXd db;
  if (want_params) {
    dw = RowMatrix::Zero(out_c, c * k * k);
    db = Eigen::VectorXd::Zero(out_c);
  }
  Matrix col, dcol;
  for (Index s = 0; s < n; ++s) {
    Eigen::Map<const Matrix> dout(dy.data() + s * out_c * oh * ow, oh * ow, out_c);
    if (want_params) {
      im2col(x.data() + s * c * h * w, c, h, w, k, geo, oh, ow, col);
      dw.noalias() += dout.transpose() * col;
      db += dout.colwise().sum().transpose();
    }
    if (want_input) {
      dcol.noalias() = dout * wmat;
      col2im(dcol, c, h, w, k, geo, oh, ow, g.input->data() + s * c * h * w);
    }
  }
  if (want_params) {
    g.weight = Tensor(weight.shape(), Eigen::Map<const Eigen::ArrayXd>(dw.data(), dw.size()));
    g.bias = Tensor({out_c}, db.array());
  }
  return g;
}

Tensor relu(const Tensor& x) { return Tensor(x.shape(), x.array().max(0.0)); }

Tensor relu_backward(const Tensor& x, const Tensor& dy) {
  return Tensor(x.shape(), (x.array() > 0.0).select(dy.array(), 0.0));
}

Tensor maxpool2d(const Tensor& x, Pool2dGeometry geo) {
  require_rank(x, 4, "maxpool2d input");
  const Index n = x.dim(0), c = x.dim(1), h = x.dim(2), w = x.dim(3);
  const Index oh = conv_output_size(h, geo.size, geo.stride, 0);
  const Index ow = conv_output_size(w, geo.size, geo.stride, 0);
  if (oh <= 0 || ow <= 0) throw ShapeError("maxpool2d: window larger than input " + shape_string(x.shape()));
  Tensor y({n, c, oh, ow});
  for (Index p = 0; p < n * c; ++p) {
    const double* src = x.data() + p * h * w;
    double* dst = y.data() + p * oh * ow;
    for (Index oi = 0; oi < oh; ++oi) {
      for (Index oj = 0; oj < ow; ++oj) {
        double best = -std::numeric_limits<double>::infinity();
        for (Index a = 0; a < geo.size; ++a) {
          for (Index b = 0; b < geo.size; ++b) {
            best = std::max(best, src[(oi * geo.stride + a) * w + oj * geo.stride + b]);
          }
        }
        dst[oi * ow + oj] = best;
      }
    }
  }
  return y;
}

Tensor maxpool2d_backward(const Tensor& x, const Tensor& dy, Pool2dGeometry geo) {
  const Index n = x.dim(0), c = x.dim(1), h = x.dim(2), w = x.dim(3);
  const Index oh = dy.dim(2), ow = dy.dim(3);
  Tensor dx(x.shape());
  for (Index p = 0; p < n * c; ++p) {
    const double* src = x.data() + p * h * w;
    const double* g = dy.data() + p * oh * ow;
    double* dst = dx.data() + p * h * w;
    for (Index oi = 0; oi < oh; ++oi) {
      for (Index oj = 0; oj < ow; ++oj) {
        // first maximum wins on ties
        Index arg = (oi * geo.stride) * w + oj * geo.stride;
        for (Index a = 0; a < geo.size; ++a) {
          for (Index b = 0; b < geo.size; ++b) {
            const Index idx = (oi * geo.stride + a) * w + oj * geo.stride + b;
            if (src[idx] > src[arg]) arg = idx;
          }
        }
        dst[arg] += g[oi * ow + oj];
      }
    }
  }
  return dx;
}

Tensor global_avg_pool(const Tensor& x) {
  require_rank(x, 4, "global_avg_pool input");
  const Index n = x.dim(0), c = x.dim(1), hw = x.dim(2) * x.dim(3);
  Eigen::Map<const Matrix> planes(x.data(), hw, n * c);
  Tensor y({n, c});
  Eigen::Map<Eigen::RowVectorXd>(y.data(), n * c) = planes.colwise().mean();
  return y;
}

Tensor global_avg_pool_backward(const Shape& input_shape, const Tensor& dy) {
  const Index n = input_shape[0], c = input_shape[1], hw = input_shape[2] * input_shape[3];
  Tensor dx(input_shape);
  Eigen::Map<Matrix> planes(dx.data(), hw, n * c);
  Eigen::Map<const Eigen::RowVectorXd> g(dy.data(), n * c);
  planes.rowwise() = g / static_cast<double>(hw);
  return dx;
}

Tensor dense(const Tensor& x, const Tensor& weight, const Tensor& bias) {
  require_rank(x, 2, "dense input");
  const Index n = x.dim(0), f = x.dim(1), o = weight.dim(0);
  if (weight.dim(1) != f) {
    throw ShapeError("dense: weight " + shape_string(weight.shape()) + " incompatible with input " +
                     shape_string(x.shape()));
  }
  Eigen::Map<const RowMatrix> xm(x.data(), n, f);
  Eigen::Map<const RowMatrix> wm(weight.data(), o, f);
  Tensor y({n, o});
  Eigen::Map<RowMatrix> ym(y.data(), n, o);
  ym.noalias() = xm * wm.transpose();
  ym.rowwise() += bias.array().matrix().transpose();
  return y;
}

Matrix softmax(const Tensor& logits) {
  require_rank(logits, 2, "softmax input");
  Eigen::Map<const RowMatrix> z(logits.data(), logits.dim(0), logits.dim(1));
  Matrix p(z.rows(), z.cols());
  for (Index r = 0; r < z.rows(); ++r) {
    const double m = z.row(r).maxCoeff();
    Eigen::RowVectorXd e = (z.row(r).array() - m).exp().matrix();
    p.row(r) = e / e.sum();
  }
  return p;
}

double cross_entropy(const Tensor& logits, std::span<const int> labels) {
  require_rank(logits, 2, "cross_entropy logits");
  Eigen::Map<const RowMatrix> z(logits.data(), logits.dim(0), logits.dim(1));
  if (static_cast<Index>(labels.size()) != z.rows()) throw ShapeError("cross_entropy: label count mismatch");
  double total = 0.0;
  for (Index r = 0; r < z.rows(); ++r) {
    const int y = labels[static_cast<std::size_t>(r)];
    if (y < 0 || y >= z.cols()) throw ConfigError("cross_entropy: label out of range");
    const double m = z.row(r).maxCoeff();
    const double lse = m + std::log((z.row(r).array() - m).exp().sum());
    total += lse - z(r, y);
  }
  return total / static_cast<double>(z.rows());
}

}  // namespace kernels

Var Tape::constant(Tensor value) { return record(std::move(value), false, nullptr); }

Var Tape::variable(Tensor value) { return record(std::move(value), true, nullptr); }

Var Tape::record(Tensor value, bool requires_grad, BackwardFn fn) {
  nodes_.push_back(Node{std::move(value), std::nullopt, requires_grad, std::move(fn)});
  return Var{static_cast<int>(nodes_.size()) - 1};
}

const Tape::Node& Tape::node(Var v) const {
  if (v.id < 0 || v.id >= static_cast<int>(nodes_.size())) throw InvariantError("tape: invalid variable");
  return nodes_[static_cast<std::size_t>(v.id)];
}

const Tensor& Tape::value(Var v) const { return node(v).value; }

bool Tape::requires_grad(Var v) const { return node(v).requires_grad; }

Tensor Tape::grad(Var v) const {
  const Node& n = node(v);
  return n.grad ? *n.grad : Tensor(n.value.shape());
}

void Tape::accumulate(Var v, const Tensor& g) {
  Node& n = nodes_.at(static_cast<std::size_t>(v.id));
  if (!n.requires_grad) return;
  if (g.size() != n.value.size()) {
    throw ShapeError("tape: gradient " + shape_string(g.shape()) + " for value " + shape_string(n.value.shape()));
  }
  if (n.grad) {
    n.grad->array() += g.array();
  } else {
    n.grad = Tensor(n.value.shape(), g.array());
  }
}

void Tape::backward(Var out) {
  if (value(out).size() != 1) throw ShapeError("backward: output is not a scalar");
  backward(out, Tensor::constant(value(out).shape(), 1.0));
}

void Tape::backward(Var out, const Tensor& seed) {
  for (auto& n : nodes_) n.grad.reset();
  accumulate(out, seed);
  for (int i = out.id; i >= 0; --i) {
    Node& n = nodes_[static_cast<std::size_t>(i)];
    if (!n.backward || !n.grad) continue;
    // copy: the callback may accumulate into nodes_ entries
    const Tensor g = *n.grad;
    n.backward(*this, g);
  }
}

namespace ops {

Var conv2d(Tape& tape, Var x, Var weight, Var bias, Conv2dGeometry geo) {
  Tensor y = kernels::conv2d(tape.value(x), tape.value(weight), tape.value(bias), geo);
  const bool want_input = tape.requires_grad(x);
  const bool want_params = tape.requires_grad(weight) || tape.requires_grad(bias);
  return tape.record(std::move(y), want_input || want_params, [=](Tape& t, const Tensor& dy) {
    auto g = kernels::conv2d_backward(t.value(x), t.value(weight), dy, geo, want_input, want_params);
    if (g.input) t.accumulate(x, *g.input);
    if (g.weight) t.accumulate(weight, *g.weight);
    if (g.bias) t.accumulate(bias, *g.bias);
  });
}

Var relu(Tape& tape, Var x) {
  return tape.record(kernels::relu(tape.value(x)), tape.requires_grad(x),
                     [=](Tape& t, const Tensor& dy) { t.accumulate(x, kernels::relu_backward(t.value(x), dy)); });
}

Var maxpool2d(Tape& tape, Var x, Pool2dGeometry geo) {
  return tape.record(kernels::maxpool2d(tape.value(x), geo), tape.requires_grad(x), [=](Tape& t, const Tensor& dy) {
    t.accumulate(x, kernels::maxpool2d_backward(t.value(x), dy, geo));
  });
}

Var global_avg_pool(Tape& tape, Var x) {
  return tape.record(kernels::global_avg_pool(tape.value(x)), tape.requires_grad(x),
                     [=](Tape& t, const Tensor& dy) {
                       t.accumulate(x, kernels::global_avg_pool_backward(t.value(x).shape(), dy));
                     });
}

Var flatten(Tape& tape, Var x) {
  const Tensor& v = tape.value(x);
  const Index n = v.dim(0);
  return tape.record(v.reshaped({n, v.size() / std::max<Index>(n, 1)}), tape.requires_grad(x),
                     [=](Tape& t, const Tensor& dy) { t.accumulate(x, dy); });
}

Var dense(Tape& tape, Var x, Var weight, Var bias) {
  Tensor y = kernels::dense(tape.value(x), tape.value(weight), tape.value(bias));
  const bool any = tape.requires_grad(x) || tape.requires_grad(weight) || tape.requires_grad(bias);
  return tape.record(std::move(y), any, [=](Tape& t, const Tensor& dy) {
    const Tensor& xv = t.value(x);
    const Tensor& wv = t.value(weight);
    const Index n = xv.dim(0), f = xv.dim(1), o = wv.dim(0);
    Eigen::Map<const RowMatrix> xm(xv.data(), n, f);
    Eigen::Map<const RowMatrix> wm(wv.data(), o, f);
    Eigen::Map<const RowMatrix> gm(dy.data(), n, o);
    if (t.requires_grad(x)) {
      RowMatrix dx = gm * wm;
      t.accumulate(x, Tensor(xv.shape(), Eigen::Map<const Eigen::ArrayXd>(dx.data(), dx.size())));
    }
    if (t.requires_grad(weight)) {
      RowMatrix dw = gm.transpose() * xm;
      t.accumulate(weight, Tensor(wv.shape(), Eigen::Map<const Eigen::ArrayXd>(dw.data(), dw.size())));
    }
    if (t.requires_grad(bias)) {
      Eigen::VectorXd db = gm.colwise().sum().transpose();
      t.accumulate(bias, Tensor({o}, db.array()));
    }
  });
}

Var add(Tape& tape, Var a, Var b) {
  const Tensor& av = tape.value(a);
  const Tensor& bv = tape.value(b);
  if (av.shape() != bv.shape()) throw ShapeError("add: shape mismatch");
  return tape.record(Tensor(av.shape(), av.array() + bv.array()), tape.requires_grad(a) || tape.requires_grad(b),
                     [=](Tape& t, const Tensor& dy) {
                       t.accumulate(a, dy);
                       t.accumulate(b, dy);
                     });
}

Var scale(Tape& tape, Var x, double factor) {
  const Tensor& v = tape.value(x);
  return tape.record(Tensor(v.shape(), v.array() * factor), tape.requires_grad(x), [=](Tape& t, const Tensor& dy) {
    t.accumulate(x, Tensor(dy.shape(), dy.array() * factor));
  });
}

Var sum(Tape& tape, Var x) {
  const Tensor& v = tape.value(x);
  return tape.record(Tensor::constant({1}, v.array().sum()), tape.requires_grad(x),
                     [=](Tape& t, const Tensor& dy) {
                       t.accumulate(x, Tensor::constant(t.value(x).shape(), dy[0]));
                     });
}

Var sum_squares(Tape& tape, Var x) {
  const Tensor& v = tape.value(x);
  return tape.record(Tensor::constant({1}, v.array().square().sum()), tape.requires_grad(x),
                     [=](Tape& t, const Tensor& dy) {
                       const Tensor& xv = t.value(x);
                       t.accumulate(x, Tensor(xv.shape(), 2.0 * dy[0] * xv.array()));
                     });
}

Var cross_entropy(Tape& tape, Var logits, std::vector<int> labels) {
  const double loss = kernels::cross_entropy(tape.value(logits), labels);
  return tape.record(Tensor::constant({1}, loss), tape.requires_grad(logits),
                     [=, labels = std::move(labels)](Tape& t, const Tensor& dy) {
                       const Tensor& z = t.value(logits);
                       Matrix p = kernels::softmax(z);
                       for (std::size_t r = 0; r < labels.size(); ++r) p(static_cast<Index>(r), labels[r]) -= 1.0;
                       p *= dy[0] / static_cast<double>(labels.size());
                       RowMatrix pr = p;
                       t.accumulate(logits, Tensor(z.shape(), Eigen::Map<const Eigen::ArrayXd>(pr.data(), pr.size())));
                     });
}

}  // namespace ops
}  // namespace advcon
