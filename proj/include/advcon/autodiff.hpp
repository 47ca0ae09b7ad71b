#pragma once

#include "advcon/tensor.hpp"

#include <functional>
#include <optional>
#include <vector>

namespace advcon {

struct Conv2dGeometry {
  Index stride = 1;
  Index pad = 0;
};

struct Pool2dGeometry {
  Index size = 2;
  Index stride = 2;
};

/// Spatial output extent of a convolution or pooling window.
Index conv_output_size(Index in, Index kernel, Index stride, Index pad);

// Stateless forward/backward kernels shared by the inference path and the tape.
namespace kernels {

Tensor conv2d(const Tensor& x, const Tensor& weight, const Tensor& bias, Conv2dGeometry geo);

struct Conv2dGrads {
  std::optional<Tensor> input;
  std::optional<Tensor> weight;
  std::optional<Tensor> bias;
};

Conv2dGrads conv2d_backward(const Tensor& x, const Tensor& weight, const Tensor& dy, Conv2dGeometry geo,
                            bool want_input, bool want_params);

Tensor relu(const Tensor& x);
Tensor relu_backward(const Tensor& x, const Tensor& dy);

Tensor maxpool2d(const Tensor& x, Pool2dGeometry geo);
Tensor maxpool2d_backward(const Tensor& x, const Tensor& dy, Pool2dGeometry geo);

Tensor global_avg_pool(const Tensor& x);
Tensor global_avg_pool_backward(const Shape& input_shape, const Tensor& dy);

/// y = x W^T + b with x (N, F), W (O, F), b (O).
Tensor dense(const Tensor& x, const Tensor& weight, const Tensor& bias);

/// Row-wise softmax of (N, K) logits.
Matrix softmax(const Tensor& logits);

/// Mean over the batch of -log softmax(z)_label, with log-sum-exp stabilisation.
double cross_entropy(const Tensor& logits, std::span<const int> labels);

}  // namespace kernels

struct Var {
  int id = -1;
};

class Tape;
using BackwardFn = std::function<void(Tape&, const Tensor& out_grad)>;

/// Reverse-mode gradient tape. Nodes are appended in evaluation order, so the
/// node list is already a topological order and backward() walks it in reverse.
class Tape {
 public:
  Var constant(Tensor value);
  Var variable(Tensor value);

  const Tensor& value(Var v) const;
  bool requires_grad(Var v) const;

  /// Accumulated gradient; zeros if nothing flowed into `v`.
  Tensor grad(Var v) const;

  /// Seed d(out)/d(out) = 1; `out` must hold a single element.
  void backward(Var out);
  void backward(Var out, const Tensor& seed);

  Var record(Tensor value, bool requires_grad, BackwardFn fn);
  void accumulate(Var v, const Tensor& g);

  std::size_t size() const { return nodes_.size(); }

 private:
  struct Node {
    Tensor value;
    std::optional<Tensor> grad;
    bool requires_grad = false;
    BackwardFn backward;
  };
  const Node& node(Var v) const;
  std::vector<Node> nodes_;
};

namespace ops {

Var conv2d(Tape& tape, Var x, Var weight, Var bias, Conv2dGeometry geo);
Var relu(Tape& tape, Var x);
Var maxpool2d(Tape& tape, Var x, Pool2dGeometry geo);
Var global_avg_pool(Tape& tape, Var x);
Var flatten(Tape& tape, Var x);
Var dense(Tape& tape, Var x, Var weight, Var bias);

Var add(Tape& tape, Var a, Var b);
Var scale(Tape& tape, Var x, double factor);
Var sum(Tape& tape, Var x);
Var sum_squares(Tape& tape, Var x);

/// Mean cross-entropy of (N, K) logits against integer labels.
Var cross_entropy(Tape& tape, Var logits, std::vector<int> labels);

}  // namespace ops

}  // namespace advcon
