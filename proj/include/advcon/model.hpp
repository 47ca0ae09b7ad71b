#pragma once

#include "advcon/autodiff.hpp"

#include <cstdint>
#include <functional>
#include <string>
#include <string_view>
#include <vector>

namespace advcon {

enum class LayerKind { conv2d, relu, maxpool2d, global_avg_pool, flatten, dense };

std::string_view to_string(LayerKind kind);
LayerKind parse_layer_kind(std::string_view name);

/// Hyper-parameters of one layer. `units` is the output channel count for
/// conv2d and the output width for dense; other fields are ignored by kinds
/// that do not use them.
struct LayerSpec {
  LayerKind kind = LayerKind::relu;
  std::string name;
  Index units = 0;
  Index kernel = 3;
  Index stride = 1;
  Index pad = 0;

  static LayerSpec conv2d(std::string name, Index out_channels, Index kernel, Index stride = 1, Index pad = 0);
  static LayerSpec relu(std::string name);
  static LayerSpec maxpool2d(std::string name, Index size = 2, Index stride = 2);
  static LayerSpec global_avg_pool(std::string name);
  static LayerSpec flatten(std::string name);
  static LayerSpec dense(std::string name, Index units);
};

struct Layer {
  LayerSpec spec;
  Shape input_shape;   // per-sample, no batch dimension
  Shape output_shape;  // per-sample
  Tensor weight;       // empty for parameter-free layers
  Tensor bias;

  bool has_params() const { return !weight.empty(); }
};

/// Sequential CNN with named layers. Shapes are inferred and validated when
/// the model is built; after that the model is only read by forward passes.
class Model {
 public:
  /// Build with Kaiming-uniform weights (bound sqrt(6 / fan_in)) and zero bias.
  Model(Shape input_shape, std::vector<LayerSpec> specs, std::uint64_t seed);

  /// Build from explicit layer parameters (deserialisation).
  Model(Shape input_shape, std::vector<Layer> layers);

  const Shape& input_shape() const { return input_shape_; }
  Index num_classes() const { return layers_.back().output_shape.front(); }
  const std::vector<Layer>& layers() const { return layers_; }
  std::vector<Layer>& layers() { return layers_; }

  /// Index of the named layer; ConfigError for unknown names.
  std::size_t layer_index(std::string_view name) const;
  bool has_layer(std::string_view name) const;
  const Shape& output_shape(std::string_view layer) const { return layers_[layer_index(layer)].output_shape; }
  std::vector<std::string> layer_names() const;

  /// FNV-1a over the architecture and the little-endian weight bytes.
  std::uint64_t checksum() const;

 private:
  void infer_shapes();

  Shape input_shape_;
  std::vector<Layer> layers_;
};

/// Logits (N, num_classes) for a batch (N, C, H, W).
Tensor forward(const Model& model, const Tensor& x);

/// Activation after `layer` (inclusive).
Tensor forward_to(const Model& model, std::string_view layer, const Tensor& x);

/// Continue the network from the output of `layer` to the logits.
Tensor forward_from(const Model& model, std::string_view layer, const Tensor& activation);

/// Row-wise softmax probabilities of forward(model, x).
Matrix predict_proba(const Model& model, const Tensor& x);
std::vector<int> predict(const Model& model, const Tensor& x);

/// Records layers [begin, end) of `model` on `tape` starting from `input`.
/// With `param_grads`, weights enter the tape as variables and are appended
/// to `params` (weight, bias per parameterised layer, in layer order).
Var record_layers(Tape& tape, const Model& model, Var input, std::size_t begin, std::size_t end, bool param_grads,
                  std::vector<Var>* params = nullptr);

/// Gradient of the summed per-sample cross-entropy w.r.t. the input batch.
Tensor grad_input(const Model& model, const Tensor& x, std::span<const int> labels);

/// Loss defined on the logits: returns the loss value and writes dLoss/dLogits.
using LogitLoss = std::function<double(const RowMatrix& logits, RowMatrix& dlogits)>;

struct InputGradient {
  double loss = 0.0;
  RowMatrix logits;
  Tensor grad;
};

/// Gradient w.r.t. the input of an arbitrary differentiable function of the logits.
InputGradient grad_input(const Model& model, const Tensor& x, const LogitLoss& loss);

/// Which layers compose the network after `layer`; used to validate heads.
std::vector<LayerKind> kinds_after(const Model& model, std::string_view layer);

}  // namespace advcon
