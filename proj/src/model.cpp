#include "advcon/model.hpp"

#include "advcon/random.hpp"

#include <bit>
#include <cmath>
#include <cstring>
#include <set>

namespace advcon {

std::string_view to_string(LayerKind kind) {
  switch (kind) {
    case LayerKind::conv2d: return "conv2d";
    case LayerKind::relu: return "relu";
    case LayerKind::maxpool2d: return "maxpool2d";
    case LayerKind::global_avg_pool: return "global_avg_pool";
    case LayerKind::flatten: return "flatten";
    case LayerKind::dense: return "dense";
  }
  return "unknown";
}

LayerKind parse_layer_kind(std::string_view name) {
  for (auto k : {LayerKind::conv2d, LayerKind::relu, LayerKind::maxpool2d, LayerKind::global_avg_pool,
                 LayerKind::flatten, LayerKind::dense}) {
    if (to_string(k) == name) return k;
  }
  throw ConfigError("unknown layer kind '" + std::string(name) + "'");
}

LayerSpec LayerSpec::conv2d(std::string name, Index out_channels, Index kernel, Index stride, Index pad) {
  return {LayerKind::conv2d, std::move(name), out_channels, kernel, stride, pad};
}
LayerSpec LayerSpec::relu(std::string name) { return {LayerKind::relu, std::move(name), 0, 0, 0, 0}; }
LayerSpec LayerSpec::maxpool2d(std::string name, Index size, Index stride) {
  return {LayerKind::maxpool2d, std::move(name), 0, size, stride, 0};
}
LayerSpec LayerSpec::global_avg_pool(std::string name) {
  return {LayerKind::global_avg_pool, std::move(name), 0, 0, 0, 0};
}
LayerSpec LayerSpec::flatten(std::string name) { return {LayerKind::flatten, std::move(name), 0, 0, 0, 0}; }
LayerSpec LayerSpec::dense(std::string name, Index units) {
  return {LayerKind::dense, std::move(name), units, 0, 0, 0};
}

namespace {

Shape output_shape_of(const LayerSpec& spec, const Shape& in) {
  const auto fail = [&](const std::string& why) {
    return ShapeError("layer '" + spec.name + "' (" + std::string(to_string(spec.kind)) + "): " + why +
                      "; input shape " + shape_string(in));
  };
  switch (spec.kind) {
    case LayerKind::conv2d: {
      if (in.size() != 3) throw fail("expects (C, H, W) input");
      if (spec.units <= 0 || spec.kernel <= 0 || spec.stride <= 0 || spec.pad < 0) throw fail("invalid geometry");
      const Index h = conv_output_size(in[1], spec.kernel, spec.stride, spec.pad);
      const Index w = conv_output_size(in[2], spec.kernel, spec.stride, spec.pad);
      if (h <= 0 || w <= 0) throw fail("kernel larger than padded input");
      return {spec.units, h, w};
    }
    case LayerKind::maxpool2d: {
      if (in.size() != 3) throw fail("expects (C, H, W) input");
      if (spec.kernel <= 0 || spec.stride <= 0) throw fail("invalid pooling window");
      const Index h = conv_output_size(in[1], spec.kernel, spec.stride, 0);
      const Index w = conv_output_size(in[2], spec.kernel, spec.stride, 0);
      if (h <= 0 || w <= 0) throw fail("pooling window larger than input");
      return {in[0], h, w};
    }
    case LayerKind::relu: return in;
    case LayerKind::global_avg_pool:
      if (in.size() != 3) throw fail("expects (C, H, W) input");
      return {in[0]};
    case LayerKind::flatten: return {shape_size(in)};
    case LayerKind::dense:
      if (in.size() != 1) throw fail("expects a flat feature vector");
      if (spec.units <= 0) throw fail("units must be positive");
      return {spec.units};
  }
  throw fail("unsupported layer");
}

void fnv(std::uint64_t& h, const void* data, std::size_t n) {
  const auto* p = static_cast<const unsigned char*>(data);
  for (std::size_t i = 0; i < n; ++i) {
    h ^= p[i];
    h *= 0x100000001b3ULL;
  }
}

void fnv_u64(std::uint64_t& h, std::uint64_t v) {
  unsigned char bytes[8];
  for (int i = 0; i < 8; ++i) bytes[i] = static_cast<unsigned char>(v >> (8 * i));
  fnv(h, bytes, 8);
}

Tensor run_layer(const Layer& layer, const Tensor& x) {
  switch (layer.spec.kind) {
    case LayerKind::conv2d:
      return kernels::conv2d(x, layer.weight, layer.bias, {layer.spec.stride, layer.spec.pad});
    case LayerKind::relu: return kernels::relu(x);
    case LayerKind::maxpool2d: return kernels::maxpool2d(x, {layer.spec.kernel, layer.spec.stride});
    case LayerKind::global_avg_pool: return kernels::global_avg_pool(x);
    case LayerKind::flatten: return x.reshaped({x.dim(0), x.item_size()});
    case LayerKind::dense: return kernels::dense(x, layer.weight, layer.bias);
  }
  throw InvariantError("unsupported layer");
}

void require_batch_shape(const Tensor& x, const Shape& item, const std::string& where) {
  const bool ok = x.rank() == static_cast<Index>(item.size()) + 1 &&
                  std::equal(item.begin(), item.end(), x.shape().begin() + 1) && x.dim(0) > 0;
  if (!ok) {
    throw ShapeError(where + ": expected batch of " + shape_string(item) + ", got " + shape_string(x.shape()));
  }
}

Tensor run_range(const Model& model, std::size_t begin, std::size_t end, Tensor x) {
  const auto& layers = model.layers();
  for (std::size_t i = begin; i < end; ++i) x = run_layer(layers[i], x);
  return x;
}

}  // namespace

Model::Model(Shape input_shape, std::vector<LayerSpec> specs, std::uint64_t seed) : input_shape_(std::move(input_shape)) {
  layers_.reserve(specs.size());
  for (auto& s : specs) layers_.push_back(Layer{std::move(s), {}, {}, {}, {}});
  infer_shapes();
  Rng rng(seed);
  for (auto& layer : layers_) {
    Index fan_in = 0;
    if (layer.spec.kind == LayerKind::conv2d) {
      fan_in = layer.input_shape[0] * layer.spec.kernel * layer.spec.kernel;
      layer.weight = Tensor({layer.spec.units, layer.input_shape[0], layer.spec.kernel, layer.spec.kernel});
    } else if (layer.spec.kind == LayerKind::dense) {
      fan_in = layer.input_shape[0];
      layer.weight = Tensor({layer.spec.units, fan_in});
    } else {
      continue;
    }
    const double bound = std::sqrt(6.0 / static_cast<double>(fan_in));
    for (Index i = 0; i < layer.weight.size(); ++i) layer.weight[i] = rng.uniform(-bound, bound);
    layer.bias = Tensor({layer.spec.units});
  }
}

Model::Model(Shape input_shape, std::vector<Layer> layers)
    : input_shape_(std::move(input_shape)), layers_(std::move(layers)) {
  infer_shapes();
  for (const auto& layer : layers_) {
    if (layer.spec.kind == LayerKind::conv2d) {
      const Shape w{layer.spec.units, layer.input_shape[0], layer.spec.kernel, layer.spec.kernel};
      if (layer.weight.shape() != w || layer.bias.shape() != Shape{layer.spec.units}) {
        throw ShapeError("layer '" + layer.spec.name + "': parameter shapes do not match its geometry");
      }
    } else if (layer.spec.kind == LayerKind::dense) {
      if (layer.weight.shape() != Shape{layer.spec.units, layer.input_shape[0]} ||
          layer.bias.shape() != Shape{layer.spec.units}) {
        throw ShapeError("layer '" + layer.spec.name + "': parameter shapes do not match its geometry");
      }
    }
  }
}

void Model::infer_shapes() {
  if (input_shape_.size() != 3 || shape_size(input_shape_) <= 0) {
    throw ShapeError("model input shape must be (C, H, W), got " + shape_string(input_shape_));
  }
  if (layers_.empty()) throw ConfigError("model has no layers");
  std::set<std::string> names;
  Shape current = input_shape_;
  for (auto& layer : layers_) {
    if (layer.spec.name.empty()) throw ConfigError("layer names must be non-empty");
    if (!names.insert(layer.spec.name).second) throw ConfigError("duplicate layer name '" + layer.spec.name + "'");
    layer.input_shape = current;
    layer.output_shape = output_shape_of(layer.spec, current);
    current = layer.output_shape;
  }
  if (current.size() != 1) {
    throw ShapeError("final layer must produce a logit vector, got " + shape_string(current));
  }
}

std::size_t Model::layer_index(std::string_view name) const {
  for (std::size_t i = 0; i < layers_.size(); ++i) {
    if (layers_[i].spec.name == name) return i;
  }
  throw ConfigError("unknown layer '" + std::string(name) + "'");
}

bool Model::has_layer(std::string_view name) const {
  for (const auto& l : layers_) {
    if (l.spec.name == name) return true;
  }
  return false;
}

std::vector<std::string> Model::layer_names() const {
  std::vector<std::string> out;
  for (const auto& l : layers_) out.push_back(l.spec.name);
  return out;
}

std::uint64_t Model::checksum() const {
  std::uint64_t h = 0xcbf29ce484222325ULL;
  for (Index d : input_shape_) fnv_u64(h, static_cast<std::uint64_t>(d));
  for (const auto& l : layers_) {
    fnv(h, l.spec.name.data(), l.spec.name.size());
    fnv_u64(h, static_cast<std::uint64_t>(l.spec.kind));
    for (const Tensor* t : {&l.weight, &l.bias}) {
      for (double v : t->values()) fnv_u64(h, std::bit_cast<std::uint64_t>(v));
    }
  }
  return h;
}

Tensor forward(const Model& model, const Tensor& x) {
  require_batch_shape(x, model.input_shape(), "forward");
  Tensor logits = run_range(model, 0, model.layers().size(), x);
  require_finite(logits, "logits");
  return logits;
}

Tensor forward_to(const Model& model, std::string_view layer, const Tensor& x) {
  const std::size_t idx = model.layer_index(layer);
  require_batch_shape(x, model.input_shape(), "forward_to");
  return run_range(model, 0, idx + 1, x);
}

Tensor forward_from(const Model& model, std::string_view layer, const Tensor& activation) {
  const std::size_t idx = model.layer_index(layer);
  require_batch_shape(activation, model.layers()[idx].output_shape,
                      "forward_from('" + std::string(layer) + "')");
  Tensor logits = run_range(model, idx + 1, model.layers().size(), activation);
  require_finite(logits, "logits");
  return logits;
}

Matrix predict_proba(const Model& model, const Tensor& x) { return kernels::softmax(forward(model, x)); }

std::vector<int> predict(const Model& model, const Tensor& x) {
  const Tensor logits = forward(model, x);
  Eigen::Map<const RowMatrix> z(logits.data(), logits.dim(0), logits.dim(1));
  std::vector<int> out(static_cast<std::size_t>(z.rows()));
  for (Index r = 0; r < z.rows(); ++r) {
    Index arg = 0;
    z.row(r).maxCoeff(&arg);
    out[static_cast<std::size_t>(r)] = static_cast<int>(arg);
  }
  return out;
}

Var record_layers(Tape& tape, const Model& model, Var input, std::size_t begin, std::size_t end, bool param_grads,
                  std::vector<Var>* params) {
  Var x = input;
  const auto& layers = model.layers();
  for (std::size_t i = begin; i < end; ++i) {
    const Layer& layer = layers[i];
    Var w, b;
    if (layer.has_params()) {
      w = param_grads ? tape.variable(layer.weight) : tape.constant(layer.weight);
      b = param_grads ? tape.variable(layer.bias) : tape.constant(layer.bias);
      if (params) {
        params->push_back(w);
        params->push_back(b);
      }
    }
    switch (layer.spec.kind) {
      case LayerKind::conv2d: x = ops::conv2d(tape, x, w, b, {layer.spec.stride, layer.spec.pad}); break;
      case LayerKind::relu: x = ops::relu(tape, x); break;
      case LayerKind::maxpool2d: x = ops::maxpool2d(tape, x, {layer.spec.kernel, layer.spec.stride}); break;
      case LayerKind::global_avg_pool: x = ops::global_avg_pool(tape, x); break;
      case LayerKind::flatten: x = ops::flatten(tape, x); break;
      case LayerKind::dense: x = ops::dense(tape, x, w, b); break;
    }
  }
  return x;
}

InputGradient grad_input(const Model& model, const Tensor& x, const LogitLoss& loss) {
  require_batch_shape(x, model.input_shape(), "grad_input");
  Tape tape;
  Var in = tape.variable(x);
  Var logits = record_layers(tape, model, in, 0, model.layers().size(), false);
  const Tensor& z = tape.value(logits);
  InputGradient out;
  out.logits = Eigen::Map<const RowMatrix>(z.data(), z.dim(0), z.dim(1));
  RowMatrix dlogits = RowMatrix::Zero(z.dim(0), z.dim(1));
  out.loss = loss(out.logits, dlogits);
  if (!std::isfinite(out.loss)) throw NumericError("grad_input: non-finite loss");
  tape.backward(logits, Tensor(z.shape(), Eigen::Map<const Eigen::ArrayXd>(dlogits.data(), dlogits.size())));
  out.grad = tape.grad(in);
  require_finite(out.grad, "input gradient");
  return out;
}

Tensor grad_input(const Model& model, const Tensor& x, std::span<const int> labels) {
  if (static_cast<Index>(labels.size()) != x.dim(0)) throw ShapeError("grad_input: one label per sample required");
  for (int y : labels) {
    if (y < 0 || y >= model.num_classes()) throw ConfigError("grad_input: label out of range");
  }
  std::vector<int> ys(labels.begin(), labels.end());
  return grad_input(model, x, [&ys](const RowMatrix& z, RowMatrix& dz) {
           double total = 0.0;
           for (Index r = 0; r < z.rows(); ++r) {
             const double m = z.row(r).maxCoeff();
             const Eigen::RowVectorXd e = (z.row(r).array() - m).exp().matrix();
             const double s = e.sum();
             total += m + std::log(s) - z(r, ys[static_cast<std::size_t>(r)]);
             dz.row(r) = e / s;
             dz(r, ys[static_cast<std::size_t>(r)]) -= 1.0;
           }
           return total;
         })
      .grad;
}

std::vector<LayerKind> kinds_after(const Model& model, std::string_view layer) {
  std::vector<LayerKind> out;
  for (std::size_t i = model.layer_index(layer) + 1; i < model.layers().size(); ++i) {
    out.push_back(model.layers()[i].spec.kind);
  }
  return out;
}

}  // namespace advcon
