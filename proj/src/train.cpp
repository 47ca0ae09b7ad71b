#include "advcon/train.hpp"

#include "advcon/random.hpp"

#include <cmath>
#include <numeric>

namespace advcon {

std::string_view to_string(OptimizerKind kind) {
  return kind == OptimizerKind::sgd ? "sgd" : "sgd-momentum";
}

OptimizerKind parse_optimizer(std::string_view name) {
  if (name == "sgd") return OptimizerKind::sgd;
  if (name == "sgd-momentum") return OptimizerKind::sgd_momentum;
  throw ConfigError("unknown optimizer '" + std::string(name) + "'");
}

void TrainConfig::validate() const {
  if (epochs < 1) throw ConfigError("epochs must be >= 1");
  if (batch_size < 1) throw ConfigError("batch_size must be >= 1");
  // zero is accepted as a no-op run; negative or NaN rates are not
  if (!(learning_rate >= 0.0) || !std::isfinite(learning_rate)) throw ConfigError("learning_rate must be >= 0");
  if (!(momentum >= 0.0 && momentum < 1.0)) throw ConfigError("momentum must be in [0, 1)");
}

TrainResult train(Model& model, const LabeledImages& data, const TrainConfig& config) {
  config.validate();
  if (data.size() == 0) throw ConfigError("train: empty dataset");
  for (int y : data.labels) {
    if (y < 0 || y >= model.num_classes()) throw ConfigError("train: label out of range for model");
  }

  std::vector<Tensor*> params;
  for (auto& layer : model.layers()) {
    if (layer.has_params()) {
      params.push_back(&layer.weight);
      params.push_back(&layer.bias);
    }
  }
  std::vector<Eigen::ArrayXd> velocity;
  for (const Tensor* p : params) velocity.push_back(Eigen::ArrayXd::Zero(p->size()));

  Rng rng(config.seed);
  std::vector<Index> order(static_cast<std::size_t>(data.size()));
  std::iota(order.begin(), order.end(), Index{0});

  TrainResult result;
  for (int epoch = 0; epoch < config.epochs; ++epoch) {
    rng.shuffle(order);
    double epoch_loss = 0.0;
    int batches = 0;
    for (std::size_t start = 0; start < order.size(); start += static_cast<std::size_t>(config.batch_size)) {
      const std::size_t stop = std::min(order.size(), start + static_cast<std::size_t>(config.batch_size));
      const LabeledImages batch = data.select(std::span<const Index>(order).subspan(start, stop - start));

      Tape tape;
      std::vector<Var> vars;
      Var x = tape.constant(batch.images);
      Var logits = record_layers(tape, model, x, 0, model.layers().size(), true, &vars);
      Var loss = ops::cross_entropy(tape, logits, batch.labels);
      const double value = tape.value(loss)[0];
      if (!std::isfinite(value)) {
        throw NumericError("training diverged at epoch " + std::to_string(epoch + 1) + " (loss is not finite)");
      }
      tape.backward(loss);

      for (std::size_t p = 0; p < params.size(); ++p) {
        const Tensor g = tape.grad(vars[p]);
        if (config.optimizer == OptimizerKind::sgd_momentum) {
          velocity[p] = config.momentum * velocity[p] + g.array();
          params[p]->array() -= config.learning_rate * velocity[p];
        } else {
          params[p]->array() -= config.learning_rate * g.array();
        }
      }
      epoch_loss += value;
      ++batches;
    }
    result.loss_history.push_back(epoch_loss / batches);
  }
  return result;
}

double accuracy(const Model& model, const LabeledImages& data) {
  if (data.size() == 0) return 0.0;
  const auto pred = predict(model, data.images);
  int hits = 0;
  for (std::size_t i = 0; i < pred.size(); ++i) hits += pred[i] == data.labels[i];
  return static_cast<double>(hits) / static_cast<double>(pred.size());
}

}  // namespace advcon
