#pragma once

#include "advcon/datagen.hpp"
#include "advcon/model.hpp"

#include <cstdint>
#include <string_view>
#include <vector>

namespace advcon {

enum class OptimizerKind { sgd, sgd_momentum };

std::string_view to_string(OptimizerKind kind);
OptimizerKind parse_optimizer(std::string_view name);

struct TrainConfig {
  int epochs = 50;
  int batch_size = 32;
  double learning_rate = 0.02;
  double momentum = 0.9;
  std::uint64_t seed = 42;
  OptimizerKind optimizer = OptimizerKind::sgd_momentum;

  void validate() const;
};

struct TrainResult {
  std::vector<double> loss_history;  // mean minibatch loss per epoch
};

/// Minibatch training on mean cross-entropy. Single-threaded with a fixed
/// reduction order, so a given (model, data, config) yields bit-identical
/// weights. Throws NumericError if the loss diverges.
TrainResult train(Model& model, const LabeledImages& data, const TrainConfig& config);

double accuracy(const Model& model, const LabeledImages& data);

}  // namespace advcon
