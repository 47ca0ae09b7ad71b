#pragma once

#include "advcon/attacks.hpp"
#include "advcon/datagen.hpp"
#include "advcon/io.hpp"
#include "advcon/train.hpp"

#include <atomic>
#include <cstdint>
#include <exception>
#include <filesystem>
#include <functional>
#include <string>
#include <thread>
#include <utility>
#include <vector>

namespace advcon {

struct DatasetSource {
  std::string kind = "shapes";  // "shapes" or "idx"
  ShapeDatasetConfig shapes;
  std::filesystem::path idx_images;
  std::filesystem::path idx_labels;
  double train_fraction = 0.8;
};

struct AttackGrid {
  std::vector<int> classes;                 // every ordered pair (o, t), o != t, is attacked
  std::vector<std::pair<int, int>> pairs;   // explicit pairs; overrides `classes` when non-empty
  int images_per_class = 10;                // taken from the test split
  std::vector<AttackConfig> attacks;        // one per kind; targets are filled in per pair

  std::vector<std::pair<int, int>> resolved_pairs() const;
};

struct AnalysisConfig {
  std::vector<std::string> profile_layers{"relu1", "relu2", "relu3", "relu4"};
  std::string discovery_layer = "relu4";
  std::vector<AttackKind> kinds{AttackKind::bim, AttackKind::pgd, AttackKind::cw};
  Index concepts = 5;               // k for clean / adversarial concept mining
  Index perturbation_concepts = 3;  // k for NMF on latent perturbations
  double iou_quantile = 0.5;
  std::vector<double> change_thresholds{75.0, 50.0, 25.0};  // IoU in percent
  double confidence = 0.99;
  std::vector<double> variance_levels{0.50, 0.70, 0.80, 0.90, 0.95, 0.99};
  double gamma_start = 0.0;
  double gamma_stop = 1.5;
  double gamma_step = 0.05;
  int nmf_max_iters = 500;
  double nmf_tol = 1e-5;

  std::vector<double> gammas() const;
};

struct ExperimentConfig {
  std::uint64_t seed = 42;
  std::filesystem::path output_dir = "out";
  DatasetSource dataset;
  std::vector<LayerSpec> layers;
  TrainConfig train;
  double min_accuracy = 0.85;
  AttackGrid grid;
  AnalysisConfig analysis;

  void validate() const;
};

/// VGG-like toy network: four 3x3 conv blocks (8, 16, 32, 32 channels, the
/// first two followed by 2x2 max pooling), global average pooling, dense head.
std::vector<LayerSpec> toy_cnn_layers(int num_classes);

/// The pinned desk-scale protocol.
ExperimentConfig default_config();

Json to_json(const ExperimentConfig& config);
/// Missing keys keep their defaults; unknown keys are rejected.
ExperimentConfig config_from_json(const Json& j);
ExperimentConfig load_config(const std::filesystem::path& path);

/// FNV-1a of the canonical JSON form with `output_dir` removed, so moving an
/// experiment does not change its identity.
std::uint64_t config_hash(const ExperimentConfig& config);

/// Worker count from ADVCON_WORKERS, else the hardware concurrency.
int worker_count();

/// Runs fn(0) ... fn(n - 1) on `workers` threads. Each index is handled
/// exactly once; callers store results by index, so ordering is
/// deterministic. The exception of the lowest failing index is rethrown.
template <typename Fn>
void parallel_for(std::size_t n, int workers, Fn&& fn) {
  const auto threads = static_cast<std::size_t>(std::max(1, workers));
  if (threads == 1 || n <= 1) {
    for (std::size_t i = 0; i < n; ++i) fn(i);
    return;
  }
  std::atomic<std::size_t> next{0};
  std::vector<std::exception_ptr> errors(n);
  const auto run = [&] {
    for (std::size_t i = next++; i < n; i = next++) {
      try {
        fn(i);
      } catch (...) {
        errors[i] = std::current_exception();
      }
    }
  };
  std::vector<std::thread> pool;
  for (std::size_t t = 0; t < std::min(threads, n); ++t) pool.emplace_back(run);
  for (auto& t : pool) t.join();
  for (auto& e : errors) {
    if (e) std::rethrow_exception(e);
  }
}

enum class DissectStage { layers, mine, anatomy };
std::string_view to_string(DissectStage stage);
DissectStage parse_dissect_stage(std::string_view name);

/// Dataset regenerated (or loaded) and split exactly as during training.
std::pair<LabeledImages, LabeledImages> load_experiment_data(const ExperimentConfig& config);

void run_train(const ExperimentConfig& config);
void run_attack(const ExperimentConfig& config);
void run_dissect(const ExperimentConfig& config, DissectStage stage);
void run_report(const ExperimentConfig& config);

/// Stage directories below the output root.
std::filesystem::path stage_dir(const ExperimentConfig& config, std::string_view stage);
std::string group_name(int origin, int target, AttackKind kind);

}  // namespace advcon
