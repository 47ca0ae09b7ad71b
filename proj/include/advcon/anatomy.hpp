#pragma once

#include "advcon/attacks.hpp"
#include "advcon/concepts.hpp"
#include "advcon/metrics.hpp"

#include <array>
#include <string>
#include <vector>

namespace advcon {

/// Latent perturbation f_{->L}(x + delta) - f_{->L}(x) of one sample.
struct LatentPerturbation {
  Tensor delta_tilde;  // (1, C, H, W)
  std::string layer;
  int origin_class = -1;
  int target_class = -1;
  AttackKind attack_kind = AttackKind::pgd;
  std::string sample_id;
};

LatentPerturbation latent_delta(const Model& model, const std::string& layer, const Tensor& x, const Tensor& x_adv);

inline constexpr std::array<double, 6> kRetainedVarianceLevels{0.50, 0.70, 0.80, 0.90, 0.95, 0.99};

/// Smallest component counts (as % of channels) whose cumulative explained
/// variance reaches each level, for one set of pixel rows.
std::vector<double> component_fractions(const Matrix& pixel_rows, std::span<const double> levels);

struct VarianceProfile {
  std::vector<double> retained_levels;
  std::vector<double> component_fraction_mean;  // percent of channels
  std::vector<double> component_fraction_std;
  std::size_t groups = 0;
};

/// PCA variance-retention profile of latent perturbations. Perturbations are
/// grouped by (origin, target); each group's pixels are stacked into one
/// (n*h*w) x c matrix, and the per-group fractions are summarised by mean and
/// population standard deviation. Groups without any variance are skipped.
VarianceProfile variance_profile(const std::vector<LatentPerturbation>& perturbations,
                                 std::span<const double> levels = kRetainedVarianceLevels);

struct PerturbationConcepts {
  ConceptBasis basis;  // NMF on ReLU of the stacked perturbation pixels
  Matrix weights;
  Matrix directions;   // k x c, unit rows m_i = M_i / ||M_i||, prominence order
};

PerturbationConcepts nmf_perturbation_basis(const std::vector<LatentPerturbation>& perturbations, Index k = 3,
                                            const NmfOptions& options = {});

/// Per spatial pixel p: (p . m) m. `m` must be unit length (1e-6).
Tensor project_component(const Tensor& delta_tilde, const Vector& m);

struct InterpolationCurve {
  std::vector<double> gammas;
  std::vector<double> conf_original;
  std::vector<double> conf_target;
  std::string direction;
};

/// 0, 0.05, ..., 1.5
std::vector<double> default_gammas();

/// Softmax probabilities of `origin` and `target` along f_{L->}(f_{->L}(x) + gamma * direction).
InterpolationCurve interpolate(const Model& model, const std::string& layer, const Tensor& x, const Tensor& direction,
                               const std::vector<double>& gammas, int origin, int target, std::string label);

struct Clustermap {
  SimilarityMatrix matrix;  // rows and columns in dendrogram leaf order
  std::vector<int> order;   // original index of each displayed row
  // scipy-style linkage rows: (cluster a, cluster b, distance, size)
  std::vector<std::array<double, 4>> linkage;
};

/// Cosine similarity of unit concept vectors, reordered by average-linkage
/// agglomerative clustering on 1 - cosine.
Clustermap clustermap(const Matrix& concepts, const std::vector<std::string>& labels);

struct TargetSpecificity {
  double same_target_mean = 0.0;
  double cross_target_mean = 0.0;
  std::size_t same_pairs = 0;
  std::size_t cross_pairs = 0;
};

/// Mean pairwise cosine of concept vectors that share a target class versus
/// those that do not (distinct vectors only).
TargetSpecificity target_specificity(const Matrix& concepts, const std::vector<int>& targets);

}  // namespace advcon
