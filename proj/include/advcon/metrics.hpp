#pragma once

#include "advcon/concepts.hpp"

#include <span>
#include <string>
#include <vector>

namespace advcon {

/// Cosine similarity u.v / (|u| |v|). Throws NumericError for zero vectors.
template <typename DA, typename DB>
double cosine(const Eigen::MatrixBase<DA>& u, const Eigen::MatrixBase<DB>& v) {
  if (u.size() != v.size()) throw ShapeError("cosine: length mismatch");
  const double nu = u.norm(), nv = v.norm();
  if (!(nu > 0.0) || !(nv > 0.0)) throw NumericError("cosine: zero vector has no direction");
  return std::clamp(u.dot(v) / (nu * nv), -1.0, 1.0);
}

struct LayerProfile {
  std::vector<std::string> layers;
  std::vector<double> mean_sim;
  std::vector<double> std_sim;  // population standard deviation over pairs
};

/// Per layer: cosine between flattened f_{->L}(clean_i) and f_{->L}(adv_i),
/// then mean and standard deviation across the pairs.
LayerProfile layer_profile(const Model& model, const std::vector<std::string>& layers, const Tensor& clean,
                           const Tensor& adversarial);

/// Linear-interpolation quantile (the numpy default), q in [0, 1].
double quantile(std::vector<double> values, double q);

/// Jaccard index of the two maps after binarising each at its own
/// q-quantile (pixels strictly above it). Empty union gives 0.
double saliency_iou(const Matrix& a, const Matrix& b, double q = 0.5);

struct SimilarityMatrix {
  Matrix values;
  std::vector<std::string> row_labels;
  std::vector<std::string> col_labels;
};

/// "{origin}-{attack}-{index}"
std::string concept_label(const std::string& origin, const std::string& attack, Index index);
std::vector<std::string> concept_labels(const std::string& origin, const std::string& attack, Index count);

/// Pairwise cosine between the rows of two concept matrices.
SimilarityMatrix cosine_similarity_matrix(const Matrix& concepts_a, const Matrix& concepts_b,
                                          std::vector<std::string> row_labels = {},
                                          std::vector<std::string> col_labels = {});

/// Pairwise saliency IoU averaged over probe images: concept i of `a` is
/// projected on probes_a[p], concept j of `b` on probes_b[p].
SimilarityMatrix iou_similarity_matrix(const ConceptBasis& a, const ConceptBasis& b,
                                       const std::vector<ActivationBatch>& probes_a,
                                       const std::vector<ActivationBatch>& probes_b, Index out_h, Index out_w,
                                       double q = 0.5, std::vector<std::string> row_labels = {},
                                       std::vector<std::string> col_labels = {});

struct Matching {
  std::vector<int> permutation;  // row i is matched with column permutation[i]
  std::vector<double> diagonal;  // matched values, row order
  double trace = 0.0;
};

/// Column permutation maximising the trace of a square similarity matrix.
Matching match_concepts(const Matrix& similarity);

/// Number of matched values strictly below `threshold`.
int count_changes(std::span<const double> matched_diagonal, double threshold);

/// Average ranks (1-based, ties share their mean rank).
std::vector<double> average_ranks(std::span<const double> values);

double pearson(std::span<const double> a, std::span<const double> b);

struct Correlations {
  double pearson = 0.0;
  double spearman = 0.0;
};

Correlations weight_correlations(std::span<const double> original, std::span<const double> adversarial);

struct Interval {
  double mean = 0.0;
  double lower = 0.0;
  double upper = 0.0;
  std::size_t n = 0;
};

/// Two-sided Student-t confidence interval of the mean. A single value (or
/// zero spread) gives a zero-width interval.
Interval student_t_interval(std::span<const double> values, double confidence = 0.99);

}  // namespace advcon
