#pragma once

#include "advcon/model.hpp"

#include <cstdint>
#include <string>
#include <string_view>
#include <vector>

namespace advcon {

/// Activation-map pixels as rows: row (s * h + i) * w + j holds the channel
/// vector of sample s at spatial position (i, j).
struct ActivationBatch {
  Matrix data;  // (b*h*w) x c
  Index batch = 0;
  Index height = 0;
  Index width = 0;
  Index channels = 0;
  std::string layer;
  std::string model_id;

  Index rows() const { return data.rows(); }
  /// Pixels of one sample as its own batch.
  ActivationBatch sample(Index s) const;
};

/// Flatten an (N, C, H, W) activation tensor into pixel rows.
ActivationBatch to_pixel_rows(const Tensor& activations, std::string layer = {}, std::string model_id = {});

/// Inverse of to_pixel_rows.
Tensor from_pixel_rows(const ActivationBatch& batch);

ActivationBatch collect_activations(const Model& model, std::string_view layer, const Tensor& images);

/// Elementwise max(0, .), the input NMF expects.
ActivationBatch relu(ActivationBatch batch);

enum class DecompositionMethod { pca, nmf };
std::string_view to_string(DecompositionMethod m);

struct ConceptBasis {
  DecompositionMethod method = DecompositionMethod::pca;
  Matrix components;           // k x c, one concept per row
  Vector mean;                 // length c; zero for nmf
  Vector explained_variance;   // length k, descending (pca only)
  double total_variance = 0.0; // trace of the covariance (pca only)
  double reconstruction_error = 0.0;  // Frobenius norm of the residual
  Index k = 0;
  int fit_iterations = 0;
  std::vector<double> objective_history;  // nmf: 0.5 ||A - W M||_F^2 per iteration
  std::string layer;
  std::string model_id;

  Index channels() const { return components.cols(); }
  /// Cumulative explained-variance ratio of the kept components (pca).
  Vector cumulative_variance_ratio() const;
  /// Row i scaled to unit length.
  Vector unit_concept(Index i) const;
};

/// Full covariance spectrum of the pixel rows, descending.
Vector covariance_spectrum(const Matrix& rows);

/// Number of eigenvalues above max_eigenvalue * rel_tol.
Index effective_rank(const Vector& spectrum, double rel_tol = 1e-10);

/// PCA of the mean-centred rows: the k leading covariance eigenvectors
/// (cyclic Jacobi). Throws ConfigError when k exceeds the effective rank.
ConceptBasis pca_fit(const ActivationBatch& activations, Index k);

struct NmfOptions {
  int max_iters = 500;
  double tol = 1e-5;
  std::uint64_t seed = 0;
};

struct NmfFit {
  ConceptBasis basis;
  Matrix weights;  // (b*h*w) x k
};

/// Lee-Seung multiplicative updates for min ||A - W M||_F with W, M >= 0.
/// W and M start uniform in [0, sqrt(mean(A) / k)) from `seed`. Iteration stops
/// after max_iters or when the relative objective change drops below tol.
/// Components are returned ordered by total weight mass sum_rows W, descending.
NmfFit nmf_fit(const Matrix& nonnegative, Index k, const NmfOptions& options = {});
NmfFit nmf_fit(const ActivationBatch& activations_plus, Index k, const NmfOptions& options = {});

struct SaliencyMap {
  Matrix values;    // h x w concept coefficients
  Matrix upscaled;  // input resolution
  Index concept_index = 0;
};

/// Per-pixel concept coefficients W' = (A' - mean) M^T for one image,
/// reshaped to k maps and upscaled to (out_h, out_w).
std::vector<SaliencyMap> project_saliency(const ActivationBatch& image_activations, const ConceptBasis& basis,
                                          Index out_h, Index out_w);

/// Corner-aligned bilinear interpolation; target must be at least the source size.
Matrix upscale_bilinear(const Matrix& map, Index out_h, Index out_w);
Matrix upscale_nearest(const Matrix& map, Index out_h, Index out_w);

/// Effective class direction in pooled feature space after `layer`; requires
/// the remainder of the network to be global-average-pool (+ flatten) + dense.
Vector class_direction(const Model& model, std::string_view layer, int cls);

/// importance_i = v_cls . m_i / ||m_i||; may be negative.
Vector concept_importance(const Model& model, std::string_view layer, const ConceptBasis& basis, int cls);

}  // namespace advcon
