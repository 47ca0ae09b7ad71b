#include "advcon/concepts.hpp"

#include "advcon/io.hpp"
#include "advcon/linalg.hpp"
#include "advcon/random.hpp"

#include <algorithm>
#include <cmath>
#include <numeric>

namespace advcon {

ActivationBatch ActivationBatch::sample(Index s) const {
  if (s < 0 || s >= batch) throw ShapeError("activation sample index out of range");
  const Index per = height * width;
  ActivationBatch out{data.middleRows(s * per, per), 1, height, width, channels, layer, model_id};
  return out;
}

ActivationBatch to_pixel_rows(const Tensor& act, std::string layer, std::string model_id) {
  if (act.rank() != 4) throw ShapeError("pixel rows need an (N, C, H, W) activation, got " + shape_string(act.shape()));
  const Index n = act.dim(0), c = act.dim(1), h = act.dim(2), w = act.dim(3);
  ActivationBatch out;
  out.batch = n;
  out.channels = c;
  out.height = h;
  out.width = w;
  out.layer = std::move(layer);
  out.model_id = std::move(model_id);
  out.data.resize(n * h * w, c);
  for (Index s = 0; s < n; ++s) {
    // each channel plane of a sample is contiguous: plane k -> column k
    Eigen::Map<const Matrix> planes(act.data() + s * c * h * w, h * w, c);
    out.data.middleRows(s * h * w, h * w) = planes;
  }
  return out;
}

Tensor from_pixel_rows(const ActivationBatch& b) {
  Tensor t({b.batch, b.channels, b.height, b.width});
  const Index hw = b.height * b.width;
  for (Index s = 0; s < b.batch; ++s) {
    Eigen::Map<Matrix> planes(t.data() + s * b.channels * hw, hw, b.channels);
    planes = b.data.middleRows(s * hw, hw);
  }
  return t;
}

ActivationBatch collect_activations(const Model& model, std::string_view layer, const Tensor& images) {
  if (images.rank() == 0 || images.dim(0) == 0) throw ConfigError("collect_activations: empty image set");
  const Tensor act = forward_to(model, layer, images);
  if (act.rank() != 4) throw ShapeError("layer '" + std::string(layer) + "' does not produce activation maps");
  return to_pixel_rows(act, std::string(layer), hex64(model.checksum()));
}

ActivationBatch relu(ActivationBatch batch) {
  batch.data = batch.data.cwiseMax(0.0);
  return batch;
}

std::string_view to_string(DecompositionMethod m) { return m == DecompositionMethod::pca ? "pca" : "nmf"; }

Vector ConceptBasis::cumulative_variance_ratio() const {
  Vector out(explained_variance.size());
  double acc = 0.0;
  for (Index i = 0; i < explained_variance.size(); ++i) {
    acc += explained_variance(i);
    out(i) = total_variance > 0.0 ? acc / total_variance : 0.0;
  }
  return out;
}

Vector ConceptBasis::unit_concept(Index i) const {
  const Vector row = components.row(i).transpose();
  const double n = row.norm();
  if (!(n > 0.0)) throw NumericError("concept " + std::to_string(i) + " has zero norm");
  return row / n;
}

Vector covariance_spectrum(const Matrix& rows) { return jacobi_eigen(covariance(rows)).values; }

Index effective_rank(const Vector& spectrum, double rel_tol) {
  if (spectrum.size() == 0) return 0;
  const double top = spectrum.maxCoeff();
  if (!(top > 0.0)) return 0;
  return (spectrum.array() > top * rel_tol).count();
}

ConceptBasis pca_fit(const ActivationBatch& activations, Index k) {
  const Matrix& a = activations.data;
  if (a.rows() < 2) throw ConfigError("pca_fit: need at least two activation rows");
  if (k < 1 || k > a.cols()) throw ConfigError("pca_fit: k must be in [1, channels]");
  Vector mean;
  const Matrix cov = covariance(a, &mean);
  const auto eig = jacobi_eigen(cov);
  const Index rank = effective_rank(eig.values);
  if (k > rank) {
    throw ConfigError("pca_fit: k = " + std::to_string(k) + " exceeds the effective rank " + std::to_string(rank) +
                      " of the centred activations");
  }
  ConceptBasis b;
  b.method = DecompositionMethod::pca;
  b.k = k;
  b.components = eig.vectors.leftCols(k).transpose();
  b.mean = mean;
  b.explained_variance = eig.values.head(k);
  b.total_variance = cov.trace();
  b.fit_iterations = eig.sweeps;
  b.layer = activations.layer;
  b.model_id = activations.model_id;
  const Matrix centered = a.rowwise() - mean.transpose();
  const Matrix w = centered * b.components.transpose();
  b.reconstruction_error = (centered - w * b.components).norm();
  return b;
}

NmfFit nmf_fit(const Matrix& a, Index k, const NmfOptions& options) {
  if (a.size() == 0) throw ConfigError("nmf_fit: empty input");
  if (k < 1 || k > a.cols()) throw ConfigError("nmf_fit: k must be in [1, channels]");
  if (options.max_iters < 1 || !(options.tol >= 0.0)) throw ConfigError("nmf_fit: invalid stopping rule");
  if (!a.allFinite() || a.minCoeff() < 0.0) throw ConfigError("nmf_fit: input must be finite and non-negative");
  const double mean = a.mean();
  if (!(mean > 0.0)) throw ConfigError("nmf_fit: all-zero input has no meaningful factorisation");

  Rng rng(options.seed);
  const double scale = std::sqrt(mean / static_cast<double>(k));
  Matrix w(a.rows(), k), m(k, a.cols());
  for (Index j = 0; j < w.cols(); ++j) {
    for (Index i = 0; i < w.rows(); ++i) w(i, j) = scale * rng.uniform();
  }
  for (Index j = 0; j < m.cols(); ++j) {
    for (Index i = 0; i < m.rows(); ++i) m(i, j) = scale * rng.uniform();
  }

  constexpr double tiny = 1e-300;
  NmfFit fit;
  auto& hist = fit.basis.objective_history;
  int iters = 0;
  for (; iters < options.max_iters; ++iters) {
    const Matrix wt_a = w.transpose() * a;
    const Matrix wt_w = w.transpose() * w;
    m.array() *= wt_a.array() / ((wt_w * m).array() + tiny);
    const Matrix a_mt = a * m.transpose();
    const Matrix m_mt = m * m.transpose();
    w.array() *= a_mt.array() / ((w * m_mt).array() + tiny);

    const double obj = 0.5 * (a - w * m).squaredNorm();
    const bool converged = !hist.empty() && std::abs(hist.back() - obj) <= options.tol * std::max(hist.back(), tiny);
    hist.push_back(obj);
    if (converged) {
      ++iters;
      break;
    }
  }

  // order components by total weight mass
  std::vector<Index> order(static_cast<std::size_t>(k));
  std::iota(order.begin(), order.end(), Index{0});
  const Vector mass = w.colwise().sum().transpose();
  std::stable_sort(order.begin(), order.end(), [&](Index i, Index j) { return mass(i) > mass(j); });
  Matrix w_sorted(w.rows(), k), m_sorted(k, m.cols());
  for (Index i = 0; i < k; ++i) {
    w_sorted.col(i) = w.col(order[static_cast<std::size_t>(i)]);
    m_sorted.row(i) = m.row(order[static_cast<std::size_t>(i)]);
  }

  ConceptBasis& b = fit.basis;
  b.method = DecompositionMethod::nmf;
  b.k = k;
  b.components = std::move(m_sorted);
  b.mean = Vector::Zero(a.cols());
  b.fit_iterations = iters;
  b.reconstruction_error = std::sqrt(2.0 * hist.back());
  fit.weights = std::move(w_sorted);
  return fit;
}

NmfFit nmf_fit(const ActivationBatch& activations_plus, Index k, const NmfOptions& options) {
  NmfFit fit = nmf_fit(activations_plus.data, k, options);
  fit.basis.layer = activations_plus.layer;
  fit.basis.model_id = activations_plus.model_id;
  return fit;
}

std::vector<SaliencyMap> project_saliency(const ActivationBatch& image, const ConceptBasis& basis, Index out_h,
                                          Index out_w) {
  if (image.channels != basis.channels() || image.data.cols() != basis.channels()) {
    throw ShapeError("project_saliency: activation has " + std::to_string(image.channels) +
                     " channels, basis expects " + std::to_string(basis.channels()));
  }
  if (image.batch != 1) throw ShapeError("project_saliency: expects the activations of a single image");
  const Matrix coeffs = (image.data.rowwise() - basis.mean.transpose()) * basis.components.transpose();
  std::vector<SaliencyMap> maps;
  for (Index i = 0; i < basis.components.rows(); ++i) {
    SaliencyMap s;
    s.concept_index = i;
    // rows are ordered (row, col): reshape column i as a row-major h x w map
    s.values = Eigen::Map<const RowMatrix>(coeffs.col(i).data(), image.height, image.width);
    s.upscaled = upscale_bilinear(s.values, out_h, out_w);
    maps.push_back(std::move(s));
  }
  return maps;
}

Matrix upscale_bilinear(const Matrix& map, Index out_h, Index out_w) {
  const Index h = map.rows(), w = map.cols();
  if (h == 0 || w == 0) throw ShapeError("upscale: empty map");
  if (out_h < h || out_w < w) throw ConfigError("upscale: target must not be smaller than the source");
  Matrix out(out_h, out_w);
  const auto coord = [](Index i, Index src, Index dst) {
    return dst > 1 ? static_cast<double>(i) * static_cast<double>(src - 1) / static_cast<double>(dst - 1) : 0.0;
  };
  for (Index r = 0; r < out_h; ++r) {
    const double y = coord(r, h, out_h);
    const Index y0 = std::min(static_cast<Index>(std::floor(y)), h - 1);
    const Index y1 = std::min(y0 + 1, h - 1);
    const double fy = y - static_cast<double>(y0);
    for (Index c = 0; c < out_w; ++c) {
      const double x = coord(c, w, out_w);
      const Index x0 = std::min(static_cast<Index>(std::floor(x)), w - 1);
      const Index x1 = std::min(x0 + 1, w - 1);
      const double fx = x - static_cast<double>(x0);
      const double top = (1.0 - fx) * map(y0, x0) + fx * map(y0, x1);
      const double bottom = (1.0 - fx) * map(y1, x0) + fx * map(y1, x1);
      out(r, c) = (1.0 - fy) * top + fy * bottom;
    }
  }
  return out;
}

Matrix upscale_nearest(const Matrix& map, Index out_h, Index out_w) {
  const Index h = map.rows(), w = map.cols();
  if (out_h < h || out_w < w) throw ConfigError("upscale: target must not be smaller than the source");
  Matrix out(out_h, out_w);
  for (Index r = 0; r < out_h; ++r) {
    for (Index c = 0; c < out_w; ++c) out(r, c) = map(r * h / out_h, c * w / out_w);
  }
  return out;
}

Vector class_direction(const Model& model, std::string_view layer, int cls) {
  const auto kinds = kinds_after(model, layer);
  const bool gap_dense = kinds == std::vector<LayerKind>{LayerKind::global_avg_pool, LayerKind::dense} ||
                         kinds == std::vector<LayerKind>{LayerKind::global_avg_pool, LayerKind::flatten, LayerKind::dense};
  if (!gap_dense) {
    throw ConfigError("concept importance needs a global-average-pool + dense head after layer '" +
                      std::string(layer) + "'");
  }
  if (cls < 0 || cls >= model.num_classes()) throw ConfigError("class index out of range");
  const Layer& head = model.layers().back();
  return Eigen::Map<const RowMatrix>(head.weight.data(), head.weight.dim(0), head.weight.dim(1)).row(cls).transpose();
}

Vector concept_importance(const Model& model, std::string_view layer, const ConceptBasis& basis, int cls) {
  const Vector v = class_direction(model, layer, cls);
  if (v.size() != basis.channels()) throw ShapeError("concept_importance: basis channel count mismatch");
  Vector out(basis.components.rows());
  for (Index i = 0; i < out.size(); ++i) out(i) = v.dot(basis.unit_concept(i));
  return out;
}

}  // namespace advcon
