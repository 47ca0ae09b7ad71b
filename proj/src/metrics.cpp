#include "advcon/metrics.hpp"

#include "advcon/linalg.hpp"

#include <boost/math/distributions/students_t.hpp>

#include <algorithm>
#include <cmath>
#include <numeric>

namespace advcon {

LayerProfile layer_profile(const Model& model, const std::vector<std::string>& layers, const Tensor& clean,
                           const Tensor& adversarial) {
  if (clean.shape() != adversarial.shape() || clean.rank() == 0 || clean.dim(0) == 0) {
    throw ShapeError("layer_profile: clean and adversarial sets must be paired batches of equal shape");
  }
  LayerProfile p;
  p.layers = layers;
  for (const auto& layer : layers) {
    const Tensor a = forward_to(model, layer, clean);
    const Tensor b = forward_to(model, layer, adversarial);
    const Index n = a.dim(0), per = a.item_size();
    std::vector<double> sims;
    for (Index i = 0; i < n; ++i) {
      Eigen::Map<const Vector> u(a.data() + i * per, per), v(b.data() + i * per, per);
      sims.push_back(cosine(u, v));
    }
    const double mean = std::accumulate(sims.begin(), sims.end(), 0.0) / static_cast<double>(n);
    double var = 0.0;
    for (double s : sims) var += (s - mean) * (s - mean);
    p.mean_sim.push_back(mean);
    p.std_sim.push_back(std::sqrt(var / static_cast<double>(n)));
  }
  return p;
}

double quantile(std::vector<double> values, double q) {
  if (values.empty()) throw ShapeError("quantile of an empty set");
  if (!(q >= 0.0 && q <= 1.0)) throw ConfigError("quantile level must be in [0, 1]");
  std::sort(values.begin(), values.end());
  const double pos = q * static_cast<double>(values.size() - 1);
  const auto lo = static_cast<std::size_t>(std::floor(pos));
  const auto hi = std::min(lo + 1, values.size() - 1);
  const double frac = pos - static_cast<double>(lo);
  return values[lo] + frac * (values[hi] - values[lo]);
}

double saliency_iou(const Matrix& a, const Matrix& b, double q) {
  if (a.rows() != b.rows() || a.cols() != b.cols()) throw ShapeError("saliency_iou: map dimensions differ");
  if (!(q > 0.0 && q < 1.0)) throw ConfigError("saliency_iou: quantile must be in (0, 1)");
  const double ta = quantile(std::vector<double>(a.data(), a.data() + a.size()), q);
  const double tb = quantile(std::vector<double>(b.data(), b.data() + b.size()), q);
  Index inter = 0, uni = 0;
  for (Index i = 0; i < a.size(); ++i) {
    const bool in_a = a.data()[i] > ta, in_b = b.data()[i] > tb;
    inter += in_a && in_b;
    uni += in_a || in_b;
  }
  return uni == 0 ? 0.0 : static_cast<double>(inter) / static_cast<double>(uni);
}

std::string concept_label(const std::string& origin, const std::string& attack, Index index) {
  return origin + "-" + attack + "-" + std::to_string(index);
}

std::vector<std::string> concept_labels(const std::string& origin, const std::string& attack, Index count) {
  std::vector<std::string> out;
  for (Index i = 0; i < count; ++i) out.push_back(concept_label(origin, attack, i));
  return out;
}

namespace {

std::vector<std::string> default_labels(std::vector<std::string> labels, Index count, const char* prefix) {
  if (labels.empty()) {
    for (Index i = 0; i < count; ++i) labels.push_back(prefix + std::to_string(i));
  }
  if (static_cast<Index>(labels.size()) != count) throw ShapeError("similarity matrix: label count mismatch");
  return labels;
}

}  // namespace

SimilarityMatrix cosine_similarity_matrix(const Matrix& a, const Matrix& b, std::vector<std::string> row_labels,
                                          std::vector<std::string> col_labels) {
  if (a.cols() != b.cols()) throw ShapeError("cosine_similarity_matrix: concepts live in different spaces");
  SimilarityMatrix s;
  s.values.resize(a.rows(), b.rows());
  for (Index i = 0; i < a.rows(); ++i) {
    for (Index j = 0; j < b.rows(); ++j) s.values(i, j) = cosine(a.row(i), b.row(j));
  }
  s.row_labels = default_labels(std::move(row_labels), a.rows(), "a");
  s.col_labels = default_labels(std::move(col_labels), b.rows(), "b");
  return s;
}

SimilarityMatrix iou_similarity_matrix(const ConceptBasis& a, const ConceptBasis& b,
                                       const std::vector<ActivationBatch>& probes_a,
                                       const std::vector<ActivationBatch>& probes_b, Index out_h, Index out_w,
                                       double q, std::vector<std::string> row_labels,
                                       std::vector<std::string> col_labels) {
  if (probes_a.empty() || probes_a.size() != probes_b.size()) {
    throw ConfigError("iou_similarity_matrix: need a non-empty, paired probe set");
  }
  SimilarityMatrix s;
  s.values = Matrix::Zero(a.components.rows(), b.components.rows());
  for (std::size_t p = 0; p < probes_a.size(); ++p) {
    const auto maps_a = project_saliency(probes_a[p], a, out_h, out_w);
    const auto maps_b = project_saliency(probes_b[p], b, out_h, out_w);
    for (std::size_t i = 0; i < maps_a.size(); ++i) {
      for (std::size_t j = 0; j < maps_b.size(); ++j) {
        s.values(static_cast<Index>(i), static_cast<Index>(j)) += saliency_iou(maps_a[i].upscaled, maps_b[j].upscaled, q);
      }
    }
  }
  s.values /= static_cast<double>(probes_a.size());
  s.row_labels = default_labels(std::move(row_labels), a.components.rows(), "a");
  s.col_labels = default_labels(std::move(col_labels), b.components.rows(), "b");
  return s;
}

Matching match_concepts(const Matrix& similarity) {
  if (similarity.rows() != similarity.cols()) throw ShapeError("match_concepts: similarity matrix must be square");
  Matching m;
  m.permutation = max_weight_assignment(similarity);
  for (std::size_t i = 0; i < m.permutation.size(); ++i) {
    m.diagonal.push_back(similarity(static_cast<Index>(i), m.permutation[i]));
    m.trace += m.diagonal.back();
  }
  return m;
}

int count_changes(std::span<const double> matched_diagonal, double threshold) {
  return static_cast<int>(
      std::count_if(matched_diagonal.begin(), matched_diagonal.end(), [&](double v) { return v < threshold; }));
}

std::vector<double> average_ranks(std::span<const double> values) {
  std::vector<std::size_t> order(values.size());
  std::iota(order.begin(), order.end(), std::size_t{0});
  std::stable_sort(order.begin(), order.end(), [&](std::size_t i, std::size_t j) { return values[i] < values[j]; });
  std::vector<double> ranks(values.size());
  for (std::size_t start = 0; start < order.size();) {
    std::size_t stop = start + 1;
    while (stop < order.size() && values[order[stop]] == values[order[start]]) ++stop;
    const double rank = 0.5 * static_cast<double>(start + stop + 1);  // mean of 1-based start+1 .. stop
    for (std::size_t k = start; k < stop; ++k) ranks[order[k]] = rank;
    start = stop;
  }
  return ranks;
}

double pearson(std::span<const double> a, std::span<const double> b) {
  if (a.size() != b.size() || a.size() < 2) throw ShapeError("pearson: need equal-length inputs");
  Eigen::Map<const Vector> x(a.data(), static_cast<Index>(a.size())), y(b.data(), static_cast<Index>(b.size()));
  const Vector xc = x.array() - x.mean();
  const Vector yc = y.array() - y.mean();
  const double sx = xc.norm(), sy = yc.norm();
  if (!(sx > 0.0) || !(sy > 0.0)) throw NumericError("correlation undefined for a constant vector");
  return std::clamp(xc.dot(yc) / (sx * sy), -1.0, 1.0);
}

Correlations weight_correlations(std::span<const double> original, std::span<const double> adversarial) {
  if (original.size() != adversarial.size() || original.size() < 3) {
    throw ShapeError("weight_correlations: need equal lengths of at least 3");
  }
  Correlations c;
  c.pearson = pearson(original, adversarial);
  const auto ra = average_ranks(original), rb = average_ranks(adversarial);
  c.spearman = pearson(ra, rb);
  return c;
}

Interval student_t_interval(std::span<const double> values, double confidence) {
  if (values.empty()) throw ShapeError("confidence interval of an empty set");
  if (!(confidence > 0.0 && confidence < 1.0)) throw ConfigError("confidence must be in (0, 1)");
  Interval iv;
  iv.n = values.size();
  iv.mean = std::accumulate(values.begin(), values.end(), 0.0) / static_cast<double>(iv.n);
  iv.lower = iv.upper = iv.mean;
  if (iv.n < 2) return iv;
  double ss = 0.0;
  for (double v : values) ss += (v - iv.mean) * (v - iv.mean);
  const double sem = std::sqrt(ss / static_cast<double>(iv.n - 1)) / std::sqrt(static_cast<double>(iv.n));
  if (sem == 0.0) return iv;
  const boost::math::students_t dist(static_cast<double>(iv.n - 1));
  const double t = boost::math::quantile(boost::math::complement(dist, (1.0 - confidence) / 2.0));
  iv.lower = iv.mean - t * sem;
  iv.upper = iv.mean + t * sem;
  return iv;
}

}  // namespace advcon
