#include "advcon/anatomy.hpp"

#include <cmath>
#include <limits>
#include <map>
#include <numeric>

namespace advcon {

LatentPerturbation latent_delta(const Model& model, const std::string& layer, const Tensor& x, const Tensor& x_adv) {
  if (x.shape() != x_adv.shape()) throw ShapeError("latent_delta: clean and adversarial shapes differ");
  const Tensor a = forward_to(model, layer, x);
  const Tensor b = forward_to(model, layer, x_adv);
  LatentPerturbation p;
  p.delta_tilde = Tensor(a.shape(), b.array() - a.array());
  p.layer = layer;
  return p;
}

std::vector<double> component_fractions(const Matrix& rows, std::span<const double> levels) {
  const Vector spectrum = covariance_spectrum(rows).cwiseMax(0.0);
  const double total = spectrum.sum();
  if (!(total > 0.0)) throw NumericError("variance profile: perturbations carry no variance");
  const auto c = static_cast<double>(spectrum.size());
  std::vector<double> out;
  for (double level : levels) {
    double acc = 0.0;
    Index needed = spectrum.size();
    for (Index i = 0; i < spectrum.size(); ++i) {
      acc += spectrum(i);
      // small slack so exact-rank data is not pushed one component further by rounding
      if (acc >= level * total * (1.0 - 1e-12)) {
        needed = i + 1;
        break;
      }
    }
    out.push_back(100.0 * static_cast<double>(needed) / c);
  }
  return out;
}

namespace {

Matrix stack_pixels(const std::vector<const LatentPerturbation*>& items) {
  std::vector<Tensor> parts;
  for (const auto* p : items) parts.push_back(p->delta_tilde);
  return to_pixel_rows(concat_batch(parts)).data;
}

void require_same_layer(const std::vector<LatentPerturbation>& items) {
  if (items.empty()) throw ConfigError("no perturbations given");
  for (const auto& p : items) {
    if (p.layer != items.front().layer || p.delta_tilde.shape() != items.front().delta_tilde.shape()) {
      throw ShapeError("perturbations come from different layers or shapes");
    }
  }
}

}  // namespace

VarianceProfile variance_profile(const std::vector<LatentPerturbation>& perturbations, std::span<const double> levels) {
  if (perturbations.size() < 2) throw ConfigError("variance_profile: need at least two perturbations");
  require_same_layer(perturbations);
  std::map<std::pair<int, int>, std::vector<const LatentPerturbation*>> groups;
  for (const auto& p : perturbations) groups[{p.origin_class, p.target_class}].push_back(&p);

  std::vector<std::vector<double>> per_group;
  bool any_rows = false;
  for (const auto& [key, items] : groups) {
    const Matrix rows = stack_pixels(items);
    if (rows.rows() < 2) continue;
    any_rows = true;
    // a group whose perturbations are all zero (e.g. inputs already in the target class) has no profile
    if (!(covariance_spectrum(rows).cwiseMax(0.0).sum() > 0.0)) continue;
    per_group.push_back(component_fractions(rows, levels));
  }
  if (!any_rows) throw ConfigError("variance_profile: every group is too small");
  if (per_group.empty()) throw NumericError("variance profile: perturbations carry no variance");

  VarianceProfile v;
  v.retained_levels.assign(levels.begin(), levels.end());
  v.groups = per_group.size();
  for (std::size_t l = 0; l < levels.size(); ++l) {
    double mean = 0.0;
    for (const auto& g : per_group) mean += g[l];
    mean /= static_cast<double>(per_group.size());
    double var = 0.0;
    for (const auto& g : per_group) var += (g[l] - mean) * (g[l] - mean);
    v.component_fraction_mean.push_back(mean);
    v.component_fraction_std.push_back(std::sqrt(var / static_cast<double>(per_group.size())));
  }
  return v;
}

PerturbationConcepts nmf_perturbation_basis(const std::vector<LatentPerturbation>& perturbations, Index k,
                                            const NmfOptions& options) {
  require_same_layer(perturbations);
  std::vector<const LatentPerturbation*> items;
  for (const auto& p : perturbations) items.push_back(&p);
  const Matrix rows = stack_pixels(items).cwiseMax(0.0);
  if (!(rows.maxCoeff() > 0.0)) {
    throw ConfigError("nmf_perturbation_basis: perturbations have no positive part");
  }
  NmfFit fit = nmf_fit(rows, k, options);
  fit.basis.layer = perturbations.front().layer;
  PerturbationConcepts out;
  out.directions.resize(k, rows.cols());
  for (Index i = 0; i < k; ++i) {
    const double n = fit.basis.components.row(i).norm();
    // a component NMF drove to zero has no direction; keep a zero row
    out.directions.row(i) = n > 0.0 ? Eigen::RowVectorXd(fit.basis.components.row(i) / n)
                                    : Eigen::RowVectorXd::Zero(rows.cols());
  }
  out.basis = std::move(fit.basis);
  out.weights = std::move(fit.weights);
  return out;
}

Tensor project_component(const Tensor& delta_tilde, const Vector& m) {
  if (delta_tilde.rank() != 4) throw ShapeError("project_component: expected (N, C, H, W)");
  if (delta_tilde.dim(1) != m.size()) throw ShapeError("project_component: channel count mismatch");
  if (std::abs(m.norm() - 1.0) > 1e-6) throw ConfigError("project_component: direction must have unit norm");
  ActivationBatch rows = to_pixel_rows(delta_tilde);
  const Vector coeff = rows.data * m;
  rows.data = coeff * m.transpose();
  return from_pixel_rows(rows);
}

std::vector<double> default_gammas() {
  std::vector<double> g;
  for (int i = 0; i <= 30; ++i) g.push_back(0.05 * i);
  return g;
}

InterpolationCurve interpolate(const Model& model, const std::string& layer, const Tensor& x, const Tensor& direction,
                               const std::vector<double>& gammas, int origin, int target, std::string label) {
  const Tensor base = forward_to(model, layer, x);
  if (direction.shape() != base.shape() || base.dim(0) != 1) {
    throw ShapeError("interpolate: direction must have the single-sample shape of layer '" + layer + "'");
  }
  if (gammas.empty()) throw ConfigError("interpolate: empty gamma grid");
  InterpolationCurve c;
  c.gammas = gammas;
  c.direction = std::move(label);
  for (double g : gammas) {
    const Tensor point(base.shape(), base.array() + g * direction.array());
    const Matrix p = kernels::softmax(forward_from(model, layer, point));
    c.conf_original.push_back(p(0, origin));
    c.conf_target.push_back(p(0, target));
  }
  return c;
}

Clustermap clustermap(const Matrix& concepts, const std::vector<std::string>& labels) {
  const Index n = concepts.rows();
  if (n == 0) throw ConfigError("clustermap: empty concept set");
  if (static_cast<Index>(labels.size()) != n) throw ShapeError("clustermap: label count mismatch");
  const SimilarityMatrix sim = cosine_similarity_matrix(concepts, concepts, labels, labels);

  // clusters: id -> members; ids 0..n-1 are leaves, n + t is the t-th merge
  std::map<int, std::vector<int>> active;
  std::map<int, std::pair<int, int>> children;
  for (int i = 0; i < n; ++i) active[i] = {i};
  Clustermap out;
  int next_id = static_cast<int>(n);
  while (active.size() > 1) {
    double best = std::numeric_limits<double>::infinity();
    int ba = -1, bb = -1;
    for (auto ia = active.begin(); ia != active.end(); ++ia) {
      for (auto ib = std::next(ia); ib != active.end(); ++ib) {
        double d = 0.0;
        for (int p : ia->second) {
          for (int q : ib->second) d += 1.0 - sim.values(p, q);
        }
        d /= static_cast<double>(ia->second.size() * ib->second.size());
        if (d < best) {
          best = d;
          ba = ia->first;
          bb = ib->first;
        }
      }
    }
    std::vector<int> merged = active[ba];
    merged.insert(merged.end(), active[bb].begin(), active[bb].end());
    out.linkage.push_back({static_cast<double>(ba), static_cast<double>(bb), std::max(best, 0.0),
                           static_cast<double>(merged.size())});
    children[next_id] = {ba, bb};
    active.erase(ba);
    active.erase(bb);
    active[next_id++] = std::move(merged);
  }

  // depth-first leaf order, left child first
  std::vector<int> stack{active.begin()->first};
  while (!stack.empty()) {
    const int id = stack.back();
    stack.pop_back();
    if (id < n) {
      out.order.push_back(id);
    } else {
      stack.push_back(children[id].second);
      stack.push_back(children[id].first);
    }
  }
  out.matrix.values.resize(n, n);
  for (Index i = 0; i < n; ++i) {
    out.matrix.row_labels.push_back(labels[static_cast<std::size_t>(out.order[static_cast<std::size_t>(i)])]);
    for (Index j = 0; j < n; ++j) {
      out.matrix.values(i, j) = sim.values(out.order[static_cast<std::size_t>(i)], out.order[static_cast<std::size_t>(j)]);
    }
  }
  out.matrix.col_labels = out.matrix.row_labels;
  return out;
}

TargetSpecificity target_specificity(const Matrix& concepts, const std::vector<int>& targets) {
  if (static_cast<Index>(targets.size()) != concepts.rows()) throw ShapeError("target_specificity: one target per row");
  TargetSpecificity t;
  double same = 0.0, cross = 0.0;
  for (Index i = 0; i < concepts.rows(); ++i) {
    for (Index j = i + 1; j < concepts.rows(); ++j) {
      const double s = cosine(concepts.row(i), concepts.row(j));
      if (targets[static_cast<std::size_t>(i)] == targets[static_cast<std::size_t>(j)]) {
        same += s;
        ++t.same_pairs;
      } else {
        cross += s;
        ++t.cross_pairs;
      }
    }
  }
  if (t.same_pairs) t.same_target_mean = same / static_cast<double>(t.same_pairs);
  if (t.cross_pairs) t.cross_target_mean = cross / static_cast<double>(t.cross_pairs);
  return t;
}

}  // namespace advcon
