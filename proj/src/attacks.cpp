#include "advcon/attacks.hpp"

#include "advcon/random.hpp"

#include <cmath>
#include <limits>

namespace advcon {

std::string_view to_string(AttackKind kind) {
  switch (kind) {
    case AttackKind::bim: return "bim";
    case AttackKind::pgd: return "pgd";
    case AttackKind::cw: return "cw";
    case AttackKind::patch: return "patch";
  }
  return "unknown";
}

AttackKind parse_attack_kind(std::string_view name) {
  for (auto k : {AttackKind::bim, AttackKind::pgd, AttackKind::cw, AttackKind::patch}) {
    if (to_string(k) == name) return k;
  }
  throw ConfigError("unknown attack kind '" + std::string(name) + "'");
}

void AttackConfig::validate(const Model& model) const {
  if (target < 0 || target >= model.num_classes()) throw ConfigError("attack target class out of range");
  if (steps < 1) throw ConfigError("attack steps must be >= 1");
  if (confirm_steps < 0) throw ConfigError("confirm_steps must be >= 0");
  switch (kind) {
    case AttackKind::bim:
    case AttackKind::pgd:
      if (!(epsilon >= 0.0) || !std::isfinite(epsilon)) throw ConfigError("epsilon must be >= 0");
      if (!(alpha > 0.0)) throw ConfigError("alpha must be > 0");
      if (epsilon > 0.0 && alpha > epsilon) throw ConfigError("alpha must not exceed epsilon");
      break;
    case AttackKind::cw:
      if (!(beta > 0.0)) throw ConfigError("beta must be > 0");
      if (!(cw_lr > 0.0)) throw ConfigError("cw_lr must be > 0");
      break;
    case AttackKind::patch: {
      if (!(alpha > 0.0)) throw ConfigError("alpha must be > 0");
      if (patch.size <= 0) throw ConfigError("patch region is degenerate (size 0)");
      const Shape& in = model.input_shape();
      if (patch.row < 0 || patch.col < 0 || patch.row + patch.size > in[1] || patch.col + patch.size > in[2]) {
        throw ConfigError("patch region exceeds image bounds");
      }
      break;
    }
  }
}

Json to_json(const AttackConfig& c) {
  return Json{{"kind", to_string(c.kind)},
              {"target", c.target},
              {"epsilon", c.epsilon},
              {"alpha", c.alpha},
              {"steps", c.steps},
              {"beta", c.beta},
              {"cw_lr", c.cw_lr},
              {"patch", {{"row", c.patch.row}, {"col", c.patch.col}, {"size", c.patch.size}}},
              {"seed", c.seed},
              {"norm", c.norm == BallNorm::linf ? "linf" : "l2"},
              {"random_start", c.random_start},
              {"confirm_steps", c.confirm_steps}};
}

AttackConfig attack_config_from_json(const Json& j) {
  AttackConfig c;
  try {
    c.kind = parse_attack_kind(j.at("kind").get<std::string>());
    c.target = j.value("target", c.target);
    c.epsilon = j.value("epsilon", c.epsilon);
    c.alpha = j.value("alpha", c.alpha);
    c.steps = j.value("steps", c.steps);
    c.beta = j.value("beta", c.beta);
    c.cw_lr = j.value("cw_lr", c.cw_lr);
    if (j.contains("patch")) {
      const auto& p = j.at("patch");
      c.patch = {p.value("row", Index{0}), p.value("col", Index{0}), p.value("size", Index{8})};
    }
    c.seed = j.value("seed", c.seed);
    const std::string norm = j.value("norm", std::string("linf"));
    if (norm != "linf" && norm != "l2") throw ConfigError("norm must be linf or l2");
    c.norm = norm == "linf" ? BallNorm::linf : BallNorm::l2;
    c.random_start = j.value("random_start", c.random_start);
    c.confirm_steps = j.value("confirm_steps", c.confirm_steps);
  } catch (const nlohmann::json::exception& e) {
    throw ConfigError(std::string("attack config: ") + e.what());
  }
  return c;
}

double AttackResult::linf() const { return delta.empty() ? 0.0 : delta.array().abs().maxCoeff(); }
double AttackResult::l2() const { return std::sqrt(delta.array().square().sum()); }

Tensor clip_linf(const Tensor& delta, double epsilon) {
  return Tensor(delta.shape(), delta.array().min(epsilon).max(-epsilon));
}

Tensor project_ball(const Tensor& delta, double epsilon, BallNorm norm) {
  if (norm == BallNorm::linf) return clip_linf(delta, epsilon);
  const double n = std::sqrt(delta.array().square().sum());
  if (n <= epsilon) return delta;
  return Tensor(delta.shape(), delta.array() * (epsilon / n));
}

Tensor patch_mask(const Shape& image_shape, const PatchLocation& loc) {
  Tensor mask(image_shape);
  const Index c = image_shape[1], h = image_shape[2], w = image_shape[3];
  for (Index n = 0; n < image_shape[0]; ++n) {
    for (Index k = 0; k < c; ++k) {
      for (Index r = loc.row; r < std::min(h, loc.row + loc.size); ++r) {
        for (Index q = loc.col; q < std::min(w, loc.col + loc.size); ++q) mask[((n * c + k) * h + r) * w + q] = 1.0;
      }
    }
  }
  return mask;
}

namespace {

struct Probe {
  Tensor grad;
  double target_prob = 0.0;
  int predicted = -1;
};

// Gradient of the target-class cross-entropy together with the prediction at x.
Probe target_loss_probe(const Model& model, const Tensor& x, int target) {
  auto g = grad_input(model, x, [target](const RowMatrix& z, RowMatrix& dz) {
    const double m = z.row(0).maxCoeff();
    const Eigen::RowVectorXd e = (z.row(0).array() - m).exp().matrix();
    const double s = e.sum();
    dz.row(0) = e / s;
    dz(0, target) -= 1.0;
    return m + std::log(s) - z(0, target);
  });
  Probe p;
  p.grad = std::move(g.grad);
  const double m = g.logits.row(0).maxCoeff();
  const Eigen::RowVectorXd e = (g.logits.row(0).array() - m).exp().matrix();
  p.target_prob = e(target) / e.sum();
  Index arg = 0;
  g.logits.row(0).maxCoeff(&arg);
  p.predicted = static_cast<int>(arg);
  return p;
}

double target_probability(const Model& model, const Tensor& x, int target, int* predicted) {
  const Matrix p = predict_proba(model, x);
  Index arg = 0;
  p.row(0).maxCoeff(&arg);
  if (predicted) *predicted = static_cast<int>(arg);
  return p(0, target);
}

void require_image(const Model& model, const Tensor& x) {
  const Shape& in = model.input_shape();
  if (x.rank() != 4 || x.dim(0) != 1 || x.dim(1) != in[0] || x.dim(2) != in[1] || x.dim(3) != in[2]) {
    throw ShapeError("attack input must be a single image of shape (1, " + std::to_string(in[0]) + ", " +
                     std::to_string(in[1]) + ", " + std::to_string(in[2]) + "), got " + shape_string(x.shape()));
  }
  if (!x.all_finite() || x.array().minCoeff() < 0.0 || x.array().maxCoeff() > 1.0) {
    throw ConfigError("attack input pixels must lie in [0, 1]");
  }
}

// delta restricted so that x + delta stays inside the pixel box.
void clamp_to_box(const Tensor& x, Tensor& delta) {
  delta.array() = delta.array().max(-x.array()).min(1.0 - x.array());
}

Tensor compose(const Tensor& x, const Tensor& delta) {
  return Tensor(x.shape(), (x.array() + delta.array()).max(0.0).min(1.0));
}

Tensor sign_of(const Tensor& g) { return Tensor(g.shape(), g.array().sign()); }

enum class BallOp { clip, project };

AttackResult iterative_linf(const Model& model, const Tensor& x, const AttackConfig& config, Tensor delta,
                            BallOp op) {
  const auto apply_ball = [&](const Tensor& d) {
    return op == BallOp::clip ? clip_linf(d, config.epsilon) : project_ball(d, config.epsilon, config.norm);
  };
  AttackResult r;
  r.config = config;
  int first_success = -1;
  for (int t = 0; t < config.steps; ++t) {
    const Probe p = target_loss_probe(model, compose(x, delta), config.target);
    Tensor step;
    if (op == BallOp::project && config.norm == BallNorm::l2) {
      const double n = std::sqrt(p.grad.array().square().sum());
      step = Tensor(p.grad.shape(), n > 0.0 ? Eigen::ArrayXd(p.grad.array() / n) : Eigen::ArrayXd(p.grad.array() * 0.0));
    } else {
      step = sign_of(p.grad);
    }
    delta = apply_ball(Tensor(delta.shape(), delta.array() - config.alpha * step.array()));
    clamp_to_box(x, delta);

    int predicted = -1;
    r.confidence_trace.push_back(target_probability(model, compose(x, delta), config.target, &predicted));
    r.steps_used = t + 1;
    if (predicted == config.target && first_success < 0) first_success = t;
    if (first_success >= 0 && t - first_success >= config.confirm_steps) break;
  }
  r.delta = std::move(delta);
  r.x_adv = compose(x, r.delta);
  target_probability(model, r.x_adv, config.target, &r.predicted);
  r.success = r.predicted == config.target;
  return r;
}

Tensor initial_delta(const Tensor& x, const AttackConfig& config) {
  Tensor delta(x.shape());
  if (config.random_start) {
    Rng rng(config.seed);
    for (Index i = 0; i < delta.size(); ++i) delta[i] = rng.uniform(-config.epsilon, config.epsilon);
    clamp_to_box(x, delta);
  }
  return delta;
}

}  // namespace

AttackResult bim(const Model& model, const Tensor& x, const AttackConfig& config) {
  if (config.kind != AttackKind::bim) throw ConfigError("bim: config.kind must be bim");
  config.validate(model);
  require_image(model, x);
  return iterative_linf(model, x, config, initial_delta(x, config), BallOp::clip);
}

AttackResult pgd(const Model& model, const Tensor& x, const AttackConfig& config) {
  if (config.kind != AttackKind::pgd) throw ConfigError("pgd: config.kind must be pgd");
  config.validate(model);
  require_image(model, x);
  return iterative_linf(model, x, config, initial_delta(x, config), BallOp::project);
}

AttackResult pgd(const Model& model, const Tensor& x, const AttackConfig& config, const Tensor& start) {
  if (config.kind != AttackKind::pgd) throw ConfigError("pgd: config.kind must be pgd");
  config.validate(model);
  require_image(model, x);
  if (start.shape() != x.shape()) throw ShapeError("pgd: initial perturbation shape mismatch");
  return iterative_linf(model, x, config, start, BallOp::project);
}

AttackResult cw(const Model& model, const Tensor& x, const AttackConfig& config) {
  if (config.kind != AttackKind::cw) throw ConfigError("cw: config.kind must be cw");
  config.validate(model);
  require_image(model, x);
  const int target = config.target;
  const Index n = x.size();

  const auto margin_loss = [target](const RowMatrix& z, RowMatrix& dz) {
    double best_other = -std::numeric_limits<double>::infinity();
    Index arg = -1;
    for (Index i = 0; i < z.cols(); ++i) {
      if (i != target && z(0, i) > best_other) {
        best_other = z(0, i);
        arg = i;
      }
    }
    const double h = best_other - z(0, target);
    if (h <= 0.0) return 0.0;
    dz(0, arg) = 1.0;
    dz(0, target) = -1.0;
    return h;
  };

  struct Candidate {
    Tensor x_adv;
    double norm = 0.0;
    double objective = 0.0;
    double target_prob = 0.0;
  };

  Candidate best_success, best_objective;
  bool have_success = false;
  {
    // the unperturbed image is a candidate with delta = 0 exactly
    auto g = grad_input(model, x, margin_loss);
    int predicted = -1;
    const double prob = target_probability(model, x, target, &predicted);
    best_objective = {x, 0.0, config.beta * g.loss, prob};
    if (predicted == target) {
      best_success = best_objective;
      have_success = true;
    }
  }

  Eigen::ArrayXd w = (2.0 * x.array() - 1.0).max(-1.0 + 1e-6).min(1.0 - 1e-6).atanh();
  Eigen::ArrayXd m1 = Eigen::ArrayXd::Zero(n), m2 = Eigen::ArrayXd::Zero(n);
  constexpr double b1 = 0.9, b2 = 0.999, eps = 1e-8;

  AttackResult r;
  r.config = config;
  for (int t = 0; t < config.steps; ++t) {
    const Eigen::ArrayXd th = w.tanh();
    Tensor x_prime(x.shape(), (th + 1.0) * 0.5);
    const Eigen::ArrayXd d = x_prime.array() - x.array();
    const double norm = std::sqrt(d.square().sum());

    auto g = grad_input(model, x_prime, margin_loss);
    const double objective = norm + config.beta * g.loss;
    Index arg = 0;
    g.logits.row(0).maxCoeff(&arg);
    const double m = g.logits.row(0).maxCoeff();
    const Eigen::RowVectorXd e = (g.logits.row(0).array() - m).exp().matrix();
    const double prob = e(target) / e.sum();

    if (arg == target && (!have_success || norm < best_success.norm)) {
      best_success = {x_prime, norm, objective, prob};
      have_success = true;
    }
    if (objective < best_objective.objective) best_objective = {x_prime, norm, objective, prob};

    Eigen::ArrayXd grad_x = config.beta * g.grad.array();
    if (norm > 0.0) grad_x += d / norm;
    const Eigen::ArrayXd grad_w = grad_x * (1.0 - th.square()) * 0.5;
    m1 = b1 * m1 + (1.0 - b1) * grad_w;
    m2 = b2 * m2 + (1.0 - b2) * grad_w.square();
    const double c1 = 1.0 - std::pow(b1, t + 1), c2 = 1.0 - std::pow(b2, t + 1);
    w -= config.cw_lr * (m1 / c1) / ((m2 / c2).sqrt() + eps);

    r.confidence_trace.push_back(have_success ? best_success.target_prob : best_objective.target_prob);
    r.steps_used = t + 1;
  }

  const Candidate& chosen = have_success ? best_success : best_objective;
  r.x_adv = chosen.x_adv;
  r.delta = Tensor(x.shape(), r.x_adv.array() - x.array());
  target_probability(model, r.x_adv, target, &r.predicted);
  r.success = r.predicted == target;
  return r;
}

AttackResult patch(const Model& model, const Tensor& x, const AttackConfig& config) {
  if (config.kind != AttackKind::patch) throw ConfigError("patch: config.kind must be patch");
  config.validate(model);
  require_image(model, x);
  const Tensor mask = patch_mask(x.shape(), config.patch);

  Tensor current = x;
  Rng rng(config.seed);
  for (Index i = 0; i < current.size(); ++i) {
    if (mask[i] != 0.0) current[i] = rng.uniform();
  }

  AttackResult r;
  r.config = config;
  int first_success = -1;
  for (int t = 0; t < config.steps; ++t) {
    const Probe p = target_loss_probe(model, current, config.target);
    for (Index i = 0; i < current.size(); ++i) {
      if (mask[i] == 0.0) continue;
      const double s = p.grad[i] > 0.0 ? 1.0 : (p.grad[i] < 0.0 ? -1.0 : 0.0);
      current[i] = std::clamp(current[i] - config.alpha * s, 0.0, 1.0);
    }
    int predicted = -1;
    r.confidence_trace.push_back(target_probability(model, current, config.target, &predicted));
    r.steps_used = t + 1;
    if (predicted == config.target && first_success < 0) first_success = t;
    if (first_success >= 0 && t - first_success >= config.confirm_steps) break;
  }
  r.x_adv = current;
  r.delta = Tensor(x.shape());
  for (Index i = 0; i < x.size(); ++i) {
    if (mask[i] != 0.0) r.delta[i] = current[i] - x[i];
  }
  target_probability(model, r.x_adv, config.target, &r.predicted);
  r.success = r.predicted == config.target;
  return r;
}

AttackResult run_attack(const Model& model, const Tensor& x, const AttackConfig& config) {
  switch (config.kind) {
    case AttackKind::bim: return bim(model, x, config);
    case AttackKind::pgd: return pgd(model, x, config);
    case AttackKind::cw: return cw(model, x, config);
    case AttackKind::patch: return patch(model, x, config);
  }
  throw ConfigError("unsupported attack kind");
}

}  // namespace advcon
