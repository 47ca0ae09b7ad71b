#pragma once

#include "advcon/io.hpp"
#include "advcon/model.hpp"

#include <cstdint>
#include <filesystem>
#include <string_view>
#include <vector>

namespace advcon {

enum class AttackKind { bim, pgd, cw, patch };

std::string_view to_string(AttackKind kind);
AttackKind parse_attack_kind(std::string_view name);

/// Norm ball used by the PGD projection operator.
enum class BallNorm { linf, l2 };

struct PatchLocation {
  Index row = 0;
  Index col = 0;
  Index size = 8;
};

struct AttackConfig {
  AttackKind kind = AttackKind::pgd;
  int target = 0;
  double epsilon = 0.1;  // bim / pgd radius
  double alpha = 0.01;   // bim / pgd / patch step size
  int steps = 50;
  double beta = 5.0;    // cw trade-off
  double cw_lr = 0.01;  // cw Adam step size
  PatchLocation patch;
  std::uint64_t seed = 0;
  BallNorm norm = BallNorm::linf;
  bool random_start = false;
  // bim / pgd / patch stop this many steps after the first success
  int confirm_steps = 5;

  void validate(const Model& model) const;
};

Json to_json(const AttackConfig& config);
AttackConfig attack_config_from_json(const Json& j);

struct AttackResult {
  Tensor x_adv;  // (1, C, H, W)
  Tensor delta;  // x_adv - x
  bool success = false;
  int predicted = -1;
  int steps_used = 0;
  // Target-class probability of the candidate that would be returned after
  // each step; exactly steps_used entries.
  std::vector<double> confidence_trace;
  AttackConfig config;

  double linf() const;
  double l2() const;
};

/// Elementwise clip of `delta` to [-eps, eps] (the BIM clip operator).
Tensor clip_linf(const Tensor& delta, double epsilon);

/// Projection of `delta` onto the eps-ball of the given norm.
Tensor project_ball(const Tensor& delta, double epsilon, BallNorm norm);

/// 1 inside the patch square (all channels), 0 elsewhere.
Tensor patch_mask(const Shape& image_shape, const PatchLocation& loc);

/// Basic iterative method: delta <- clip_eps(delta - alpha sign(grad J(f(x + delta), target))),
/// then clipped to the pixel box. Steps descend the target-class cross-entropy.
AttackResult bim(const Model& model, const Tensor& x, const AttackConfig& config);

/// Projected gradient descent with an explicit projection operator. For the
/// L-inf ball it produces the same iterates as bim().
AttackResult pgd(const Model& model, const Tensor& x, const AttackConfig& config);

/// PGD from an explicit initial perturbation (which may lie outside the ball).
AttackResult pgd(const Model& model, const Tensor& x, const AttackConfig& config, const Tensor& initial_delta);

/// Carlini-Wagner L2: Adam on w with x' = (tanh(w) + 1) / 2, minimising
/// ||x' - x||_2 + beta * max(max_{i != t} Z_i - Z_t, 0). Runs the full budget
/// and returns the smallest successful perturbation, or the lowest-objective
/// iterate when no step succeeded.
AttackResult cw(const Model& model, const Tensor& x, const AttackConfig& config);

/// Localised patch: pixels inside the square start from seeded uniform noise
/// and follow signed gradient ascent on log p(target); pixels outside are
/// never touched.
AttackResult patch(const Model& model, const Tensor& x, const AttackConfig& config);

AttackResult run_attack(const Model& model, const Tensor& x, const AttackConfig& config);

}  // namespace advcon
