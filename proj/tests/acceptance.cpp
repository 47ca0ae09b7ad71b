// Runs the pinned desk-scale protocol twice and prints one PASS/FAIL line per
// acceptance criterion. Exit status is non-zero if any criterion fails.

#include "advcon/anatomy.hpp"
#include "advcon/linalg.hpp"
#include "advcon/pipeline.hpp"
#include "oracles.hpp"

#include <Eigen/Eigenvalues>

#include <chrono>
#include <cstdio>
#include <filesystem>
#include <iostream>
#include <map>
#include <sstream>

using namespace advcon;
namespace fs = std::filesystem;
using Clock = std::chrono::steady_clock;

namespace {

struct Outcome {
  int id;
  bool pass;
  std::string what;
  std::string detail;
};

std::vector<Outcome> outcomes;

void record(int id, bool pass, std::string what, std::string detail) {
  outcomes.push_back({id, pass, std::move(what), std::move(detail)});
  std::printf("  criterion %d evaluated: %s\n", id, pass ? "pass" : "FAIL");
  std::fflush(stdout);
}

double seconds_since(Clock::time_point t0) { return std::chrono::duration<double>(Clock::now() - t0).count(); }

std::string num(double v) {
  std::ostringstream s;
  s.precision(4);
  s << v;
  return s.str();
}

struct StageTimes {
  std::map<std::string, double> seconds;
};

StageTimes run_pipeline(const ExperimentConfig& config) {
  StageTimes t;
  auto timed = [&](const std::string& name, auto&& fn) {
    const auto t0 = Clock::now();
    fn();
    t.seconds[name] = seconds_since(t0);
    std::printf("  %-8s %8.1f s\n", name.c_str(), t.seconds[name]);
    std::fflush(stdout);
  };
  timed("train", [&] { run_train(config); });
  timed("attack", [&] { run_attack(config); });
  timed("layers", [&] { run_dissect(config, DissectStage::layers); });
  timed("mine", [&] { run_dissect(config, DissectStage::mine); });
  timed("anatomy", [&] { run_dissect(config, DissectStage::anatomy); });
  timed("report", [&] { run_report(config); });
  return t;
}

std::map<std::string, std::string> snapshot(const fs::path& root) {
  std::map<std::string, std::string> files;
  for (const auto& e : fs::recursive_directory_iterator(root)) {
    if (e.is_regular_file()) files[fs::relative(e.path(), root).generic_string()] = read_text(e.path());
  }
  return files;
}

void gradient_correctness() {
  const auto t0 = Clock::now();
  Rng rng(20240601);
  double worst = 0.0;
  std::map<std::string, int> kinds;
  for (int trial = 0; trial < 100; ++trial) {
    Model model = oracle::random_model(rng, trial);
    for (const auto& l : model.layers()) ++kinds[std::string(to_string(l.spec.kind))];
    const Shape& in = model.input_shape();
    const Tensor x = oracle::random_tensor({2, in[0], in[1], in[2]}, rng);
    const auto classes = static_cast<std::uint64_t>(model.num_classes());
    const std::vector<int> labels{static_cast<int>(rng.below(classes)), static_cast<int>(rng.below(classes))};
    const auto r = oracle::check_gradients(model, x, labels);
    worst = std::max({worst, r.input_error, r.param_error});
  }
  const double secs = seconds_since(t0);
  record(1, worst <= 1e-3 && secs < 60.0 && kinds.size() == 6, "autodiff matches central differences",
         "100 random networks covering " + std::to_string(kinds.size()) + " layer kinds, worst relative error " +
             num(worst) + ", " + num(secs) + " s");
}

void split_identity() {
  Rng rng(7);
  const Model model({3, 32, 32}, toy_cnn_layers(8), 42);
  double worst = 0.0;
  for (int trial = 0; trial < 100; ++trial) {
    const Tensor x = oracle::random_tensor({1, 3, 32, 32}, rng, 0.0, 1.0);
    const Tensor full = forward(model, x);
    for (const auto& name : model.layer_names()) {
      worst = std::max(worst, max_abs_diff(forward_from(model, name, forward_to(model, name, x)), full));
    }
  }
  record(2, worst <= 1e-12, "forward_from(forward_to(x)) == forward(x) at every layer",
         "100 inputs x " + std::to_string(model.layers().size()) + " cuts, worst difference " + num(worst));
}

void decomposition_oracles() {
  Rng rng(11);
  double pca_worst = 0.0;
  for (int trial = 0; trial < 20; ++trial) {
    const Index c = 4 + static_cast<Index>(rng.below(13));
    const Matrix a = oracle::random_matrix(200 + static_cast<Index>(rng.below(300)), c, rng);
    ActivationBatch batch;
    batch.data = a;
    batch.batch = 1;
    batch.height = a.rows();
    batch.width = 1;
    batch.channels = c;
    const auto basis = pca_fit(batch, c);
    const Matrix centered = a.rowwise() - a.colwise().mean();
    Eigen::SelfAdjointEigenSolver<Matrix> es(centered.transpose() * centered / static_cast<double>(a.rows() - 1));
    for (Index i = 0; i < c; ++i) {
      const Index o = c - 1 - i;
      pca_worst = std::max(pca_worst, std::abs(basis.explained_variance(i) - es.eigenvalues()(o)));
      pca_worst = std::max(pca_worst, std::abs(std::abs(basis.components.row(i).dot(es.eigenvectors().col(o))) - 1.0));
    }
  }
  bool monotone = true;
  for (int trial = 0; trial < 5; ++trial) {
    NmfOptions opt;
    opt.tol = 0.0;
    opt.max_iters = 300;
    opt.seed = static_cast<std::uint64_t>(trial);
    const auto fit = nmf_fit(oracle::random_matrix(200, 32, rng, 0.0, 1.0), 5, opt);
    const auto& h = fit.basis.objective_history;
    for (std::size_t i = 1; i < h.size(); ++i) monotone = monotone && h[i] <= h[i - 1];
  }
  double rank1_worst = 0.0;
  for (int trial = 0; trial < 5; ++trial) {
    const Vector w = oracle::random_matrix(150, 1, rng, 0.05, 1.0);
    const Vector m = oracle::random_matrix(16, 1, rng, 0.05, 1.0);
    const Matrix a = w * m.transpose();
    rank1_worst = std::max(rank1_worst, nmf_fit(a, 1).basis.reconstruction_error / a.norm());
  }
  record(6, pca_worst <= 1e-8 && monotone && rank1_worst <= 1e-3, "pca and nmf agree with their oracles",
         "pca worst eigen deviation " + num(pca_worst) + " over 20 matrices; nmf objective " +
             (monotone ? "non-increasing" : "INCREASED") + " on 5 runs; rank-1 relative error " + num(rank1_worst));
}

void matching_optimality() {
  Rng rng(13);
  int agree = 0;
  for (int trial = 0; trial < 50; ++trial) {
    const Index k = 1 + static_cast<Index>(trial % 6);
    const Matrix s = oracle::random_matrix(k, k, rng);
    const double best = oracle::brute_force_best_trace(s);
    agree += std::abs(match_concepts(s).trace - best) <= 1e-12;
  }
  record(7, agree == 50, "hungarian assignment equals brute force", std::to_string(agree) + "/50 matrices, k = 1..6");
}

void attack_contracts(const ExperimentConfig& config) {
  const Json manifest = read_json(stage_dir(config, "attack") / "manifest.json");
  std::map<AttackKind, AttackConfig> by_kind;
  for (const auto& a : config.grid.attacks) by_kind[a.kind] = a;
  std::size_t checked = 0, ok = 0, patches = 0, patch_ok = 0;
  for (const auto& g : manifest.at("groups")) {
    const AttackKind kind = parse_attack_kind(g.at("kind").get<std::string>());
    for (const auto& s : g.at("samples")) {
      const auto t = load_tensors(stage_dir(config, "attack") / s.at("file").get<std::string>());
      const Tensor& x = t[0];
      const Tensor& adv = t[1];
      const bool box = adv.array().minCoeff() >= 0.0 && adv.array().maxCoeff() <= 1.0;
      if (kind == AttackKind::bim || kind == AttackKind::pgd) {
        ++checked;
        ok += box && (adv.array() - x.array()).abs().maxCoeff() <= by_kind[kind].epsilon + 1e-9;
      } else if (kind == AttackKind::patch) {
        ++patches;
        const Tensor mask = patch_mask(x.shape(), by_kind[kind].patch);
        patch_ok += box && ((adv.array() - x.array()) * (1.0 - mask.array())).abs().maxCoeff() == 0.0;
      }
    }
  }
  record(3, checked > 0 && ok == checked && patches > 0 && patch_ok == patches, "attack contracts",
         std::to_string(ok) + "/" + std::to_string(checked) + " bim/pgd results inside ball and box, " +
             std::to_string(patch_ok) + "/" + std::to_string(patches) + " patch results zero outside the mask");
}

void attack_strength(const ExperimentConfig& config, const StageTimes& times) {
  const Json metrics = read_json(stage_dir(config, "train") / "metrics.json");
  const Json manifest = read_json(stage_dir(config, "attack") / "manifest.json");
  const double acc = metrics.at("test_accuracy").get<double>();
  const double rate = manifest.at("kinds").at("pgd").at("success_rate").get<double>();
  const double secs = times.seconds.at("attack");
  record(4, acc >= 0.90 && rate >= 0.80 && secs < 600.0, "targeted pgd success over the full grid",
         "clean test accuracy " + num(acc) + ", pgd success " + num(rate) + " over " +
             std::to_string(config.grid.resolved_pairs().size()) + " pairs; attack stage (all kinds) " + num(secs) +
             " s");
}

void snowball(const ExperimentConfig& config) {
  const Json layers = read_json(stage_dir(config, "layers") / "summary.json");
  bool pass = true;
  std::string detail;
  for (const std::string kind : {"bim", "pgd", "cw"}) {
    const auto& m = layers.at("kinds").at(kind).at("mean_cosine");
    const double first = m.front().get<double>(), last = m.back().get<double>();
    pass = pass && last < first;
    detail += kind + " " + num(first) + " -> " + num(last) + "; ";
  }
  record(5, pass, "similarity drops from the shallowest to the deepest layer", detail);
}

void concept_changes(const ExperimentConfig& config) {
  const Json mine = read_json(stage_dir(config, "mine") / "summary.json");
  const auto at50 = [&](const std::string& kind) {
    return mine.at("kinds").at(kind).at("changes").at("50").at("mean").get<double>();
  };
  const double bim = at50("bim"), pgd = at50("pgd"), cw = at50("cw");
  record(8, pgd > cw && bim > cw, "cw changes fewer concepts than pgd/bim",
         "mean changes at IoU 50: bim " + num(bim) + ", pgd " + num(pgd) + ", cw " + num(cw));
}

void concentration(const ExperimentConfig& config) {
  const Json anatomy = read_json(stage_dir(config, "anatomy") / "summary.json");
  const auto& vp = anatomy.at("kinds").at("pgd").at("variance_profile");
  const auto levels = vp.at("levels").get<std::vector<double>>();
  const auto pct = vp.at("component_percent_mean").get<std::vector<double>>();
  const auto at = [&](double level) {
    for (std::size_t i = 0; i < levels.size(); ++i) {
      if (std::abs(levels[i] - level) < 1e-12) return pct[i];
    }
    throw InvariantError("variance level missing from the anatomy summary");
  };
  const double p50 = at(0.5), p90 = at(0.9), p99 = at(0.99);
  std::string detail = "pgd component percent per level:";
  for (std::size_t i = 0; i < levels.size(); ++i) detail += " " + num(100 * levels[i]) + "%:" + num(pct[i]);
  record(9, p50 < p90 && p90 < p99 && p50 <= 30.0, "perturbation variance concentrates in few components", detail);
}

void interpolation(const ExperimentConfig& config) {
  const Json anatomy = read_json(stage_dir(config, "anatomy") / "summary.json");
  const auto& pgd = anatomy.at("kinds").at("pgd").at("interpolation");
  const double frac = pgd.at("component_helps_fraction").get<double>();
  const double err = anatomy.at("max_endpoint_error").get<double>();
  std::size_t successful = 0;
  for (const auto& [kind, v] : anatomy.at("kinds").items()) successful += v.at("successful_samples").get<std::size_t>();
  const auto endpoints = anatomy.at("endpoint_samples").get<std::size_t>();
  record(10, frac >= 0.6 && err <= 1e-9 && endpoints == successful, "nmf components push toward the target",
         "fraction of pgd samples with a helpful component " + num(frac) + " over " + std::to_string(pgd.at("samples").get<int>()) +
             "; endpoint error " + num(err) + " over " + std::to_string(endpoints) + "/" + std::to_string(successful) +
             " samples");
}

void target_specificity_check(const ExperimentConfig& config) {
  const Json anatomy = read_json(stage_dir(config, "anatomy") / "summary.json");
  const auto& ts = anatomy.at("target_specificity");
  const double same = ts.at("same_target_mean_cosine").get<double>();
  const double cross = ts.at("cross_target_mean_cosine").get<double>();
  const int targets = ts.at("targets").get<int>(), origins = ts.at("origins").get<int>();
  record(11, same > cross && targets >= 3 && origins >= 3, "perturbation concepts are target specific",
         "same-target cosine " + num(same) + " vs cross-target " + num(cross) + " (" + std::to_string(targets) +
             " targets, " + std::to_string(origins) + " origins)");
}

void determinism(const fs::path& a, const fs::path& b) {
  const auto sa = snapshot(a), sb = snapshot(b);
  std::size_t differ = 0;
  for (const auto& [name, bytes] : sa) {
    const auto it = sb.find(name);
    differ += it == sb.end() || it->second != bytes;
  }
  differ += sb.size() > sa.size() ? sb.size() - sa.size() : 0;
  const bool reports = sa.count("report/summary.json") && sa.at("report/summary.json") == sb.at("report/summary.json");
  record(12, differ == 0 && reports, "identical reruns are byte-identical",
         std::to_string(sa.size()) + " files compared, " + std::to_string(differ) + " differ");
}

}  // namespace

int main() {
  std::printf("unit-level criteria\n");
  gradient_correctness();
  split_identity();
  decomposition_oracles();
  matching_optimality();

  const fs::path root = fs::temp_directory_path() / "advcon_acceptance";
  fs::remove_all(root);
  ExperimentConfig first = default_config();
  first.output_dir = root / "run_a";
  ExperimentConfig second = first;
  second.output_dir = root / "run_b";

  std::printf("pipeline run a (%d workers)\n", worker_count());
  try {
    const StageTimes times = run_pipeline(first);
    attack_contracts(first);
    attack_strength(first, times);
    snowball(first);
    concept_changes(first);
    concentration(first);
    interpolation(first);
    target_specificity_check(first);
    std::printf("pipeline run b\n");
    run_pipeline(second);
    determinism(first.output_dir, second.output_dir);
  } catch (const std::exception& e) {
    std::printf("pipeline error: %s\n", e.what());
  }

  std::sort(outcomes.begin(), outcomes.end(), [](const Outcome& x, const Outcome& y) { return x.id < y.id; });
  std::printf("\nacceptance summary\n");
  int failed = 0;
  for (int id = 1; id <= 12; ++id) {
    const auto it = std::find_if(outcomes.begin(), outcomes.end(), [id](const Outcome& o) { return o.id == id; });
    if (it == outcomes.end()) {
      std::printf("FAIL %2d  not evaluated\n", id);
      ++failed;
      continue;
    }
    std::printf("%s %2d  %s: %s\n", it->pass ? "PASS" : "FAIL", id, it->what.c_str(), it->detail.c_str());
    failed += !it->pass;
  }
  std::printf("%d of 12 criteria passed\n", 12 - failed);
  return failed == 0 ? 0 : 1;
}
