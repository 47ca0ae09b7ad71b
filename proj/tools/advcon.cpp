#include "advcon/pipeline.hpp"

#include <CLI11.hpp>

#include <iostream>

namespace {

enum Exit { ok = 0, config_error = 2, invariant_violation = 3 };

}  // namespace

int main(int argc, char** argv) {
  CLI::App app{"Adversarial concept dissection toolkit"};
  app.require_subcommand(1);

  std::string config_path;
  std::string output_dir;
  std::string stage;
  const auto common = [&](CLI::App* cmd) {
    cmd->add_option("-c,--config", config_path, "experiment config (JSON); defaults when omitted");
    cmd->add_option("-o,--output-dir", output_dir, "override the config's output_dir");
  };
  auto* train = app.add_subcommand("train", "train the model and record clean accuracy");
  auto* attack = app.add_subcommand("attack", "run the origin x target x kind attack grid");
  auto* dissect = app.add_subcommand("dissect", "layer profiles, concept mining or perturbation anatomy");
  auto* report = app.add_subcommand("report", "aggregate stage outputs into one summary");
  auto* show = app.add_subcommand("show-config", "print the effective configuration");
  for (auto* cmd : {train, attack, dissect, report, show}) common(cmd);
  dissect->add_option("--stage", stage, "layers | mine | anatomy")
      ->required()
      ->check(CLI::IsMember({"layers", "mine", "anatomy"}));

  try {
    app.parse(argc, argv);
  } catch (const CLI::ParseError& e) {
    const int code = app.exit(e);
    return code == 0 ? ok : config_error;
  }

  try {
    advcon::ExperimentConfig config =
        config_path.empty() ? advcon::default_config() : advcon::load_config(config_path);
    if (!output_dir.empty()) config.output_dir = output_dir;
    config.validate();

    if (*show) {
      std::cout << advcon::to_json(config).dump(2) << "\n";
    } else if (*train) {
      advcon::run_train(config);
      const auto m = advcon::read_json(advcon::stage_dir(config, "train") / "metrics.json");
      std::cout << "test accuracy " << m.at("test_accuracy").get<double>() << "\n";
      if (m.at("test_accuracy").get<double>() < config.min_accuracy) {
        std::cerr << "warning: accuracy below " << config.min_accuracy << "; the attack stage will refuse to run\n";
      }
    } else if (*attack) {
      advcon::run_attack(config);
    } else if (*dissect) {
      advcon::run_dissect(config, advcon::parse_dissect_stage(stage));
    } else if (*report) {
      advcon::run_report(config);
      std::cout << (advcon::stage_dir(config, "report") / "summary.json").string() << "\n";
    }
  } catch (const advcon::ConfigError& e) {
    std::cerr << "config error: " << e.what() << "\n";
    return config_error;
  } catch (const advcon::IoError& e) {
    std::cerr << "input error: " << e.what() << "\n";
    return config_error;
  } catch (const advcon::Error& e) {
    std::cerr << "invariant violation: " << e.what() << "\n";
    return invariant_violation;
  } catch (const std::exception& e) {
    std::cerr << "error: " << e.what() << "\n";
    return invariant_violation;
  }
  return ok;
}
