// SPDX-License-Identifier: Apache-2.0
// Command-line front end: finetune, search, cost, ablate, export, config.
#include <CLI11.hpp>
#include <fmt/format.h>

#include <algorithm>
#include <iostream>
#include <optional>
#include <string>

#include "instatune/experiment.hpp"

using namespace instatune;

namespace {

struct Common {
  std::string config_path;
  std::string preset;
  std::optional<std::uint64_t> seed;
  std::string out;
  bool quiet = false;
};

void add_common(CLI::App* cmd, Common& c) {
  cmd->add_option("-c,--config", c.config_path, "experiment config (JSON)")
      ->check(CLI::ExistingFile);
  cmd->add_option("-p,--preset", c.preset, "search-space preset (when no --config)");
  cmd->add_option("-s,--seed", c.seed, "base seed");
  cmd->add_option("-o,--out", c.out, "output directory (default $INSTATUNE_OUT/<kind>-<preset>-s<seed>)");
  cmd->add_flag("-q,--quiet", c.quiet, "no progress lines");
}

ExperimentConfig resolve(const Common& c, ExperimentKind kind) {
  ExperimentConfig cfg = c.config_path.empty()
                             ? default_config(c.preset.empty() ? "desk" : c.preset)
                             : load_config(c.config_path);
  if (!c.config_path.empty() && !c.preset.empty() && c.preset != cfg.space.preset)
    throw std::invalid_argument("--preset " + c.preset + " conflicts with config preset " +
                                cfg.space.preset);
  cfg.kind = kind;
  if (c.seed) cfg.seed = *c.seed;
  if (!c.out.empty()) cfg.output = c.out;
  cfg.derive_seeds();
  return cfg;
}

int run(const Common& c, ExperimentConfig cfg) {
  cfg.validate();
  const auto dir = default_output_dir(cfg);
  const auto bundle = run_experiment(cfg, dir, c.quiet ? nullptr : &std::cerr);
  const auto& s = bundle.summary;
  if (s.contains("cost")) {
    std::cout << fmt::format("baseline MACs {} ({} G), params {}\n",
                             s["cost"]["baseline_macs"].get<std::uint64_t>(),
                             s["cost"]["baseline_gmacs"].get<std::string>(),
                             s["cost"]["baseline_params"].get<std::uint64_t>());
  }
  if (s.contains("front")) {
    std::cout << "accuracy  MACs        dMAC%   dAcc%  config\n";
    for (const auto& m : s["front"])
      std::cout << fmt::format("{:8.4f}  {:<10}  {:6.2f}  {:6.2f}  {}\n",
                               m["accuracy"].get<double>(), m["macs"].get<std::uint64_t>(),
                               truncate_decimals(m["delta_mac"].get<double>(), 2),
                               m["delta_acc"].get<double>(), m["encoding"].get<std::string>());
  }
  std::cout << "bundle: " << dir.string() << "\n";
  return 0;
}

}  // namespace

int main(int argc, char** argv) {
  CLI::App app{"instatune: elastic fine-tuning and multi-objective architecture search"};
  app.require_subcommand(1);

  Common common;
  auto* finetune = app.add_subcommand("finetune", "warm-up, then elastic fine-tuning");
  auto* search = app.add_subcommand("search", "fine-tune (or use the synthetic objective), then search");
  auto* cost = app.add_subcommand("cost", "MACs and parameters of the space");
  auto* ablate = app.add_subcommand("ablate", "teacher, space or epoch ablation");
  auto* exporter = app.add_subcommand("export", "regenerate plot data from a bundle");
  auto* config = app.add_subcommand("config", "print a default config");
  for (auto* cmd : {finetune, search, cost, ablate}) add_common(cmd, common);

  std::string study = "teacher";
  ablate->add_option("--study", study, "teacher | space | epochs")
      ->check(CLI::IsMember({"teacher", "space", "epochs"}));

  std::string objective;
  std::optional<std::size_t> budget;
  std::vector<std::string> algorithms;
  search->add_option("--objective", objective, "supernet | synthetic")
      ->check(CLI::IsMember({"supernet", "synthetic"}));
  search->add_option("--budget", budget, "evaluations per random / LINAS run (LINAS batch shrinks to fit)");
  search->add_option("--algorithms", algorithms, "subset of linas nsga2 random")->delimiter(',');

  std::string bundle;
  exporter->add_option("bundle", bundle, "bundle directory")->required();

  std::string config_preset = "desk", config_kind = "search";
  config->add_option("-p,--preset", config_preset, "preset");
  config->add_option("-k,--kind", config_kind, "experiment kind");

  CLI11_PARSE(app, argc, argv);

  try {
    if (*finetune) return run(common, resolve(common, ExperimentKind::finetune));
    if (*cost) return run(common, resolve(common, ExperimentKind::cost));
    if (*search) {
      auto cfg = resolve(common, ExperimentKind::search);
      if (objective == "synthetic") cfg.search.objective = Objective::synthetic;
      if (objective == "supernet") cfg.search.objective = Objective::supernet;
      if (budget) {
        cfg.search.budget = cfg.search.linas.budget = *budget;
        if (*budget < 2 * cfg.search.linas.batch)
          cfg.search.linas.batch = std::max<std::size_t>(1, *budget / 2);
      }
      if (!algorithms.empty()) cfg.search.algorithms = algorithms;
      return run(common, cfg);
    }
    if (*ablate) {
      const auto kind = study == "teacher" ? ExperimentKind::ablation_teacher
                        : study == "space" ? ExperimentKind::ablation_space
                                           : ExperimentKind::ablation_epochs;
      return run(common, resolve(common, kind));
    }
    if (*exporter) {
      for (const auto& p : emit_plot_data(bundle)) std::cout << p.string() << "\n";
      return 0;
    }
    if (*config) {
      auto cfg = default_config(config_preset);
      cfg.kind = parse_experiment_kind(config_kind);
      std::cout << to_json(cfg).dump(2) << "\n";
      return 0;
    }
  } catch (const std::invalid_argument& e) {
    std::cerr << "error: " << e.what() << "\n";
    return 2;
  } catch (const std::exception& e) {
    std::cerr << "error: " << e.what() << "\n";
    return 1;
  }
  return 0;
}
