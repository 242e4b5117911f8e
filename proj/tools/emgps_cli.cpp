// Command-line front end for the point-mass EM-GPS pipeline.
//
// Subcommands mirror the pipeline stages so any of them can be run (and
// re-run) in isolation from persisted artifacts. Errors leave a machine
// readable JSON object on stderr and a nonzero exit code.

#include <cstdio>
#include <iostream>
#include <string>

#include <CLI11.hpp>

#include "emgps/em.hpp"
#include "emgps/linalg.hpp"
#include "emgps/lqr.hpp"
#include "emgps/pipeline.hpp"

using namespace emgps;

namespace {

int fail(const std::string& kind, const std::string& message) {
  std::cerr << json{{"error", kind}, {"message", message}}.dump() << "\n";
  return 1;
}

ExperimentConfig load_config(const std::string& path, std::uint64_t seed_override,
                             bool seed_set, const std::string& out_override) {
  ExperimentConfig cfg = ExperimentConfig::load(path);
  if (seed_set) cfg.seed = seed_override;
  if (!out_override.empty()) cfg.out_dir = out_override;
  cfg.validate();
  return cfg;
}

}  // namespace

int main(int argc, char** argv) {
  CLI::App app{"point-mass EM guided policy search"};
  app.require_subcommand(1);

  std::string config_path;
  std::string out_override;
  std::uint64_t seed_override = 0;
  bool seed_set = false;
  app.add_option("--config", config_path, "experiment config JSON")->required();
  app.add_option("--out", out_override, "override the configured output directory");
  auto* seed_opt = app.add_option("--seed", seed_override, "override the configured seed");

  auto* cmd_collect = app.add_subcommand("collect", "bootstrap rollouts for one condition");
  int collect_cond = 0;
  cmd_collect->add_option("--condition", collect_cond, "initial-condition index");

  auto* cmd_fit = app.add_subcommand("fit", "fit the time-varying linear model");
  std::string fit_batch;
  cmd_fit->add_option("--batch", fit_batch, "rollout batch JSON")->required();

  auto* cmd_optimize = app.add_subcommand("optimize", "one EM pass on a controller");
  std::string opt_model, opt_controller;
  int opt_cond = 0;
  cmd_optimize->add_option("--model", opt_model, "fitted model JSON")->required();
  cmd_optimize->add_option("--controller", opt_controller, "controller JSON")->required();
  cmd_optimize->add_option("--condition", opt_cond, "initial-condition index");

  auto* cmd_pipeline = app.add_subcommand("pipeline", "full run, all artifacts persisted");

  auto* cmd_evaluate = app.add_subcommand("evaluate", "run the 10x10 test protocol");
  std::string eval_snapshot;
  cmd_evaluate->add_option("--snapshot", eval_snapshot, "global policy JSON")->required();

  auto* cmd_compare =
      app.add_subcommand("compare", "baseline-vs-refined report for a finished run");
  std::string compare_dir;
  cmd_compare->add_option("--run", compare_dir, "pipeline output directory");

  CLI11_PARSE(app, argc, argv);

  try {
    ExperimentConfig cfg =
        load_config(config_path, seed_override, seed_opt->count() > 0, out_override);

    if (*cmd_collect) {
      if (collect_cond < 0 ||
          collect_cond >= static_cast<int>(cfg.initial_conditions.size()))
        return fail("config", "condition index out of range");
      LinearGaussianPolicy hold(ControllerParams::zeros(
          cfg.sim.horizon, 4, 2, cfg.explore_cov));
      auto batch = collect_batch(hold, cfg.initial_conditions[collect_cond],
                                 cfg.fit_samples, cfg.sim, cfg.cost,
                                 Rng::derive(cfg.seed, collect_cond));
      std::cout << batch_to_json(batch).dump(2) << "\n";
      return 0;
    }
    if (*cmd_fit) {
      auto batch = batch_from_json(read_json_file(fit_batch));
      auto model = fit_model(batch, cfg.fit);
      std::cout << model.to_json().dump(2) << "\n";
      return 0;
    }
    if (*cmd_optimize) {
      if (opt_cond < 0 || opt_cond >= static_cast<int>(cfg.initial_conditions.size()))
        return fail("config", "condition index out of range");
      auto model = TimeVaryingLinearModel::from_json(read_json_file(opt_model));
      auto theta = ControllerParams::from_json(read_json_file(opt_controller));
      EmOptions em;
      em.target = cfg.em_target;
      em.prior_mean = cfg.initial_conditions[opt_cond].mean;
      em.prior_cov = cfg.initial_conditions[opt_cond].cov;
      em.mstep = cfg.mstep;
      em.info = cfg.info;
      em.sigma_floor = cfg.em_sigma_floor;
      em.cost_model = cfg.cost;
      auto result = em_optimize(model, theta, em);
      std::cout << json{{"controller", result.params.to_json()},
                        {"records_csv", em_records_csv(result.records)}}
                       .dump(2)
                << "\n";
      return 0;
    }
    if (*cmd_pipeline) {
      RunManifest manifest = run_pipeline(cfg);
      std::cout << manifest.to_json().dump(2) << "\n";
      return 0;
    }
    if (*cmd_evaluate) {
      auto policy = GlobalPolicy::from_json(read_json_file(eval_snapshot));
      auto rows = evaluate_policy(policy, cfg, Rng::derive(cfg.seed, 6));
      std::map<std::string, std::vector<EvalRow>> runs;
      runs["policy"] = std::move(rows);
      export_metrics(runs, cfg, (cfg.out_dir.empty() ? "." : cfg.out_dir));
      int successes = 0;
      for (const auto& row : runs["policy"]) successes += row.success ? 1 : 0;
      std::cout << json{{"successes", successes},
                        {"total", runs["policy"].size()}}
                       .dump(2)
                << "\n";
      return 0;
    }
    if (*cmd_compare) {
      const std::string dir = compare_dir.empty() ? cfg.out_dir : compare_dir;
      auto report = compare_variants(cfg, dir);
      std::cout << report.to_json().dump(2) << "\n";
      return 0;
    }
  } catch (const ConfigError& e) {
    return fail("config", e.what());
  } catch (const DomainError& e) {
    return fail("domain", e.what());
  } catch (const FittingError& e) {
    return fail("fitting", e.what());
  } catch (const NumericalError& e) {
    return fail("numerical", e.what());
  } catch (const std::exception& e) {
    return fail("internal", e.what());
  }
  return fail("usage", "no subcommand executed");
}
