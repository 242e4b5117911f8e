#pragma once

#include <cstdint>
#include <map>
#include <string>
#include <vector>

#include "emgps/controller.hpp"
#include "emgps/dynamics.hpp"
#include "emgps/em.hpp"
#include "emgps/mlp.hpp"
#include "emgps/policy.hpp"
#include "emgps/sim.hpp"

namespace emgps {

struct SuccessCriterion {
  Eigen::Vector2d position_center{5.0, 20.0};
  double position_rx = 0.8;
  double position_ry = 2.0;
  Eigen::Vector2d action_center{0.0, 0.0};
  double action_rx = 0.4;
  double action_ry = 1.5;

  void validate() const;
  json to_json() const;
  static SuccessCriterion from_json(const json& j);
};

struct EvalConfig {
  int n_dists = 10;
  int n_rollouts = 10;
  double radius = 1.0;  // test means drawn uniformly in this ball around s^c
};

struct ExperimentConfig {
  SimConfig sim;
  CostModel cost;
  FitConfig fit;
  int fit_samples = 50;       // rollouts per model fit (M)
  int gps_iterations = 9;     // EM-GPS iterations (I)
  int guide_samples = 10;     // supervised rollouts per condition (S)
  std::vector<InitialCondition> initial_conditions;
  double init_controller_cov = 0.1;
  double explore_cov = 1.0;   // bootstrap data-collection action noise
  ObservationTarget em_target = ObservationTarget::kUnitCost;
  MStepOptions mstep;
  InfoMatrixOptions info;
  double em_sigma_floor = 1e-8;
  double em_elite_fraction = 1.0;  // fraction of the batch averaged into the empirical y
  bool train_accumulate = true;    // keep earlier iterations' samples in the training set
  TrainOptions train;
  bool train_cold_start = false;
  CovarianceMode cov_mode = CovarianceMode::kDiagonal;
  DiagonalReading diag_reading = DiagonalReading::kEigenvalues;
  EvalConfig eval;
  SuccessCriterion success;
  std::uint64_t seed = 0;
  std::string out_dir = "out";

  void validate() const;
  json to_json() const;
  static ExperimentConfig from_json(const json& j);
  static ExperimentConfig load(const std::string& path);
};

struct RunManifest {
  std::string config_hash;
  std::uint64_t seed = 0;
  std::map<std::string, std::string> artifacts;  // stage name -> path
  double wall_seconds = 0.0;
  std::string version;
  bool complete = false;

  json to_json() const;
  static RunManifest from_json(const json& j);
};

/// One evaluated rollout of the 10x10 test protocol.
struct EvalRow {
  int dist = 0;
  int rollout = 0;
  double cost_to_go = 0.0;
  Eigen::Vector2d final_position = Eigen::Vector2d::Zero();
  Eigen::Vector2d final_action = Eigen::Vector2d::Zero();
  bool success = false;
  Trajectory trajectory;
};

bool success_test(const Trajectory& traj, const SuccessCriterion& criterion);

std::vector<EvalRow> evaluate_policy(const GlobalPolicy& policy,
                                     const ExperimentConfig& cfg,
                                     std::uint64_t eval_seed);

/// Full EM-GPS loop; persists every intermediate artifact under
/// cfg.out_dir and returns the manifest (also written to disk).
RunManifest run_pipeline(const ExperimentConfig& cfg);

/// Writes the metric exports for a set of evaluated variants.
void export_metrics(const std::map<std::string, std::vector<EvalRow>>& runs,
                    const ExperimentConfig& cfg, const std::string& out_dir);

struct ComparisonReport {
  double baseline_median_cost = 0.0;
  double em_median_cost = 0.0;
  int baseline_successes = 0;
  int em_successes = 0;
  int total_experiments = 0;
  double variance_reduced_fraction = 0.0;  // steps where EM action variance <= baseline
  Theorem1Report theorem1;

  json to_json() const;
};

/// Evaluates the i=0 snapshot against the final snapshot on the identical
/// seeded test set and writes report + metric exports.
ComparisonReport compare_variants(const ExperimentConfig& cfg,
                                  const std::string& run_dir);

std::string format_double(double v);

void write_text_file(const std::string& path, const std::string& content);
json read_json_file(const std::string& path);
void write_json_file(const std::string& path, const json& j);

}  // namespace emgps
