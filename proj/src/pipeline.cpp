#include "emgps/pipeline.hpp"

#include <algorithm>
#include <chrono>
#include <cmath>
#include <cstdio>
#include <filesystem>
#include <fstream>
#include <memory>
#include <sstream>

#include "emgps/linalg.hpp"
#include "emgps/lqr.hpp"

namespace fs = std::filesystem;

namespace emgps {
namespace {

constexpr const char* kVersion = "emgps 1.0";

// Seed stream tags; every consumer of randomness gets its own lane so
// reordering stages never shifts another stage's draws.
enum SeedStage : std::uint64_t {
  kSeedBootstrap = 1,
  kSeedCollect = 2,
  kSeedGuide = 3,
  kSeedTrain = 4,
  kSeedGmm = 5,
  kSeedEval = 6,
  kSeedNetInit = 7,
};

std::uint64_t stage_seed(std::uint64_t master, std::uint64_t stage,
                         std::uint64_t i, std::uint64_t c) {
  return Rng::derive(Rng::derive(Rng::derive(master, stage), i), c);
}

std::string join(const std::string& dir, const std::string& name) {
  return (fs::path(dir) / name).string();
}

/// Open-loop exploration law for the bootstrap batch: hold the nominal
/// action and inject isotropic noise.
class ExplorationPolicy final : public Policy {
 public:
  ExplorationPolicy(const Eigen::Vector2d& nominal, double cov)
      : nominal_(nominal), scale_(std::sqrt(cov)) {}
  Eigen::Vector2d mean(int, const Eigen::Vector4d&) const override { return nominal_; }
  Eigen::Vector2d sample(int k, const Eigen::Vector4d& observed, Rng& rng) const override {
    return mean(k, observed) + scale_ * rng.gaussian_vec(2);
  }

 private:
  Eigen::Vector2d nominal_;
  double scale_;
};

// Per-step mean of the cost observations over the best `elite_fraction` of
// the batch (by cost-to-go). Averaging over the whole batch makes the
// current controller a fixed point of the likelihood; the elite mean is an
// attainable target that still pulls the controller forward.
std::vector<double> elite_cost_observations(const std::vector<Trajectory>& batch,
                                            double elite_fraction) {
  std::vector<std::size_t> order(batch.size());
  for (std::size_t m = 0; m < batch.size(); ++m) order[m] = m;
  std::sort(order.begin(), order.end(), [&](std::size_t a, std::size_t b) {
    return batch[a].cost_to_go() < batch[b].cost_to_go();
  });
  const std::size_t n_elite = std::max<std::size_t>(
      1, static_cast<std::size_t>(elite_fraction * static_cast<double>(batch.size())));
  const int horizon = batch.front().horizon();
  std::vector<double> out(horizon, 0.0);
  for (std::size_t r = 0; r < n_elite; ++r)
    for (int k = 0; k < horizon; ++k)
      out[k] += batch[order[r]].cost_observations[k];
  for (double& v : out) v /= static_cast<double>(n_elite);
  return out;
}

double mean_cost_to_go(const std::vector<Trajectory>& batch) {
  double sum = 0.0;
  for (const auto& traj : batch) sum += traj.cost_to_go();
  return sum / static_cast<double>(batch.size());
}

std::uint64_t fnv1a(const std::string& s) {
  std::uint64_t h = 0xcbf29ce484222325ull;
  for (unsigned char ch : s) {
    h ^= ch;
    h *= 0x100000001b3ull;
  }
  return h;
}

double median(std::vector<double> v) {
  std::sort(v.begin(), v.end());
  const std::size_t n = v.size();
  if (n == 0) return 0.0;
  return (n % 2 == 1) ? v[n / 2] : 0.5 * (v[n / 2 - 1] + v[n / 2]);
}

}  // namespace

std::string format_double(double v) {
  char buf[40];
  std::snprintf(buf, sizeof(buf), "%.17g", v);
  return buf;
}

void write_text_file(const std::string& path, const std::string& content) {
  std::ofstream out(path, std::ios::trunc);
  if (!out) throw ConfigError("cannot open for writing: " + path);
  out << content;
  if (!out) throw ConfigError("write failed: " + path);
}

json read_json_file(const std::string& path) {
  std::ifstream in(path);
  if (!in) throw ConfigError("cannot open: " + path);
  json j;
  in >> j;
  return j;
}

void write_json_file(const std::string& path, const json& j) {
  write_text_file(path, j.dump(2) + "\n");
}

void SuccessCriterion::validate() const {
  if (position_rx <= 0 || position_ry <= 0 || action_rx <= 0 || action_ry <= 0)
    throw ConfigError("SuccessCriterion: ellipse radii must be positive");
}

json SuccessCriterion::to_json() const {
  return json{{"position_center", emgps::to_json(Eigen::VectorXd(position_center))},
              {"position_rx", position_rx},
              {"position_ry", position_ry},
              {"action_center", emgps::to_json(Eigen::VectorXd(action_center))},
              {"action_rx", action_rx},
              {"action_ry", action_ry}};
}

SuccessCriterion SuccessCriterion::from_json(const json& j) {
  SuccessCriterion s;
  if (j.contains("position_center")) s.position_center = vector_from_json(j.at("position_center"));
  s.position_rx = j.value("position_rx", s.position_rx);
  s.position_ry = j.value("position_ry", s.position_ry);
  if (j.contains("action_center")) s.action_center = vector_from_json(j.at("action_center"));
  s.action_rx = j.value("action_rx", s.action_rx);
  s.action_ry = j.value("action_ry", s.action_ry);
  return s;
}

void ExperimentConfig::validate() const {
  sim.validate();
  cost.validate();
  success.validate();
  if (initial_conditions.empty()) throw ConfigError("ExperimentConfig: no initial conditions");
  for (const auto& ic : initial_conditions) ic.validate();
  if (fit_samples < 2) throw ConfigError("ExperimentConfig: fit_samples must be >= 2");
  if (gps_iterations < 1) throw ConfigError("ExperimentConfig: gps_iterations must be >= 1");
  if (guide_samples < 1) throw ConfigError("ExperimentConfig: guide_samples must be >= 1");
  if (init_controller_cov <= 0 || explore_cov <= 0)
    throw ConfigError("ExperimentConfig: covariances must be positive");
  if (em_elite_fraction <= 0 || em_elite_fraction > 1)
    throw ConfigError("ExperimentConfig: em_elite_fraction must be in (0, 1]");
  if (eval.n_dists < 1 || eval.n_rollouts < 1 || eval.radius < 0)
    throw ConfigError("ExperimentConfig: bad evaluation settings");
  if (out_dir.empty()) throw ConfigError("ExperimentConfig: out_dir empty");
}

json ExperimentConfig::to_json() const {
  json ics = json::array();
  for (const auto& ic : initial_conditions) ics.push_back(ic.to_json());
  return json{
      {"schema_version", 1},
      {"sim", sim.to_json()},
      {"cost", cost.to_json()},
      {"fit",
       {{"components", fit.gmm.components},
        {"gmm_max_iters", fit.gmm.max_iters},
        {"gmm_tol", fit.gmm.tol},
        {"prune_weight", fit.gmm.prune_weight},
        {"n0", fit.n0},
        {"k0", fit.k0},
        {"bayes_update_literal", fit.bayes_update_literal},
        {"jitter", fit.jitter},
        {"cond_limit", fit.cond_limit}}},
      {"fit_samples", fit_samples},
      {"gps_iterations", gps_iterations},
      {"guide_samples", guide_samples},
      {"initial_conditions", ics},
      {"init_controller_cov", init_controller_cov},
      {"explore_cov", explore_cov},
      {"em_target", em_target == ObservationTarget::kUnitCost ? "target" : "empirical"},
      {"mstep",
       {{"max_iters", mstep.max_iters},
        {"grad_tol", mstep.grad_tol},
        {"fd_rel_step", mstep.fd_rel_step}}},
      {"info",
       {{"fd_step", info.fd_step},
        {"eig_tol", info.eig_tol},
        {"full_matrix", info.full_matrix}}},
      {"em_sigma_floor", em_sigma_floor},
      {"em_elite_fraction", em_elite_fraction},
      {"train",
       {{"epochs", train.epochs},
        {"minibatch", train.minibatch},
        {"batches_per_epoch", train.batches_per_epoch},
        {"learning_rate", train.learning_rate},
        {"cold_start", train_cold_start},
        {"accumulate", train_accumulate}}},
      {"covariance_mode", cov_mode == CovarianceMode::kDiagonal ? "diagonal" : "full"},
      {"diagonal_reading",
       diag_reading == DiagonalReading::kEigenvalues ? "eigenvalues" : "entries"},
      {"eval",
       {{"n_dists", eval.n_dists}, {"n_rollouts", eval.n_rollouts}, {"radius", eval.radius}}},
      {"success", success.to_json()},
      {"seed", seed},
      {"out_dir", out_dir}};
}

ExperimentConfig ExperimentConfig::from_json(const json& j) {
  ExperimentConfig cfg;
  if (j.contains("sim")) cfg.sim = SimConfig::from_json(j.at("sim"));
  if (j.contains("cost")) cfg.cost = CostModel::from_json(j.at("cost"));
  if (j.contains("fit")) {
    const json& f = j.at("fit");
    cfg.fit.gmm.components = f.value("components", cfg.fit.gmm.components);
    cfg.fit.gmm.max_iters = f.value("gmm_max_iters", cfg.fit.gmm.max_iters);
    cfg.fit.gmm.tol = f.value("gmm_tol", cfg.fit.gmm.tol);
    cfg.fit.gmm.prune_weight = f.value("prune_weight", cfg.fit.gmm.prune_weight);
    cfg.fit.n0 = f.value("n0", cfg.fit.n0);
    cfg.fit.k0 = f.value("k0", cfg.fit.k0);
    cfg.fit.bayes_update_literal = f.value("bayes_update_literal", cfg.fit.bayes_update_literal);
    cfg.fit.jitter = f.value("jitter", cfg.fit.jitter);
    cfg.fit.cond_limit = f.value("cond_limit", cfg.fit.cond_limit);
  }
  cfg.fit_samples = j.value("fit_samples", cfg.fit_samples);
  cfg.gps_iterations = j.value("gps_iterations", cfg.gps_iterations);
  cfg.guide_samples = j.value("guide_samples", cfg.guide_samples);
  if (j.contains("initial_conditions")) {
    cfg.initial_conditions.clear();
    for (const auto& ic : j.at("initial_conditions"))
      cfg.initial_conditions.push_back(InitialCondition::from_json(ic));
  }
  cfg.init_controller_cov = j.value("init_controller_cov", cfg.init_controller_cov);
  cfg.explore_cov = j.value("explore_cov", cfg.explore_cov);
  const std::string target = j.value("em_target", std::string("target"));
  if (target == "target") {
    cfg.em_target = ObservationTarget::kUnitCost;
  } else if (target == "empirical") {
    cfg.em_target = ObservationTarget::kEmpirical;
  } else {
    throw ConfigError("ExperimentConfig: unknown em_target '" + target + "'");
  }
  if (j.contains("mstep")) {
    const json& m = j.at("mstep");
    cfg.mstep.max_iters = m.value("max_iters", cfg.mstep.max_iters);
    cfg.mstep.grad_tol = m.value("grad_tol", cfg.mstep.grad_tol);
    cfg.mstep.fd_rel_step = m.value("fd_rel_step", cfg.mstep.fd_rel_step);
  }
  if (j.contains("info")) {
    const json& m = j.at("info");
    cfg.info.fd_step = m.value("fd_step", cfg.info.fd_step);
    cfg.info.eig_tol = m.value("eig_tol", cfg.info.eig_tol);
    cfg.info.full_matrix = m.value("full_matrix", cfg.info.full_matrix);
  }
  if (j.contains("train")) {
    const json& t = j.at("train");
    cfg.train.epochs = t.value("epochs", cfg.train.epochs);
    cfg.train.minibatch = t.value("minibatch", cfg.train.minibatch);
    cfg.train.batches_per_epoch = t.value("batches_per_epoch", cfg.train.batches_per_epoch);
    cfg.train.learning_rate = t.value("learning_rate", cfg.train.learning_rate);
    cfg.train_cold_start = t.value("cold_start", cfg.train_cold_start);
    cfg.train_accumulate = t.value("accumulate", cfg.train_accumulate);
  }
  cfg.em_sigma_floor = j.value("em_sigma_floor", cfg.em_sigma_floor);
  cfg.em_elite_fraction = j.value("em_elite_fraction", cfg.em_elite_fraction);
  const std::string mode = j.value("covariance_mode", std::string("diagonal"));
  if (mode == "diagonal") {
    cfg.cov_mode = CovarianceMode::kDiagonal;
  } else if (mode == "full") {
    cfg.cov_mode = CovarianceMode::kFull;
  } else {
    throw ConfigError("ExperimentConfig: unknown covariance_mode '" + mode + "'");
  }
  const std::string reading = j.value("diagonal_reading", std::string("eigenvalues"));
  if (reading == "eigenvalues") {
    cfg.diag_reading = DiagonalReading::kEigenvalues;
  } else if (reading == "entries") {
    cfg.diag_reading = DiagonalReading::kDiagonalEntries;
  } else {
    throw ConfigError("ExperimentConfig: unknown diagonal_reading '" + reading + "'");
  }
  if (j.contains("eval")) {
    const json& e = j.at("eval");
    cfg.eval.n_dists = e.value("n_dists", cfg.eval.n_dists);
    cfg.eval.n_rollouts = e.value("n_rollouts", cfg.eval.n_rollouts);
    cfg.eval.radius = e.value("radius", cfg.eval.radius);
  }
  if (j.contains("success")) cfg.success = SuccessCriterion::from_json(j.at("success"));
  cfg.seed = j.value("seed", cfg.seed);
  cfg.out_dir = j.value("out_dir", cfg.out_dir);
  return cfg;
}

ExperimentConfig ExperimentConfig::load(const std::string& path) {
  return from_json(read_json_file(path));
}

json RunManifest::to_json() const {
  return json{{"schema_version", 1}, {"config_hash", config_hash},
              {"seed", seed},       {"artifacts", artifacts},
              {"wall_seconds", wall_seconds}, {"version", version},
              {"complete", complete}};
}

RunManifest RunManifest::from_json(const json& j) {
  RunManifest m;
  m.config_hash = j.value("config_hash", std::string());
  m.seed = j.value("seed", std::uint64_t{0});
  if (j.contains("artifacts"))
    m.artifacts = j.at("artifacts").get<std::map<std::string, std::string>>();
  m.wall_seconds = j.value("wall_seconds", 0.0);
  m.version = j.value("version", std::string());
  m.complete = j.value("complete", false);
  return m;
}

bool success_test(const Trajectory& traj, const SuccessCriterion& criterion) {
  const int horizon = traj.horizon();
  if (horizon < 1 || static_cast<int>(traj.true_states.size()) != horizon + 1)
    throw ConfigError("success_test: incomplete trajectory");
  // Final position is the state reached by the second-to-last action; both
  // ellipse tests are boundary inclusive.
  const Eigen::Vector2d pos = traj.true_states[horizon - 1].head<2>();
  const Eigen::Vector2d act = traj.actions[std::max(horizon - 2, 0)];
  const double pos_term =
      std::pow((pos.x() - criterion.position_center.x()) / criterion.position_rx, 2) +
      std::pow((pos.y() - criterion.position_center.y()) / criterion.position_ry, 2);
  const double act_term =
      std::pow((act.x() - criterion.action_center.x()) / criterion.action_rx, 2) +
      std::pow((act.y() - criterion.action_center.y()) / criterion.action_ry, 2);
  return pos_term <= 1.0 && act_term <= 1.0;
}

std::vector<EvalRow> evaluate_policy(const GlobalPolicy& policy,
                                     const ExperimentConfig& cfg,
                                     std::uint64_t eval_seed) {
  GlobalPolicyAdapter adapter(policy);
  adapter.validate(cfg.sim.horizon);
  const int n_cond = static_cast<int>(cfg.initial_conditions.size());

  std::vector<EvalRow> rows;
  rows.reserve(static_cast<std::size_t>(cfg.eval.n_dists) * cfg.eval.n_rollouts);
  for (int d = 0; d < cfg.eval.n_dists; ++d) {
    InitialCondition ic = cfg.initial_conditions[d % n_cond];
    // uniform draw in the ball of cfg.eval.radius around the training mean
    Rng mean_rng(stage_seed(eval_seed, kSeedEval, 0, static_cast<std::uint64_t>(d)));
    Eigen::VectorXd dir = mean_rng.gaussian_vec(4);
    const double norm = dir.norm();
    if (norm > 0.0) {
      const double r = cfg.eval.radius * std::pow(mean_rng.uniform(), 0.25);
      ic.mean += (r / norm) * dir;
    }
    for (int s = 0; s < cfg.eval.n_rollouts; ++s) {
      const std::uint64_t seed =
          stage_seed(eval_seed, kSeedEval, static_cast<std::uint64_t>(1 + s),
                     static_cast<std::uint64_t>(d));
      EvalRow row;
      row.dist = d;
      row.rollout = s;
      row.trajectory = rollout(adapter, ic, cfg.sim, cfg.cost, seed);
      row.cost_to_go = row.trajectory.cost_to_go();
      const int horizon = row.trajectory.horizon();
      row.final_position = row.trajectory.true_states[horizon - 1].head<2>();
      row.final_action = row.trajectory.actions[std::max(horizon - 2, 0)];
      row.success = success_test(row.trajectory, cfg.success);
      rows.push_back(std::move(row));
    }
  }
  return rows;
}

void export_metrics(const std::map<std::string, std::vector<EvalRow>>& runs,
                    const ExperimentConfig& cfg, const std::string& out_dir) {
  fs::create_directories(out_dir);
  static const char* kCoords[4] = {"x", "y", "xdot", "ydot"};

  std::ostringstream costs, envelopes, successes, actions;
  costs << "variant,dist,rollout,cost_to_go,final_x,final_y,final_u1,final_u2,success\n";
  envelopes << "variant,dist,coord,step,mean,std\n";
  successes << "variant,successes,total\n";
  actions << "variant,dist,rollout,step,u1,u2\n";

  for (const auto& [variant, rows] : runs) {
    int success_count = 0;
    for (const auto& row : rows) {
      costs << variant << ',' << row.dist << ',' << row.rollout << ','
            << format_double(row.cost_to_go) << ',' << format_double(row.final_position.x())
            << ',' << format_double(row.final_position.y()) << ','
            << format_double(row.final_action.x()) << ','
            << format_double(row.final_action.y()) << ',' << (row.success ? 1 : 0) << '\n';
      success_count += row.success ? 1 : 0;
      for (int k = 0; k < row.trajectory.horizon(); ++k)
        actions << variant << ',' << row.dist << ',' << row.rollout << ',' << k << ','
                << format_double(row.trajectory.actions[k].x()) << ','
                << format_double(row.trajectory.actions[k].y()) << '\n';
    }
    successes << variant << ',' << success_count << ',' << rows.size() << '\n';

    // per-distribution mean/std envelope of the true state trace
    for (int d = 0; d < cfg.eval.n_dists; ++d) {
      std::vector<const Trajectory*> trajs;
      for (const auto& row : rows)
        if (row.dist == d) trajs.push_back(&row.trajectory);
      if (trajs.empty()) continue;
      const int steps = static_cast<int>(trajs.front()->true_states.size());
      for (int coord = 0; coord < 4; ++coord) {
        for (int k = 0; k < steps; ++k) {
          double mean = 0.0;
          for (const auto* t : trajs) mean += t->true_states[k](coord);
          mean /= static_cast<double>(trajs.size());
          double var = 0.0;
          for (const auto* t : trajs) var += std::pow(t->true_states[k](coord) - mean, 2);
          var /= static_cast<double>(trajs.size());
          envelopes << variant << ',' << d << ',' << kCoords[coord] << ',' << k << ','
                    << format_double(mean) << ',' << format_double(std::sqrt(var)) << '\n';
        }
      }
    }
  }
  write_text_file(join(out_dir, "costs.csv"), costs.str());
  write_text_file(join(out_dir, "state_envelopes.csv"), envelopes.str());
  write_text_file(join(out_dir, "success_counts.csv"), successes.str());
  write_text_file(join(out_dir, "action_samples.csv"), actions.str());
}

RunManifest run_pipeline(const ExperimentConfig& cfg) {
  cfg.validate();
  const auto t_start = std::chrono::steady_clock::now();

  const std::string& out = cfg.out_dir;
  fs::create_directories(out);
  for (const char* sub : {"batches", "models", "controllers", "policies", "training"})
    fs::create_directories(join(out, sub));

  RunManifest manifest;
  manifest.seed = cfg.seed;
  manifest.version = kVersion;
  const json cfg_json = cfg.to_json();
  {
    char buf[20];
    std::snprintf(buf, sizeof(buf), "%016llx",
                  static_cast<unsigned long long>(fnv1a(cfg_json.dump())));
    manifest.config_hash = buf;
  }
  write_json_file(join(out, "config.json"), cfg_json);
  manifest.artifacts["config"] = "config.json";

  const int n_cond = static_cast<int>(cfg.initial_conditions.size());
  std::vector<ControllerParams> theta(n_cond);
  std::vector<TimeVaryingLinearModel> models(n_cond);
  std::vector<std::vector<Eigen::MatrixXd>> initial_covs(n_cond);
  std::vector<std::vector<EmIterationRecord>> em_logs(n_cond);

  auto save_batch = [&](int iter, int c, const std::vector<Trajectory>& batch) {
    const std::string rel = "batches/iter_" + std::to_string(iter) + "_cond_" +
                            std::to_string(c) + ".json";
    write_json_file(join(out, rel), batch_to_json(batch));
    manifest.artifacts["batch_i" + std::to_string(iter) + "_c" + std::to_string(c)] = rel;
  };
  auto save_model = [&](int iter, int c, const TimeVaryingLinearModel& model) {
    const std::string rel = "models/iter_" + std::to_string(iter) + "_cond_" +
                            std::to_string(c) + ".json";
    write_json_file(join(out, rel), model.to_json());
    manifest.artifacts["model_i" + std::to_string(iter) + "_c" + std::to_string(c)] = rel;
  };
  auto save_controller = [&](int iter, int c, const ControllerParams& params) {
    const std::string rel = "controllers/iter_" + std::to_string(iter) + "_cond_" +
                            std::to_string(c) + ".json";
    write_json_file(join(out, rel), params.to_json());
    manifest.artifacts["controller_i" + std::to_string(iter) + "_c" + std::to_string(c)] = rel;
  };

  // ---- bootstrap: exploratory data, model fit, Riccati-seeded controllers
  for (int c = 0; c < n_cond; ++c) {
    ExplorationPolicy explore(cfg.cost.target_action, cfg.explore_cov);
    auto batch = collect_batch(explore, cfg.initial_conditions[c], cfg.fit_samples,
                               cfg.sim, cfg.cost,
                               stage_seed(cfg.seed, kSeedBootstrap, 0, c));
    save_batch(0, c, batch);
    FitConfig fit = cfg.fit;
    fit.gmm.seed = stage_seed(cfg.seed, kSeedGmm, 0, c);
    models[c] = fit_model(batch, fit);
    save_model(0, c, models[c]);
    theta[c] = init_controller_lqr(models[c], cfg.cost, cfg.init_controller_cov);
    save_controller(0, c, theta[c]);
    initial_covs[c].reserve(theta[c].horizon());
    for (int k = 0; k < theta[c].horizon(); ++k)
      initial_covs[c].push_back(theta[c].covariance(k));
  }

  PolicyNet net = PolicyNet::make({4, 42, 42, 2}, Rng::derive(cfg.seed, kSeedNetInit));
  std::vector<TrainingSample> accumulated;

  auto collect_guides = [&](int iter) {
    std::vector<std::vector<Trajectory>> guides(n_cond);
    for (int c = 0; c < n_cond; ++c) {
      LinearGaussianPolicy local(theta[c]);
      guides[c] = collect_batch(local, cfg.initial_conditions[c], cfg.guide_samples,
                                cfg.sim, cfg.cost,
                                stage_seed(cfg.seed, kSeedGuide, iter, c));
    }
    return guides;
  };

  auto train_and_snapshot = [&](int iter) {
    auto guides = collect_guides(iter);
    auto fresh = build_training_set(guides, theta, iter);
    if (!cfg.train_accumulate) accumulated.clear();
    accumulated.insert(accumulated.end(), fresh.begin(), fresh.end());
    if (cfg.train_cold_start)
      net = PolicyNet::make({4, 42, 42, 2}, Rng::derive(cfg.seed, kSeedNetInit));
    TrainOptions train = cfg.train;
    train.seed = stage_seed(cfg.seed, kSeedTrain, iter, 0);
    // Warm starts keep the input scaling the weights were trained under.
    train.refresh_normalization = cfg.train_cold_start || iter == 0;
    TrainResult result = train_supervised(net, accumulated, train);

    std::ostringstream loss_csv;
    loss_csv << "epoch,loss\n";
    for (std::size_t e = 0; e < result.epoch_loss.size(); ++e)
      loss_csv << e << ',' << format_double(result.epoch_loss[e]) << '\n';
    const std::string loss_rel = "training/loss_iter_" + std::to_string(iter) + ".csv";
    write_text_file(join(out, loss_rel), loss_csv.str());
    manifest.artifacts["train_loss_i" + std::to_string(iter)] = loss_rel;

    std::vector<std::vector<Eigen::MatrixXd>> local_covs(n_cond);
    for (int c = 0; c < n_cond; ++c)
      for (int k = 0; k < theta[c].horizon(); ++k)
        local_covs[c].push_back(theta[c].covariance(k));

    GlobalPolicy snapshot;
    snapshot.net = net;
    snapshot.covariances = global_covariance(local_covs, cfg.cov_mode, cfg.diag_reading);
    snapshot.validate();
    const std::string rel = "policies/snapshot_" + std::to_string(iter) + ".json";
    write_json_file(join(out, rel), snapshot.to_json());
    manifest.artifacts["snapshot_" + std::to_string(iter)] = rel;
    return snapshot.covariances;
  };

  train_and_snapshot(0);

  // ---- EM-GPS iterations
  std::vector<Eigen::MatrixXd> final_global_covs;
  for (int i = 1; i <= cfg.gps_iterations; ++i) {
    for (int c = 0; c < n_cond; ++c) {
      LinearGaussianPolicy local(theta[c]);
      auto batch = collect_batch(local, cfg.initial_conditions[c], cfg.fit_samples,
                                 cfg.sim, cfg.cost,
                                 stage_seed(cfg.seed, kSeedCollect, i, c));
      save_batch(i, c, batch);
      FitConfig fit = cfg.fit;
      fit.gmm.seed = stage_seed(cfg.seed, kSeedGmm, i, c);
      models[c] = fit_model(batch, fit);
      save_model(i, c, models[c]);

      EmOptions em;
      em.iterations = 1;
      em.target = cfg.em_target;
      if (cfg.em_target == ObservationTarget::kEmpirical)
        em.empirical_y = elite_cost_observations(batch, cfg.em_elite_fraction);
      em.prior_mean = cfg.initial_conditions[c].mean;
      em.prior_cov = cfg.initial_conditions[c].cov;
      em.mstep = cfg.mstep;
      em.info = cfg.info;
      em.sigma_floor = cfg.em_sigma_floor;
      em.cost_model = cfg.cost;
      const double batch_cost = mean_cost_to_go(batch);
      em.cost_estimator = [batch_cost](const ControllerParams&) { return batch_cost; };

      EmResult result = em_optimize(models[c], theta[c], em);
      theta[c] = result.params;
      for (auto rec : result.records) {
        rec.iteration = i;
        em_logs[c].push_back(rec);
      }
      save_controller(i, c, theta[c]);
    }
    final_global_covs = train_and_snapshot(i);
  }

  for (int c = 0; c < n_cond; ++c) {
    const std::string rel = "em_log_cond_" + std::to_string(c) + ".csv";
    write_text_file(join(out, rel), em_records_csv(em_logs[c]));
    manifest.artifacts["em_log_c" + std::to_string(c)] = rel;
  }

  if (!final_global_covs.empty()) {
    Theorem1Report report = theorem1_check(final_global_covs, initial_covs);
    write_json_file(join(out, "theorem1.json"),
                    json{{"lhs", report.lhs}, {"rhs", report.rhs}, {"holds", report.holds}});
    manifest.artifacts["theorem1"] = "theorem1.json";
  }

  manifest.wall_seconds =
      std::chrono::duration<double>(std::chrono::steady_clock::now() - t_start).count();
  manifest.complete = true;
  write_json_file(join(out, "manifest.json"), manifest.to_json());
  return manifest;
}

json ComparisonReport::to_json() const {
  return json{{"baseline_median_cost", baseline_median_cost},
              {"em_median_cost", em_median_cost},
              {"baseline_successes", baseline_successes},
              {"em_successes", em_successes},
              {"total_experiments", total_experiments},
              {"variance_reduced_fraction", variance_reduced_fraction},
              {"theorem1",
               {{"lhs", theorem1.lhs}, {"rhs", theorem1.rhs}, {"holds", theorem1.holds}}}};
}

ComparisonReport compare_variants(const ExperimentConfig& cfg, const std::string& run_dir) {
  const int last = cfg.gps_iterations;
  GlobalPolicy baseline = GlobalPolicy::from_json(
      read_json_file(join(run_dir, "policies/snapshot_0.json")));
  GlobalPolicy refined = GlobalPolicy::from_json(
      read_json_file(join(run_dir, "policies/snapshot_" + std::to_string(last) + ".json")));

  const std::uint64_t eval_seed = Rng::derive(cfg.seed, kSeedEval);
  auto base_rows = evaluate_policy(baseline, cfg, eval_seed);
  auto em_rows = evaluate_policy(refined, cfg, eval_seed);

  ComparisonReport report;
  report.total_experiments = static_cast<int>(base_rows.size());
  std::vector<double> base_costs, em_costs;
  for (const auto& row : base_rows) {
    base_costs.push_back(row.cost_to_go);
    report.baseline_successes += row.success ? 1 : 0;
  }
  for (const auto& row : em_rows) {
    em_costs.push_back(row.cost_to_go);
    report.em_successes += row.success ? 1 : 0;
  }
  report.baseline_median_cost = median(base_costs);
  report.em_median_cost = median(em_costs);

  // per-step sample variance of the executed test actions, refined vs baseline
  auto step_action_variance = [](const std::vector<EvalRow>& rows, int k) {
    Eigen::Vector2d mean = Eigen::Vector2d::Zero();
    for (const auto& row : rows) mean += row.trajectory.actions[k];
    mean /= static_cast<double>(rows.size());
    double var = 0.0;
    for (const auto& row : rows)
      var += (row.trajectory.actions[k] - mean).squaredNorm();
    return var / static_cast<double>(rows.size() - 1);
  };
  const int horizon = cfg.sim.horizon;
  int reduced = 0;
  for (int k = 0; k < horizon; ++k)
    if (step_action_variance(em_rows, k) <= step_action_variance(base_rows, k)) ++reduced;
  report.variance_reduced_fraction =
      horizon > 0 ? static_cast<double>(reduced) / horizon : 0.0;

  const json theorem = read_json_file(join(run_dir, "theorem1.json"));
  report.theorem1.lhs = theorem.value("lhs", 0.0);
  report.theorem1.rhs = theorem.value("rhs", 0.0);
  report.theorem1.holds = theorem.value("holds", false);

  std::map<std::string, std::vector<EvalRow>> runs;
  runs["baseline"] = std::move(base_rows);
  runs["em"] = std::move(em_rows);
  export_metrics(runs, cfg, join(run_dir, "eval"));
  write_json_file(join(run_dir, "comparison.json"), report.to_json());
  return report;
}

}  // namespace emgps
