#include "emgps/sim.hpp"

#include <cmath>

#include "emgps/linalg.hpp"

namespace emgps {

void SimConfig::validate() const {
  if (!(dt > 0.0)) throw ConfigError("SimConfig: dt must be > 0");
  if (!(damping >= 0.0)) throw ConfigError("SimConfig: damping must be >= 0");
  if (!(noise_factor >= 0.0)) throw ConfigError("SimConfig: noise_factor must be >= 0");
  if (horizon < 1) throw ConfigError("SimConfig: horizon must be >= 1");
  if (!(mass > 0.0)) throw ConfigError("SimConfig: mass must be > 0");
}

json SimConfig::to_json() const {
  return json{{"dt", dt},       {"gravity", gravity}, {"damping", damping},
              {"noise_factor", noise_factor}, {"horizon", horizon}, {"mass", mass}};
}

SimConfig SimConfig::from_json(const json& j) {
  SimConfig c;
  c.dt = j.value("dt", c.dt);
  c.gravity = j.value("gravity", c.gravity);
  c.damping = j.value("damping", c.damping);
  c.noise_factor = j.value("noise_factor", c.noise_factor);
  c.horizon = j.value("horizon", c.horizon);
  c.mass = j.value("mass", c.mass);
  c.validate();
  return c;
}

void CostModel::validate() const {
  Eigen::LLT<Eigen::Matrix4d> lx(Eigen::Matrix4d(0.5 * (qx + qx.transpose())));
  Eigen::LLT<Eigen::Matrix2d> lu(Eigen::Matrix2d(0.5 * (qu + qu.transpose())));
  if (lx.info() != Eigen::Success) throw ConfigError("CostModel: qx must be PD");
  if (lu.info() != Eigen::Success) throw ConfigError("CostModel: qu must be PD");
  if (!(lambda > 1.0)) throw ConfigError("CostModel: lambda must be > 1");
}

json CostModel::to_json() const {
  return json{{"target_state", emgps::to_json(Eigen::VectorXd(target_state))},
              {"target_action", emgps::to_json(Eigen::VectorXd(target_action))},
              {"qx", emgps::to_json(Eigen::MatrixXd(qx))},
              {"qu", emgps::to_json(Eigen::MatrixXd(qu))},
              {"lambda", lambda}};
}

CostModel CostModel::from_json(const json& j) {
  CostModel c;
  if (j.contains("target_state")) c.target_state = vector_from_json(j["target_state"]);
  if (j.contains("target_action")) c.target_action = vector_from_json(j["target_action"]);
  if (j.contains("qx")) c.qx = matrix_from_json(j["qx"]);
  if (j.contains("qu")) c.qu = matrix_from_json(j["qu"]);
  c.lambda = j.value("lambda", c.lambda);
  c.validate();
  return c;
}

void InitialCondition::validate() const {
  Eigen::Matrix4d s = 0.5 * (cov + cov.transpose());
  Eigen::SelfAdjointEigenSolver<Eigen::Matrix4d> es(s);
  if (es.eigenvalues().minCoeff() < -1e-12)
    throw ConfigError("InitialCondition: covariance must be PSD");
  if ((cov - cov.transpose()).cwiseAbs().maxCoeff() > 1e-9)
    throw ConfigError("InitialCondition: covariance must be symmetric");
}

json InitialCondition::to_json() const {
  return json{{"mean", emgps::to_json(Eigen::VectorXd(mean))},
              {"cov", emgps::to_json(Eigen::MatrixXd(cov))}};
}

InitialCondition InitialCondition::from_json(const json& j) {
  InitialCondition ic;
  if (j.contains("mean")) ic.mean = vector_from_json(j["mean"]);
  if (j.contains("cov")) ic.cov = matrix_from_json(j["cov"]);
  ic.validate();
  return ic;
}

double Trajectory::cost_to_go() const {
  double s = 0.0;
  for (double y : running_costs) s += y;
  return s;
}

json Trajectory::to_json() const {
  json j;
  j["schema_version"] = kSchemaVersion;
  j["seed"] = seed;
  auto vecs = [](const auto& list) {
    json a = json::array();
    for (const auto& v : list) a.push_back(emgps::to_json(Eigen::VectorXd(v)));
    return a;
  };
  j["true_states"] = vecs(true_states);
  j["observed_states"] = vecs(observed_states);
  j["actions"] = vecs(actions);
  j["action_means"] = vecs(action_means);
  j["running_costs"] = running_costs;
  j["cost_observations"] = cost_observations;
  return j;
}

Trajectory Trajectory::from_json(const json& j) {
  if (j.value("schema_version", 0) != kSchemaVersion)
    throw ConfigError("Trajectory: unsupported schema version");
  Trajectory t;
  t.seed = j.value("seed", std::uint64_t{0});
  for (const auto& v : j.at("true_states")) t.true_states.push_back(vector_from_json(v));
  for (const auto& v : j.at("observed_states")) t.observed_states.push_back(vector_from_json(v));
  for (const auto& v : j.at("actions")) t.actions.push_back(vector_from_json(v));
  for (const auto& v : j.at("action_means")) t.action_means.push_back(vector_from_json(v));
  t.running_costs = j.at("running_costs").get<std::vector<double>>();
  t.cost_observations = j.at("cost_observations").get<std::vector<double>>();
  return t;
}

json batch_to_json(const std::vector<Trajectory>& batch) {
  json j;
  j["schema_version"] = Trajectory::kSchemaVersion;
  json arr = json::array();
  for (const auto& t : batch) arr.push_back(t.to_json());
  j["trajectories"] = arr;
  return j;
}

std::vector<Trajectory> batch_from_json(const json& j) {
  std::vector<Trajectory> out;
  for (const auto& t : j.at("trajectories")) out.push_back(Trajectory::from_json(t));
  return out;
}

SimState step_dynamics(const SimState& state, const Eigen::Vector2d& action,
                       const SimConfig& cfg) {
  if (!state.stacked().allFinite() || !action.allFinite())
    throw DomainError("step_dynamics: non-finite input");
  // semi-implicit Euler: velocity first, then position with the new velocity
  SimState next;
  Eigen::Vector2d accel = action / cfg.mass + Eigen::Vector2d(0.0, cfg.gravity) -
                          cfg.damping * state.velocity;
  next.velocity = state.velocity + cfg.dt * accel;
  next.position = state.position + cfg.dt * next.velocity;
  return next;
}

Eigen::Vector4d observe_state(const SimState& true_state, double noise_factor, Rng& rng) {
  if (noise_factor == 0.0) return true_state.stacked();
  return true_state.stacked() + std::sqrt(noise_factor) * rng.gaussian_vec(4);
}

double running_cost(const Eigen::Vector4d& x, const Eigen::Vector2d& u,
                    const CostModel& cm) {
  const Eigen::Vector4d dx = x - cm.target_state;
  const Eigen::Vector2d du = u - cm.target_action;
  return dx.dot(cm.qx * dx) + du.dot(cm.qu * du);
}

double cost_observation(double y_running) {
  if (y_running < 0.0) throw DomainError("cost_observation: running cost must be >= 0");
  return std::exp(-y_running);
}

double cost_pdf(double y_running, double lambda) {
  if (!(lambda > 1.0)) throw ConfigError("cost_pdf: lambda must be > 1");
  if (y_running < 0.0) throw DomainError("cost_pdf: running cost must be >= 0");
  return lambda * std::exp(-lambda * y_running);
}

Trajectory rollout(const Policy& policy, const InitialCondition& ic,
                   const SimConfig& cfg, const CostModel& cm, std::uint64_t seed) {
  cfg.validate();
  cm.validate();
  ic.validate();
  policy.validate(cfg.horizon);

  Rng rng(seed);
  Trajectory traj;
  traj.seed = seed;
  const int horizon = cfg.horizon;
  traj.true_states.reserve(horizon + 1);
  traj.observed_states.reserve(horizon);
  traj.actions.reserve(horizon);
  traj.action_means.reserve(horizon);
  traj.running_costs.reserve(horizon);
  traj.cost_observations.reserve(horizon);

  Eigen::Matrix4d ic_sqrt = psd_sqrt(ic.cov);
  SimState state = SimState::from_stacked(ic.mean + ic_sqrt * rng.gaussian_vec(4));
  traj.true_states.push_back(state.stacked());

  for (int k = 0; k < horizon; ++k) {
    Eigen::Vector4d observed = observe_state(state, cfg.noise_factor, rng);
    Eigen::Vector2d mu = policy.mean(k, observed);
    Eigen::Vector2d u = policy.sample(k, observed, rng);
    double y_run = running_cost(observed, u, cm);

    traj.observed_states.push_back(observed);
    traj.action_means.push_back(mu);
    traj.actions.push_back(u);
    traj.running_costs.push_back(y_run);
    traj.cost_observations.push_back(cost_observation(y_run));

    state = step_dynamics(state, u, cfg);
    traj.true_states.push_back(state.stacked());
  }
  return traj;
}

std::vector<Trajectory> collect_batch(const Policy& policy, const InitialCondition& ic,
                                      int count, const SimConfig& cfg,
                                      const CostModel& cm, std::uint64_t master_seed) {
  if (count < 1) throw ConfigError("collect_batch: count must be >= 1");
  std::vector<Trajectory> batch;
  batch.reserve(count);
  for (int m = 0; m < count; ++m)
    batch.push_back(rollout(policy, ic, cfg, cm, Rng::derive(master_seed, m)));
  return batch;
}

}  // namespace emgps
