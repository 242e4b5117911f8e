#pragma once

#include <cstdint>
#include <stdexcept>
#include <vector>

#include <Eigen/Dense>

#include "emgps/errors.hpp"
#include "emgps/json_util.hpp"
#include "emgps/rng.hpp"

namespace emgps {

/// 2-D point mass with gravity and linear velocity damping.
struct SimConfig {
  double dt = 0.1;
  double gravity = -9.8;     // y-acceleration
  double damping = 0.1;      // 1/s
  double noise_factor = 0.3; // observation noise covariance = noise_factor * I
  int horizon = 30;
  double mass = 1.0;

  void validate() const;
  json to_json() const;
  static SimConfig from_json(const json& j);
};

/// State x = [x, y, xdot, ydot].
struct SimState {
  Eigen::Vector2d position = Eigen::Vector2d::Zero();
  Eigen::Vector2d velocity = Eigen::Vector2d::Zero();

  Eigen::Vector4d stacked() const {
    Eigen::Vector4d v;
    v << position, velocity;
    return v;
  }
  static SimState from_stacked(const Eigen::Vector4d& v) {
    SimState s;
    s.position = v.head<2>();
    s.velocity = v.tail<2>();
    return s;
  }
};

/// Quadratic running cost around (x*, u*) with the exponential rate of the
/// cost-observation density.
struct CostModel {
  Eigen::Vector4d target_state = Eigen::Vector4d::Zero();
  Eigen::Vector2d target_action = Eigen::Vector2d::Zero();
  Eigen::Matrix4d qx = Eigen::Matrix4d::Identity();
  Eigen::Matrix2d qu = 5e-5 * Eigen::Matrix2d::Identity();
  double lambda = 2.0;

  void validate() const;
  json to_json() const;
  static CostModel from_json(const json& j);
};

struct InitialCondition {
  Eigen::Vector4d mean = Eigen::Vector4d::Zero();
  Eigen::Matrix4d cov = 1e-2 * Eigen::Matrix4d::Identity();

  void validate() const;
  json to_json() const;
  static InitialCondition from_json(const json& j);
};

/// One episode: K actions, K observed states, K+1 true states.
struct Trajectory {
  static constexpr int kSchemaVersion = 1;

  std::vector<Eigen::Vector4d> true_states;      // K+1
  std::vector<Eigen::Vector4d> observed_states;  // K
  std::vector<Eigen::Vector2d> actions;          // K
  std::vector<Eigen::Vector2d> action_means;     // K
  std::vector<double> running_costs;             // K
  std::vector<double> cost_observations;         // K
  std::uint64_t seed = 0;

  int horizon() const { return static_cast<int>(actions.size()); }
  double cost_to_go() const;

  json to_json() const;
  static Trajectory from_json(const json& j);
};

json batch_to_json(const std::vector<Trajectory>& batch);
std::vector<Trajectory> batch_from_json(const json& j);

/// Per-step action sampler over one episode. Actions are computed from the
/// observed (noisy) state.
class Policy {
 public:
  virtual ~Policy() = default;
  virtual Eigen::Vector2d mean(int k, const Eigen::Vector4d& observed) const = 0;
  virtual Eigen::Vector2d sample(int k, const Eigen::Vector4d& observed, Rng& rng) const = 0;
  /// Throws if the policy is malformed (e.g. non-PSD covariance).
  virtual void validate(int horizon) const { (void)horizon; }
};

SimState step_dynamics(const SimState& state, const Eigen::Vector2d& action,
                       const SimConfig& cfg);

Eigen::Vector4d observe_state(const SimState& true_state, double noise_factor, Rng& rng);

double running_cost(const Eigen::Vector4d& x, const Eigen::Vector2d& u,
                    const CostModel& cm);

double cost_observation(double y_running);

double cost_pdf(double y_running, double lambda);

Trajectory rollout(const Policy& policy, const InitialCondition& ic,
                   const SimConfig& cfg, const CostModel& cm, std::uint64_t seed);

std::vector<Trajectory> collect_batch(const Policy& policy, const InitialCondition& ic,
                                      int count, const SimConfig& cfg,
                                      const CostModel& cm, std::uint64_t master_seed);

}  // namespace emgps
