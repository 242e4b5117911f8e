#pragma once

#include <functional>
#include <optional>
#include <string>
#include <vector>

#include <Eigen/Dense>

#include "emgps/controller.hpp"
#include "emgps/dynamics.hpp"
#include "emgps/smoother.hpp"

namespace emgps {

/// First/second posterior moments of the latent states, extracted once from
/// a smoother pass and reused across Q-function evaluations.
struct PosteriorMoments {
  std::vector<Eigen::VectorXd> mean;          // K+1
  std::vector<Eigen::MatrixXd> second;        // K+1: E[x_k x_k^T]
  std::vector<Eigen::MatrixXd> cross;         // K:   E[x_{k+1} x_k^T]

  static PosteriorMoments from_smoother(const SmootherResult& sm);
};

/// How the E-step observation sequence is chosen.
enum class ObservationTarget {
  kUnitCost,    // y_k = 1, the cost observation of a zero-cost trajectory
  kEmpirical,   // per-step mean of observed y_k over the latest batch
};

struct MStepOptions {
  int max_iters = 60;
  double grad_tol = 1e-8;
  double fd_rel_step = 1e-5;
};

struct InfoMatrixOptions {
  double fd_step = 1e-2;
  double eig_tol = 1e-6;
  bool full_matrix = false;  // full (K*dim)^2 Hessians; only viable for small K
};

/// Per-iteration diagnostics of the EM loop.
struct EmIterationRecord {
  int iteration = 0;
  double q_before = 0.0;        // L(theta^i, theta^i)
  double q_after_mstep = 0.0;   // L(theta^{i+1}, theta^i), gain/offset update only
  double q_after_sigma = 0.0;   // same point after the covariance contraction
  double log_likelihood = 0.0;  // L_{theta^i}(Y)
  double surrogate_cost = 0.0;  // V(x_1, pi_{theta^i})
  double sigma_trace = 0.0;     // sum_k Tr Sigma_k after the update
  bool mstep_progress = true;
};

struct EmOptions {
  int iterations = 1;
  ObservationTarget target = ObservationTarget::kUnitCost;
  std::vector<double> empirical_y;  // used when target == kEmpirical
  Eigen::VectorXd prior_mean;       // x_1 prior for the E-step
  Eigen::MatrixXd prior_cov;
  MStepOptions mstep;
  InfoMatrixOptions info;
  double sigma_floor = 1e-8;
  /// Optional surrogate cost estimator (e.g. Monte-Carlo rollouts); when
  /// absent and cost_model is set, an analytic moment propagation on the
  /// fitted model is used.
  std::function<double(const ControllerParams&)> cost_estimator;
  std::optional<CostModel> cost_model;
};

std::vector<Eigen::VectorXd> make_observation_sequence(
    const TimeVaryingLinearModel& model, ObservationTarget target,
    const std::vector<double>& empirical_y);

/// Expected complete-data log-likelihood of (X, Y) under theta, with the
/// posterior moments taken at the previous parameter estimate.
double q_function(const ControllerParams& theta, const SmootherResult& sm,
                  const TimeVaryingLinearModel& model,
                  const std::vector<Eigen::VectorXd>& obs,
                  const Eigen::VectorXd& prior_mean, const Eigen::MatrixXd& prior_cov);

/// Same quantity from precomputed moments; `include_initial_term` toggles the
/// theta-independent x_1 prior contribution.
double q_function(const ControllerParams& theta, const PosteriorMoments& moments,
                  const TimeVaryingLinearModel& model,
                  const std::vector<Eigen::VectorXd>& obs,
                  const Eigen::VectorXd& prior_mean, const Eigen::MatrixXd& prior_cov,
                  bool include_initial_term = true);

/// Ascent on the gain/offset components only; covariances are handled by
/// covariance_update. Never returns a point with a lower Q-value than the
/// start; `progress` (optional) reports whether any ascent was found.
ControllerParams m_step(const ControllerParams& theta, const PosteriorMoments& moments,
                        const TimeVaryingLinearModel& model,
                        const std::vector<Eigen::VectorXd>& obs,
                        const MStepOptions& opts, bool* progress = nullptr);

struct InformationMatrix {
  /// Per-step principal minors over the covariance components (symmetrized).
  std::vector<Eigen::MatrixXd> sigma_blocks;
  /// Eigenvalues per step, clamped into [0, 1] when within tolerance.
  std::vector<Eigen::VectorXd> eigenvalues;
};

InformationMatrix information_matrix(const ControllerParams& theta_i,
                                     const ControllerParams& theta_next,
                                     const PosteriorMoments& moments,
                                     const TimeVaryingLinearModel& model,
                                     const std::vector<Eigen::VectorXd>& obs,
                                     const Eigen::VectorXd& prior_mean,
                                     const Eigen::MatrixXd& prior_cov,
                                     const InfoMatrixOptions& opts);

/// sigma^{i+1} = I_Sigma sigma^i applied per step, followed by the PD floor.
ControllerParams covariance_update(const ControllerParams& theta,
                                   const InformationMatrix& info,
                                   double floor = 1e-8);

struct EmResult {
  ControllerParams params;
  std::vector<EmIterationRecord> records;
};

EmResult em_optimize(const TimeVaryingLinearModel& model, const ControllerParams& theta0,
                     const EmOptions& opts);

/// Analytic E[sum_k Y_k] under the closed loop of `params` on the fitted
/// model, by propagating state mean/covariance.
double model_expected_cost(const TimeVaryingLinearModel& model,
                           const ControllerParams& params, const CostModel& cm,
                           const Eigen::VectorXd& prior_mean,
                           const Eigen::MatrixXd& prior_cov);

std::string em_records_csv(const std::vector<EmIterationRecord>& records);

}  // namespace emgps
