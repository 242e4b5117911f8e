#pragma once

#include <vector>

#include <Eigen/Dense>

#include "emgps/controller.hpp"
#include "emgps/dynamics.hpp"

namespace emgps {

/// Controller substituted into the fitted model: per-step linear-Gaussian
/// state-space system
///   x_{k+1} = A x_k + b + w,  w ~ N(0, Q)
///   y_k     = C x_k + d + v,  v ~ N(0, R)
struct ClosedLoopModel {
  std::vector<Eigen::MatrixXd> a;
  std::vector<Eigen::VectorXd> b;
  std::vector<Eigen::MatrixXd> q;
  std::vector<Eigen::MatrixXd> c;  // ny x nx
  std::vector<Eigen::VectorXd> d;  // ny
  std::vector<Eigen::MatrixXd> r;  // ny x ny

  int horizon() const { return static_cast<int>(a.size()); }
  int state_dim() const { return a.empty() ? 0 : static_cast<int>(a[0].rows()); }
  int obs_dim() const { return c.empty() ? 0 : static_cast<int>(c[0].rows()); }
  void validate() const;
};

ClosedLoopModel closed_loop(const TimeVaryingLinearModel& model,
                            const ControllerParams& params);

struct FilterResult {
  std::vector<Eigen::VectorXd> predicted_means;  // K+1 (index k: x_k | y_{1..k-1})
  std::vector<Eigen::MatrixXd> predicted_covs;
  std::vector<Eigen::VectorXd> filtered_means;   // K+1 (last = predicted, no obs)
  std::vector<Eigen::MatrixXd> filtered_covs;
  double log_likelihood = 0.0;
};

/// Predict/update recursion with innovation-based log-likelihood and
/// Joseph-form covariance updates. Observations run k = 1..K; the state
/// sequence has K+1 entries.
FilterResult kalman_filter(const ClosedLoopModel& clm,
                           const std::vector<Eigen::VectorXd>& obs,
                           const Eigen::VectorXd& prior_mean,
                           const Eigen::MatrixXd& prior_cov);

struct SmootherResult {
  FilterResult filter;
  std::vector<Eigen::VectorXd> smoothed_means;   // K+1
  std::vector<Eigen::MatrixXd> smoothed_covs;    // K+1
  std::vector<Eigen::MatrixXd> lag_one_covs;     // K entries: Cov(x_{k+1}, x_k | Y)
  double log_likelihood = 0.0;
};

SmootherResult rts_smoother(const ClosedLoopModel& clm, const FilterResult& filtered);

SmootherResult smooth(const ClosedLoopModel& clm, const std::vector<Eigen::VectorXd>& obs,
                      const Eigen::VectorXd& prior_mean, const Eigen::MatrixXd& prior_cov);

}  // namespace emgps
