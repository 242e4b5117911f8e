#include "emgps/smoother.hpp"

#include <cmath>

#include "emgps/linalg.hpp"

namespace emgps {

void ClosedLoopModel::validate() const {
  const std::size_t k = a.size();
  if (b.size() != k || q.size() != k || c.size() != k || d.size() != k || r.size() != k)
    throw ConfigError("ClosedLoopModel: inconsistent per-step lists");
  for (std::size_t i = 0; i < k; ++i) {
    Eigen::SelfAdjointEigenSolver<Eigen::MatrixXd> eq(symmetrized(q[i]));
    Eigen::SelfAdjointEigenSolver<Eigen::MatrixXd> er(symmetrized(r[i]));
    if (eq.eigenvalues().minCoeff() <= 0.0)
      throw ConfigError("ClosedLoopModel: process covariance not PD at step " +
                        std::to_string(i));
    if (er.eigenvalues().minCoeff() <= 0.0)
      throw ConfigError("ClosedLoopModel: observation covariance not PD at step " +
                        std::to_string(i));
  }
}

ClosedLoopModel closed_loop(const TimeVaryingLinearModel& model,
                            const ControllerParams& params) {
  if (params.horizon() < model.horizon())
    throw ConfigError("closed_loop: controller horizon shorter than model");
  ClosedLoopModel clm;
  const int horizon = model.horizon();
  clm.a.reserve(horizon);
  for (int k = 0; k < horizon; ++k) {
    const StepModel& s = model.steps[k];
    const Eigen::MatrixXd sigma = params.covariance(k);
    clm.a.push_back(s.a + s.b * params.gain[k]);
    clm.b.push_back(s.b * params.offset[k] + s.c);
    clm.q.push_back(symmetrized(s.sigma + s.b * sigma * s.b.transpose()));
    Eigen::MatrixXd cy(1, model.nx);
    cy.row(0) = s.ay + s.by * params.gain[k];
    clm.c.push_back(cy);
    Eigen::VectorXd dy(1);
    dy[0] = s.by * params.offset[k] + s.cy;
    clm.d.push_back(dy);
    Eigen::MatrixXd ry(1, 1);
    ry(0, 0) = s.sig_y + s.by * sigma * s.by.transpose();
    clm.r.push_back(ry);
  }
  return clm;
}

FilterResult kalman_filter(const ClosedLoopModel& clm,
                           const std::vector<Eigen::VectorXd>& obs,
                           const Eigen::VectorXd& prior_mean,
                           const Eigen::MatrixXd& prior_cov) {
  const int horizon = clm.horizon();
  if (static_cast<int>(obs.size()) != horizon)
    throw ConfigError("kalman_filter: observation count does not match horizon");
  const int nx = clm.state_dim();

  FilterResult out;
  out.predicted_means.reserve(horizon + 1);
  out.predicted_covs.reserve(horizon + 1);
  out.filtered_means.reserve(horizon + 1);
  out.filtered_covs.reserve(horizon + 1);

  Eigen::VectorXd mean = prior_mean;
  Eigen::MatrixXd cov = symmetrized(prior_cov);

  for (int k = 0; k < horizon; ++k) {
    out.predicted_means.push_back(mean);
    out.predicted_covs.push_back(cov);

    // measurement update
    const Eigen::MatrixXd& c = clm.c[k];
    const Eigen::MatrixXd s = c * cov * c.transpose() + clm.r[k];
    Eigen::LLT<Eigen::MatrixXd> llt(symmetrized(s));
    if (llt.info() != Eigen::Success)
      throw NumericalError("kalman_filter: innovation covariance not PD at step " +
                           std::to_string(k));
    const Eigen::VectorXd innovation = obs[k] - (c * mean + clm.d[k]);
    const Eigen::MatrixXd gain = cov * c.transpose() * llt.solve(
        Eigen::MatrixXd::Identity(s.rows(), s.cols()));
    mean += gain * innovation;
    const Eigen::MatrixXd joseph =
        Eigen::MatrixXd::Identity(nx, nx) - gain * c;
    cov = symmetrized(joseph * cov * joseph.transpose() +
                      gain * clm.r[k] * gain.transpose());

    const int ny = static_cast<int>(s.rows());
    out.log_likelihood +=
        -0.5 * (ny * std::log(2.0 * M_PI) + log_det_pd(symmetrized(s)) +
                innovation.dot(llt.solve(innovation)));
    if (!std::isfinite(out.log_likelihood))
      throw NumericalError("kalman_filter: non-finite log-likelihood");

    out.filtered_means.push_back(mean);
    out.filtered_covs.push_back(cov);

    // time update
    mean = clm.a[k] * mean + clm.b[k];
    cov = symmetrized(clm.a[k] * cov * clm.a[k].transpose() + clm.q[k]);
  }
  // terminal state carries no observation
  out.predicted_means.push_back(mean);
  out.predicted_covs.push_back(cov);
  out.filtered_means.push_back(mean);
  out.filtered_covs.push_back(cov);
  return out;
}

SmootherResult rts_smoother(const ClosedLoopModel& clm, const FilterResult& filtered) {
  const int horizon = clm.horizon();
  SmootherResult out;
  out.filter = filtered;
  out.log_likelihood = filtered.log_likelihood;
  out.smoothed_means.assign(horizon + 1, Eigen::VectorXd());
  out.smoothed_covs.assign(horizon + 1, Eigen::MatrixXd());
  out.lag_one_covs.assign(horizon, Eigen::MatrixXd());

  out.smoothed_means[horizon] = filtered.filtered_means[horizon];
  out.smoothed_covs[horizon] = filtered.filtered_covs[horizon];

  for (int k = horizon - 1; k >= 0; --k) {
    const Eigen::MatrixXd& pf = filtered.filtered_covs[k];
    const Eigen::MatrixXd& pp = filtered.predicted_covs[k + 1];
    const Eigen::MatrixXd gain =
        solve_sym(pp, Eigen::MatrixXd(clm.a[k] * pf)).transpose();  // J_k
    out.smoothed_means[k] =
        filtered.filtered_means[k] +
        gain * (out.smoothed_means[k + 1] - filtered.predicted_means[k + 1]);
    out.smoothed_covs[k] = symmetrized(
        pf + gain * (out.smoothed_covs[k + 1] - pp) * gain.transpose());
    out.lag_one_covs[k] = out.smoothed_covs[k + 1] * gain.transpose();
  }
  return out;
}

SmootherResult smooth(const ClosedLoopModel& clm, const std::vector<Eigen::VectorXd>& obs,
                      const Eigen::VectorXd& prior_mean, const Eigen::MatrixXd& prior_cov) {
  return rts_smoother(clm, kalman_filter(clm, obs, prior_mean, prior_cov));
}

}  // namespace emgps
