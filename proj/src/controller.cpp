#include "emgps/controller.hpp"

#include "emgps/linalg.hpp"

namespace emgps {

Eigen::VectorXd ControllerParams::step_vector(int k) const {
  const int nx = state_dim(), nu = action_dim();
  Eigen::VectorXd v(step_dim());
  int at = 0;
  for (int j = 0; j < nx; ++j)
    for (int i = 0; i < nu; ++i) v[at++] = gain[k](i, j);
  for (int i = 0; i < nu; ++i) v[at++] = offset[k][i];
  for (int j = 0; j < nu; ++j)
    for (int i = 0; i < nu; ++i) v[at++] = cov_sqrt[k](i, j);
  return v;
}

void ControllerParams::set_step_vector(int k, const Eigen::VectorXd& theta_k) {
  const int nx = state_dim(), nu = action_dim();
  int at = 0;
  for (int j = 0; j < nx; ++j)
    for (int i = 0; i < nu; ++i) gain[k](i, j) = theta_k[at++];
  for (int i = 0; i < nu; ++i) offset[k][i] = theta_k[at++];
  for (int j = 0; j < nu; ++j)
    for (int i = 0; i < nu; ++i) cov_sqrt[k](i, j) = theta_k[at++];
}

int ControllerParams::step_dim() const {
  const int nx = state_dim(), nu = action_dim();
  return nu * nx + nu + nu * nu;
}

Eigen::VectorXd ControllerParams::vectorized() const {
  Eigen::VectorXd v(step_dim() * horizon());
  for (int k = 0; k < horizon(); ++k) v.segment(k * step_dim(), step_dim()) = step_vector(k);
  return v;
}

void ControllerParams::validate() const {
  if (gain.size() != offset.size() || gain.size() != cov_sqrt.size())
    throw ConfigError("ControllerParams: inconsistent per-step lists");
  for (int k = 0; k < horizon(); ++k) {
    if (!gain[k].allFinite() || !offset[k].allFinite() || !cov_sqrt[k].allFinite())
      throw ConfigError("ControllerParams: non-finite entries");
    Eigen::MatrixXd sigma = covariance(k);
    Eigen::SelfAdjointEigenSolver<Eigen::MatrixXd> es(sigma);
    if (es.eigenvalues().minCoeff() <= 0.0)
      throw ConfigError("ControllerParams: covariance not positive definite");
    if (gain[k].cwiseAbs().maxCoeff() > bounds.gain_bound ||
        (offset[k].size() > 0 && offset[k].cwiseAbs().maxCoeff() > bounds.gain_bound))
      throw ConfigError("ControllerParams: gain/offset outside bounds");
  }
}

void ControllerParams::clamp_to_bounds() {
  for (int k = 0; k < horizon(); ++k) {
    gain[k] = gain[k].cwiseMax(-bounds.gain_bound).cwiseMin(bounds.gain_bound);
    offset[k] = offset[k].cwiseMax(-bounds.gain_bound).cwiseMin(bounds.gain_bound);
    Eigen::JacobiSVD<Eigen::MatrixXd> svd(cov_sqrt[k],
                                          Eigen::ComputeFullU | Eigen::ComputeFullV);
    Eigen::VectorXd sv = svd.singularValues().cwiseMin(bounds.sigma_sqrt_max);
    cov_sqrt[k] = svd.matrixU() * sv.asDiagonal() * svd.matrixV().transpose();
  }
}

ControllerParams ControllerParams::zeros(int horizon, int nx, int nu, double init_cov) {
  ControllerParams p;
  p.gain.assign(horizon, Eigen::MatrixXd::Zero(nu, nx));
  p.offset.assign(horizon, Eigen::VectorXd::Zero(nu));
  p.cov_sqrt.assign(horizon, std::sqrt(init_cov) * Eigen::MatrixXd::Identity(nu, nu));
  return p;
}

json ControllerParams::to_json() const {
  json steps = json::array();
  for (int k = 0; k < horizon(); ++k) {
    steps.push_back(json{{"F", emgps::to_json(gain[k])},
                         {"e", emgps::to_json(offset[k])},
                         {"Sigma", emgps::to_json(Eigen::MatrixXd(covariance(k)))},
                         {"Sigma_sqrt", emgps::to_json(cov_sqrt[k])}});
  }
  return json{{"steps", steps}};
}

ControllerParams ControllerParams::from_json(const json& j) {
  ControllerParams p;
  for (const auto& s : j.at("steps")) {
    p.gain.push_back(matrix_from_json(s.at("F")));
    p.offset.push_back(vector_from_json(s.at("e")));
    if (s.contains("Sigma_sqrt"))
      p.cov_sqrt.push_back(matrix_from_json(s.at("Sigma_sqrt")));
    else
      p.cov_sqrt.push_back(psd_sqrt(matrix_from_json(s.at("Sigma"))));
  }
  return p;
}

LinearGaussianPolicy::LinearGaussianPolicy(ControllerParams params)
    : params_(std::move(params)) {
  sample_sqrt_.reserve(params_.horizon());
  for (int k = 0; k < params_.horizon(); ++k)
    sample_sqrt_.push_back(psd_sqrt(params_.covariance(k)));
}

Eigen::Vector2d LinearGaussianPolicy::mean(int k, const Eigen::Vector4d& observed) const {
  return params_.gain[k] * observed + params_.offset[k];
}

Eigen::Vector2d LinearGaussianPolicy::sample(int k, const Eigen::Vector4d& observed,
                                             Rng& rng) const {
  return mean(k, observed) +
         sample_sqrt_[k] * rng.gaussian_vec(static_cast<int>(sample_sqrt_[k].rows()));
}

void LinearGaussianPolicy::validate(int horizon) const {
  if (params_.horizon() < horizon)
    throw ConfigError("LinearGaussianPolicy: horizon shorter than episode");
  params_.validate();
}

}  // namespace emgps
