#include "emgps/policy.hpp"

#include <cmath>

#include "emgps/linalg.hpp"

namespace emgps {

void GlobalPolicy::validate() const {
  for (std::size_t k = 0; k < covariances.size(); ++k) {
    Eigen::SelfAdjointEigenSolver<Eigen::MatrixXd> es(symmetrized(covariances[k]));
    if (es.eigenvalues().minCoeff() <= 0.0)
      throw ConfigError("GlobalPolicy: covariance not PD at step " + std::to_string(k));
  }
}

json GlobalPolicy::to_json() const {
  json covs = json::array();
  for (const auto& c : covariances) covs.push_back(emgps::to_json(c));
  return json{{"schema_version", 1}, {"net", net.to_json()}, {"covariances", covs}};
}

GlobalPolicy GlobalPolicy::from_json(const json& j) {
  GlobalPolicy p;
  p.net = PolicyNet::from_json(j.at("net"));
  for (const auto& c : j.at("covariances")) p.covariances.push_back(matrix_from_json(c));
  return p;
}

GlobalPolicyAdapter::GlobalPolicyAdapter(const GlobalPolicy& policy) : policy_(policy) {
  sample_sqrt_.reserve(policy.covariances.size());
  for (const auto& c : policy.covariances) sample_sqrt_.push_back(psd_sqrt(c));
}

Eigen::Vector2d GlobalPolicyAdapter::mean(int k, const Eigen::Vector4d& observed) const {
  (void)k;
  return policy_.net.forward(observed);
}

Eigen::Vector2d GlobalPolicyAdapter::sample(int k, const Eigen::Vector4d& observed,
                                            Rng& rng) const {
  return mean(k, observed) + sample_sqrt_[k] * rng.gaussian_vec(2);
}

void GlobalPolicyAdapter::validate(int horizon) const {
  if (static_cast<int>(policy_.covariances.size()) < horizon)
    throw ConfigError("GlobalPolicyAdapter: covariance list shorter than episode");
  policy_.validate();
}

double gaussian_kl(const Eigen::VectorXd& m0, const Eigen::MatrixXd& s0,
                   const Eigen::VectorXd& m1, const Eigen::MatrixXd& s1) {
  const int n = static_cast<int>(m0.size());
  Eigen::LLT<Eigen::MatrixXd> llt(symmetrized(s1));
  if (llt.info() != Eigen::Success) throw NumericalError("gaussian_kl: S1 not PD");
  const Eigen::MatrixXd s1_inv_s0 = llt.solve(s0);
  const Eigen::VectorXd dm = m1 - m0;
  return 0.5 * (s1_inv_s0.trace() + dm.dot(llt.solve(dm)) - n +
                log_det_pd(symmetrized(s1)) - log_det_pd(symmetrized(s0)));
}

KlLoss kl_sample_loss(const PolicyNet& net, const TrainingSample& sample,
                      const Eigen::MatrixXd& global_cov) {
  Eigen::LLT<Eigen::MatrixXd> llt(symmetrized(sample.weight));
  if (llt.info() != Eigen::Success)
    throw ConfigError("kl_sample_loss: sample weight not PD");
  KlLoss out;
  const Eigen::VectorXd mu_net = net.forward(sample.state);
  const Eigen::VectorXd r = mu_net - sample.target_mean;
  out.quadratic = 0.5 * r.dot(sample.weight * r);
  const Eigen::MatrixXd local_cov =
      solve_sym(sample.weight, Eigen::MatrixXd::Identity(sample.weight.rows(),
                                                         sample.weight.cols()));
  out.full_kl = gaussian_kl(mu_net, global_cov, sample.target_mean, local_cov);
  return out;
}

std::vector<TrainingSample> build_training_set(
    const std::vector<std::vector<Trajectory>>& rollouts_per_condition,
    const std::vector<ControllerParams>& local_params, int iteration) {
  if (rollouts_per_condition.size() != local_params.size())
    throw ConfigError("build_training_set: conditions and parameter lists differ");
  std::vector<TrainingSample> samples;
  const std::size_t expected =
      rollouts_per_condition.empty() ? 0 : rollouts_per_condition[0].size();
  for (std::size_t c = 0; c < rollouts_per_condition.size(); ++c) {
    if (rollouts_per_condition[c].size() != expected)
      throw ConfigError("build_training_set: missing rollout at condition " +
                        std::to_string(c) + " sample " +
                        std::to_string(std::min(expected, rollouts_per_condition[c].size())));
    const ControllerParams& params = local_params[c];
    // inverse covariances are shared across samples of one condition
    std::vector<Eigen::MatrixXd> weights(params.horizon());
    for (int k = 0; k < params.horizon(); ++k)
      weights[k] = solve_sym(params.covariance(k),
                             Eigen::MatrixXd::Identity(params.action_dim(),
                                                       params.action_dim()));
    for (std::size_t s = 0; s < rollouts_per_condition[c].size(); ++s) {
      const Trajectory& traj = rollouts_per_condition[c][s];
      if (traj.horizon() > params.horizon())
        throw ConfigError("build_training_set: missing rollout coverage at condition " +
                          std::to_string(c) + " sample " + std::to_string(s));
      for (int k = 0; k < traj.horizon(); ++k) {
        TrainingSample sample;
        sample.state = traj.observed_states[k];
        sample.target_mean = params.gain[k] * traj.observed_states[k] + params.offset[k];
        sample.weight = symmetrized(weights[k]);
        sample.step = k;
        sample.condition = static_cast<int>(c);
        sample.sample = static_cast<int>(s);
        sample.iteration = iteration;
        samples.push_back(std::move(sample));
      }
    }
  }
  return samples;
}

std::vector<Eigen::MatrixXd> global_covariance(
    const std::vector<std::vector<Eigen::MatrixXd>>& local_covs_per_condition,
    CovarianceMode mode, DiagonalReading reading) {
  if (local_covs_per_condition.empty())
    throw ConfigError("global_covariance: no conditions");
  const std::size_t horizon = local_covs_per_condition[0].size();
  const int n = static_cast<int>(local_covs_per_condition[0][0].rows());
  const double c_count = static_cast<double>(local_covs_per_condition.size());

  std::vector<Eigen::MatrixXd> out(horizon);
  for (std::size_t k = 0; k < horizon; ++k) {
    Eigen::MatrixXd precision_sum = Eigen::MatrixXd::Zero(n, n);
    for (const auto& covs : local_covs_per_condition) {
      if (covs.size() != horizon)
        throw ConfigError("global_covariance: inconsistent horizons");
      Eigen::MatrixXd basis = covs[k];
      if (mode == CovarianceMode::kDiagonal) {
        Eigen::VectorXd d;
        if (reading == DiagonalReading::kEigenvalues) {
          Eigen::SelfAdjointEigenSolver<Eigen::MatrixXd> es(symmetrized(basis));
          d = es.eigenvalues();
        } else {
          d = basis.diagonal();
        }
        basis = d.asDiagonal();
      }
      Eigen::LLT<Eigen::MatrixXd> llt(symmetrized(basis));
      if (llt.info() != Eigen::Success)
        throw NumericalError("global_covariance: singular local covariance at step " +
                             std::to_string(k));
      precision_sum += llt.solve(Eigen::MatrixXd::Identity(n, n));
    }
    out[k] = symmetrized(solve_sym(precision_sum / c_count,
                                   Eigen::MatrixXd::Identity(n, n)));
  }
  return out;
}

Theorem1Report theorem1_check(
    const std::vector<Eigen::MatrixXd>& global_covs,
    const std::vector<std::vector<Eigen::MatrixXd>>& initial_covs_per_condition) {
  Theorem1Report report;
  const int nu = static_cast<int>(global_covs[0].rows());
  const double horizon = static_cast<double>(global_covs.size());
  const double c_count = static_cast<double>(initial_covs_per_condition.size());

  for (const auto& cov : global_covs) {
    Eigen::LLT<Eigen::MatrixXd> llt(symmetrized(cov));
    if (llt.info() != Eigen::Success)
      throw NumericalError("theorem1_check: global covariance not PD");
    report.lhs += llt.solve(Eigen::MatrixXd::Identity(nu, nu)).trace();
  }
  for (const auto& covs : initial_covs_per_condition) {
    double trace_sum = 0.0;
    for (const auto& cov : covs) trace_sum += cov.trace();
    report.rhs += 1.0 / trace_sum;
  }
  report.rhs *= nu * nu * horizon * horizon / c_count;
  report.holds = report.lhs >= report.rhs - 1e-9;
  return report;
}

}  // namespace emgps
