#pragma once

#include <vector>

#include <Eigen/Dense>

#include "emgps/controller.hpp"
#include "emgps/mlp.hpp"
#include "emgps/sim.hpp"

namespace emgps {

enum class CovarianceMode {
  kFull,       // harmonic mean of the local covariances
  kDiagonal,   // harmonic mean of their eigenvalue diagonals
};

enum class DiagonalReading {
  kEigenvalues,      // diag(spectrum), ascending order
  kDiagonalEntries,  // plain diagonal of the local covariance
};

/// Global Gaussian policy: MLP mean plus time-indexed covariances.
struct GlobalPolicy {
  PolicyNet net;
  std::vector<Eigen::MatrixXd> covariances;  // Sigma^L_k, one per step

  void validate() const;
  json to_json() const;
  static GlobalPolicy from_json(const json& j);
};

/// Policy adapter for rollouts in the simulator.
class GlobalPolicyAdapter final : public Policy {
 public:
  explicit GlobalPolicyAdapter(const GlobalPolicy& policy);
  Eigen::Vector2d mean(int k, const Eigen::Vector4d& observed) const override;
  Eigen::Vector2d sample(int k, const Eigen::Vector4d& observed, Rng& rng) const override;
  void validate(int horizon) const override;

 private:
  const GlobalPolicy& policy_;
  std::vector<Eigen::MatrixXd> sample_sqrt_;
};

/// KL pieces of one training sample: the mean term actually trained plus
/// the full Gaussian KL for diagnostics.
struct KlLoss {
  double quadratic = 0.0;  // 1/2 (mu_net - mu)' W (mu_net - mu)
  double full_kl = 0.0;    // D_KL(N(mu_net, Sigma^L) || N(mu, Sigma_hat))
};

KlLoss kl_sample_loss(const PolicyNet& net, const TrainingSample& sample,
                      const Eigen::MatrixXd& global_cov);

/// Closed-form Gaussian KL D(N(m0,S0) || N(m1,S1)).
double gaussian_kl(const Eigen::VectorXd& m0, const Eigen::MatrixXd& s0,
                   const Eigen::VectorXd& m1, const Eigen::MatrixXd& s1);

/// Pairs each observed state with the local policy's mean action there and
/// the inverse local covariance as weight. One batch per initial condition,
/// S rollouts each.
std::vector<TrainingSample> build_training_set(
    const std::vector<std::vector<Trajectory>>& rollouts_per_condition,
    const std::vector<ControllerParams>& local_params, int iteration);

/// Eq-style covariance averaging over conditions; per-step output.
std::vector<Eigen::MatrixXd> global_covariance(
    const std::vector<std::vector<Eigen::MatrixXd>>& local_covs_per_condition,
    CovarianceMode mode, DiagonalReading reading = DiagonalReading::kEigenvalues);

struct Theorem1Report {
  double lhs = 0.0;
  double rhs = 0.0;
  bool holds = false;
};

/// Trace-inverse bound of the distilled covariances against the initial
/// local covariances.
Theorem1Report theorem1_check(
    const std::vector<Eigen::MatrixXd>& global_covs,
    const std::vector<std::vector<Eigen::MatrixXd>>& initial_covs_per_condition);

}  // namespace emgps
