#pragma once

#include <vector>

#include <Eigen/Dense>

#include "emgps/json_util.hpp"
#include "emgps/sim.hpp"

namespace emgps {

/// Box bounds defining the compact parameter set: gains/offsets bounded in
/// magnitude, covariance square roots bounded in singular value.
struct ParamBounds {
  double gain_bound = 1e3;        // |entries of F_k, e_k|
  double sigma_sqrt_max = 10.0;   // singular values of Sigma_k^{1/2}
};

/// Per-step linear-Gaussian feedback law u_k ~ N(F_k x + e_k, Sigma_k).
/// Sigma_k is carried through its square root: Sigma = S^T S.
struct ControllerParams {
  std::vector<Eigen::MatrixXd> gain;        // F_k, nu x nx
  std::vector<Eigen::VectorXd> offset;      // e_k, nu
  std::vector<Eigen::MatrixXd> cov_sqrt;    // Sigma_k^{1/2}, nu x nu
  ParamBounds bounds;

  int horizon() const { return static_cast<int>(gain.size()); }
  int state_dim() const { return gain.empty() ? 0 : static_cast<int>(gain[0].cols()); }
  int action_dim() const { return gain.empty() ? 0 : static_cast<int>(gain[0].rows()); }

  Eigen::MatrixXd covariance(int k) const {
    return cov_sqrt[k].transpose() * cov_sqrt[k];
  }

  /// theta_k = col(vec F_k, e_k, vec Sigma_k^{1/2}), column-major vec.
  Eigen::VectorXd step_vector(int k) const;
  void set_step_vector(int k, const Eigen::VectorXd& theta_k);
  int step_dim() const;

  /// Stacked theta = col(theta_1, ..., theta_K).
  Eigen::VectorXd vectorized() const;

  void validate() const;
  void clamp_to_bounds();

  static ControllerParams zeros(int horizon, int nx, int nu, double init_cov);

  json to_json() const;
  static ControllerParams from_json(const json& j);
};

/// Policy adapter executing a ControllerParams law on observed states.
class LinearGaussianPolicy final : public Policy {
 public:
  explicit LinearGaussianPolicy(ControllerParams params);

  Eigen::Vector2d mean(int k, const Eigen::Vector4d& observed) const override;
  Eigen::Vector2d sample(int k, const Eigen::Vector4d& observed, Rng& rng) const override;
  void validate(int horizon) const override;

  const ControllerParams& params() const { return params_; }

 private:
  ControllerParams params_;
  std::vector<Eigen::MatrixXd> sample_sqrt_;  // symmetric PSD roots for sampling
};

}  // namespace emgps
