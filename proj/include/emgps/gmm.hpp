#pragma once

#include <cstdint>
#include <string>
#include <vector>

#include <Eigen/Dense>

namespace emgps {

struct GmmComponent {
  double weight = 0.0;
  Eigen::VectorXd mean;
  Eigen::MatrixXd covariance;
};

/// Variational-Bayes posterior for one mixture component
/// (Gauss-Wishart posterior q(mu, Lambda) and Dirichlet pseudo-count).
struct GmmPosterior {
  double alpha = 0.0;    // Dirichlet concentration
  double beta = 0.0;     // mean-precision scale
  double dof = 0.0;      // Wishart degrees of freedom
  Eigen::VectorXd m;     // posterior mean
  Eigen::MatrixXd w;     // Wishart scale matrix
};

struct GMMModel {
  std::vector<GmmComponent> components;
  std::vector<GmmPosterior> posteriors;
  std::vector<double> elbo_trace;
  std::vector<std::string> warnings;
  bool converged = false;

  int size() const { return static_cast<int>(components.size()); }
};

struct GmmOptions {
  int components = 8;
  int max_iters = 200;
  double tol = 1e-6;
  std::uint64_t seed = 0;
  double prune_weight = 1e-6;  // min responsibility mass fraction per component
};

/// VB coordinate ascent for a Gaussian mixture on the rows of `data`
/// (N x D). The ELBO trace is non-decreasing.
GMMModel fit_gmm_vb(const Eigen::MatrixXd& data, const GmmOptions& opts);

}  // namespace emgps
