#pragma once

#include <cstdint>
#include <string>
#include <vector>

#include <Eigen/Dense>

#include "emgps/errors.hpp"
#include "emgps/gmm.hpp"
#include "emgps/json_util.hpp"
#include "emgps/sim.hpp"

namespace emgps {

/// M stacked rows [x_k; u_k; x_{k+1}; y_k] for one time step.
struct DatasetSlice {
  Eigen::MatrixXd rows;  // M x (2*nx + nu + 1)
  int nx = 4;
  int nu = 2;

  int sample_count() const { return static_cast<int>(rows.rows()); }
  int dim() const { return static_cast<int>(rows.cols()); }
};

/// Solitary NIW prior collapsed from the GMM global prior.
struct NIWPrior {
  Eigen::VectorXd mean;     // omega^0
  Eigen::MatrixXd scatter;  // Lambda^0, moment-matched mixture scatter
  double n0 = 0.0;
  double k0 = 0.0;

  void validate() const;
};

struct EmpiricalMoments {
  Eigen::VectorXd mean;
  Eigen::MatrixXd cov;
};

struct JointGaussian {
  Eigen::VectorXd mean;
  Eigen::MatrixXd cov;
};

/// Per-step conditional linear-Gaussian model:
///   x_{k+1} = A x + B u + c + w,  w ~ N(0, Sigma)
///   y_k     = Ay x + By u + cy + v,  v ~ N(0, sig_y)
struct StepModel {
  Eigen::MatrixXd a;       // nx x nx
  Eigen::MatrixXd b;       // nx x nu
  Eigen::VectorXd c;       // nx
  Eigen::MatrixXd sigma;   // nx x nx
  Eigen::RowVectorXd ay;   // 1 x nx
  Eigen::RowVectorXd by;   // 1 x nu
  double cy = 0.0;
  double sig_y = 0.0;
};

struct FitDiagnostics {
  std::vector<double> elbo_trace;
  std::vector<double> condition_numbers;  // per step, input-block of Lambda_k
  std::vector<std::string> warnings;
};

struct TimeVaryingLinearModel {
  int nx = 4;
  int nu = 2;
  std::vector<StepModel> steps;
  FitDiagnostics diagnostics;

  int horizon() const { return static_cast<int>(steps.size()); }
  void validate() const;

  json to_json() const;
  static TimeVaryingLinearModel from_json(const json& j);
};

struct FitConfig {
  GmmOptions gmm;
  double n0 = 0.0;  // 0 -> dim + 2
  double k0 = 1.0;
  bool bayes_update_literal = false;  // verbatim inverse-scatter numerator
  double jitter = 1e-6;
  double cond_limit = 1e12;
  double controllability_tol = 1e-9;
};

NIWPrior build_niw_prior(const GMMModel& gmm, double n0, double k0);

EmpiricalMoments empirical_moments(const DatasetSlice& slice);

JointGaussian bayes_update(const NIWPrior& prior, const EmpiricalMoments& emp, int m,
                           bool literal = false,
                           std::vector<std::string>* warnings = nullptr);

/// Conditions the joint Gaussian over [x;u | x';y] and splits the result
/// into the step-model blocks. The cross covariance between x' and y is
/// zeroed.
StepModel condition_gaussian(const JointGaussian& joint, int nx, int nu,
                             double cond_limit = 1e12,
                             double* cond_number = nullptr);

std::vector<DatasetSlice> make_slices(const std::vector<Trajectory>& batch);

TimeVaryingLinearModel fit_model(const std::vector<Trajectory>& batch,
                                 const FitConfig& cfg);

}  // namespace emgps
