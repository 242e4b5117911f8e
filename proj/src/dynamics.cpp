#include "emgps/dynamics.hpp"

#include <cmath>

#include "emgps/linalg.hpp"

namespace emgps {

void NIWPrior::validate() const {
  const int d = static_cast<int>(mean.size());
  if (scatter.rows() != d || scatter.cols() != d)
    throw ConfigError("NIWPrior: dimension mismatch");
  if (!(n0 > d - 1)) throw ConfigError("NIWPrior: n0 must exceed dim - 1");
  if (!(k0 > 0.0)) throw ConfigError("NIWPrior: k0 must be > 0");
}

void TimeVaryingLinearModel::validate() const {
  for (int k = 0; k < horizon(); ++k) {
    const StepModel& s = steps[k];
    const std::string at = " at step " + std::to_string(k);
    Eigen::SelfAdjointEigenSolver<Eigen::MatrixXd> es(symmetrized(s.sigma));
    if (es.eigenvalues().minCoeff() <= 0.0)
      throw FittingError("model: Sigma^d not positive definite" + at);
    if (!(s.sig_y > 0.0)) throw FittingError("model: Sigma^y not positive" + at);
    // B full column rank
    Eigen::JacobiSVD<Eigen::MatrixXd> svd_b(s.b);
    if (svd_b.singularValues().minCoeff() <= 1e-12)
      throw FittingError("model: B^d rank deficient" + at);
    // controllability of (A, B)
    Eigen::MatrixXd ctrb(nx, nx * nu);
    Eigen::MatrixXd apow = Eigen::MatrixXd::Identity(nx, nx);
    for (int i = 0; i < nx; ++i) {
      ctrb.middleCols(i * nu, nu) = apow * s.b;
      apow = s.a * apow;
    }
    Eigen::JacobiSVD<Eigen::MatrixXd> svd_c(ctrb);
    const double rank_tol = 1e-9 * svd_c.singularValues().maxCoeff();
    if (svd_c.singularValues().minCoeff() <= rank_tol)
      throw FittingError("model: (A^d, B^d) not controllable" + at);
  }
}

json TimeVaryingLinearModel::to_json() const {
  json steps_j = json::array();
  for (const auto& s : steps) {
    steps_j.push_back(json{{"A", emgps::to_json(s.a)},
                           {"B", emgps::to_json(s.b)},
                           {"c", emgps::to_json(s.c)},
                           {"Sigma", emgps::to_json(s.sigma)},
                           {"Ay", emgps::to_json(Eigen::MatrixXd(s.ay))},
                           {"By", emgps::to_json(Eigen::MatrixXd(s.by))},
                           {"cy", s.cy},
                           {"sig_y", s.sig_y}});
  }
  json diag{{"elbo_trace", diagnostics.elbo_trace},
            {"condition_numbers", diagnostics.condition_numbers},
            {"warnings", diagnostics.warnings}};
  return json{{"schema_version", 1}, {"nx", nx}, {"nu", nu},
              {"steps", steps_j},    {"diagnostics", diag}};
}

TimeVaryingLinearModel TimeVaryingLinearModel::from_json(const json& j) {
  TimeVaryingLinearModel m;
  m.nx = j.at("nx").get<int>();
  m.nu = j.at("nu").get<int>();
  for (const auto& s : j.at("steps")) {
    StepModel step;
    step.a = matrix_from_json(s.at("A"));
    step.b = matrix_from_json(s.at("B"));
    step.c = vector_from_json(s.at("c"));
    step.sigma = matrix_from_json(s.at("Sigma"));
    step.ay = matrix_from_json(s.at("Ay")).row(0);
    step.by = matrix_from_json(s.at("By")).row(0);
    step.cy = s.at("cy").get<double>();
    step.sig_y = s.at("sig_y").get<double>();
    m.steps.push_back(step);
  }
  if (j.contains("diagnostics")) {
    const auto& d = j["diagnostics"];
    m.diagnostics.elbo_trace = d.value("elbo_trace", std::vector<double>{});
    m.diagnostics.condition_numbers = d.value("condition_numbers", std::vector<double>{});
    m.diagnostics.warnings = d.value("warnings", std::vector<std::string>{});
  }
  return m;
}

NIWPrior build_niw_prior(const GMMModel& gmm, double n0, double k0) {
  if (gmm.size() < 1) throw ConfigError("build_niw_prior: empty mixture");
  const int d = static_cast<int>(gmm.components[0].mean.size());
  NIWPrior prior;
  prior.mean = Eigen::VectorXd::Zero(d);
  for (const auto& comp : gmm.components) prior.mean += comp.weight * comp.mean;
  prior.scatter = Eigen::MatrixXd::Zero(d, d);
  for (const auto& comp : gmm.components) {
    Eigen::VectorXd dm = comp.mean - prior.mean;
    prior.scatter += comp.weight * (comp.covariance + dm * dm.transpose());
  }
  prior.scatter = symmetrized(prior.scatter);
  prior.n0 = n0;
  prior.k0 = k0;
  return prior;
}

EmpiricalMoments empirical_moments(const DatasetSlice& slice) {
  const int m = slice.sample_count();
  if (m < 2) throw ConfigError("empirical_moments: need at least 2 samples");
  if (!slice.rows.allFinite()) throw DomainError("empirical_moments: non-finite rows");
  EmpiricalMoments out;
  out.mean = slice.rows.colwise().mean();
  Eigen::MatrixXd centered = slice.rows.rowwise() - out.mean.transpose();
  out.cov = symmetrized(centered.transpose() * centered / m);
  return out;
}

JointGaussian bayes_update(const NIWPrior& prior, const EmpiricalMoments& emp, int m,
                           bool literal, std::vector<std::string>* warnings) {
  prior.validate();
  const int d = static_cast<int>(prior.mean.size());
  JointGaussian out;
  out.mean = (prior.k0 * prior.mean + m * emp.mean) / (prior.k0 + m);

  const Eigen::VectorXd dm = emp.mean - prior.mean;
  const Eigen::MatrixXd kappa =
      (prior.k0 * m / (prior.k0 + m)) * dm * dm.transpose();

  Eigen::MatrixXd prior_term;
  if (literal) {
    Eigen::MatrixXd scatter = prior.scatter;
    Eigen::LLT<Eigen::MatrixXd> llt(scatter);
    if (llt.info() != Eigen::Success) {
      const double j = make_psd(scatter, 1e-6);
      if (warnings && j > 0.0)
        warnings->push_back("bayes_update: regularized singular prior scatter");
    }
    prior_term = solve_sym(scatter, Eigen::MatrixXd::Identity(d, d));
  } else {
    // NIW scale matrix Psi0 = n0 * Lambda0
    prior_term = prior.n0 * prior.scatter;
  }

  out.cov = (prior_term + m * emp.cov + kappa) / (m + prior.n0);
  const double applied = make_psd(out.cov, 1e-10);
  if (warnings && applied > 0.0)
    warnings->push_back("bayes_update: jittered posterior covariance to PSD");
  return out;
}

StepModel condition_gaussian(const JointGaussian& joint, int nx, int nu,
                             double cond_limit, double* cond_number) {
  const int din = nx + nu;
  const int dout = nx + 1;
  if (joint.mean.size() != din + dout)
    throw ConfigError("condition_gaussian: dimension mismatch");

  const Eigen::MatrixXd l11 = joint.cov.topLeftCorner(din, din);
  const Eigen::MatrixXd l21 = joint.cov.bottomLeftCorner(dout, din);
  const Eigen::MatrixXd l22 = joint.cov.bottomRightCorner(dout, dout);

  Eigen::JacobiSVD<Eigen::MatrixXd> svd(l11);
  const double cond =
      svd.singularValues().maxCoeff() / std::max(svd.singularValues().minCoeff(), 1e-300);
  if (cond_number) *cond_number = cond;
  if (cond > cond_limit)
    throw FittingError("condition_gaussian: input block condition number " +
                       std::to_string(cond) + " exceeds limit");

  const Eigen::MatrixXd gain = solve_sym(l11, l21.transpose()).transpose();  // dout x din
  Eigen::MatrixXd res_cov = l22 - gain * l21.transpose();
  make_psd(res_cov, 1e-10);
  const Eigen::VectorXd intercept =
      joint.mean.tail(dout) - gain * joint.mean.head(din);

  StepModel s;
  s.a = gain.topLeftCorner(nx, nx);
  s.b = gain.topRightCorner(nx, nu);
  s.c = intercept.head(nx);
  s.sigma = symmetrized(res_cov.topLeftCorner(nx, nx));
  s.ay = gain.row(nx).head(nx);
  s.by = gain.row(nx).tail(nu);
  s.cy = intercept[nx];
  s.sig_y = res_cov(nx, nx);
  // cross-correlation between next state and cost channel dropped
  return s;
}

std::vector<DatasetSlice> make_slices(const std::vector<Trajectory>& batch) {
  if (batch.empty()) throw ConfigError("make_slices: empty batch");
  const int horizon = batch[0].horizon();
  const int m = static_cast<int>(batch.size());
  const int nx = 4, nu = 2;
  std::vector<DatasetSlice> slices(horizon);
  for (int k = 0; k < horizon; ++k) {
    slices[k].rows.resize(m, 2 * nx + nu + 1);
    for (int i = 0; i < m; ++i) {
      const Trajectory& t = batch[i];
      if (t.horizon() != horizon)
        throw ConfigError("make_slices: inconsistent horizons in batch");
      Eigen::VectorXd row(2 * nx + nu + 1);
      const Eigen::Vector4d& next =
          (k + 1 < horizon) ? t.observed_states[k + 1] : Eigen::Vector4d(t.true_states[k + 1]);
      row << t.observed_states[k], t.actions[k], next, t.cost_observations[k];
      slices[k].rows.row(i) = row;
    }
  }
  return slices;
}

TimeVaryingLinearModel fit_model(const std::vector<Trajectory>& batch,
                                 const FitConfig& cfg) {
  std::vector<DatasetSlice> slices = make_slices(batch);
  const int horizon = static_cast<int>(slices.size());
  const int m = slices[0].sample_count();
  const int d = slices[0].dim();

  // pooled data across all steps for the global GMM prior
  Eigen::MatrixXd pooled(horizon * m, d);
  for (int k = 0; k < horizon; ++k) pooled.middleRows(k * m, m) = slices[k].rows;

  GMMModel gmm = fit_gmm_vb(pooled, cfg.gmm);
  const double n0 = (cfg.n0 > 0.0) ? cfg.n0 : d + 2.0;
  NIWPrior prior = build_niw_prior(gmm, n0, cfg.k0);

  TimeVaryingLinearModel model;
  model.diagnostics.elbo_trace = gmm.elbo_trace;
  model.diagnostics.warnings = gmm.warnings;
  model.steps.reserve(horizon);
  for (int k = 0; k < horizon; ++k) {
    EmpiricalMoments emp = empirical_moments(slices[k]);
    JointGaussian joint = bayes_update(prior, emp, m, cfg.bayes_update_literal,
                                       &model.diagnostics.warnings);
    double cond = 0.0;
    StepModel step;
    try {
      step = condition_gaussian(joint, model.nx, model.nu, cfg.cond_limit, &cond);
    } catch (const FittingError& e) {
      throw FittingError(std::string(e.what()) + " at step " + std::to_string(k));
    }
    // enforce the type invariants with the configured jitter floor
    step.sigma = floor_eigenvalues(step.sigma, cfg.jitter);
    step.sig_y = std::max(step.sig_y, cfg.jitter);
    model.diagnostics.condition_numbers.push_back(cond);
    model.steps.push_back(step);
  }
  model.validate();
  return model;
}

}  // namespace emgps
