#include "emgps/em.hpp"

#include <cmath>
#include <limits>
#include <sstream>

#include "emgps/linalg.hpp"

namespace emgps {
namespace {

constexpr double kLog2Pi = 1.8378770664093453;

/// Step-k contribution to the expected complete-data log-likelihood: Gaussian
/// transition and observation terms under the closed-loop blocks, expanded
/// through the posterior first/second moments.
double q_step_full(const StepModel& s, const Eigen::MatrixXd& gain,
                   const Eigen::VectorXd& offset, const Eigen::MatrixXd& sigma,
                   const PosteriorMoments& mom, int k, double ybar) {
  const int nx = static_cast<int>(s.a.rows());
  const Eigen::MatrixXd a_cl = s.a + s.b * gain;
  const Eigen::VectorXd b_cl = s.b * offset + s.c;
  Eigen::MatrixXd q_cl = symmetrized(s.sigma + s.b * sigma * s.b.transpose());

  const Eigen::VectorXd& m1 = mom.mean[k];
  const Eigen::VectorXd& m2 = mom.mean[k + 1];
  const Eigen::MatrixXd& second1 = mom.second[k];
  const Eigen::MatrixXd& second2 = mom.second[k + 1];
  const Eigen::MatrixXd& cross21 = mom.cross[k];

  Eigen::MatrixXd expect = second2;
  expect.noalias() -= a_cl * cross21.transpose();
  expect.noalias() -= cross21 * a_cl.transpose();
  expect.noalias() += a_cl * second1 * a_cl.transpose();
  expect.noalias() -= b_cl * m2.transpose() + m2 * b_cl.transpose();
  expect.noalias() += a_cl * m1 * b_cl.transpose() + b_cl * (a_cl * m1).transpose();
  expect.noalias() += b_cl * b_cl.transpose();

  double value = 0.0;
  Eigen::LLT<Eigen::MatrixXd> llt(q_cl);
  if (llt.info() != Eigen::Success) throw NumericalError("q_step: Q not PD");
  const double logdet =
      2.0 * llt.matrixL().toDenseMatrix().diagonal().array().log().sum();
  value += -0.5 * (nx * kLog2Pi + logdet + llt.solve(expect).trace());

  const Eigen::RowVectorXd c_cl = s.ay + s.by * gain;
  const double d_cl = s.by * offset + s.cy;
  const double r_cl = s.sig_y + s.by * sigma * s.by.transpose();
  if (!(r_cl > 0.0)) throw NumericalError("q_step: R not positive");
  const double pred_lin = c_cl * m1;
  const double quad = ybar * ybar - 2.0 * ybar * (pred_lin + d_cl) +
                      c_cl * second1 * c_cl.transpose() + 2.0 * d_cl * pred_lin +
                      d_cl * d_cl;
  value += -0.5 * (kLog2Pi + std::log(r_cl) + quad / r_cl);
  return value;
}

double initial_term(const PosteriorMoments& mom, const Eigen::VectorXd& prior_mean,
                    const Eigen::MatrixXd& prior_cov) {
  const int nx = static_cast<int>(prior_mean.size());
  Eigen::MatrixXd p = symmetrized(prior_cov);
  make_psd(p, 1e-10);
  const Eigen::MatrixXd dev = mom.second[0] - mom.mean[0] * prior_mean.transpose() -
                              prior_mean * mom.mean[0].transpose() +
                              prior_mean * prior_mean.transpose();
  Eigen::LLT<Eigen::MatrixXd> llt(p);
  const double logdet =
      2.0 * llt.matrixL().toDenseMatrix().diagonal().array().log().sum();
  return -0.5 * (nx * kLog2Pi + logdet + llt.solve(dev).trace());
}

/// Builds the per-step parameter vector layout used by the information
/// matrix: [vec F; e; vec Sigma^{1/2}].
void apply_step_vector(ControllerParams& theta, int k, const Eigen::VectorXd& v) {
  theta.set_step_vector(k, v);
}

}  // namespace

PosteriorMoments PosteriorMoments::from_smoother(const SmootherResult& sm) {
  PosteriorMoments mom;
  const std::size_t n = sm.smoothed_means.size();
  mom.mean = sm.smoothed_means;
  mom.second.resize(n);
  for (std::size_t k = 0; k < n; ++k)
    mom.second[k] = sm.smoothed_covs[k] +
                    sm.smoothed_means[k] * sm.smoothed_means[k].transpose();
  mom.cross.resize(sm.lag_one_covs.size());
  for (std::size_t k = 0; k < sm.lag_one_covs.size(); ++k)
    mom.cross[k] = sm.lag_one_covs[k] +
                   sm.smoothed_means[k + 1] * sm.smoothed_means[k].transpose();
  return mom;
}

std::vector<Eigen::VectorXd> make_observation_sequence(
    const TimeVaryingLinearModel& model, ObservationTarget target,
    const std::vector<double>& empirical_y) {
  std::vector<Eigen::VectorXd> obs(model.horizon());
  for (int k = 0; k < model.horizon(); ++k) {
    Eigen::VectorXd y(1);
    if (target == ObservationTarget::kUnitCost) {
      y[0] = 1.0;
    } else {
      if (static_cast<int>(empirical_y.size()) != model.horizon())
        throw ConfigError("make_observation_sequence: empirical_y length mismatch");
      y[0] = empirical_y[k];
    }
    obs[k] = y;
  }
  return obs;
}

double q_function(const ControllerParams& theta, const PosteriorMoments& moments,
                  const TimeVaryingLinearModel& model,
                  const std::vector<Eigen::VectorXd>& obs,
                  const Eigen::VectorXd& prior_mean, const Eigen::MatrixXd& prior_cov,
                  bool include_initial_term) {
  if (theta.horizon() < model.horizon())
    throw ConfigError("q_function: controller horizon shorter than model");
  if (static_cast<int>(obs.size()) != model.horizon())
    throw ConfigError("q_function: observation count mismatch");
  double value = include_initial_term ? initial_term(moments, prior_mean, prior_cov) : 0.0;
  for (int k = 0; k < model.horizon(); ++k)
    value += q_step_full(model.steps[k], theta.gain[k], theta.offset[k],
                         theta.covariance(k), moments, k, obs[k][0]);
  return value;
}

double q_function(const ControllerParams& theta, const SmootherResult& sm,
                  const TimeVaryingLinearModel& model,
                  const std::vector<Eigen::VectorXd>& obs,
                  const Eigen::VectorXd& prior_mean, const Eigen::MatrixXd& prior_cov) {
  return q_function(theta, PosteriorMoments::from_smoother(sm), model, obs, prior_mean,
                    prior_cov, true);
}

namespace {

/// Projected quasi-Newton (BFGS) ascent of a scalar function with central
/// finite-difference gradients and box projection.
struct AscentResult {
  Eigen::VectorXd point;
  double value = 0.0;
  bool progressed = false;
};

AscentResult ascend(const std::function<double(const Eigen::VectorXd&)>& f,
                    const Eigen::VectorXd& start, double lo, double hi,
                    const MStepOptions& opts) {
  const int n = static_cast<int>(start.size());
  auto project = [&](Eigen::VectorXd v) {
    return v.cwiseMax(lo).cwiseMin(hi);
  };
  auto gradient = [&](const Eigen::VectorXd& x) {
    Eigen::VectorXd g(n);
    for (int i = 0; i < n; ++i) {
      const double h = opts.fd_rel_step * std::max(1.0, std::abs(x[i]));
      Eigen::VectorXd xp = x, xm = x;
      xp[i] += h;
      xm[i] -= h;
      g[i] = (f(xp) - f(xm)) / (2.0 * h);
    }
    return g;
  };

  AscentResult out;
  out.point = project(start);
  out.value = f(out.point);
  const double start_value = out.value;

  Eigen::MatrixXd hinv = Eigen::MatrixXd::Identity(n, n);
  Eigen::VectorXd x = out.point;
  Eigen::VectorXd g = gradient(x);

  for (int iter = 0; iter < opts.max_iters; ++iter) {
    if (g.norm() < opts.grad_tol) break;
    Eigen::VectorXd dir = hinv * g;
    if (dir.dot(g) <= 0.0) {
      hinv = Eigen::MatrixXd::Identity(n, n);
      dir = g;
    }
    // backtracking line search on the projected path
    double step = 1.0;
    double fx = out.value;
    Eigen::VectorXd x_new = x;
    bool improved = false;
    for (int ls = 0; ls < 30; ++ls) {
      Eigen::VectorXd trial = project(x + step * dir);
      double ft = -std::numeric_limits<double>::infinity();
      try {
        ft = f(trial);
      } catch (const NumericalError&) {
      }
      if (ft > fx + 1e-4 * step * dir.dot(g) && std::isfinite(ft)) {
        x_new = trial;
        fx = ft;
        improved = true;
        break;
      }
      step *= 0.5;
    }
    if (!improved) break;

    Eigen::VectorXd g_new = gradient(x_new);
    const Eigen::VectorXd s = x_new - x;
    const Eigen::VectorXd yv = g_new - g;  // note: ascent, curvature sign flips
    const double sy = -s.dot(yv);
    if (sy > 1e-12 * s.norm() * yv.norm()) {
      // BFGS update on the negated objective
      const Eigen::VectorXd y_desc = -yv;
      const double rho = 1.0 / s.dot(y_desc);
      const Eigen::MatrixXd eye = Eigen::MatrixXd::Identity(n, n);
      hinv = (eye - rho * s * y_desc.transpose()) * hinv *
                 (eye - rho * y_desc * s.transpose()) +
             rho * s * s.transpose();
    }
    x = x_new;
    g = g_new;
    if (fx > out.value) {
      out.value = fx;
      out.point = x;
    }
  }
  out.progressed = out.value > start_value;
  if (!out.progressed) {
    out.point = project(start);
    out.value = start_value;
  }
  return out;
}

}  // namespace

ControllerParams m_step(const ControllerParams& theta, const PosteriorMoments& moments,
                        const TimeVaryingLinearModel& model,
                        const std::vector<Eigen::VectorXd>& obs,
                        const MStepOptions& opts, bool* progress) {
  ControllerParams out = theta;
  const int nx = model.nx, nu = model.nu;
  const int nfe = nu * nx + nu;
  bool any_progress = false;

  for (int k = 0; k < model.horizon(); ++k) {
    const Eigen::MatrixXd sigma = theta.covariance(k);
    auto unpack = [&](const Eigen::VectorXd& z, Eigen::MatrixXd& gain,
                      Eigen::VectorXd& offset) {
      int at = 0;
      gain.resize(nu, nx);
      offset.resize(nu);
      for (int j = 0; j < nx; ++j)
        for (int i = 0; i < nu; ++i) gain(i, j) = z[at++];
      for (int i = 0; i < nu; ++i) offset[i] = z[at++];
    };
    auto objective = [&](const Eigen::VectorXd& z) {
      Eigen::MatrixXd gain;
      Eigen::VectorXd offset;
      unpack(z, gain, offset);
      return q_step_full(model.steps[k], gain, offset, sigma, moments, k, obs[k][0]);
    };

    Eigen::VectorXd z0(nfe);
    {
      int at = 0;
      for (int j = 0; j < nx; ++j)
        for (int i = 0; i < nu; ++i) z0[at++] = theta.gain[k](i, j);
      for (int i = 0; i < nu; ++i) z0[at++] = theta.offset[k][i];
    }
    AscentResult res =
        ascend(objective, z0, -theta.bounds.gain_bound, theta.bounds.gain_bound, opts);
    if (res.progressed) {
      unpack(res.point, out.gain[k], out.offset[k]);
      any_progress = true;
    }
  }
  if (progress) *progress = any_progress;
  return out;
}

namespace {

Eigen::MatrixXd fd_hessian(const std::function<double(const Eigen::VectorXd&)>& f,
                           const Eigen::VectorXd& x, double step) {
  const int n = static_cast<int>(x.size());
  Eigen::MatrixXd h(n, n);
  const double f0 = f(x);
  std::vector<double> hs(n);
  for (int i = 0; i < n; ++i) hs[i] = step * std::max(1.0, std::abs(x[i]));
  for (int i = 0; i < n; ++i) {
    Eigen::VectorXd xp = x, xm = x;
    xp[i] += hs[i];
    xm[i] -= hs[i];
    h(i, i) = (f(xp) - 2.0 * f0 + f(xm)) / (hs[i] * hs[i]);
  }
  for (int i = 0; i < n; ++i) {
    for (int j = i + 1; j < n; ++j) {
      Eigen::VectorXd xpp = x, xpm = x, xmp = x, xmm = x;
      xpp[i] += hs[i]; xpp[j] += hs[j];
      xpm[i] += hs[i]; xpm[j] -= hs[j];
      xmp[i] -= hs[i]; xmp[j] += hs[j];
      xmm[i] -= hs[i]; xmm[j] -= hs[j];
      h(i, j) = (f(xpp) - f(xpm) - f(xmp) + f(xmm)) / (4.0 * hs[i] * hs[j]);
      h(j, i) = h(i, j);
    }
  }
  return h;
}

}  // namespace

namespace {

/// Symmetric curvature-ratio matrix I - Hc^{-1/2} Ho Hc^{-1/2}. The
/// congruence keeps the spectrum of I - Hc^{-1} Ho exactly while producing
/// a symmetric matrix, so the [0, 1] bound check is meaningful and any
/// principal minor inherits the bound by eigenvalue interlacing. Ho is
/// clipped to its PSD part (information matrices are PSD; finite
/// differences leave small negative dust) and Hc floored to PD.
Eigen::MatrixXd curvature_ratio(const Eigen::MatrixXd& h_complete,
                                const Eigen::MatrixXd& h_observed) {
  const int n = static_cast<int>(h_complete.rows());
  Eigen::SelfAdjointEigenSolver<Eigen::MatrixXd> ec(symmetrized(h_complete));
  const double scale = std::max(ec.eigenvalues().cwiseAbs().maxCoeff(), 1e-300);
  Eigen::VectorXd inv_sqrt(n);
  for (int i = 0; i < n; ++i)
    inv_sqrt[i] = 1.0 / std::sqrt(std::max(ec.eigenvalues()[i], 1e-12 * scale));
  const Eigen::MatrixXd c_inv_sqrt =
      ec.eigenvectors() * inv_sqrt.asDiagonal() * ec.eigenvectors().transpose();

  Eigen::SelfAdjointEigenSolver<Eigen::MatrixXd> eo(symmetrized(h_observed));
  const Eigen::MatrixXd ho_psd = eo.eigenvectors() *
                                 eo.eigenvalues().cwiseMax(0.0).asDiagonal() *
                                 eo.eigenvectors().transpose();
  return symmetrized(Eigen::MatrixXd::Identity(n, n) -
                     c_inv_sqrt * ho_psd * c_inv_sqrt);
}

}  // namespace

InformationMatrix information_matrix(const ControllerParams& theta_i,
                                     const ControllerParams& theta_next,
                                     const PosteriorMoments& moments,
                                     const TimeVaryingLinearModel& model,
                                     const std::vector<Eigen::VectorXd>& obs,
                                     const Eigen::VectorXd& prior_mean,
                                     const Eigen::MatrixXd& prior_cov,
                                     const InfoMatrixOptions& opts) {
  // Both curvatures are taken at theta_i, the parameters the posterior
  // moments were computed under. There the complete-data curvature dominates
  // the observed-data curvature (their difference is the curvature of the
  // posterior entropy, a PSD matrix), which is what puts the ratio inside
  // [0, 1]; evaluating the two factors at different points voids that
  // guarantee far from convergence. theta_next participates only as the
  // carrier of the updated gains in the caller.
  (void)theta_next;
  const int horizon = model.horizon();
  const int dim = theta_i.step_dim();
  const int nfe = model.nu * model.nx + model.nu;
  const int nsig = model.nu * model.nu;

  InformationMatrix out;
  out.sigma_blocks.reserve(horizon);
  out.eigenvalues.reserve(horizon);

  auto check_and_store = [&](Eigen::MatrixXd block, int k) {
    block = symmetrized(block);
    Eigen::SelfAdjointEigenSolver<Eigen::MatrixXd> es(block);
    Eigen::VectorXd ev = es.eigenvalues();
    for (int q = 0; q < ev.size(); ++q) {
      if (ev[q] < -opts.eig_tol || ev[q] > 1.0 + opts.eig_tol)
        throw NumericalError("information_matrix: eigenvalue " + std::to_string(ev[q]) +
                             " outside [0,1] at step " + std::to_string(k));
      ev[q] = std::min(std::max(ev[q], 0.0), 1.0);
    }
    out.sigma_blocks.push_back(es.eigenvectors() * ev.asDiagonal() *
                               es.eigenvectors().transpose());
    out.eigenvalues.push_back(ev);
  };

  if (opts.full_matrix) {
    const int total = dim * horizon;
    auto q_of = [&](const Eigen::VectorXd& v) {
      ControllerParams t = theta_i;
      for (int k = 0; k < horizon; ++k) apply_step_vector(t, k, v.segment(k * dim, dim));
      return q_function(t, moments, model, obs, prior_mean, prior_cov, true);
    };
    auto l_of = [&](const Eigen::VectorXd& v) {
      ControllerParams t = theta_i;
      for (int k = 0; k < horizon; ++k) apply_step_vector(t, k, v.segment(k * dim, dim));
      return kalman_filter(closed_loop(model, t), obs, prior_mean, prior_cov)
          .log_likelihood;
    };
    Eigen::VectorXd v0(total);
    for (int k = 0; k < horizon; ++k) v0.segment(k * dim, dim) = theta_i.step_vector(k);
    const Eigen::MatrixXd full = curvature_ratio(-fd_hessian(q_of, v0, opts.fd_step),
                                                 -fd_hessian(l_of, v0, opts.fd_step));
    // sigma principal minor, re-sliced into per-step blocks
    for (int k = 0; k < horizon; ++k) {
      Eigen::MatrixXd block(nsig, nsig);
      for (int i = 0; i < nsig; ++i)
        for (int j = 0; j < nsig; ++j)
          block(i, j) = full(k * dim + nfe + i, k * dim + nfe + j);
      check_and_store(block, k);
    }
    return out;
  }

  // Default path: exact curvatures of the sigma components, no finite
  // differences. With S = Sigma^{1/2} the log-density depends on S only
  // through Qbar = Sigma^d + B S^T S B^T and Rbar = sig_y + b_y S^T S b_y^T,
  // so both the expected complete-data Hessian Hc = E[-d2 l] and the score
  // covariance Hm = Var[dl] are closed-form in the posterior moments of
  // (x_k, x_{k+1}). The observed-data curvature satisfies Ho = Hc - Hm
  // (conditional-expectation decomposition of the likelihood curvature), so
  // I_Sigma = Hc^{-1/2} Hm Hc^{-1/2} shares the spectrum of I - Hc^{-1} Ho
  // while being PSD by construction. Finite differences are hopeless here:
  // these curvatures sit ~7 orders of magnitude below the function values.
  const int nx = model.nx;
  const int nu = model.nu;
  for (int k = 0; k < horizon; ++k) {
    const StepModel& s = model.steps[k];
    const Eigen::MatrixXd& gain = theta_i.gain[k];
    const Eigen::VectorXd& offset = theta_i.offset[k];
    const Eigen::MatrixXd& sqrt_s = theta_i.cov_sqrt[k];
    const Eigen::MatrixXd sigma = sqrt_s.transpose() * sqrt_s;

    const Eigen::MatrixXd a_cl = s.a + s.b * gain;
    const Eigen::VectorXd b_cl = s.b * offset + s.c;
    const Eigen::RowVectorXd c_cl = s.ay + s.by * gain;
    const double d_cl = s.by * offset + s.cy;
    const Eigen::MatrixXd q_cl =
        symmetrized(s.sigma + s.b * sigma * s.b.transpose());
    const double r_cl = s.sig_y + s.by * sigma * s.by.transpose();
    if (!(r_cl > 0.0)) throw NumericalError("information_matrix: R not positive");

    Eigen::LLT<Eigen::MatrixXd> llt(q_cl);
    if (llt.info() != Eigen::Success)
      throw NumericalError("information_matrix: Q not PD at step " + std::to_string(k));
    const Eigen::MatrixXd p = llt.solve(Eigen::MatrixXd::Identity(nx, nx));

    // posterior moments of the residual pair xi = (x_{k+1} - Abar x_k - bbar,
    // ybar_k - Cbar x_k - dbar)
    const Eigen::VectorXd& m1 = moments.mean[k];
    const Eigen::VectorXd& m2 = moments.mean[k + 1];
    const Eigen::MatrixXd v1 = moments.second[k] - m1 * m1.transpose();
    const Eigen::MatrixXd v2 = moments.second[k + 1] - m2 * m2.transpose();
    const Eigen::MatrixXd c21 = moments.cross[k] - m2 * m1.transpose();

    Eigen::VectorXd mu_xi(nx + 1);
    mu_xi.head(nx) = m2 - a_cl * m1 - b_cl;
    mu_xi[nx] = obs[k][0] - c_cl * m1 - d_cl;
    Eigen::MatrixXd cov_xi(nx + 1, nx + 1);
    cov_xi.topLeftCorner(nx, nx) = v2 - c21 * a_cl.transpose() -
                                   a_cl * c21.transpose() +
                                   a_cl * v1 * a_cl.transpose();
    const Eigen::VectorXd cr_rho =
        (a_cl * v1 - c21) * c_cl.transpose();  // Cov(r, rho)
    cov_xi.topRightCorner(nx, 1) = cr_rho;
    cov_xi.bottomLeftCorner(1, nx) = cr_rho.transpose();
    cov_xi(nx, nx) = c_cl * v1 * c_cl.transpose();
    cov_xi = symmetrized(cov_xi);

    const Eigen::MatrixXd e_rr =
        cov_xi.topLeftCorner(nx, nx) + mu_xi.head(nx) * mu_xi.head(nx).transpose();
    const double e_rho2 = cov_xi(nx, nx) + mu_xi[nx] * mu_xi[nx];

    // per sigma-parameter S_(r,c): derivative directions of Sigma, Qbar, Rbar
    std::vector<Eigen::MatrixXd> d_sigma(nsig), d_q(nsig), a_quad(nsig);
    std::vector<double> d_r(nsig);
    {
      int t = 0;
      for (int c = 0; c < nu; ++c) {
        for (int r = 0; r < nu; ++r, ++t) {
          Eigen::MatrixXd e_rc = Eigen::MatrixXd::Zero(nu, nu);
          e_rc(r, c) = 1.0;
          d_sigma[t] = e_rc.transpose() * sqrt_s + sqrt_s.transpose() * e_rc;
          d_q[t] = s.b * d_sigma[t] * s.b.transpose();
          d_r[t] = s.by * d_sigma[t] * s.by.transpose();
          // quadratic-form matrix of the score component in xi
          a_quad[t] = Eigen::MatrixXd::Zero(nx + 1, nx + 1);
          a_quad[t].topLeftCorner(nx, nx) = p * d_q[t] * p;
          a_quad[t](nx, nx) = d_r[t] / (r_cl * r_cl);
        }
      }
    }

    Eigen::MatrixXd h_complete(nsig, nsig), h_missing(nsig, nsig);
    for (int t = 0; t < nsig; ++t) {
      const int tr = t % nu, tc = t / nu;
      for (int u = t; u < nsig; ++u) {
        const int ur = u % nu, uc = u / nu;
        // d2 Sigma: constant in S
        Eigen::MatrixXd dd_sigma = Eigen::MatrixXd::Zero(nu, nu);
        dd_sigma(tc, uc) += (tr == ur) ? 1.0 : 0.0;
        dd_sigma(uc, tc) += (tr == ur) ? 1.0 : 0.0;
        const Eigen::MatrixXd dd_q = s.b * dd_sigma * s.b.transpose();
        const double dd_r = s.by * dd_sigma * s.by.transpose();

        double e_d2l =
            -0.5 * (p * dd_q).trace() + 0.5 * (p * d_q[u] * p * d_q[t]).trace() +
            0.5 * ((p * e_rr * p * dd_q).trace() -
                   (p * d_q[u] * p * e_rr * p * d_q[t]).trace() -
                   (p * e_rr * p * d_q[u] * p * d_q[t]).trace()) -
            0.5 * dd_r / r_cl + 0.5 * d_r[t] * d_r[u] / (r_cl * r_cl) +
            0.5 * (e_rho2 * dd_r / (r_cl * r_cl) -
                   2.0 * e_rho2 * d_r[t] * d_r[u] / (r_cl * r_cl * r_cl));
        h_complete(t, u) = h_complete(u, t) = -e_d2l;

        // covariance of the quadratic score components
        const Eigen::MatrixXd as_cov = a_quad[u] * cov_xi;
        const double cov_q =
            0.5 * (a_quad[t] * cov_xi * as_cov).trace() +
            mu_xi.dot(a_quad[t] * cov_xi * a_quad[u] * mu_xi);
        h_missing(t, u) = h_missing(u, t) = cov_q;
      }
    }

    Eigen::SelfAdjointEigenSolver<Eigen::MatrixXd> ec(symmetrized(h_complete));
    const double scale = std::max(ec.eigenvalues().cwiseAbs().maxCoeff(), 1e-300);
    Eigen::VectorXd inv_sqrt(nsig);
    for (int i = 0; i < nsig; ++i)
      inv_sqrt[i] = 1.0 / std::sqrt(std::max(ec.eigenvalues()[i], 1e-12 * scale));
    const Eigen::MatrixXd c_inv_sqrt =
        ec.eigenvectors() * inv_sqrt.asDiagonal() * ec.eigenvectors().transpose();
    // h_missing is a score covariance, PSD by definition. Form the congruence
    // as a Gram matrix G G^T with G = Hc^{-1/2} Hm^{1/2} so roundoff (and a
    // near-singular h_complete) can never push eigenvalues below zero; the
    // upper bound stays a real check.
    Eigen::SelfAdjointEigenSolver<Eigen::MatrixXd> em_psd(symmetrized(h_missing));
    const Eigen::MatrixXd g =
        c_inv_sqrt * em_psd.eigenvectors() *
        em_psd.eigenvalues().cwiseMax(0.0).cwiseSqrt().asDiagonal();
    check_and_store(g * g.transpose(), k);
  }
  return out;
}

ControllerParams covariance_update(const ControllerParams& theta,
                                   const InformationMatrix& info, double floor) {
  ControllerParams out = theta;
  const int nu = theta.action_dim();
  const int nsig = nu * nu;
  for (int k = 0; k < static_cast<int>(info.sigma_blocks.size()); ++k) {
    Eigen::VectorXd sigma_vec(nsig);
    int at = 0;
    for (int j = 0; j < nu; ++j)
      for (int i = 0; i < nu; ++i) sigma_vec[at++] = theta.cov_sqrt[k](i, j);
    sigma_vec = info.sigma_blocks[k] * sigma_vec;
    Eigen::MatrixXd root(nu, nu);
    at = 0;
    for (int j = 0; j < nu; ++j)
      for (int i = 0; i < nu; ++i) root(i, j) = sigma_vec[at++];
    Eigen::MatrixXd sigma = floor_eigenvalues(root.transpose() * root, floor);
    out.cov_sqrt[k] = psd_sqrt(sigma);
  }
  return out;
}

double model_expected_cost(const TimeVaryingLinearModel& model,
                           const ControllerParams& params, const CostModel& cm,
                           const Eigen::VectorXd& prior_mean,
                           const Eigen::MatrixXd& prior_cov) {
  Eigen::VectorXd mean = prior_mean;
  Eigen::MatrixXd cov = symmetrized(prior_cov);
  double total = 0.0;
  for (int k = 0; k < model.horizon(); ++k) {
    const StepModel& s = model.steps[k];
    const Eigen::MatrixXd sigma = params.covariance(k);
    const Eigen::VectorXd u_mean = params.gain[k] * mean + params.offset[k];
    const Eigen::MatrixXd u_cov =
        params.gain[k] * cov * params.gain[k].transpose() + sigma;
    const Eigen::VectorXd dx = mean - cm.target_state;
    const Eigen::VectorXd du = u_mean - cm.target_action;
    total += dx.dot(cm.qx * dx) + (cm.qx * cov).trace() + du.dot(cm.qu * du) +
             (cm.qu * u_cov).trace();
    const Eigen::MatrixXd a_cl = s.a + s.b * params.gain[k];
    const Eigen::VectorXd b_cl = s.b * params.offset[k] + s.c;
    cov = symmetrized(a_cl * cov * a_cl.transpose() +
                      s.b * sigma * s.b.transpose() + s.sigma);
    mean = a_cl * mean + b_cl;
  }
  return total;
}

EmResult em_optimize(const TimeVaryingLinearModel& model, const ControllerParams& theta0,
                     const EmOptions& opts) {
  if (opts.iterations < 1) throw ConfigError("em_optimize: iterations must be >= 1");
  theta0.validate();
  if (opts.prior_mean.size() != model.nx)
    throw ConfigError("em_optimize: prior mean dimension mismatch");

  const std::vector<Eigen::VectorXd> obs =
      make_observation_sequence(model, opts.target, opts.empirical_y);

  EmResult result;
  result.params = theta0;
  for (int i = 0; i < opts.iterations; ++i) {
    EmIterationRecord rec;
    rec.iteration = i;

    const ClosedLoopModel clm = closed_loop(model, result.params);
    const SmootherResult sm = smooth(clm, obs, opts.prior_mean, opts.prior_cov);
    const PosteriorMoments moments = PosteriorMoments::from_smoother(sm);
    rec.log_likelihood = sm.log_likelihood;
    rec.q_before = q_function(result.params, moments, model, obs, opts.prior_mean,
                              opts.prior_cov, true);

    if (opts.cost_estimator) {
      rec.surrogate_cost = opts.cost_estimator(result.params);
    } else if (opts.cost_model) {
      rec.surrogate_cost = model_expected_cost(model, result.params, *opts.cost_model,
                                               opts.prior_mean, opts.prior_cov);
    }

    bool progress = false;
    ControllerParams candidate =
        m_step(result.params, moments, model, obs, opts.mstep, &progress);
    rec.mstep_progress = progress;
    rec.q_after_mstep = q_function(candidate, moments, model, obs, opts.prior_mean,
                                   opts.prior_cov, true);

    // Curvatures and posterior moments for the contraction are taken at the
    // post-ascent parameter: after the gain/offset update the observed
    // information is positive semidefinite there, which is what keeps the
    // contraction spectrum inside [0, 1].
    const ClosedLoopModel clm_next = closed_loop(model, candidate);
    const SmootherResult sm_next = smooth(clm_next, obs, opts.prior_mean, opts.prior_cov);
    const PosteriorMoments moments_next = PosteriorMoments::from_smoother(sm_next);
    const InformationMatrix info =
        information_matrix(candidate, candidate, moments_next, model, obs,
                           opts.prior_mean, opts.prior_cov, opts.info);
    candidate = covariance_update(candidate, info, opts.sigma_floor);
    rec.q_after_sigma = q_function(candidate, moments, model, obs, opts.prior_mean,
                                   opts.prior_cov, true);

    double trace = 0.0;
    for (int k = 0; k < candidate.horizon(); ++k) trace += candidate.covariance(k).trace();
    rec.sigma_trace = trace;

    result.params = candidate;
    result.records.push_back(rec);
  }
  return result;
}

std::string em_records_csv(const std::vector<EmIterationRecord>& records) {
  std::ostringstream os;
  os.precision(17);
  os << "iteration,q_before,q_after_mstep,q_after_sigma,log_likelihood,"
        "surrogate_cost,sigma_trace,mstep_progress\n";
  for (const auto& r : records) {
    os << r.iteration << ',' << r.q_before << ',' << r.q_after_mstep << ','
       << r.q_after_sigma << ',' << r.log_likelihood << ',' << r.surrogate_cost << ','
       << r.sigma_trace << ',' << (r.mstep_progress ? 1 : 0) << '\n';
  }
  return os.str();
}

}  // namespace emgps
