#include "emgps/gmm.hpp"

#include <cmath>
#include <limits>

#include "emgps/errors.hpp"
#include "emgps/linalg.hpp"
#include "emgps/rng.hpp"

namespace emgps {
namespace {

double digamma(double x) {
  // recurrence to push x above 6, then asymptotic series
  double result = 0.0;
  while (x < 6.0) {
    result -= 1.0 / x;
    x += 1.0;
  }
  const double inv = 1.0 / x;
  const double inv2 = inv * inv;
  result += std::log(x) - 0.5 * inv -
            inv2 * (1.0 / 12.0 - inv2 * (1.0 / 120.0 - inv2 / 252.0));
  return result;
}

double log_wishart_norm(const Eigen::MatrixXd& w, double dof) {
  const int d = static_cast<int>(w.rows());
  double sum_lgamma = 0.0;
  for (int i = 0; i < d; ++i) sum_lgamma += std::lgamma(0.5 * (dof - i));
  return -0.5 * dof * log_det_pd(w) - 0.5 * dof * d * std::log(2.0) -
         0.25 * d * (d - 1) * std::log(M_PI) - sum_lgamma;
}

double expected_log_det_precision(const Eigen::MatrixXd& w, double dof) {
  const int d = static_cast<int>(w.rows());
  double s = 0.0;
  for (int i = 0; i < d; ++i) s += digamma(0.5 * (dof - i));
  return s + d * std::log(2.0) + log_det_pd(w);
}

struct VbState {
  // prior
  double alpha0, beta0, nu0;
  Eigen::VectorXd m0;
  Eigen::MatrixXd w0_inv;
  double log_b0;  // ln B(W0, nu0)
  // posterior (per component)
  std::vector<GmmPosterior> q;
  // cached per-component statistics from the last M-step
  std::vector<double> nk;
  std::vector<Eigen::VectorXd> xbar;
  std::vector<Eigen::MatrixXd> sk;
};

}  // namespace

GMMModel fit_gmm_vb(const Eigen::MatrixXd& data, const GmmOptions& opts) {
  const int n = static_cast<int>(data.rows());
  const int d = static_cast<int>(data.cols());
  int f = opts.components;
  if (f < 1) throw ConfigError("fit_gmm_vb: component count must be >= 1");
  if (n < f) throw ConfigError("fit_gmm_vb: fewer samples than components");
  if (!data.allFinite()) throw DomainError("fit_gmm_vb: non-finite data");

  VbState st;
  st.alpha0 = 1.0 / f;
  st.beta0 = 1.0;
  st.nu0 = d + 2.0;
  st.m0 = data.colwise().mean();

  Eigen::MatrixXd centered = data.rowwise() - st.m0.transpose();
  Eigen::MatrixXd data_cov = centered.transpose() * centered / n;
  make_psd(data_cov, 1e-6);
  // W0 chosen so that the prior expected precision matches the pooled data
  st.w0_inv = st.nu0 * data_cov;
  Eigen::MatrixXd w0 = solve_sym(st.w0_inv, Eigen::MatrixXd::Identity(d, d));
  st.log_b0 = log_wishart_norm(w0, st.nu0);

  // responsibilities initialized from nearest of f seeded data points
  Rng rng(Rng::derive(opts.seed, 0x67'6d'6d));
  std::vector<int> centers(f);
  for (int k = 0; k < f; ++k) centers[k] = static_cast<int>(rng.next_u64() % n);
  Eigen::MatrixXd resp = Eigen::MatrixXd::Constant(n, f, 1e-3);
  for (int i = 0; i < n; ++i) {
    int best = 0;
    double best_d = std::numeric_limits<double>::infinity();
    for (int k = 0; k < f; ++k) {
      double dist = (data.row(i) - data.row(centers[k])).squaredNorm();
      if (dist < best_d) {
        best_d = dist;
        best = k;
      }
    }
    resp(i, best) = 1.0;
  }
  for (int i = 0; i < n; ++i) resp.row(i) /= resp.row(i).sum();

  st.q.resize(f);
  st.nk.resize(f);
  st.xbar.resize(f);
  st.sk.resize(f);

  auto m_step = [&]() {
    for (int k = 0; k < f; ++k) {
      const double nk = resp.col(k).sum();
      Eigen::VectorXd xbar = Eigen::VectorXd::Zero(d);
      if (nk > 0) xbar = data.transpose() * resp.col(k) / nk;
      Eigen::MatrixXd sk = Eigen::MatrixXd::Zero(d, d);
      if (nk > 0) {
        Eigen::MatrixXd dc = data.rowwise() - xbar.transpose();
        sk = dc.transpose() * resp.col(k).asDiagonal() * dc / nk;
      }
      GmmPosterior& q = st.q[k];
      q.alpha = st.alpha0 + nk;
      q.beta = st.beta0 + nk;
      q.dof = st.nu0 + nk;
      q.m = (st.beta0 * st.m0 + nk * xbar) / q.beta;
      Eigen::VectorXd dm = xbar - st.m0;
      Eigen::MatrixXd w_inv =
          st.w0_inv + nk * sk + (st.beta0 * nk / q.beta) * dm * dm.transpose();
      make_psd(w_inv, 1e-10);
      q.w = solve_sym(w_inv, Eigen::MatrixXd::Identity(d, d));
      q.w = symmetrized(q.w);
      st.nk[k] = nk;
      st.xbar[k] = xbar;
      st.sk[k] = sk;
    }
  };

  auto e_step = [&]() {
    const double alpha_sum = [&] {
      double s = 0.0;
      for (const auto& q : st.q) s += q.alpha;
      return s;
    }();
    Eigen::VectorXd log_pi(f), log_det(f);
    for (int k = 0; k < f; ++k) {
      log_pi[k] = digamma(st.q[k].alpha) - digamma(alpha_sum);
      log_det[k] = expected_log_det_precision(st.q[k].w, st.q[k].dof);
    }
    for (int i = 0; i < n; ++i) {
      Eigen::VectorXd logr(f);
      for (int k = 0; k < f; ++k) {
        const GmmPosterior& q = st.q[k];
        Eigen::VectorXd dx = data.row(i).transpose() - q.m;
        const double maha = q.dof * dx.dot(q.w * dx) + d / q.beta;
        logr[k] = log_pi[k] + 0.5 * log_det[k] - 0.5 * maha -
                  0.5 * d * std::log(2.0 * M_PI);
      }
      const double mx = logr.maxCoeff();
      Eigen::VectorXd r = (logr.array() - mx).exp();
      resp.row(i) = (r / r.sum()).transpose();
    }
  };

  auto elbo = [&]() {
    const double alpha_sum = [&] {
      double s = 0.0;
      for (const auto& q : st.q) s += q.alpha;
      return s;
    }();
    double value = 0.0;
    // ln C(alpha0 * 1) - ln C(alpha)
    value += std::lgamma(f * st.alpha0) - f * std::lgamma(st.alpha0);
    value -= std::lgamma(alpha_sum);
    for (const auto& q : st.q) value += std::lgamma(q.alpha);
    for (int k = 0; k < f; ++k) {
      const GmmPosterior& q = st.q[k];
      const double eld = expected_log_det_precision(q.w, q.dof);
      const double elp = digamma(q.alpha) - digamma(alpha_sum);
      const double nk = st.nk[k];
      // E[ln p(X|Z,mu,Lambda)]
      if (nk > 0) {
        Eigen::VectorXd dxm = st.xbar[k] - q.m;
        value += 0.5 * nk *
                 (eld - d / q.beta - q.dof * (st.sk[k] * q.w).trace() -
                  q.dof * dxm.dot(q.w * dxm) - d * std::log(2.0 * M_PI));
      }
      // E[ln p(Z|pi)] + prior/posterior Dirichlet cross terms
      value += nk * elp + (st.alpha0 - q.alpha) * elp;
      // E[ln p(mu,Lambda)] - E[ln q(mu,Lambda)]
      Eigen::VectorXd dm = q.m - st.m0;
      value += 0.5 * (d * std::log(st.beta0 / q.beta) + d -
                      d * st.beta0 / q.beta - st.beta0 * q.dof * dm.dot(q.w * dm));
      value += st.log_b0 - log_wishart_norm(q.w, q.dof);
      value += 0.5 * (st.nu0 - q.dof) * eld;
      value += 0.5 * (q.dof * d - q.dof * (st.w0_inv * q.w).trace());
      // -E[ln q(Z)]
      for (int i = 0; i < n; ++i) {
        const double r = resp(i, k);
        if (r > 1e-300) value -= r * std::log(r);
      }
    }
    return value;
  };

  GMMModel model;
  double prev = -std::numeric_limits<double>::infinity();
  for (int iter = 0; iter < opts.max_iters; ++iter) {
    m_step();
    // evaluated right after the M-step so every term uses statistics
    // consistent with the responsibilities that produced the posteriors;
    // mixing phases loses the monotonicity guarantee
    const double cur = elbo();
    model.elbo_trace.push_back(cur);
    if (std::isfinite(prev) && cur - prev < opts.tol) {
      model.converged = true;
      break;
    }
    prev = cur;
    e_step();
  }
  m_step();

  // export components, pruning those with negligible responsibility mass;
  // the heaviest component is always kept
  int heaviest = 0;
  for (int k = 1; k < f; ++k)
    if (st.nk[k] > st.nk[heaviest]) heaviest = k;
  double total_weight = 0.0;
  for (int k = 0; k < f; ++k) {
    if (st.nk[k] < opts.prune_weight * n && k != heaviest) {
      model.warnings.push_back("pruned degenerate component " + std::to_string(k));
      continue;
    }
    GmmComponent comp;
    comp.weight = st.nk[k];
    comp.mean = st.q[k].m;
    Eigen::MatrixXd prec = st.q[k].dof * st.q[k].w;
    comp.covariance = solve_sym(prec, Eigen::MatrixXd::Identity(d, d));
    comp.covariance = symmetrized(comp.covariance);
    model.components.push_back(comp);
    model.posteriors.push_back(st.q[k]);
    total_weight += comp.weight;
  }
  for (auto& comp : model.components) comp.weight /= total_weight;
  return model;
}

}  // namespace emgps
