#define DOCTEST_CONFIG_IMPLEMENT_WITH_MAIN
#include <doctest.h>

#include <cmath>

#include "emgps/rng.hpp"
#include "emgps/smoother.hpp"

using namespace emgps;

namespace {

ClosedLoopModel random_system(Rng& rng, int nx, int ny, int horizon) {
  ClosedLoopModel clm;
  for (int k = 0; k < horizon; ++k) {
    Eigen::MatrixXd a = Eigen::MatrixXd::NullaryExpr(nx, nx, [&] { return rng.gaussian(); });
    a *= 0.6 / std::max(1.0, a.cwiseAbs().maxCoeff());
    Eigen::MatrixXd qh = Eigen::MatrixXd::NullaryExpr(nx, nx, [&] { return rng.gaussian(); });
    Eigen::MatrixXd rh = Eigen::MatrixXd::NullaryExpr(ny, ny, [&] { return rng.gaussian(); });
    clm.a.push_back(a);
    clm.b.push_back(rng.gaussian_vec(nx));
    clm.q.push_back(qh * qh.transpose() + 0.2 * Eigen::MatrixXd::Identity(nx, nx));
    clm.c.push_back(Eigen::MatrixXd::NullaryExpr(ny, nx, [&] { return rng.gaussian(); }));
    clm.d.push_back(rng.gaussian_vec(ny));
    clm.r.push_back(rh * rh.transpose() + 0.2 * Eigen::MatrixXd::Identity(ny, ny));
  }
  return clm;
}

/// Brute-force oracle: build the joint Gaussian over (x_1..x_{K+1}, y_1..y_K)
/// and condition on the observations.
struct DenseOracle {
  std::vector<Eigen::VectorXd> means;  // K+1 smoothed means
  Eigen::MatrixXd cov;                 // full smoothed state covariance
  double log_likelihood = 0.0;
};

DenseOracle dense_condition(const ClosedLoopModel& clm,
                            const std::vector<Eigen::VectorXd>& obs,
                            const Eigen::VectorXd& prior_mean,
                            const Eigen::MatrixXd& prior_cov) {
  const int K = clm.horizon(), nx = clm.state_dim(), ny = clm.obs_dim();
  const int sx = nx * (K + 1), sy = ny * K;

  // joint mean/cov by propagating the linear-Gaussian structure
  Eigen::VectorXd mu = Eigen::VectorXd::Zero(sx + sy);
  Eigen::MatrixXd cov = Eigen::MatrixXd::Zero(sx + sy, sx + sy);

  // states first: x_{k+1} = A_k x_k + b_k + w_k
  mu.segment(0, nx) = prior_mean;
  cov.block(0, 0, nx, nx) = prior_cov;
  for (int k = 0; k < K; ++k) {
    mu.segment((k + 1) * nx, nx) = clm.a[k] * mu.segment(k * nx, nx) + clm.b[k];
    // cross terms with every earlier state
    for (int j = 0; j <= k; ++j) {
      const Eigen::MatrixXd cross =
          clm.a[k] * cov.block(k * nx, j * nx, nx, nx);
      cov.block((k + 1) * nx, j * nx, nx, nx) = cross;
      cov.block(j * nx, (k + 1) * nx, nx, nx) = cross.transpose();
    }
    cov.block((k + 1) * nx, (k + 1) * nx, nx, nx) =
        clm.a[k] * cov.block(k * nx, k * nx, nx, nx) * clm.a[k].transpose() + clm.q[k];
  }
  // observations: y_k = C_k x_k + d_k + v_k (x_k is the k-th state, 0-based)
  for (int k = 0; k < K; ++k) {
    const int yi = sx + k * ny;
    mu.segment(yi, ny) = clm.c[k] * mu.segment(k * nx, nx) + clm.d[k];
    for (int j = 0; j <= K; ++j) {
      const Eigen::MatrixXd cross = clm.c[k] * cov.block(k * nx, j * nx, nx, nx);
      cov.block(yi, j * nx, ny, nx) = cross;
      cov.block(j * nx, yi, nx, ny) = cross.transpose();
    }
    for (int l = 0; l < K; ++l) {
      const int yj = sx + l * ny;
      Eigen::MatrixXd blk =
          clm.c[k] * cov.block(k * nx, l * nx, nx, nx) * clm.c[l].transpose();
      if (k == l) blk += clm.r[k];
      cov.block(yi, yj, ny, ny) = blk;
    }
  }

  Eigen::VectorXd y(sy);
  for (int k = 0; k < K; ++k) y.segment(k * ny, ny) = obs[k];

  const Eigen::MatrixXd syy = cov.block(sx, sx, sy, sy);
  const Eigen::MatrixXd sxy = cov.block(0, sx, sx, sy);
  const Eigen::LLT<Eigen::MatrixXd> llt(syy);
  const Eigen::VectorXd innov = y - mu.segment(sx, sy);

  DenseOracle oracle;
  const Eigen::VectorXd post = mu.head(sx) + sxy * llt.solve(innov);
  oracle.cov = cov.block(0, 0, sx, sx) - sxy * llt.solve(sxy.transpose());
  for (int k = 0; k <= K; ++k) oracle.means.push_back(post.segment(k * nx, nx));

  double logdet = 0.0;
  for (int i = 0; i < sy; ++i) logdet += 2.0 * std::log(llt.matrixL()(i, i));
  oracle.log_likelihood = -0.5 * (innov.dot(llt.solve(innov)) + logdet +
                                  sy * std::log(2.0 * M_PI));
  return oracle;
}

std::vector<Eigen::VectorXd> sample_observations(const ClosedLoopModel& clm,
                                                 const Eigen::VectorXd& prior_mean,
                                                 const Eigen::MatrixXd& prior_cov,
                                                 Rng& rng) {
  const int nx = clm.state_dim();
  Eigen::VectorXd x =
      prior_mean + prior_cov.llt().matrixL() * rng.gaussian_vec(nx);
  std::vector<Eigen::VectorXd> obs;
  for (int k = 0; k < clm.horizon(); ++k) {
    obs.push_back(clm.c[k] * x + clm.d[k] +
                  clm.r[k].llt().matrixL() * rng.gaussian_vec(clm.obs_dim()));
    x = clm.a[k] * x + clm.b[k] + clm.q[k].llt().matrixL() * rng.gaussian_vec(nx);
  }
  return obs;
}

}  // namespace

TEST_CASE("filter and smoother match dense joint-Gaussian conditioning") {
  Rng rng(2024);
  for (int trial = 0; trial < 50; ++trial) {
    const int nx = 1 + static_cast<int>(rng.next_u64() % 3);  // <= 3
    const int ny = 1 + static_cast<int>(rng.next_u64() % 2);
    const int K = 1 + static_cast<int>(rng.next_u64() % 5);   // <= 5
    const ClosedLoopModel clm = random_system(rng, nx, ny, K);
    const Eigen::VectorXd prior_mean = rng.gaussian_vec(nx);
    Eigen::MatrixXd ph = Eigen::MatrixXd::NullaryExpr(nx, nx, [&] { return rng.gaussian(); });
    const Eigen::MatrixXd prior_cov =
        ph * ph.transpose() + 0.3 * Eigen::MatrixXd::Identity(nx, nx);
    const auto obs = sample_observations(clm, prior_mean, prior_cov, rng);

    const SmootherResult sm = smooth(clm, obs, prior_mean, prior_cov);
    const DenseOracle oracle = dense_condition(clm, obs, prior_mean, prior_cov);

    CHECK(std::abs(sm.log_likelihood - oracle.log_likelihood) < 1e-8);
    for (int k = 0; k <= K; ++k) {
      CHECK((sm.smoothed_means[k] - oracle.means[k]).cwiseAbs().maxCoeff() < 1e-8);
      const Eigen::MatrixXd oracle_cov = oracle.cov.block(k * nx, k * nx, nx, nx);
      CHECK((sm.smoothed_covs[k] - oracle_cov).cwiseAbs().maxCoeff() < 1e-8);
    }
    for (int k = 0; k < K; ++k) {
      const Eigen::MatrixXd oracle_lag = oracle.cov.block((k + 1) * nx, k * nx, nx, nx);
      CHECK((sm.lag_one_covs[k] - oracle_lag).cwiseAbs().maxCoeff() < 1e-8);
    }
  }
}

TEST_CASE("near-exact observation pins the filtered mean") {
  ClosedLoopModel clm;
  clm.a = {Eigen::MatrixXd::Identity(1, 1)};
  clm.b = {Eigen::VectorXd::Zero(1)};
  clm.q = {Eigen::MatrixXd::Identity(1, 1)};
  clm.c = {Eigen::MatrixXd::Identity(1, 1)};
  clm.d = {Eigen::VectorXd::Zero(1)};
  clm.r = {1e-12 * Eigen::MatrixXd::Identity(1, 1)};
  const std::vector<Eigen::VectorXd> obs = {Eigen::VectorXd::Constant(1, 7.0)};
  const FilterResult fr = kalman_filter(clm, obs, Eigen::VectorXd::Zero(1),
                                        Eigen::MatrixXd::Identity(1, 1));
  CHECK(fr.filtered_means[0](0) == doctest::Approx(7.0).epsilon(1e-9));
}

TEST_CASE("smoothed boundary equals filtered and conditioning shrinks variance") {
  Rng rng(31);
  const ClosedLoopModel clm = random_system(rng, 2, 1, 6);
  const Eigen::VectorXd prior_mean = Eigen::VectorXd::Zero(2);
  const Eigen::MatrixXd prior_cov = Eigen::MatrixXd::Identity(2, 2);
  const auto obs = sample_observations(clm, prior_mean, prior_cov, rng);
  const FilterResult fr = kalman_filter(clm, obs, prior_mean, prior_cov);
  const SmootherResult sm = rts_smoother(clm, fr);
  const int K = clm.horizon();
  CHECK((sm.smoothed_means[K] - fr.filtered_means[K]).cwiseAbs().maxCoeff() < 1e-12);
  CHECK((sm.smoothed_covs[K] - fr.filtered_covs[K]).cwiseAbs().maxCoeff() < 1e-12);
  for (int k = 0; k <= K; ++k)
    CHECK(sm.smoothed_covs[k].trace() <= fr.filtered_covs[k].trace() + 1e-10);
}

TEST_CASE("log-likelihood prefers data from the model") {
  Rng rng(77);
  const ClosedLoopModel clm = random_system(rng, 2, 1, 8);
  const Eigen::VectorXd prior_mean = Eigen::VectorXd::Zero(2);
  const Eigen::MatrixXd prior_cov = Eigen::MatrixXd::Identity(2, 2);
  int wins = 0;
  const int trials = 100;
  for (int t = 0; t < trials; ++t) {
    auto obs = sample_observations(clm, prior_mean, prior_cov, rng);
    const double ll = kalman_filter(clm, obs, prior_mean, prior_cov).log_likelihood;
    for (auto& o : obs) o.array() += 10.0;
    const double ll_shift = kalman_filter(clm, obs, prior_mean, prior_cov).log_likelihood;
    if (ll > ll_shift) ++wins;
  }
  CHECK(wins > 90);
}

TEST_CASE("closed loop block algebra") {
  Rng rng(4);
  TimeVaryingLinearModel model;
  model.nx = 4;
  model.nu = 2;
  for (int k = 0; k < 3; ++k) {
    StepModel s;
    s.a = Eigen::MatrixXd::NullaryExpr(4, 4, [&] { return rng.gaussian(); });
    s.b = Eigen::MatrixXd::NullaryExpr(4, 2, [&] { return rng.gaussian(); });
    s.c = rng.gaussian_vec(4);
    Eigen::MatrixXd sh = Eigen::MatrixXd::NullaryExpr(4, 4, [&] { return rng.gaussian(); });
    s.sigma = sh * sh.transpose() + Eigen::MatrixXd::Identity(4, 4);
    s.ay = Eigen::RowVectorXd::NullaryExpr(4, [&] { return rng.gaussian(); });
    s.by = Eigen::RowVectorXd::NullaryExpr(2, [&] { return rng.gaussian(); });
    s.cy = rng.gaussian();
    s.sig_y = 0.5;
    model.steps.push_back(s);
  }

  SUBCASE("open loop") {
    const ControllerParams zero = ControllerParams::zeros(3, 4, 2, 0.0);
    const ClosedLoopModel clm = closed_loop(model, zero);
    for (int k = 0; k < 3; ++k) {
      CHECK(clm.a[k].isApprox(model.steps[k].a));
      CHECK(clm.q[k].isApprox(model.steps[k].sigma));
      CHECK(clm.b[k].isApprox(model.steps[k].c));
    }
  }

  SUBCASE("feedback substitution") {
    ControllerParams theta = ControllerParams::zeros(3, 4, 2, 0.3);
    for (int k = 0; k < 3; ++k) {
      theta.gain[k] = Eigen::MatrixXd::NullaryExpr(2, 4, [&] { return rng.gaussian(); });
      theta.offset[k] = rng.gaussian_vec(2);
    }
    const ClosedLoopModel clm = closed_loop(model, theta);
    for (int k = 0; k < 3; ++k) {
      const auto& s = model.steps[k];
      CHECK((clm.a[k] - (s.a + s.b * theta.gain[k])).cwiseAbs().maxCoeff() < 1e-12);
      CHECK((clm.b[k] - (s.b * theta.offset[k] + s.c)).cwiseAbs().maxCoeff() < 1e-12);
      const Eigen::MatrixXd q_expected =
          s.sigma + s.b * theta.covariance(k) * s.b.transpose();
      CHECK((clm.q[k] - q_expected).cwiseAbs().maxCoeff() < 1e-12);
      // added noise is PSD
      Eigen::SelfAdjointEigenSolver<Eigen::MatrixXd> es(clm.q[k] - s.sigma);
      CHECK(es.eigenvalues().minCoeff() > -1e-12);
      CHECK((clm.c[k] - (s.ay + s.by * theta.gain[k])).cwiseAbs().maxCoeff() < 1e-12);
      const double r_expected =
          s.sig_y + (s.by * theta.covariance(k) * s.by.transpose())(0, 0);
      CHECK(clm.r[k](0, 0) == doctest::Approx(r_expected).epsilon(1e-12));
    }
  }
}
