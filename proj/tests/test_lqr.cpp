#define DOCTEST_CONFIG_IMPLEMENT_WITH_MAIN
#include <doctest.h>

#include "emgps/lqr.hpp"
#include "emgps/rng.hpp"

using namespace emgps;

namespace {

// scalar plant x' = a x + b u + c with y-row zeroed out
TimeVaryingLinearModel scalar_model(int horizon, double a, double b, double sigma) {
  TimeVaryingLinearModel model;
  model.nx = 1;
  model.nu = 1;
  for (int k = 0; k < horizon; ++k) {
    StepModel s;
    s.a = Eigen::MatrixXd::Constant(1, 1, a);
    s.b = Eigen::MatrixXd::Constant(1, 1, b);
    s.c = Eigen::VectorXd::Zero(1);
    s.sigma = Eigen::MatrixXd::Constant(1, 1, sigma);
    s.ay = Eigen::RowVectorXd::Zero(1);
    s.by = Eigen::RowVectorXd::Zero(1);
    s.cy = 0.0;
    s.sig_y = 1.0;
    model.steps.push_back(s);
  }
  return model;
}

double simulated_cost(const TimeVaryingLinearModel& model, const ControllerParams& theta,
                      const Eigen::MatrixXd& qx, const Eigen::MatrixXd& qu,
                      std::uint64_t seed, int rollouts) {
  Rng rng(seed);
  double total = 0.0;
  const int nx = model.nx, nu = model.nu;
  for (int r = 0; r < rollouts; ++r) {
    Eigen::VectorXd x = rng.gaussian_vec(nx);
    for (int k = 0; k < model.horizon(); ++k) {
      Eigen::VectorXd u = theta.gain[k] * x + theta.offset[k];
      total += x.dot(qx * x) + u.dot(qu * u);
      x = model.steps[k].a * x + model.steps[k].b * u + model.steps[k].c +
          0.1 * rng.gaussian_vec(nx);
      (void)nu;
    }
  }
  return total / rollouts;
}

}  // namespace

TEST_CASE("one-step scalar Riccati gain by hand") {
  // a=1, b=1, q=1, r=1, K=1: F = -(r + b^2 q)^{-1} b q a = -0.5
  const auto model = scalar_model(1, 1.0, 1.0, 0.01);
  const Eigen::MatrixXd q = Eigen::MatrixXd::Identity(1, 1);
  const Eigen::MatrixXd r = Eigen::MatrixXd::Identity(1, 1);
  const ControllerParams theta = init_controller_lqr(
      model, q, r, Eigen::VectorXd::Zero(1), Eigen::VectorXd::Zero(1), 0.1);
  REQUIRE(theta.horizon() == 1);
  CHECK(theta.gain[0](0, 0) == doctest::Approx(-0.5).epsilon(1e-12));
  CHECK(theta.offset[0](0) == doctest::Approx(0.0));
  CHECK(theta.covariance(0)(0, 0) == doctest::Approx(0.1));
}

TEST_CASE("expensive control drives gains to zero") {
  const auto model = scalar_model(5, 0.9, 1.0, 0.01);
  const Eigen::MatrixXd q = Eigen::MatrixXd::Identity(1, 1);
  const Eigen::MatrixXd r = 1e9 * Eigen::MatrixXd::Identity(1, 1);
  const ControllerParams theta = init_controller_lqr(
      model, q, r, Eigen::VectorXd::Zero(1), Eigen::VectorXd::Zero(1), 0.1);
  for (int k = 0; k < theta.horizon(); ++k)
    CHECK(std::abs(theta.gain[k](0, 0)) < 1e-6);
}

TEST_CASE("LQR beats the zero policy on simulated cost") {
  const auto model = scalar_model(20, 1.05, 1.0, 0.01);  // mildly unstable
  const Eigen::MatrixXd q = Eigen::MatrixXd::Identity(1, 1);
  const Eigen::MatrixXd r = 0.1 * Eigen::MatrixXd::Identity(1, 1);
  const ControllerParams lqr = init_controller_lqr(
      model, q, r, Eigen::VectorXd::Zero(1), Eigen::VectorXd::Zero(1), 0.0001);
  const ControllerParams zero = ControllerParams::zeros(20, 1, 1, 0.0001);
  const double cost_lqr = simulated_cost(model, lqr, q, r, 7, 100);
  const double cost_zero = simulated_cost(model, zero, q, r, 7, 100);
  CHECK(cost_lqr < cost_zero);
}

TEST_CASE("offset steers toward a nonzero target") {
  // plant x' = x + u; target x* = 3: the steady-state policy mean at x=x*
  // must keep the state there, so F x* + e = 0 action drift toward x*
  const auto model = scalar_model(40, 1.0, 1.0, 1e-6);
  const Eigen::MatrixXd q = Eigen::MatrixXd::Identity(1, 1);
  const Eigen::MatrixXd r = 1e-3 * Eigen::MatrixXd::Identity(1, 1);
  const Eigen::VectorXd target = Eigen::VectorXd::Constant(1, 3.0);
  const ControllerParams theta = init_controller_lqr(
      model, q, r, target, Eigen::VectorXd::Zero(1), 1e-6);
  // run the deterministic closed loop from x=0
  double x = 0.0;
  for (int k = 0; k < theta.horizon(); ++k)
    x = x + (theta.gain[k](0, 0) * x + theta.offset[k](0));
  CHECK(x == doctest::Approx(3.0).epsilon(0.01));
}

TEST_CASE("point-mass gains are finite and covariance is the requested seed") {
  // fabricated 4-state/2-action model shaped like the point mass
  TimeVaryingLinearModel model;
  model.nx = 4;
  model.nu = 2;
  const double dt = 0.1;
  for (int k = 0; k < 30; ++k) {
    StepModel s;
    s.a = Eigen::MatrixXd::Identity(4, 4);
    s.a(0, 2) = dt;
    s.a(1, 3) = dt;
    s.b = Eigen::MatrixXd::Zero(4, 2);
    s.b(2, 0) = dt;
    s.b(3, 1) = dt;
    s.c = Eigen::VectorXd::Zero(4);
    s.sigma = 1e-4 * Eigen::MatrixXd::Identity(4, 4);
    s.ay = Eigen::RowVectorXd::Zero(4);
    s.by = Eigen::RowVectorXd::Zero(2);
    s.sig_y = 1.0;
    model.steps.push_back(s);
  }
  CostModel cm;
  cm.target_state << 5.0, 20.0, 0.0, 0.0;
  const ControllerParams theta = init_controller_lqr(model, cm, 0.1);
  REQUIRE(theta.horizon() == 30);
  for (int k = 0; k < 30; ++k) {
    CHECK(theta.gain[k].allFinite());
    CHECK(theta.offset[k].allFinite());
    CHECK(theta.covariance(k).isApprox(0.1 * Eigen::Matrix2d::Identity(), 1e-12));
  }
  theta.validate();
}

TEST_CASE("controller vectorization round trip and bounds") {
  ControllerParams theta = ControllerParams::zeros(3, 4, 2, 0.2);
  Rng rng(5);
  for (int k = 0; k < 3; ++k) {
    Eigen::VectorXd v = theta.step_vector(k);
    for (int i = 0; i < v.size(); ++i) v[i] += 0.01 * rng.gaussian();
    theta.set_step_vector(k, v);
    CHECK(theta.step_vector(k).isApprox(v));
  }
  CHECK(theta.step_dim() == 2 * 4 + 2 + 2 * 2);
  CHECK(theta.vectorized().size() == 3 * theta.step_dim());

  theta.gain[1](0, 0) = 1e9;  // outside the box
  CHECK_THROWS(theta.validate());
  theta.clamp_to_bounds();
  theta.validate();
  CHECK(theta.gain[1](0, 0) == doctest::Approx(theta.bounds.gain_bound));
}

TEST_CASE("linear-Gaussian policy sampling statistics") {
  ControllerParams theta = ControllerParams::zeros(1, 4, 2, 0.25);
  theta.offset[0] << 1.0, -1.0;
  LinearGaussianPolicy policy(theta);
  Rng rng(9);
  const Eigen::Vector4d x = Eigen::Vector4d::Zero();
  CHECK(policy.mean(0, x).isApprox(theta.offset[0]));
  const int n = 20000;
  Eigen::Vector2d sum = Eigen::Vector2d::Zero(), sumsq = Eigen::Vector2d::Zero();
  for (int i = 0; i < n; ++i) {
    const Eigen::Vector2d u = policy.sample(0, x, rng);
    sum += u;
    sumsq += u.cwiseProduct(u);
  }
  const Eigen::Vector2d mean = sum / n;
  const Eigen::Vector2d var = sumsq / n - mean.cwiseProduct(mean);
  CHECK(mean.x() == doctest::Approx(1.0).epsilon(0.02));
  CHECK(mean.y() == doctest::Approx(-1.0).epsilon(0.02));
  CHECK(var.x() == doctest::Approx(0.25).epsilon(0.05));
  CHECK(var.y() == doctest::Approx(0.25).epsilon(0.05));
}

TEST_CASE("controller JSON round trip") {
  ControllerParams theta = ControllerParams::zeros(2, 4, 2, 0.1);
  theta.gain[0](1, 2) = -3.5;
  theta.offset[1] << 0.25, 4.0;
  const ControllerParams restored = ControllerParams::from_json(theta.to_json());
  REQUIRE(restored.horizon() == 2);
  for (int k = 0; k < 2; ++k) {
    CHECK(restored.gain[k] == theta.gain[k]);
    CHECK(restored.offset[k] == theta.offset[k]);
    CHECK(restored.covariance(k).isApprox(theta.covariance(k), 1e-14));
  }
}
