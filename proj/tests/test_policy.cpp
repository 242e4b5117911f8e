#define DOCTEST_CONFIG_IMPLEMENT_WITH_MAIN
#include <doctest.h>

#include "emgps/lqr.hpp"
#include "emgps/policy.hpp"
#include "emgps/rng.hpp"

using namespace emgps;

namespace {

Eigen::MatrixXd random_spd2(Rng& rng) {
  Eigen::Matrix2d m;
  for (int i = 0; i < 2; ++i)
    for (int j = 0; j < 2; ++j) m(i, j) = rng.gaussian();
  return m * m.transpose() + 0.1 * Eigen::Matrix2d::Identity();
}

Eigen::MatrixXd eig_diag(const Eigen::MatrixXd& m) {
  const Eigen::SelfAdjointEigenSolver<Eigen::MatrixXd> es(m);
  return es.eigenvalues().asDiagonal();
}

// hand-rolled trajectory whose actions came from `theta` at the stored
// observed states
Trajectory fake_trajectory(const ControllerParams& theta, Rng& rng) {
  Trajectory t;
  const int horizon = theta.horizon();
  for (int k = 0; k <= horizon; ++k) t.true_states.push_back(rng.gaussian_vec(4));
  for (int k = 0; k < horizon; ++k) {
    t.observed_states.push_back(rng.gaussian_vec(4));
    const Eigen::Vector2d mean =
        theta.gain[k] * t.observed_states.back() + theta.offset[k];
    t.action_means.push_back(mean);
    t.actions.push_back(mean + 0.01 * rng.gaussian_vec(2));
    t.running_costs.push_back(1.0);
    t.cost_observations.push_back(std::exp(-1.0));
  }
  return t;
}

}  // namespace

TEST_CASE("single-condition covariance averaging is a pass-through") {
  Rng rng(1);
  const Eigen::MatrixXd sigma = random_spd2(rng);
  const std::vector<std::vector<Eigen::MatrixXd>> locals = {{sigma}};
  const auto full = global_covariance(locals, CovarianceMode::kFull);
  REQUIRE(full.size() == 1);
  CHECK(full[0].isApprox(sigma, 1e-12));

  const auto diag = global_covariance(locals, CovarianceMode::kDiagonal);
  CHECK(diag[0].isApprox(eig_diag(sigma), 1e-12));
}

TEST_CASE("two scalar conditions give the harmonic mean") {
  const std::vector<std::vector<Eigen::MatrixXd>> locals = {
      {Eigen::MatrixXd::Constant(1, 1, 1.0)}, {Eigen::MatrixXd::Constant(1, 1, 3.0)}};
  // (1/2 (1 + 1/3))^{-1} = 1.5
  const auto full = global_covariance(locals, CovarianceMode::kFull);
  CHECK(full[0](0, 0) == doctest::Approx(1.5).epsilon(1e-12));
  const auto diag = global_covariance(locals, CovarianceMode::kDiagonal);
  CHECK(diag[0](0, 0) == doctest::Approx(1.5).epsilon(1e-12));
}

TEST_CASE("averaged covariances stay positive definite") {
  Rng rng(7);
  for (int trial = 0; trial < 20; ++trial) {
    std::vector<std::vector<Eigen::MatrixXd>> locals(3);
    for (auto& c : locals)
      for (int k = 0; k < 4; ++k) c.push_back(random_spd2(rng));
    for (const auto mode : {CovarianceMode::kFull, CovarianceMode::kDiagonal}) {
      const auto out = global_covariance(locals, mode);
      REQUIRE(out.size() == 4);
      for (const auto& m : out) {
        CHECK(m.isApprox(m.transpose(), 1e-12));
        CHECK(Eigen::SelfAdjointEigenSolver<Eigen::MatrixXd>(m).eigenvalues().minCoeff() >
              0.0);
      }
    }
  }
}

TEST_CASE("diagonal mode lies between the extreme eigenvalue diagonals") {
  Rng rng(15);
  std::vector<std::vector<Eigen::MatrixXd>> locals(4);
  for (auto& c : locals) c.push_back(random_spd2(rng));
  const auto out = global_covariance(locals, CovarianceMode::kDiagonal);
  for (int i = 0; i < 2; ++i) {
    double lo = std::numeric_limits<double>::infinity(), hi = 0.0;
    for (const auto& c : locals) {
      const double v = eig_diag(c[0])(i, i);
      lo = std::min(lo, v);
      hi = std::max(hi, v);
    }
    CHECK(out[0](i, i) >= lo - 1e-12);
    CHECK(out[0](i, i) <= hi + 1e-12);
  }
}

TEST_CASE("diagonal-entry reading averages the plain diagonal") {
  Rng rng(21);
  const Eigen::MatrixXd a = random_spd2(rng), b = random_spd2(rng);
  const std::vector<std::vector<Eigen::MatrixXd>> locals = {{a}, {b}};
  const auto out = global_covariance(locals, CovarianceMode::kDiagonal,
                                     DiagonalReading::kDiagonalEntries);
  for (int i = 0; i < 2; ++i) {
    const double expect = 1.0 / (0.5 * (1.0 / a(i, i) + 1.0 / b(i, i)));
    CHECK(out[0](i, i) == doctest::Approx(expect).epsilon(1e-12));
  }
  CHECK(out[0](0, 1) == 0.0);
}

TEST_CASE("trace-inverse bound with exact equality in the symmetric case") {
  // K=1, C=1, identity initial covariance, identity contraction:
  // lhs = Tr(I_2^{-1}) = 2, rhs = nu^2 K^2 / C * 1/Tr(I_2) = 4 * 1/2 = 2
  const std::vector<Eigen::MatrixXd> global_covs = {Eigen::Matrix2d::Identity()};
  const std::vector<std::vector<Eigen::MatrixXd>> initial = {
      {Eigen::Matrix2d::Identity()}};
  const Theorem1Report report = theorem1_check(global_covs, initial);
  CHECK(report.lhs == doctest::Approx(2.0).epsilon(1e-12));
  CHECK(report.rhs == doctest::Approx(2.0).epsilon(1e-12));
  CHECK(report.holds);
}

TEST_CASE("shrinking the distilled covariances only raises the left side") {
  Rng rng(33);
  std::vector<Eigen::MatrixXd> global_covs;
  std::vector<std::vector<Eigen::MatrixXd>> initial(2);
  for (int k = 0; k < 3; ++k) {
    global_covs.push_back(eig_diag(random_spd2(rng)));
    for (auto& c : initial) c.push_back(random_spd2(rng) + Eigen::Matrix2d::Identity());
  }
  const Theorem1Report base = theorem1_check(global_covs, initial);
  std::vector<Eigen::MatrixXd> shrunk;
  for (const auto& m : global_covs) shrunk.push_back(0.5 * m);
  const Theorem1Report tighter = theorem1_check(shrunk, initial);
  CHECK(tighter.lhs == doctest::Approx(2.0 * base.lhs).epsilon(1e-12));
  CHECK(tighter.rhs == doctest::Approx(base.rhs).epsilon(1e-12));
}

TEST_CASE("training set pairs observed states with local policy means") {
  Rng rng(42);
  const int horizon = 3, conditions = 2, rollouts = 2;
  std::vector<ControllerParams> locals;
  std::vector<std::vector<Trajectory>> batches(conditions);
  for (int c = 0; c < conditions; ++c) {
    ControllerParams theta = ControllerParams::zeros(horizon, 4, 2, 0.2 + 0.1 * c);
    for (int k = 0; k < horizon; ++k) {
      theta.gain[k] = 0.1 * Eigen::MatrixXd::Random(2, 4);
      theta.offset[k] = Eigen::VectorXd::Random(2);
    }
    locals.push_back(theta);
    for (int s = 0; s < rollouts; ++s)
      batches[c].push_back(fake_trajectory(theta, rng));
  }

  const auto samples = build_training_set(batches, locals, 4);
  REQUIRE(samples.size() == static_cast<size_t>(horizon * conditions * rollouts));
  for (const auto& sample : samples) {
    const auto& theta = locals[sample.condition];
    const auto& traj = batches[sample.condition][sample.sample];
    CHECK(sample.state == traj.observed_states[sample.step]);
    CHECK(sample.target_mean.isApprox(
        theta.gain[sample.step] * sample.state + theta.offset[sample.step], 1e-12));
    // weight round-trips to the stored local covariance
    const Eigen::MatrixXd inv_weight =
        sample.weight.llt().solve(Eigen::MatrixXd::Identity(2, 2));
    CHECK(inv_weight.isApprox(theta.covariance(sample.step), 1e-10));
    CHECK(sample.iteration == 4);
  }

  batches[1].pop_back();
  CHECK_THROWS(build_training_set(batches, locals, 4));
}

TEST_CASE("global policy serialization and validation") {
  GlobalPolicy policy;
  policy.net = PolicyNet::make({4, 42, 42, 2}, 5);
  for (int k = 0; k < 3; ++k)
    policy.covariances.push_back(0.3 * Eigen::Matrix2d::Identity());
  policy.validate();

  const GlobalPolicy restored = GlobalPolicy::from_json(policy.to_json());
  REQUIRE(restored.covariances.size() == 3);
  for (int k = 0; k < 3; ++k)
    CHECK(restored.covariances[k].isApprox(policy.covariances[k], 1e-14));
  Rng rng(2);
  const Eigen::VectorXd x = rng.gaussian_vec(4);
  CHECK(restored.net.forward(x) == policy.net.forward(x));

  GlobalPolicy broken = policy;
  broken.covariances[1] = -Eigen::Matrix2d::Identity();
  CHECK_THROWS(broken.validate());
}

TEST_CASE("policy adapter samples around the network mean") {
  GlobalPolicy policy;
  policy.net = PolicyNet::make({4, 8, 2}, 11);
  policy.covariances.assign(1, 0.04 * Eigen::Matrix2d::Identity());
  GlobalPolicyAdapter adapter(policy);
  adapter.validate(1);
  CHECK_THROWS(adapter.validate(5));  // fewer covariances than the horizon

  Rng rng(3);
  const Eigen::Vector4d x(0.5, -0.2, 1.0, 0.0);
  const Eigen::Vector2d mean = adapter.mean(0, x);
  CHECK(mean.isApprox(Eigen::Vector2d(policy.net.forward(x)), 1e-12));
  const int n = 20000;
  Eigen::Vector2d sum = Eigen::Vector2d::Zero(), sumsq = Eigen::Vector2d::Zero();
  for (int i = 0; i < n; ++i) {
    const Eigen::Vector2d u = adapter.sample(0, x, rng);
    sum += u;
    sumsq += (u - mean).cwiseProduct(u - mean);
  }
  CHECK((sum / n).isApprox(mean, 0.05));
  CHECK((sumsq / n).x() == doctest::Approx(0.04).epsilon(0.1));
  CHECK((sumsq / n).y() == doctest::Approx(0.04).epsilon(0.1));
}
