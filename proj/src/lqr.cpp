#include "emgps/lqr.hpp"

#include "emgps/linalg.hpp"

namespace emgps {

ControllerParams init_controller_lqr(const TimeVaryingLinearModel& model,
                                     const Eigen::MatrixXd& qx,
                                     const Eigen::MatrixXd& qu,
                                     const Eigen::VectorXd& target_state,
                                     const Eigen::VectorXd& target_action,
                                     double init_cov) {
  const int horizon = model.horizon();
  const int nx = model.nx, nu = model.nu;
  ControllerParams params = ControllerParams::zeros(horizon, nx, nu, init_cov);

  // quadratic value carried as V(x) = x'Px + 2p'x + const
  Eigen::MatrixXd p_mat = qx;
  Eigen::VectorXd p_vec = -qx * target_state;
  for (int k = horizon - 1; k >= 0; --k) {
    const StepModel& s = model.steps[k];
    const Eigen::MatrixXd h = qu + s.b.transpose() * p_mat * s.b;
    const Eigen::MatrixXd gain =
        -solve_sym(h, Eigen::MatrixXd(s.b.transpose() * p_mat * s.a));
    const Eigen::VectorXd offset = -solve_sym(
        h, Eigen::VectorXd(s.b.transpose() * (p_mat * s.c + p_vec) - qu * target_action));
    if (!gain.allFinite() || !offset.allFinite())
      throw NumericalError("init_controller_lqr: Riccati blow-up at step " +
                           std::to_string(k));
    params.gain[k] = gain;
    params.offset[k] = offset;

    const Eigen::MatrixXd a_cl = s.a + s.b * gain;
    const Eigen::VectorXd drift = s.b * offset + s.c;
    const Eigen::VectorXd next_p_vec =
        -qx * target_state + gain.transpose() * qu * (offset - target_action) +
        a_cl.transpose() * (p_mat * drift + p_vec);
    p_mat = symmetrized(qx + gain.transpose() * qu * gain +
                        a_cl.transpose() * p_mat * a_cl);
    p_vec = next_p_vec;
  }
  params.clamp_to_bounds();
  return params;
}

ControllerParams init_controller_lqr(const TimeVaryingLinearModel& model,
                                     const CostModel& cm, double init_cov) {
  return init_controller_lqr(model, cm.qx, cm.qu, cm.target_state, cm.target_action,
                             init_cov);
}

}  // namespace emgps
