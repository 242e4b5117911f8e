#pragma once

#include "emgps/controller.hpp"
#include "emgps/dynamics.hpp"

namespace emgps {

/// Finite-horizon Riccati backward pass on the fitted dynamics around
/// (x*, u*). Seeds the controller used as the starting point of the EM
/// refinement; Sigma_k = init_cov * I.
ControllerParams init_controller_lqr(const TimeVaryingLinearModel& model,
                                     const Eigen::MatrixXd& qx,
                                     const Eigen::MatrixXd& qu,
                                     const Eigen::VectorXd& target_state,
                                     const Eigen::VectorXd& target_action,
                                     double init_cov);

ControllerParams init_controller_lqr(const TimeVaryingLinearModel& model,
                                     const CostModel& cm, double init_cov);

}  // namespace emgps
