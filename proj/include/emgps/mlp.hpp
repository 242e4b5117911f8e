#pragma once

#include <cstdint>
#include <vector>

#include <Eigen/Dense>

#include "emgps/errors.hpp"
#include "emgps/json_util.hpp"
#include "emgps/rng.hpp"

namespace emgps {

/// Fully connected network with RELU hidden units and a linear output
/// layer. Inputs are standardized with stored statistics before the first
/// affine map.
struct PolicyNet {
  std::vector<Eigen::MatrixXd> weights;  // layer l: out x in
  std::vector<Eigen::VectorXd> biases;
  Eigen::VectorXd input_mean;
  Eigen::VectorXd input_std;

  int input_dim() const { return weights.empty() ? 0 : static_cast<int>(weights[0].cols()); }
  int output_dim() const { return weights.empty() ? 0 : static_cast<int>(weights.back().rows()); }
  int layer_count() const { return static_cast<int>(weights.size()); }

  Eigen::VectorXd forward(const Eigen::VectorXd& x) const;

  /// Glorot-uniform initialization, seeded. Standardization starts as
  /// identity until set_normalization is called.
  static PolicyNet make(const std::vector<int>& dims, std::uint64_t seed);

  void set_normalization(const Eigen::VectorXd& mean, const Eigen::VectorXd& std);

  json to_json() const;
  static PolicyNet from_json(const json& j);
};

/// Flat views over all trainable parameters, in a fixed layer order.
struct NetGradient {
  std::vector<Eigen::MatrixXd> d_weights;
  std::vector<Eigen::VectorXd> d_biases;

  static NetGradient zeros_like(const PolicyNet& net);
  void add_scaled(const NetGradient& other, double scale);
};

/// Reverse-mode gradient of upstream^T * forward(x) w.r.t. all parameters.
/// `upstream` is d(loss)/d(output).
NetGradient mlp_backward(const PolicyNet& net, const Eigen::VectorXd& x,
                         const Eigen::VectorXd& upstream);

/// One supervised pair: state, local-policy mean action, and the inverse
/// local covariance acting as the regression weight.
struct TrainingSample {
  Eigen::VectorXd state;
  Eigen::VectorXd target_mean;
  Eigen::MatrixXd weight;  // PD
  int step = 0;
  int condition = 0;
  int sample = 0;
  int iteration = 0;
};

struct TrainOptions {
  int epochs = 4000;
  int minibatch = 25;
  int batches_per_epoch = 50;
  double learning_rate = 1e-3;
  double beta1 = 0.9;
  double beta2 = 0.999;
  double epsilon = 1e-8;
  std::uint64_t seed = 0;
  bool refresh_normalization = true;
};

struct TrainResult {
  std::vector<double> epoch_loss;  // mean minibatch loss per epoch
};

/// Minibatch Adam on the weighted quadratic mean term of the KL objective.
/// The net is updated in place (warm start across calls is the natural use).
TrainResult train_supervised(PolicyNet& net, const std::vector<TrainingSample>& samples,
                             const TrainOptions& opts);

double quadratic_loss(const PolicyNet& net, const TrainingSample& sample);

}  // namespace emgps
