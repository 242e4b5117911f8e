#include "emgps/mlp.hpp"

#include <cmath>

#include "emgps/linalg.hpp"

namespace emgps {
namespace {

Eigen::VectorXd standardize(const PolicyNet& net, const Eigen::VectorXd& x) {
  return (x - net.input_mean).cwiseQuotient(net.input_std);
}

struct ForwardCache {
  std::vector<Eigen::VectorXd> activations;      // input of each layer
  std::vector<Eigen::VectorXd> preactivations;   // z = W a + b
};

Eigen::VectorXd forward_cached(const PolicyNet& net, const Eigen::VectorXd& x,
                               ForwardCache& cache) {
  Eigen::VectorXd a = standardize(net, x);
  const int layers = net.layer_count();
  cache.activations.resize(layers);
  cache.preactivations.resize(layers);
  for (int l = 0; l < layers; ++l) {
    cache.activations[l] = a;
    Eigen::VectorXd z = net.weights[l] * a + net.biases[l];
    cache.preactivations[l] = z;
    a = (l + 1 < layers) ? z.cwiseMax(0.0) : z;
  }
  return a;
}

}  // namespace

Eigen::VectorXd PolicyNet::forward(const Eigen::VectorXd& x) const {
  Eigen::VectorXd a = standardize(*this, x);
  const int layers = layer_count();
  for (int l = 0; l < layers; ++l) {
    Eigen::VectorXd z = weights[l] * a + biases[l];
    a = (l + 1 < layers) ? z.cwiseMax(0.0) : z;
  }
  return a;
}

PolicyNet PolicyNet::make(const std::vector<int>& dims, std::uint64_t seed) {
  if (dims.size() < 2) throw ConfigError("PolicyNet: need at least input and output dims");
  PolicyNet net;
  Rng rng(Rng::derive(seed, 0x6e'65'74));
  for (std::size_t l = 0; l + 1 < dims.size(); ++l) {
    const int fan_in = dims[l], fan_out = dims[l + 1];
    const double bound = std::sqrt(6.0 / (fan_in + fan_out));
    Eigen::MatrixXd w(fan_out, fan_in);
    for (int i = 0; i < fan_out; ++i)
      for (int j = 0; j < fan_in; ++j) w(i, j) = rng.uniform(-bound, bound);
    net.weights.push_back(w);
    net.biases.push_back(Eigen::VectorXd::Zero(fan_out));
  }
  net.input_mean = Eigen::VectorXd::Zero(dims.front());
  net.input_std = Eigen::VectorXd::Ones(dims.front());
  return net;
}

void PolicyNet::set_normalization(const Eigen::VectorXd& mean,
                                  const Eigen::VectorXd& std) {
  if (mean.size() != input_dim() || std.size() != input_dim())
    throw ConfigError("PolicyNet: normalization dimension mismatch");
  if (std.minCoeff() <= 0.0)
    throw ConfigError("PolicyNet: normalization std must be positive");
  input_mean = mean;
  input_std = std;
}

json PolicyNet::to_json() const {
  json layers = json::array();
  for (int l = 0; l < layer_count(); ++l)
    layers.push_back(json{{"weight", emgps::to_json(weights[l])},
                          {"bias", emgps::to_json(biases[l])}});
  return json{{"schema_version", 1},
              {"layers", layers},
              {"input_mean", emgps::to_json(input_mean)},
              {"input_std", emgps::to_json(input_std)}};
}

PolicyNet PolicyNet::from_json(const json& j) {
  PolicyNet net;
  for (const auto& l : j.at("layers")) {
    net.weights.push_back(matrix_from_json(l.at("weight")));
    net.biases.push_back(vector_from_json(l.at("bias")));
  }
  net.input_mean = vector_from_json(j.at("input_mean"));
  net.input_std = vector_from_json(j.at("input_std"));
  return net;
}

NetGradient NetGradient::zeros_like(const PolicyNet& net) {
  NetGradient g;
  for (int l = 0; l < net.layer_count(); ++l) {
    g.d_weights.push_back(Eigen::MatrixXd::Zero(net.weights[l].rows(), net.weights[l].cols()));
    g.d_biases.push_back(Eigen::VectorXd::Zero(net.biases[l].size()));
  }
  return g;
}

void NetGradient::add_scaled(const NetGradient& other, double scale) {
  for (std::size_t l = 0; l < d_weights.size(); ++l) {
    d_weights[l] += scale * other.d_weights[l];
    d_biases[l] += scale * other.d_biases[l];
  }
}

NetGradient mlp_backward(const PolicyNet& net, const Eigen::VectorXd& x,
                         const Eigen::VectorXd& upstream) {
  ForwardCache cache;
  forward_cached(net, x, cache);
  const int layers = net.layer_count();
  NetGradient grad = NetGradient::zeros_like(net);

  Eigen::VectorXd delta = upstream;
  for (int l = layers - 1; l >= 0; --l) {
    if (l < layers - 1) {
      // RELU mask of this layer's preactivation
      delta = delta.cwiseProduct(
          (cache.preactivations[l].array() > 0.0).cast<double>().matrix());
    }
    grad.d_weights[l] = delta * cache.activations[l].transpose();
    grad.d_biases[l] = delta;
    if (l > 0) delta = net.weights[l].transpose() * delta;
  }
  return grad;
}

double quadratic_loss(const PolicyNet& net, const TrainingSample& sample) {
  const Eigen::VectorXd r = net.forward(sample.state) - sample.target_mean;
  return 0.5 * r.dot(sample.weight * r);
}

TrainResult train_supervised(PolicyNet& net, const std::vector<TrainingSample>& samples,
                             const TrainOptions& opts) {
  if (samples.empty()) throw ConfigError("train_supervised: no samples");
  const int n = static_cast<int>(samples.size());

  if (opts.refresh_normalization) {
    const int d = net.input_dim();
    Eigen::VectorXd mean = Eigen::VectorXd::Zero(d);
    for (const auto& s : samples) mean += s.state;
    mean /= n;
    Eigen::VectorXd var = Eigen::VectorXd::Zero(d);
    for (const auto& s : samples) var += (s.state - mean).cwiseAbs2();
    var /= n;
    net.set_normalization(mean, (var.array() + 1e-8).sqrt().matrix());
  }

  // Adam state
  NetGradient m = NetGradient::zeros_like(net);
  NetGradient v = NetGradient::zeros_like(net);
  long t = 0;

  Rng rng(Rng::derive(opts.seed, 0x74'72'6e));
  std::vector<int> order(n);
  for (int i = 0; i < n; ++i) order[i] = i;
  int cursor = n;  // force shuffle on first use

  TrainResult result;
  result.epoch_loss.reserve(opts.epochs);

  for (int epoch = 0; epoch < opts.epochs; ++epoch) {
    double epoch_loss = 0.0;
    long batch_count = 0;
    for (int batch = 0; batch < opts.batches_per_epoch; ++batch) {
      NetGradient grad = NetGradient::zeros_like(net);
      double batch_loss = 0.0;
      for (int s = 0; s < opts.minibatch; ++s) {
        if (cursor >= n) {
          // Fisher-Yates reshuffle
          for (int i = n - 1; i > 0; --i) {
            const int j = static_cast<int>(rng.next_u64() % (i + 1));
            std::swap(order[i], order[j]);
          }
          cursor = 0;
        }
        const TrainingSample& sample = samples[order[cursor++]];
        const Eigen::VectorXd r = net.forward(sample.state) - sample.target_mean;
        batch_loss += 0.5 * r.dot(sample.weight * r);
        grad.add_scaled(mlp_backward(net, sample.state, sample.weight * r), 1.0);
      }
      batch_loss /= opts.minibatch;
      if (!std::isfinite(batch_loss))
        throw NumericalError("train_supervised: non-finite loss at epoch " +
                             std::to_string(epoch) + " batch " + std::to_string(batch));
      epoch_loss += batch_loss;
      ++batch_count;

      const double inv = 1.0 / opts.minibatch;
      ++t;
      const double bc1 = 1.0 - std::pow(opts.beta1, static_cast<double>(t));
      const double bc2 = 1.0 - std::pow(opts.beta2, static_cast<double>(t));
      for (int l = 0; l < net.layer_count(); ++l) {
        auto adam = [&](Eigen::MatrixXd& param, Eigen::MatrixXd& m1, Eigen::MatrixXd& m2,
                        const Eigen::MatrixXd& g_raw) {
          const Eigen::MatrixXd g = inv * g_raw;
          m1 = opts.beta1 * m1 + (1.0 - opts.beta1) * g;
          m2 = opts.beta2 * m2 + (1.0 - opts.beta2) * g.cwiseAbs2();
          param -= opts.learning_rate *
                   ((m1 / bc1).array() / ((m2 / bc2).array().sqrt() + opts.epsilon))
                       .matrix();
        };
        adam(net.weights[l], m.d_weights[l], v.d_weights[l], grad.d_weights[l]);
        Eigen::MatrixXd bias_m(net.biases[l].size(), 1), bias_v(net.biases[l].size(), 1);
        bias_m.col(0) = m.d_biases[l];
        bias_v.col(0) = v.d_biases[l];
        Eigen::MatrixXd bias(net.biases[l].size(), 1);
        bias.col(0) = net.biases[l];
        adam(bias, bias_m, bias_v, Eigen::MatrixXd(grad.d_biases[l]));
        net.biases[l] = bias.col(0);
        m.d_biases[l] = bias_m.col(0);
        v.d_biases[l] = bias_v.col(0);
      }
    }
    result.epoch_loss.push_back(epoch_loss / batch_count);
  }
  return result;
}

}  // namespace emgps
