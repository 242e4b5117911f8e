#pragma once

#include <cstdint>
#include <random>

#include <Eigen/Dense>

namespace emgps {

/// Deterministic random source. Gaussian draws use Box-Muller on top of
/// mt19937_64 so the byte stream does not depend on the standard library's
/// normal_distribution implementation.
class Rng {
 public:
  explicit Rng(std::uint64_t seed) : gen_(seed) {}

  std::uint64_t next_u64() { return gen_(); }

  /// Uniform on [0, 1).
  double uniform() {
    return static_cast<double>(gen_() >> 11) * 0x1.0p-53;
  }

  double uniform(double lo, double hi) { return lo + (hi - lo) * uniform(); }

  /// Standard normal.
  double gaussian();

  Eigen::VectorXd gaussian_vec(int n);

  /// Stream derivation: mixes (master, stream) into an independent seed.
  static std::uint64_t derive(std::uint64_t master, std::uint64_t stream);

 private:
  std::mt19937_64 gen_;
  bool has_spare_ = false;
  double spare_ = 0.0;
};

}  // namespace emgps
