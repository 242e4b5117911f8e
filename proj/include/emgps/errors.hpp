#pragma once

#include <stdexcept>

namespace emgps {

struct DomainError : std::invalid_argument {
  using std::invalid_argument::invalid_argument;
};

struct ConfigError : std::invalid_argument {
  using std::invalid_argument::invalid_argument;
};

struct FittingError : std::runtime_error {
  using std::runtime_error::runtime_error;
};

}  // namespace emgps
