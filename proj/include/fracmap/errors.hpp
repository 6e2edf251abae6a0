#pragma once

#include <stdexcept>
#include <string>

namespace fracmap {

// Invalid run configuration (bad flags, inconsistent geometry). CLI exit code 2.
struct config_error : std::invalid_argument {
  using std::invalid_argument::invalid_argument;
};

// Numerical failure at runtime (solver stall, divergence). CLI exit code 3.
struct numerical_error : std::runtime_error {
  using std::runtime_error::runtime_error;
};

// Requested problem size exceeds the configured storage budget.
struct resource_error : std::runtime_error {
  using std::runtime_error::runtime_error;
};

// Interpolated sphere value too close to the origin to renormalize.
struct degenerate_interpolation_error : numerical_error {
  using numerical_error::numerical_error;
};

}  // namespace fracmap
