#ifndef SPIKMAMBA_DIAGNOSTICS_HPP
#define SPIKMAMBA_DIAGNOSTICS_HPP

#include <cstdint>
#include <limits>
#include <vector>

namespace spikmamba::diag {

// Forward-pass probe for the finite-difference harness. While enabled it
// records, in execution order, which side of the spike-window clamp every
// membrane input landed on (0: below, 1: inside, 2: above) plus the closest
// approach to a window edge, and the smallest batch variance batchnorm
// normalized by. Two perturbed forwards whose branch traces differ straddle a
// non-smooth point, so their finite difference is excluded from comparison.
struct ForwardProbe {
  bool enabled = false;
  std::vector<std::uint8_t> branch_trace;
  double min_window_margin = std::numeric_limits<double>::infinity();
  double min_bn_variance = std::numeric_limits<double>::infinity();

  void reset() {
    branch_trace.clear();
    min_window_margin = std::numeric_limits<double>::infinity();
    min_bn_variance = std::numeric_limits<double>::infinity();
  }
};

ForwardProbe& probe();  // thread-local

}  // namespace spikmamba::diag

#endif  // SPIKMAMBA_DIAGNOSTICS_HPP
