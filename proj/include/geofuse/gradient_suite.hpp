#pragma once

#include <cstdint>
#include <functional>
#include <ostream>
#include <string>
#include <vector>

#include "geofuse/gradcheck.hpp"
#include "geofuse/network.hpp"

namespace geofuse {

/// One differentiable operation (or whole-model wiring) checked against
/// central differences in 64-bit for a given seed.
struct GradSuiteCase {
  std::string name;
  std::function<GradCheckReport(std::uint64_t seed, double tolerance)> run;
};

/// Every op of the library plus the end-to-end toy model for each trainable
/// variant (16x16 input, 2 observations, K = 3).
std::vector<GradSuiteCase> gradient_suite();

/// Toy configuration used by the end-to-end checks.
NetworkConfig toy_network_config(Variant v);

struct GradSuiteResult {
  std::string name;
  int seeds = 0;
  int failures = 0;
  double worst = 0.0;
  std::string first_failure;  // report summary of the first failing seed
};

/// Runs every case (optionally filtered by name substring) for seeds
/// [0, seeds). Progress lines go to `log` when non-null.
std::vector<GradSuiteResult> run_gradient_suite(int seeds, double tolerance,
                                                const std::string& filter, std::ostream* log);

}  // namespace geofuse
