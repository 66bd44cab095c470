#pragma once

// Numerical equivariance suite: harmonics, layers, attention, encoder,
// end-to-end prediction and canonical frame, each reduced to one worst-case
// error against a tolerance.

#include <cstdint>
#include <string>
#include <vector>

namespace epio {

struct SuiteOptions {
  int lmax = 8;
  /// Random draws per layer check; harmonics use 10x, model-level checks trials / 5 (at least 1 each).
  int trials = 100;
  std::uint64_t seed = 0;
  /// Runs layers and models in float32 with relaxed tolerances.
  bool float32 = false;
  /// Test hook: adds `corrupt_size` to entry (0, 0) of the Wigner block of this
  /// order wherever the suite rotates features (-1 = off).
  int corrupt_order = -1;
  double corrupt_size = 1e-3;
};

struct CheckResult {
  std::string name;
  double error = 0.0;
  double tolerance = 0.0;
  double seconds = 0.0;
  bool passed() const { return error < tolerance; }
};

std::vector<CheckResult> run_equivariance_suite(const SuiteOptions& opts);

}  // namespace epio
