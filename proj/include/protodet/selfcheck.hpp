#pragma once

// Built-in verification suites shared by the CLI (check-grads, oracle) and
// the test binaries.

#include <cstdint>
#include <string>
#include <vector>

namespace protodet {

struct CheckResult {
  std::string name;
  std::uint64_t seed = 0;
  double error = 0;  // max relative error, or mismatch count for oracles
  double tolerance = 0;
  bool pass = false;
};

/// Tape gradients vs central differences (double precision) for the
/// contrastive, spectral, focal-distribution and composed losses.
std::vector<CheckResult> gradient_suite(int seeds, std::uint64_t base_seed = 5, double tolerance = 1e-4);

/// Label-map rasterization vs per-cell oracle, and sorted AUC vs the
/// pairwise oracle.
std::vector<CheckResult> oracle_suite(int cases, std::uint64_t base_seed = 5);

}  // namespace protodet
