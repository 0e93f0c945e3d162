// SPDX-License-Identifier: Apache-2.0
//
// Finite-difference sweep over every differentiable op, the attention and
// encoder stacks, and the three pretraining losses end to end.
#pragma once

#include <cstdint>
#include <string>
#include <vector>

#include "zsumm/gradcheck.hpp"

namespace zsumm {

struct GradCheckCaseResult {
  std::string name;
  int instances = 0;
  std::size_t coords = 0;
  double max_error = 0.0;  // worst over all instances
  std::string worst;       // "<instance>:<coordinate>"
  bool passed = false;
};

struct GradCheckSuiteOptions {
  std::uint64_t seed = 0;
  int instances = 20;
  GradCheckOptions check;  // h = 1e-5, tolerance 1e-4
  /// Coordinates sampled per parameter tensor in the full-model cases.
  std::size_t model_coords_per_tensor = 3;
  /// Skips the three full-model cases.
  bool ops_only = false;
};

/// Full-model cases use a 2-layer, d = 16 double-precision model without
/// dropout. E_G is excluded from the RTD and CSP cases: it enters them only
/// through a stop-gradient, so its analytic gradient is zero by design.
std::vector<GradCheckCaseResult> gradcheck_suite(const GradCheckSuiteOptions& options = {});

}  // namespace zsumm
