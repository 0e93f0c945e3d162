// SPDX-License-Identifier: Apache-2.0
//
// Central-difference gradient checking. Only the forward pass of the
// function under test is used to build the numerical estimate.
#pragma once

#include <cstdint>
#include <functional>
#include <string>
#include <vector>

#include "zsumm/tensor.hpp"

namespace zsumm {

struct GradCheckOptions {
  double step = 1e-5;
  double tolerance = 1e-4;
  /// Coordinates sampled per tensor; 0 checks every coordinate.
  std::size_t coords_per_tensor = 0;
  std::uint64_t seed = 0;
};

struct GradCheckResult {
  double max_error = 0.0;  // max |analytic - numeric| / max(1, |numeric|)
  std::size_t coords = 0;
  std::string worst;  // "<tensor #>[<flat index>]"
  bool passed(double tolerance) const { return max_error <= tolerance; }
};

/// `loss` must rebuild its graph from the current values of `wrt` on every
/// call; coordinates are perturbed in place and restored.
GradCheckResult check_gradients(const std::function<Tensor<double>()>& loss,
                                std::vector<Tensor<double>> wrt,
                                const GradCheckOptions& options = {});

}  // namespace zsumm
