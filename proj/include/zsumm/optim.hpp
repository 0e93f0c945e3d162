// SPDX-License-Identifier: Apache-2.0
//
// AdamW with decoupled weight decay, a linear warmup/decay schedule and
// global-norm gradient clipping.
#pragma once

#include <cstdint>
#include <span>
#include <vector>

#include "zsumm/model.hpp"

namespace zsumm {

struct OptimizerConfig {
  double lr = 1e-4;  // peak
  std::int64_t warmup = 100;
  std::int64_t total = 1000;
  double beta1 = 0.9;
  double beta2 = 0.999;
  double eps = 1e-6;
  double weight_decay = 0.01;
  /// <= 0 disables clipping.
  double clip_norm = 1.0;

  void validate() const;
};

/// 0 -> peak linearly over `warmup` steps, then peak -> 0 at `total`;
/// 0 afterwards.
double lr_at_step(std::int64_t step, const OptimizerConfig& cfg);

/// Scales every gradient by max_norm / g when the global L2 norm g exceeds
/// `max_norm`. Returns g before scaling.
template <typename T>
double clip_global_norm(std::span<const NamedParameter<T>> params, double max_norm);

template <typename T>
struct AdamState {
  std::int64_t step = 0;
  std::vector<std::vector<T>> m, v;  // aligned with the parameter list

  void reset(std::span<const NamedParameter<T>> params);
};

/// One bias-corrected update:
///   theta -= lr * (m_hat / (sqrt(v_hat) + eps) + wd * theta)
/// with wd applied only to parameters flagged for decay. Throws
/// NumericError naming the first tensor with a non-finite gradient before
/// touching anything.
template <typename T>
void adamw_step(std::span<const NamedParameter<T>> params, AdamState<T>& state,
                const OptimizerConfig& cfg, double lr);

}  // namespace zsumm
