// SPDX-License-Identifier: Apache-2.0
//
// Fusion-in-encoder: the first `local_layers` encoder layers attend only
// within consecutive chunks of `chunk` tokens, the remaining
// `global_layers` attend over the whole sequence. It is a scheduling policy
// over the existing layer stack and adds no parameters.
#pragma once

#include <cstdint>
#include <optional>
#include <span>
#include <vector>

#include "zsumm/attention.hpp"

namespace zsumm {

struct FiEConfig {
  int local_layers = 0;
  int global_layers = 1;
  std::int64_t chunk = 256;

  /// Throws InvalidArgument unless local + global == total and chunk >= 1.
  void validate(int total_layers) const;
  /// Local layers first, `global_layers` last, over `total_layers`.
  static FiEConfig for_stack(int total_layers, int global_layers, std::int64_t chunk);
};

/// ceil(N / l) lengths; only the last may be short.
std::vector<std::int64_t> chunk_lengths(std::int64_t n, std::int64_t chunk);

/// Splits along the sequence axis (axis -2) of [N, d] or [B, N, d].
template <typename T>
std::vector<Tensor<T>> split_into_chunks(const Tensor<T>& h, std::int64_t chunk);

/// Attention score elements for one sequence:
/// m * sum(c_i^2) + n * N^2, which is m*N*l + n*N^2 when l divides N.
std::uint64_t fie_cost(std::int64_t n, int total_layers, int local_layers, int global_layers,
                       std::int64_t chunk);
/// L * N^2.
std::uint64_t full_attention_cost(std::int64_t n, int total_layers);

/// Runs a DA layer stack over `h` [B, N, d]. Without `fie` every layer is
/// global. Local layers use within-chunk relative positions and a mask
/// confined to the chunk; global layers use full-sequence buckets.
template <typename T>
Tensor<T> run_encoder_stack(const Tensor<T>& h, std::span<const DALayerParams<T>> layers,
                            const Tensor<T>& rel_table, std::int64_t max_distance,
                            std::span<const std::uint8_t> valid,
                            const std::optional<FiEConfig>& fie, const RunContext& ctx);

}  // namespace zsumm
