// SPDX-License-Identifier: Apache-2.0
//
// Disentangled attention: each token carries a content vector, and the
// pairwise position enters only through a bucketed relative-distance table
// shared by all layers. Logits sum content-to-content, content-to-position
// and position-to-content terms.
#pragma once

#include <cstdint>
#include <optional>
#include <random>
#include <span>
#include <vector>

#include "zsumm/tensor.hpp"

namespace zsumm {

/// Per-forward switches shared by every layer.
struct RunContext {
  bool training = false;
  double dropout = 0.0;
  std::mt19937_64* rng = nullptr;
  /// Incremented by batch * rows * cols for every attention score matrix
  /// (heads are not counted).
  std::uint64_t* score_counter = nullptr;

  double active_dropout() const { return training && rng ? dropout : 0.0; }
};

/// 0 when i-j <= -k, 2k-1 when i-j >= k, i-j+k otherwise.
std::int32_t relative_bucket(std::int64_t i, std::int64_t j, std::int64_t k);

/// Bucket indices for every (query, key) pair, rebased so that only the
/// table rows [first_row, first_row + rows) are touched.
struct RelativeIndex {
  std::int32_t first_row = 0;
  std::int32_t rows = 0;
  std::int64_t queries = 0;
  std::int64_t keys = 0;
  std::vector<std::int32_t> query_key;  // [q][k] -> bucket(q, k) - first_row
  std::vector<std::int32_t> key_query;  // [k][q] -> bucket(k, q) - first_row

  static RelativeIndex build(std::span<const std::int64_t> query_pos,
                             std::span<const std::int64_t> key_pos,
                             std::int64_t max_distance);
  static RelativeIndex build(std::int64_t queries, std::int64_t keys,
                             std::int64_t max_distance);
};

template <typename T>
struct DAttentionParams {
  Tensor<T> w_qc, w_kc, w_v;  // content projections [d, d]
  Tensor<T> w_qr, w_kr;       // position projections [d, d]
  Tensor<T> w_o;              // output projection [d, d]
  int heads = 1;

  std::int64_t width() const { return w_qc.dim(0); }
};

template <typename T>
struct FeedForwardParams {
  Tensor<T> w1, b1, w2, b2;
};

template <typename T>
struct DALayerParams {
  Tensor<T> ln1_gain, ln1_bias;
  DAttentionParams<T> attn;
  Tensor<T> ln2_gain, ln2_bias;
  FeedForwardParams<T> ffn;
};

/// [B, N, d] -> [B, heads, N, d / heads].
template <typename T>
Tensor<T> split_heads(const Tensor<T>& x, int heads);
/// [B, heads, N, dh] -> [B, N, heads * dh].
template <typename T>
Tensor<T> merge_heads(const Tensor<T>& x);

/// Key-padding mask for a [B, N] batch: query i may see key j iff key j is
/// a real token (and j <= i when `causal`).
AttentionMask padding_mask(std::int64_t batch, std::int64_t queries, std::int64_t keys,
                           std::span<const std::uint8_t> key_valid, bool causal = false);

/// Raw disentangled logits, already scaled by 1/sqrt(3 * d / heads).
/// `h` is [B, N, d] (or [N, d], giving [heads, N, N]); output is
/// [B, heads, N, N]. `positions` defaults to 0..N-1.
template <typename T>
Tensor<T> da_attention_logits(const Tensor<T>& h, const DAttentionParams<T>& params,
                              const Tensor<T>& rel_table, std::int64_t max_distance,
                              std::span<const std::int64_t> positions = {},
                              std::uint64_t* score_counter = nullptr);

/// Attention sublayer output (before the residual add), [B, N, d].
template <typename T>
Tensor<T> da_attention(const Tensor<T>& h, const DAttentionParams<T>& params,
                       const Tensor<T>& rel_table, std::int64_t max_distance,
                       const AttentionMask& mask, const RunContext& ctx,
                       std::span<const std::int64_t> positions = {});

template <typename T>
Tensor<T> feed_forward(const Tensor<T>& x, const FeedForwardParams<T>& p,
                       const RunContext& ctx);

/// Pre-norm residual block: H + attn(LN(H)), then + ffn(LN(.)).
/// A query row whose mask is all false receives zero from attention.
template <typename T>
Tensor<T> da_layer_forward(const Tensor<T>& h, const DALayerParams<T>& layer,
                           const Tensor<T>& rel_table, std::int64_t max_distance,
                           const AttentionMask& mask, const RunContext& ctx,
                           std::span<const std::int64_t> positions = {});

constexpr double kLayerNormEps = 1e-5;

}  // namespace zsumm
