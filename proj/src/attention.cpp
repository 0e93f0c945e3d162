// SPDX-License-Identifier: Apache-2.0
#include "zsumm/attention.hpp"

#include <algorithm>
#include <cmath>
#include <numeric>

#include "zsumm/errors.hpp"

namespace zsumm {

std::int32_t relative_bucket(std::int64_t i, std::int64_t j, std::int64_t k) {
  const std::int64_t rel = i - j;
  if (rel <= -k) return 0;
  if (rel >= k) return static_cast<std::int32_t>(2 * k - 1);
  return static_cast<std::int32_t>(rel + k);
}

RelativeIndex RelativeIndex::build(std::span<const std::int64_t> query_pos,
                                   std::span<const std::int64_t> key_pos,
                                   std::int64_t max_distance) {
  if (max_distance < 1) throw InvalidArgument("max relative distance must be >= 1");
  if (query_pos.empty() || key_pos.empty()) throw InvalidArgument("empty position list");
  RelativeIndex r;
  r.queries = static_cast<std::int64_t>(query_pos.size());
  r.keys = static_cast<std::int64_t>(key_pos.size());
  const auto [qmin, qmax] = std::minmax_element(query_pos.begin(), query_pos.end());
  const auto [kmin, kmax] = std::minmax_element(key_pos.begin(), key_pos.end());
  // bucket(a, b) depends on a - b monotonically; both directions are needed.
  const std::int32_t lo = std::min(relative_bucket(*qmin, *kmax, max_distance),
                                   relative_bucket(*kmin, *qmax, max_distance));
  const std::int32_t hi = std::max(relative_bucket(*qmax, *kmin, max_distance),
                                   relative_bucket(*kmax, *qmin, max_distance));
  r.first_row = lo;
  r.rows = hi - lo + 1;
  r.query_key.resize(static_cast<std::size_t>(r.queries * r.keys));
  r.key_query.resize(static_cast<std::size_t>(r.queries * r.keys));
  for (std::int64_t q = 0; q < r.queries; ++q) {
    for (std::int64_t k = 0; k < r.keys; ++k) {
      const auto qp = query_pos[static_cast<std::size_t>(q)];
      const auto kp = key_pos[static_cast<std::size_t>(k)];
      r.query_key[static_cast<std::size_t>(q * r.keys + k)] =
          relative_bucket(qp, kp, max_distance) - lo;
      r.key_query[static_cast<std::size_t>(k * r.queries + q)] =
          relative_bucket(kp, qp, max_distance) - lo;
    }
  }
  return r;
}

RelativeIndex RelativeIndex::build(std::int64_t queries, std::int64_t keys,
                                   std::int64_t max_distance) {
  std::vector<std::int64_t> qp(static_cast<std::size_t>(queries));
  std::vector<std::int64_t> kp(static_cast<std::size_t>(keys));
  std::iota(qp.begin(), qp.end(), 0);
  std::iota(kp.begin(), kp.end(), 0);
  return build(qp, kp, max_distance);
}

template <typename T>
Tensor<T> split_heads(const Tensor<T>& x, int heads) {
  const auto b = x.dim(0), n = x.dim(1), d = x.dim(2);
  if (d % heads != 0) throw ShapeError("width not divisible by head count");
  return permute(reshape(x, {b, n, heads, d / heads}), {0, 2, 1, 3});
}

template <typename T>
Tensor<T> merge_heads(const Tensor<T>& x) {
  const auto b = x.dim(0), h = x.dim(1), n = x.dim(2), dh = x.dim(3);
  return reshape(permute(x, {0, 2, 1, 3}), {b, n, h * dh});
}

AttentionMask padding_mask(std::int64_t batch, std::int64_t queries, std::int64_t keys,
                           std::span<const std::uint8_t> key_valid, bool causal) {
  if (static_cast<std::int64_t>(key_valid.size()) != batch * keys) {
    throw ShapeError("padding mask: validity length mismatch");
  }
  AttentionMask m{batch, queries, keys, {}};
  m.allow.resize(static_cast<std::size_t>(batch * queries * keys));
  for (std::int64_t b = 0; b < batch; ++b) {
    for (std::int64_t i = 0; i < queries; ++i) {
      for (std::int64_t j = 0; j < keys; ++j) {
        const bool ok = key_valid[static_cast<std::size_t>(b * keys + j)] && (!causal || j <= i);
        m.allow[static_cast<std::size_t>((b * queries + i) * keys + j)] = ok ? 1 : 0;
      }
    }
  }
  return m;
}

namespace {

// [R, d] x W -> [heads, R, dh]
template <typename T>
Tensor<T> project_positions(const Tensor<T>& table_rows, const Tensor<T>& w, int heads) {
  const auto r = table_rows.dim(0), d = w.dim(1);
  return permute(reshape(matmul(table_rows, w), {r, heads, d / heads}), {1, 0, 2});
}

}  // namespace

template <typename T>
Tensor<T> da_attention_logits(const Tensor<T>& h, const DAttentionParams<T>& params,
                              const Tensor<T>& rel_table, std::int64_t max_distance,
                              std::span<const std::int64_t> positions,
                              std::uint64_t* score_counter) {
  const bool unbatched = h.rank() == 2;
  const Tensor<T> x = unbatched ? reshape(h, {1, h.dim(0), h.dim(1)}) : h;
  const auto batch = x.dim(0), n = x.dim(1), d = x.dim(2);
  if (d % params.heads != 0) throw ShapeError("d not divisible by heads");
  if (rel_table.dim(0) != 2 * max_distance) {
    throw ShapeError("relative table must have 2k rows");
  }
  const auto dh = d / params.heads;

  const RelativeIndex rel =
      positions.empty() ? RelativeIndex::build(n, n, max_distance)
                        : RelativeIndex::build(positions, positions, max_distance);
  const Tensor<T> rows = slice(rel_table, 0, rel.first_row, rel.rows);

  const auto qc = split_heads(matmul(x, params.w_qc), params.heads);  // [B,h,N,dh]
  const auto kc = split_heads(matmul(x, params.w_kc), params.heads);
  const auto qr = project_positions(rows, params.w_qr, params.heads);  // [h,R,dh]
  const auto kr = project_positions(rows, params.w_kr, params.heads);

  const auto c2c = matmul(qc, transpose(kc));                           // [B,h,N,N]
  const auto c2p = gather_last(matmul(qc, transpose(kr)), rel.query_key, n);
  const auto p2c = transpose(gather_last(matmul(kc, transpose(qr)), rel.key_query, n));
  auto logits = scale(add(add(c2c, c2p), p2c), T(1.0 / std::sqrt(3.0 * double(dh))));
  if (score_counter) *score_counter += static_cast<std::uint64_t>(batch * n * n);
  if (unbatched) logits = reshape(logits, {params.heads, n, n});
  return logits;
}

template <typename T>
Tensor<T> da_attention(const Tensor<T>& h, const DAttentionParams<T>& params,
                       const Tensor<T>& rel_table, std::int64_t max_distance,
                       const AttentionMask& mask, const RunContext& ctx,
                       std::span<const std::int64_t> positions) {
  const auto logits = da_attention_logits(h, params, rel_table, max_distance, positions,
                                          ctx.score_counter);
  auto probs = masked_softmax(logits, mask);
  const double rate = ctx.active_dropout();
  if (rate > 0) probs = dropout(probs, rate, *ctx.rng);
  const auto v = split_heads(matmul(h, params.w_v), params.heads);
  return matmul(merge_heads(matmul(probs, v)), params.w_o);
}

template <typename T>
Tensor<T> feed_forward(const Tensor<T>& x, const FeedForwardParams<T>& p,
                       const RunContext& ctx) {
  auto hidden = gelu(add(matmul(x, p.w1), p.b1));
  const double rate = ctx.active_dropout();
  if (rate > 0) hidden = dropout(hidden, rate, *ctx.rng);
  return add(matmul(hidden, p.w2), p.b2);
}

template <typename T>
Tensor<T> da_layer_forward(const Tensor<T>& h, const DALayerParams<T>& layer,
                           const Tensor<T>& rel_table, std::int64_t max_distance,
                           const AttentionMask& mask, const RunContext& ctx,
                           std::span<const std::int64_t> positions) {
  const T eps = T(kLayerNormEps);
  const double rate = ctx.active_dropout();
  auto a = da_attention(layer_norm(h, layer.ln1_gain, layer.ln1_bias, eps), layer.attn,
                        rel_table, max_distance, mask, ctx, positions);
  if (rate > 0) a = dropout(a, rate, *ctx.rng);
  auto h1 = add(h, a);
  auto f = feed_forward(layer_norm(h1, layer.ln2_gain, layer.ln2_bias, eps), layer.ffn, ctx);
  if (rate > 0) f = dropout(f, rate, *ctx.rng);
  return add(h1, f);
}

#define ZSUMM_INSTANTIATE(T)                                                            \
  template Tensor<T> split_heads<T>(const Tensor<T>&, int);                             \
  template Tensor<T> merge_heads<T>(const Tensor<T>&);                                  \
  template Tensor<T> da_attention_logits<T>(const Tensor<T>&, const DAttentionParams<T>&, \
                                            const Tensor<T>&, std::int64_t,             \
                                            std::span<const std::int64_t>, std::uint64_t*); \
  template Tensor<T> da_attention<T>(const Tensor<T>&, const DAttentionParams<T>&,      \
                                     const Tensor<T>&, std::int64_t, const AttentionMask&, \
                                     const RunContext&, std::span<const std::int64_t>); \
  template Tensor<T> feed_forward<T>(const Tensor<T>&, const FeedForwardParams<T>&,     \
                                     const RunContext&);                                \
  template Tensor<T> da_layer_forward<T>(const Tensor<T>&, const DALayerParams<T>&,     \
                                         const Tensor<T>&, std::int64_t,                \
                                         const AttentionMask&, const RunContext&,       \
                                         std::span<const std::int64_t>);

ZSUMM_INSTANTIATE(float)
ZSUMM_INSTANTIATE(double)

#undef ZSUMM_INSTANTIATE

}  // namespace zsumm
