// SPDX-License-Identifier: Apache-2.0
//
// Corruption plans and losses for the three pretraining tasks (masked LM on
// the generator, replaced-token detection on the discriminator, corrupted
// span prediction on the seq2seq path) and the grounded summary likelihood.
//
// Batched losses average per example first, then across the batch, so a
// padded batch scores exactly like its examples taken one at a time.
#pragma once

#include <cstdint>
#include <random>
#include <span>
#include <utility>
#include <vector>

#include "zsumm/data.hpp"
#include "zsumm/tensor.hpp"

namespace zsumm {

inline constexpr double kDefaultMaskRate = 0.15;

/// max(1, round(rate * n)).
std::int64_t corruption_budget(std::int64_t n, double rate);

/// PAD, BOS, EOS, MASK, SEP and sentinels are never corrupted; UNK is.
bool is_corruptible(TokenId id);

struct MlmPlan {
  std::vector<std::int64_t> positions;  // sorted, unique
  std::vector<TokenId> originals;       // tokens at `positions`
};

/// Uniform sample without replacement of corruption_budget(eligible, rate)
/// eligible positions. Throws InvalidArgument when nothing is eligible.
MlmPlan build_mlm_plan(std::span<const TokenId> tokens, std::mt19937_64& rng,
                       double rate = kDefaultMaskRate);
std::vector<TokenId> apply_mlm_mask(std::span<const TokenId> tokens, const MlmPlan& plan);

/// Copies `tokens` and, at every planned position, draws a token from
/// softmax(row) of `logits` ([N, vocab] row-major, temperature 1).
template <typename T>
std::vector<TokenId> sample_discriminator_input(std::span<const TokenId> tokens,
                                                const MlmPlan& plan, std::span<const T> logits,
                                                std::int64_t vocab, std::mt19937_64& rng);

/// 1 where the discriminator input still equals the original token.
std::vector<std::uint8_t> rtd_labels(std::span<const TokenId> tokens,
                                     std::span<const TokenId> replaced);

enum class CspMode { kSpan, kSentence };

struct CspConfig {
  double rate = kDefaultMaskRate;
  double mean_span = 3.0;
  int max_span = 8;
  CspMode mode = CspMode::kSpan;
  /// Sentence-final tokens for CspMode::kSentence.
  std::vector<TokenId> sentence_delimiters;
};

struct CspSpan {
  std::int64_t start = 0;
  std::int64_t length = 0;
  TokenId sentinel = special::kFirstSentinel;
};

struct CspPlan {
  std::vector<CspSpan> spans;   // ordered by start, disjoint, never adjacent
  std::vector<TokenId> input;   // tokens with each span collapsed to its sentinel
  std::vector<TokenId> target;  // [M_0] span_0 [M_1] span_1 ... EOS
};

/// Collapses the given (start, length) spans; touching spans merge.
CspPlan apply_csp_spans(std::span<const TokenId> tokens,
                        std::span<const std::pair<std::int64_t, std::int64_t>> spans);

/// Poisson(mean) clipped to [1, max_len].
std::int64_t sample_span_length(std::mt19937_64& rng, double mean, int max_len);

/// Span mode draws clipped-Poisson lengths at uniform starts, redrawing the
/// start on overlap, and trims the last span so exactly
/// corruption_budget(N, rate) tokens are covered. Adjacent spans merge.
/// Sentence mode corrupts whole delimiter-terminated sentences in random
/// order until the budget is met, always leaving one sentence intact; with
/// fewer than two complete sentences it falls back to span mode.
CspPlan build_csp_plan(std::span<const TokenId> tokens, std::mt19937_64& rng,
                       const CspConfig& config = {});

struct LossWeights {
  double mlm = 1.0;
  double rtd = 30.0;
  double csp = 1.0;
  void validate() const;
};

/// Generator logits [B, N, V] (or [N, V] with one plan); NLL of the
/// original tokens over planned positions only.
template <typename T>
Tensor<T> mlm_loss(const Tensor<T>& logits, std::span<const MlmPlan> plans);

/// Discriminator scores [B, N] (or [N]); BCE over every position whose
/// `valid` flag is set. An empty `valid` marks every position real.
template <typename T>
Tensor<T> rtd_loss(const Tensor<T>& scores, std::span<const std::uint8_t> labels,
                   std::span<const std::uint8_t> valid = {});

/// Decoder logits [B, T, V] against `labels` [B*T]; `ignore` marks padding.
template <typename T>
Tensor<T> sequence_nll(const Tensor<T>& logits, std::span<const TokenId> labels,
                       TokenId ignore = special::kPad);

template <typename T>
Tensor<T> csp_loss(const Tensor<T>& logits, std::span<const TokenId> labels) {
  return sequence_nll(logits, labels);
}

template <typename T>
Tensor<T> grounded_loss(const Tensor<T>& logits, std::span<const TokenId> labels) {
  return sequence_nll(logits, labels);
}

template <typename T>
Tensor<T> joint_loss(const Tensor<T>& mlm, const Tensor<T>& rtd, const Tensor<T>& csp,
                     const LossWeights& w);

}  // namespace zsumm
