// SPDX-License-Identifier: Apache-2.0
//
// Greedy and beam-search decoding over any next-token scorer. Finished
// hypotheses are ranked by log p(Y) / ((5 + |Y|) / 6)^alpha, where |Y|
// counts generated tokens including EOS.
#pragma once

#include <cstdint>
#include <functional>
#include <set>
#include <span>
#include <vector>

#include "zsumm/data.hpp"
#include "zsumm/model.hpp"

namespace zsumm {

struct DecodeConfig {
  int beam = 4;
  double alpha = 1.0;
  /// 0 disables repeated n-gram blocking.
  int block_ngram = 3;
  int max_length = 64;
  /// Generated tokens required before EOS is allowed.
  int min_length = 1;
  TokenId bos = special::kBos;
  TokenId eos = special::kEos;
  /// Never generated (PAD, BOS, MASK, SEP and sentinels for the model).
  std::vector<TokenId> suppress;

  void validate() const;
};

double length_penalty(std::int64_t length, double alpha);

/// Tokens that would complete an n-gram already present in `prefix`.
std::set<TokenId> block_repeated_ngrams(std::span<const TokenId> prefix, int n);

/// Log-probabilities of the next token after each prefix (every prefix
/// starts with BOS). Returns prefixes.size() rows of `vocab` entries.
class NextTokenScorer {
 public:
  virtual ~NextTokenScorer() = default;
  virtual std::int64_t vocab_size() const = 0;
  virtual std::vector<std::vector<double>> log_probs(
      const std::vector<std::vector<TokenId>>& prefixes) = 0;
};

struct Hypothesis {
  std::vector<TokenId> tokens;  // generated tokens, without BOS and EOS
  double log_prob = 0.0;
  double score = 0.0;
  bool finished = false;  // ended with EOS rather than at max length
};

Hypothesis greedy_decode(NextTokenScorer& scorer, const DecodeConfig& cfg);
/// Standard beam search; the greedy hypothesis joins the final candidate
/// pool, so the result never scores below greedy decoding.
Hypothesis beam_search(NextTokenScorer& scorer, const DecodeConfig& cfg);

/// Scorer backed by the seq2seq model for one encoded input.
template <typename T>
class ModelScorer final : public NextTokenScorer {
 public:
  ModelScorer(const Seq2SeqModel<T>& model, const std::vector<TokenId>& input);
  std::int64_t vocab_size() const override { return model_.config().vocab_size; }
  std::vector<std::vector<double>> log_probs(
      const std::vector<std::vector<TokenId>>& prefixes) override;

 private:
  const Seq2SeqModel<T>& model_;
  Tensor<T> memory_;  // [1, N, d]
  std::vector<std::uint8_t> valid_;
};

/// Default suppression list for model decoding.
std::vector<TokenId> model_suppressed_tokens();

/// Encodes `input` and decodes with beam search (greedy when beam == 1).
template <typename T>
Hypothesis generate(const Seq2SeqModel<T>& model, const std::vector<TokenId>& input,
                    const DecodeConfig& cfg);

}  // namespace zsumm
