// SPDX-License-Identifier: Apache-2.0
#include "zsumm/objectives.hpp"

#include <algorithm>
#include <cmath>
#include <numeric>

#include "zsumm/errors.hpp"

namespace zsumm {

std::int64_t corruption_budget(std::int64_t n, double rate) {
  return std::max<std::int64_t>(1, std::llround(rate * static_cast<double>(n)));
}

bool is_corruptible(TokenId id) {
  return id != special::kPad && id != special::kBos && id != special::kEos &&
         id != special::kMask && id != special::kSep && !Vocabulary::is_sentinel(id);
}

MlmPlan build_mlm_plan(std::span<const TokenId> tokens, std::mt19937_64& rng, double rate) {
  if (!(rate > 0.0 && rate < 1.0)) throw InvalidArgument("mask rate must lie in (0, 1)");
  std::vector<std::int64_t> eligible;
  for (std::size_t i = 0; i < tokens.size(); ++i) {
    if (is_corruptible(tokens[i])) eligible.push_back(static_cast<std::int64_t>(i));
  }
  if (eligible.empty()) throw InvalidArgument("no maskable tokens in sequence");
  const auto n = static_cast<std::int64_t>(eligible.size());
  const auto count = std::min(n, corruption_budget(n, rate));
  // Partial Fisher-Yates.
  for (std::int64_t i = 0; i < count; ++i) {
    std::uniform_int_distribution<std::int64_t> pick(i, n - 1);
    std::swap(eligible[static_cast<std::size_t>(i)],
              eligible[static_cast<std::size_t>(pick(rng))]);
  }
  MlmPlan plan;
  plan.positions.assign(eligible.begin(), eligible.begin() + count);
  std::sort(plan.positions.begin(), plan.positions.end());
  for (auto p : plan.positions) plan.originals.push_back(tokens[static_cast<std::size_t>(p)]);
  return plan;
}

std::vector<TokenId> apply_mlm_mask(std::span<const TokenId> tokens, const MlmPlan& plan) {
  std::vector<TokenId> out(tokens.begin(), tokens.end());
  for (auto p : plan.positions) {
    if (p < 0 || p >= std::ssize(out)) throw OutOfRange("mask position outside sequence");
    out[static_cast<std::size_t>(p)] = special::kMask;
  }
  return out;
}

template <typename T>
std::vector<TokenId> sample_discriminator_input(std::span<const TokenId> tokens,
                                                const MlmPlan& plan, std::span<const T> logits,
                                                std::int64_t vocab, std::mt19937_64& rng) {
  if (vocab < 1 || std::ssize(logits) < std::ssize(tokens) * vocab) {
    throw ShapeError("generator logits do not cover the sequence");
  }
  std::vector<TokenId> out(tokens.begin(), tokens.end());
  std::vector<double> probs(static_cast<std::size_t>(vocab));
  std::uniform_real_distribution<double> unit(0.0, 1.0);
  for (auto p : plan.positions) {
    if (p < 0 || p >= std::ssize(out)) throw OutOfRange("mask position outside sequence");
    const T* row = logits.data() + p * vocab;
    const double mx = static_cast<double>(*std::max_element(row, row + vocab));
    double total = 0;
    for (std::int64_t v = 0; v < vocab; ++v) {
      probs[static_cast<std::size_t>(v)] = std::exp(static_cast<double>(row[v]) - mx);
      total += probs[static_cast<std::size_t>(v)];
    }
    const double u = unit(rng) * total;
    double acc = 0;
    TokenId chosen = static_cast<TokenId>(vocab - 1);
    for (std::int64_t v = 0; v < vocab; ++v) {
      acc += probs[static_cast<std::size_t>(v)];
      if (u < acc) {
        chosen = static_cast<TokenId>(v);
        break;
      }
    }
    out[static_cast<std::size_t>(p)] = chosen;
  }
  return out;
}

std::vector<std::uint8_t> rtd_labels(std::span<const TokenId> tokens,
                                     std::span<const TokenId> replaced) {
  if (tokens.size() != replaced.size()) throw ShapeError("rtd labels: length mismatch");
  std::vector<std::uint8_t> labels(tokens.size());
  for (std::size_t i = 0; i < tokens.size(); ++i) labels[i] = tokens[i] == replaced[i];
  return labels;
}

std::int64_t sample_span_length(std::mt19937_64& rng, double mean, int max_len) {
  if (!(mean > 0.0) || max_len < 1) throw InvalidArgument("span length needs mean > 0, max >= 1");
  std::poisson_distribution<std::int64_t> poisson(mean);
  return std::clamp<std::int64_t>(poisson(rng), 1, max_len);
}

namespace {

CspPlan assemble(std::span<const TokenId> tokens, std::vector<std::uint8_t> covered) {
  CspPlan plan;
  const auto n = std::ssize(tokens);
  for (std::int64_t i = 0; i < n;) {
    if (!covered[static_cast<std::size_t>(i)]) {
      plan.input.push_back(tokens[static_cast<std::size_t>(i)]);
      ++i;
      continue;
    }
    if (std::ssize(plan.spans) >= special::kSentinels) {
      throw InvalidArgument("span plan needs more than " + std::to_string(special::kSentinels) +
                            " sentinels");
    }
    CspSpan s{i, 0, Vocabulary::sentinel(static_cast<int>(plan.spans.size()))};
    plan.input.push_back(s.sentinel);
    plan.target.push_back(s.sentinel);
    while (i < n && covered[static_cast<std::size_t>(i)]) {
      plan.target.push_back(tokens[static_cast<std::size_t>(i)]);
      ++s.length;
      ++i;
    }
    plan.spans.push_back(s);
  }
  plan.target.push_back(special::kEos);
  return plan;
}

std::vector<std::uint8_t> span_cover(std::int64_t n, std::mt19937_64& rng,
                                     const CspConfig& c) {
  std::vector<std::uint8_t> covered(static_cast<std::size_t>(n), 0);
  const std::int64_t budget = std::min(corruption_budget(n, c.rate), n - 1);
  std::int64_t total = 0;
  constexpr int kMaxAttempts = 64;
  while (total < budget) {
    const auto len = std::min(sample_span_length(rng, c.mean_span, c.max_span), budget - total);
    std::uniform_int_distribution<std::int64_t> start_dist(0, n - len);
    bool placed = false;
    for (int attempt = 0; attempt < kMaxAttempts && !placed; ++attempt) {
      const auto s = start_dist(rng);
      const auto first = covered.begin() + s;
      if (std::any_of(first, first + len, [](std::uint8_t v) { return v != 0; })) continue;
      std::fill(first, first + len, 1);
      total += len;
      placed = true;
    }
    if (!placed) break;  // no free gap of this length left
  }
  return covered;
}

// [start, end) of each delimiter-terminated sentence.
std::vector<std::pair<std::int64_t, std::int64_t>> complete_sentences(
    std::span<const TokenId> tokens, std::span<const TokenId> delimiters) {
  std::vector<std::pair<std::int64_t, std::int64_t>> out;
  std::int64_t start = 0;
  for (std::int64_t i = 0; i < std::ssize(tokens); ++i) {
    if (std::find(delimiters.begin(), delimiters.end(), tokens[static_cast<std::size_t>(i)]) !=
        delimiters.end()) {
      out.emplace_back(start, i + 1);
      start = i + 1;
    }
  }
  return out;
}

}  // namespace

CspPlan apply_csp_spans(std::span<const TokenId> tokens,
                        std::span<const std::pair<std::int64_t, std::int64_t>> spans) {
  std::vector<std::uint8_t> covered(tokens.size(), 0);
  for (const auto& [start, len] : spans) {
    if (start < 0 || len < 1 || start + len > std::ssize(tokens)) {
      throw OutOfRange("span [" + std::to_string(start) + ", +" + std::to_string(len) +
                       ") outside sequence of " + std::to_string(tokens.size()));
    }
    std::fill(covered.begin() + start, covered.begin() + start + len, 1);
  }
  return assemble(tokens, std::move(covered));
}

CspPlan build_csp_plan(std::span<const TokenId> tokens, std::mt19937_64& rng,
                       const CspConfig& config) {
  const auto n = std::ssize(tokens);
  if (n < 2) throw InvalidArgument("span corruption needs at least 2 tokens");
  if (!(config.rate > 0.0 && config.rate < 1.0)) {
    throw InvalidArgument("corruption rate must lie in (0, 1)");
  }
  if (config.mode == CspMode::kSentence) {
    auto sentences = complete_sentences(tokens, config.sentence_delimiters);
    if (sentences.size() >= 2) {
      std::shuffle(sentences.begin(), sentences.end(), rng);
      const std::int64_t budget = corruption_budget(n, config.rate);
      std::vector<std::uint8_t> covered(static_cast<std::size_t>(n), 0);
      std::int64_t total = 0;
      for (std::size_t i = 0; i + 1 < sentences.size() && total < budget; ++i) {
        const auto [s, e] = sentences[i];
        std::fill(covered.begin() + s, covered.begin() + e, 1);
        total += e - s;
      }
      return assemble(tokens, std::move(covered));
    }
  }
  return assemble(tokens, span_cover(n, rng, config));
}

void LossWeights::validate() const {
  if (mlm < 0 || rtd < 0 || csp < 0) throw InvalidArgument("loss weights must be non-negative");
}

namespace {

// Splits [B, N, ...] / [N, ...] into (batch, length).
template <typename T>
std::pair<std::int64_t, std::int64_t> batch_and_length(const Tensor<T>& x, int feature_dims) {
  const int r = x.rank() - feature_dims;
  if (r == 1) return {1, x.dim(0)};
  if (r == 2) return {x.dim(0), x.dim(1)};
  throw ShapeError("expected [B, N" + std::string(feature_dims ? ", V" : "") + "], got " +
                   shape_str(x.shape()));
}

}  // namespace

template <typename T>
Tensor<T> mlm_loss(const Tensor<T>& logits, std::span<const MlmPlan> plans) {
  const auto [batch, n] = batch_and_length(logits, 1);
  if (std::ssize(plans) != batch) throw ShapeError("mlm loss: one plan per example required");
  std::vector<TokenId> targets(static_cast<std::size_t>(batch * n), 0);
  std::vector<T> weights(targets.size(), T(0));
  for (std::int64_t b = 0; b < batch; ++b) {
    const auto& plan = plans[static_cast<std::size_t>(b)];
    if (plan.positions.empty()) throw InvalidArgument("mlm loss: empty mask plan");
    if (plan.positions.size() != plan.originals.size()) {
      throw InvalidArgument("mlm loss: plan positions and originals differ in length");
    }
    const T w = T(1.0 / (double(plan.positions.size()) * double(batch)));
    for (std::size_t k = 0; k < plan.positions.size(); ++k) {
      const auto p = plan.positions[k];
      if (p < 0 || p >= n) throw OutOfRange("mlm loss: position outside sequence");
      targets[static_cast<std::size_t>(b * n + p)] = plan.originals[k];
      weights[static_cast<std::size_t>(b * n + p)] = w;
    }
  }
  return weighted_cross_entropy<T>(logits, targets, weights);
}

template <typename T>
Tensor<T> rtd_loss(const Tensor<T>& scores, std::span<const std::uint8_t> labels,
                   std::span<const std::uint8_t> valid) {
  const auto [batch, n] = batch_and_length(scores, 0);
  if (std::ssize(labels) != batch * n || (!valid.empty() && std::ssize(valid) != batch * n)) {
    throw ShapeError("rtd loss: labels/mask do not match scores " + shape_str(scores.shape()));
  }
  std::vector<T> y(labels.size()), w(labels.size(), T(0));
  for (std::int64_t b = 0; b < batch; ++b) {
    std::int64_t real = 0;
    for (std::int64_t i = 0; i < n; ++i) real += valid.empty() || valid[b * n + i];
    if (real == 0) throw InvalidArgument("rtd loss: example without real tokens");
    for (std::int64_t i = 0; i < n; ++i) {
      const auto k = static_cast<std::size_t>(b * n + i);
      y[k] = labels[k] ? T(1) : T(0);
      if (valid.empty() || valid[k]) w[k] = T(1.0 / (double(real) * double(batch)));
    }
  }
  return weighted_bce_with_logits<T>(scores, y, w);
}

template <typename T>
Tensor<T> sequence_nll(const Tensor<T>& logits, std::span<const TokenId> labels, TokenId ignore) {
  const auto [batch, t] = batch_and_length(logits, 1);
  if (std::ssize(labels) != batch * t) {
    throw ShapeError("sequence loss: " + std::to_string(labels.size()) + " labels for logits " +
                     shape_str(logits.shape()));
  }
  std::vector<T> weights(labels.size(), T(0));
  for (std::int64_t b = 0; b < batch; ++b) {
    std::int64_t real = 0;
    for (std::int64_t i = 0; i < t; ++i) real += labels[b * t + i] != ignore;
    if (real == 0) throw InvalidArgument("sequence loss: empty target");
    for (std::int64_t i = 0; i < t; ++i) {
      if (labels[b * t + i] != ignore) {
        weights[static_cast<std::size_t>(b * t + i)] = T(1.0 / (double(real) * double(batch)));
      }
    }
  }
  return weighted_cross_entropy<T>(logits, labels, weights);
}

template <typename T>
Tensor<T> joint_loss(const Tensor<T>& mlm, const Tensor<T>& rtd, const Tensor<T>& csp,
                     const LossWeights& w) {
  w.validate();
  return add(add(scale(mlm, T(w.mlm)), scale(rtd, T(w.rtd))), scale(csp, T(w.csp)));
}

#define ZSUMM_INSTANTIATE(T)                                                                \
  template std::vector<TokenId> sample_discriminator_input<T>(                              \
      std::span<const TokenId>, const MlmPlan&, std::span<const T>, std::int64_t,           \
      std::mt19937_64&);                                                                    \
  template Tensor<T> mlm_loss<T>(const Tensor<T>&, std::span<const MlmPlan>);               \
  template Tensor<T> rtd_loss<T>(const Tensor<T>&, std::span<const std::uint8_t>,           \
                                 std::span<const std::uint8_t>);                            \
  template Tensor<T> sequence_nll<T>(const Tensor<T>&, std::span<const TokenId>, TokenId);  \
  template Tensor<T> joint_loss<T>(const Tensor<T>&, const Tensor<T>&, const Tensor<T>&,    \
                                   const LossWeights&);

ZSUMM_INSTANTIATE(float)
ZSUMM_INSTANTIATE(double)

#undef ZSUMM_INSTANTIATE

}  // namespace zsumm
