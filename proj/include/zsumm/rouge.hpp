// SPDX-License-Identifier: Apache-2.0
//
// ROUGE-N and ROUGE-L F-measure over already tokenized text: clipped n-gram
// counts, no stemming, no stopword removal.
#pragma once

#include <algorithm>
#include <cstdint>
#include <map>
#include <span>
#include <string>
#include <string_view>
#include <vector>

namespace zsumm {

struct RougeScore {
  double precision = 0.0;
  double recall = 0.0;
  double f1 = 0.0;

  static RougeScore from_counts(double overlap, double cand_total, double ref_total) {
    RougeScore s;
    if (cand_total > 0) s.precision = overlap / cand_total;
    if (ref_total > 0) s.recall = overlap / ref_total;
    if (s.precision + s.recall > 0) {
      s.f1 = 2 * s.precision * s.recall / (s.precision + s.recall);
    }
    return s;
  }
};

template <typename Tok>
RougeScore rouge_n(std::span<const Tok> candidate, std::span<const Tok> reference, int n) {
  if (n < 1) return {};
  const auto cn = std::ssize(candidate) - n + 1, rn = std::ssize(reference) - n + 1;
  if (cn <= 0 || rn <= 0) return {};
  using Gram = std::vector<Tok>;
  auto count = [n](std::span<const Tok> seq, std::int64_t grams) {
    std::map<Gram, std::int64_t> out;
    for (std::int64_t i = 0; i < grams; ++i) ++out[Gram(seq.begin() + i, seq.begin() + i + n)];
    return out;
  };
  const auto cand = count(candidate, cn);
  const auto ref = count(reference, rn);
  std::int64_t overlap = 0;
  for (const auto& [gram, c] : cand) {
    const auto it = ref.find(gram);
    if (it != ref.end()) overlap += std::min(c, it->second);
  }
  return RougeScore::from_counts(double(overlap), double(cn), double(rn));
}

template <typename Tok>
std::int64_t lcs_length(std::span<const Tok> a, std::span<const Tok> b) {
  std::vector<std::int64_t> prev(b.size() + 1, 0), cur(b.size() + 1, 0);
  for (std::size_t i = 1; i <= a.size(); ++i) {
    for (std::size_t j = 1; j <= b.size(); ++j) {
      cur[j] = a[i - 1] == b[j - 1] ? prev[j - 1] + 1 : std::max(prev[j], cur[j - 1]);
    }
    std::swap(prev, cur);
  }
  return prev[b.size()];
}

template <typename Tok>
RougeScore rouge_l(std::span<const Tok> candidate, std::span<const Tok> reference) {
  if (candidate.empty() || reference.empty()) return {};
  return RougeScore::from_counts(double(lcs_length(candidate, reference)),
                                 double(candidate.size()), double(reference.size()));
}

struct RougeTriple {
  RougeScore r1, r2, rl;
};

/// Scores raw text after the project tokenizer's normalization.
RougeTriple rouge_text(std::string_view candidate, std::string_view reference);

/// Mean F-measures over aligned prediction/reference lists.
struct RougeSummary {
  double r1 = 0.0, r2 = 0.0, rl = 0.0;
  std::size_t count = 0;
};
RougeSummary mean_rouge(std::span<const std::string> predictions,
                        std::span<const std::string> references);

}  // namespace zsumm
