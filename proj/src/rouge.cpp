// SPDX-License-Identifier: Apache-2.0
#include "zsumm/rouge.hpp"

#include "zsumm/data.hpp"
#include "zsumm/errors.hpp"

namespace zsumm {

RougeTriple rouge_text(std::string_view candidate, std::string_view reference) {
  const auto c = split_words(candidate);
  const auto r = split_words(reference);
  const std::span<const std::string> cs(c), rs(r);
  return {rouge_n(cs, rs, 1), rouge_n(cs, rs, 2), rouge_l(cs, rs)};
}

RougeSummary mean_rouge(std::span<const std::string> predictions,
                        std::span<const std::string> references) {
  if (predictions.size() != references.size()) {
    throw InvalidArgument("rouge: " + std::to_string(predictions.size()) + " predictions vs " +
                          std::to_string(references.size()) + " references");
  }
  RougeSummary s;
  s.count = predictions.size();
  if (s.count == 0) return s;
  for (std::size_t i = 0; i < s.count; ++i) {
    const auto t = rouge_text(predictions[i], references[i]);
    s.r1 += t.r1.f1;
    s.r2 += t.r2.f1;
    s.rl += t.rl.f1;
  }
  s.r1 /= double(s.count);
  s.r2 /= double(s.count);
  s.rl /= double(s.count);
  return s;
}

}  // namespace zsumm
