// SPDX-License-Identifier: Apache-2.0
#pragma once

#include <cstdint>
#include <vector>

#include "zsumm/tensor.hpp"

namespace zsumm {

/// Right-padded [batch, length] token ids with a 0/1 real-token mask.
struct TokenBatch {
  std::int64_t batch = 0;
  std::int64_t length = 0;
  std::vector<TokenId> ids;
  std::vector<std::uint8_t> valid;

  TokenId at(std::int64_t b, std::int64_t i) const {
    return ids[static_cast<std::size_t>(b * length + i)];
  }
  bool is_valid(std::int64_t b, std::int64_t i) const {
    return valid[static_cast<std::size_t>(b * length + i)] != 0;
  }
  std::int64_t real_length(std::int64_t b) const;

  /// One unpadded sequence.
  static TokenBatch single(const std::vector<TokenId>& ids);
  /// Right-pads every sequence to the longest with `pad`.
  static TokenBatch from_sequences(const std::vector<std::vector<TokenId>>& seqs,
                                   TokenId pad);
};

}  // namespace zsumm
