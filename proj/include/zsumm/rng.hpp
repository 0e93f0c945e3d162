// SPDX-License-Identifier: Apache-2.0
#pragma once

#include <cstdint>
#include <random>

namespace zsumm {

constexpr std::uint64_t splitmix64(std::uint64_t x) {
  x += 0x9e3779b97f4a7c15ULL;
  x = (x ^ (x >> 30)) * 0xbf58476d1ce4e5b9ULL;
  x = (x ^ (x >> 27)) * 0x94d049bb133111ebULL;
  return x ^ (x >> 31);
}

/// Independent stream for (seed, index, purpose); corpus order and worker
/// count never change what an example draws.
inline std::mt19937_64 stream_rng(std::uint64_t seed, std::uint64_t index,
                                  std::uint64_t purpose = 0) {
  return std::mt19937_64(splitmix64(splitmix64(splitmix64(seed) ^ index) ^ purpose));
}

// Stream purposes.
inline constexpr std::uint64_t kStreamMlm = 1;
inline constexpr std::uint64_t kStreamCsp = 2;
inline constexpr std::uint64_t kStreamSample = 3;
inline constexpr std::uint64_t kStreamDropout = 4;
inline constexpr std::uint64_t kStreamFormat = 5;
inline constexpr std::uint64_t kStreamShuffle = 6;

}  // namespace zsumm
