// SPDX-License-Identifier: Apache-2.0
#include <algorithm>
#include <random>

#include "doctest.h"
#include "oracles.hpp"
#include "zsumm/errors.hpp"
#include "zsumm/fie.hpp"

using namespace zsumm;
using zsumm::testing::random_layer;
using zsumm::testing::random_tensor;
using TD = Tensor<double>;

namespace {

struct Stack {
  std::vector<DALayerParams<double>> layers;
  TD table;
  std::int64_t k;
};

Stack random_stack(int layers, std::int64_t d, std::int64_t k, std::mt19937_64& rng) {
  Stack s{{}, random_tensor({2 * k, d}, rng, -1, 1), k};
  for (int i = 0; i < layers; ++i) s.layers.push_back(random_layer(d, 2, rng));
  return s;
}

TD run(const Stack& s, const TD& h, std::span<const std::uint8_t> valid,
       const std::optional<FiEConfig>& fie, std::uint64_t* counter = nullptr) {
  RunContext ctx;
  ctx.score_counter = counter;
  return run_encoder_stack<double>(h, s.layers, s.table, s.k, valid, fie, ctx);
}

}  // namespace

TEST_CASE("chunk lengths and round trip") {
  CHECK(chunk_lengths(5, 2) == std::vector<std::int64_t>{2, 2, 1});
  CHECK(chunk_lengths(4, 8) == std::vector<std::int64_t>{4});
  CHECK_THROWS_AS(chunk_lengths(0, 2), InvalidArgument);

  std::mt19937_64 rng(1);
  for (auto [n, l] : {std::pair{5, 2}, std::pair{4, 8}, std::pair{9, 3}, std::pair{1, 1}}) {
    auto h = random_tensor({2, n, 3}, rng);
    auto parts = split_into_chunks(h, l);
    CHECK(parts.size() == chunk_lengths(n, l).size());
    auto back = concat(parts, 1);
    CHECK(back.shape() == h.shape());
    CHECK(std::ranges::equal(back.data(), h.data()));
  }
}

TEST_CASE("cost formula") {
  CHECK(fie_cost(512, 24, 23, 1, 256) == 3276800u);
  CHECK(full_attention_cost(512, 24) == 6291456u);
  CHECK(fie_cost(100, 4, 0, 4, 16) == 4u * 100u * 100u);
  CHECK(fie_cost(100, 4, 3, 1, 100) == full_attention_cost(100, 4));
  // Ragged last chunk: 3 * (4^2 + 4^2 + 2^2) + 10^2.
  CHECK(fie_cost(10, 4, 3, 1, 4) == 3u * 36u + 100u);
  CHECK_THROWS_AS(fie_cost(10, 4, 2, 1, 4), InvalidArgument);
  CHECK_THROWS_AS(FiEConfig::for_stack(4, 1, 0), InvalidArgument);
  CHECK_THROWS_AS(FiEConfig::for_stack(4, 5, 8), InvalidArgument);
}

TEST_CASE("short inputs and m = 0 match the vanilla encoder") {
  std::mt19937_64 rng(2);
  auto s = random_stack(3, 4, 8, rng);
  auto h = random_tensor({2, 6, 4}, rng, -1, 1, false);
  std::vector<std::uint8_t> valid{1, 1, 1, 1, 1, 1, 1, 1, 1, 1, 0, 0};
  auto vanilla = run(s, h, valid, std::nullopt);
  auto no_local = run(s, h, valid, FiEConfig{0, 3, 2});
  auto long_chunk = run(s, h, valid, FiEConfig{2, 1, 6});
  auto longer_chunk = run(s, h, valid, FiEConfig{2, 1, 64});
  CHECK(std::ranges::equal(no_local.data(), vanilla.data()));
  for (std::int64_t i = 0; i < vanilla.numel(); ++i) {
    CHECK(std::abs(long_chunk.data()[i] - vanilla.data()[i]) <= 1e-5);
    CHECK(std::abs(longer_chunk.data()[i] - vanilla.data()[i]) <= 1e-5);
  }
}

TEST_CASE("local layers never mix chunks") {
  std::mt19937_64 rng(3);
  auto s = random_stack(2, 4, 8, rng);
  const std::int64_t n = 7, l = 3;
  auto a = random_tensor({1, n, 4}, rng, -1, 1, false);
  auto b = TD::from(a.shape(), std::vector<double>(a.data().begin(), a.data().end()));
  for (std::int64_t i = l; i < 2 * l; ++i) {
    for (int c = 0; c < 4; ++c) b.mutable_data()[i * 4 + c] += 0.7;
  }
  std::vector<std::uint8_t> valid(n, 1);
  // Two local layers and no global layer: only chunk 2 may change.
  auto ya = run(s, a, valid, FiEConfig{2, 0, l});
  auto yb = run(s, b, valid, FiEConfig{2, 0, l});
  for (std::int64_t i = 0; i < n * 4; ++i) {
    const bool in_chunk2 = i / 4 >= l && i / 4 < 2 * l;
    if (!in_chunk2) CHECK(ya.data()[i] == yb.data()[i]);
  }

  // Gradient of chunk-0 outputs with respect to other chunks is exactly zero.
  auto x = random_tensor({1, n, 4}, rng, -1, 1, true);
  auto y = run(s, x, valid, FiEConfig{2, 0, l});
  backward(sum(slice(y, 1, 0, l)));
  for (std::int64_t i = l * 4; i < n * 4; ++i) CHECK(x.grad().data()[i] == 0.0);
  bool any_nonzero = false;
  for (std::int64_t i = 0; i < l * 4; ++i) any_nonzero |= x.grad().data()[i] != 0.0;
  CHECK(any_nonzero);
}

TEST_CASE("score counter equals the cost formula") {
  std::mt19937_64 rng(4);
  auto s = random_stack(4, 4, 16, rng);
  for (auto [n, l, global] : {std::tuple{10, 4, 1}, std::tuple{12, 3, 2}, std::tuple{5, 8, 1},
                              std::tuple{9, 9, 0}}) {
    auto h = random_tensor({1, n, 4}, rng, -1, 1, false);
    std::vector<std::uint8_t> valid(static_cast<std::size_t>(n), 1);
    std::uint64_t counter = 0;
    run(s, h, valid, FiEConfig::for_stack(4, global, l), &counter);
    CHECK(counter == fie_cost(n, 4, 4 - global, global, l));
  }
}
