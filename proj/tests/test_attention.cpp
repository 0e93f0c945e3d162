// SPDX-License-Identifier: Apache-2.0
#include <cmath>
#include <tuple>
#include <random>

#include "doctest.h"
#include "oracles.hpp"
#include "zsumm/attention.hpp"
#include "zsumm/errors.hpp"

using namespace zsumm;
using zsumm::testing::numeric_gradient;
using zsumm::testing::random_layer;
using zsumm::testing::random_params;
using zsumm::testing::random_tensor;
using TD = Tensor<double>;

namespace {

// Row-vector times matrix on raw storage: out[c] = sum_r x[r] * w[r, c].
std::vector<double> vecmat(const double* x, const TD& w) {
  const auto d = w.dim(0), e = w.dim(1);
  std::vector<double> out(static_cast<std::size_t>(e), 0.0);
  for (std::int64_t c = 0; c < e; ++c) {
    for (std::int64_t r = 0; r < d; ++r) out[c] += x[r] * w.data()[r * e + c];
  }
  return out;
}

// Independent loop evaluation of the three-term logits, [h, N, N].
std::vector<double> naive_logits(const TD& h, const DAttentionParams<double>& p, const TD& table,
                                 std::int64_t k, const std::vector<std::int64_t>& pos) {
  const auto n = h.dim(0), d = h.dim(1);
  const auto dh = d / p.heads;
  std::vector<std::vector<double>> qc, kc, qr, kr;
  for (std::int64_t i = 0; i < n; ++i) {
    qc.push_back(vecmat(h.data().data() + i * d, p.w_qc));
    kc.push_back(vecmat(h.data().data() + i * d, p.w_kc));
  }
  for (std::int64_t r = 0; r < 2 * k; ++r) {
    qr.push_back(vecmat(table.data().data() + r * d, p.w_qr));
    kr.push_back(vecmat(table.data().data() + r * d, p.w_kr));
  }
  std::vector<double> out(static_cast<std::size_t>(p.heads * n * n));
  for (int hd = 0; hd < p.heads; ++hd) {
    for (std::int64_t i = 0; i < n; ++i) {
      for (std::int64_t j = 0; j < n; ++j) {
        const auto bij = relative_bucket(pos[i], pos[j], k);
        const auto bji = relative_bucket(pos[j], pos[i], k);
        double c2c = 0, c2p = 0, p2c = 0;
        for (std::int64_t c = hd * dh; c < (hd + 1) * dh; ++c) {
          c2c += qc[i][c] * kc[j][c];
          c2p += qc[i][c] * kr[bij][c];
          p2c += kc[j][c] * qr[bji][c];
        }
        out[(hd * n + i) * n + j] = (c2c + c2p + p2c) / std::sqrt(3.0 * double(dh));
      }
    }
  }
  return out;
}

std::vector<std::int64_t> iota_positions(std::int64_t n, std::int64_t start = 0) {
  std::vector<std::int64_t> p(static_cast<std::size_t>(n));
  for (std::int64_t i = 0; i < n; ++i) p[i] = start + i;
  return p;
}

}  // namespace

TEST_CASE("relative bucket rule") {
  CHECK(relative_bucket(3, 3, 4) == 4);
  CHECK(relative_bucket(0, 5, 4) == 0);
  CHECK(relative_bucket(7, 0, 4) == 7);
  for (std::int64_t k : {1, 2, 4, 9}) {
    std::int32_t prev = -1;
    for (std::int64_t diff = -3 * k; diff <= 3 * k; ++diff) {
      const auto b = relative_bucket(diff, 0, k);
      CHECK(b >= 0);
      CHECK(b < 2 * k);
      CHECK(b >= prev);
      prev = b;
      if (diff <= -k) CHECK(b == 0);
      if (diff >= k) CHECK(b == 2 * k - 1);
    }
  }
}

TEST_CASE("relative index covers exactly the touched rows") {
  const auto r = RelativeIndex::build(3, 3, 4);
  CHECK(r.first_row == 2);
  CHECK(r.rows == 5);
  CHECK(r.query_key[0 * 3 + 2] + r.first_row == relative_bucket(0, 2, 4));
  CHECK(r.key_query[2 * 3 + 0] + r.first_row == relative_bucket(2, 0, 4));
  CHECK_THROWS_AS(RelativeIndex::build(3, 3, 0), InvalidArgument);
}

TEST_CASE("zero projections give uniform attention") {
  const std::int64_t d = 4, n = 3, k = 4;
  std::mt19937_64 rng(1);
  DAttentionParams<double> p;
  p.w_qc = p.w_kc = p.w_qr = p.w_kr = TD::zeros({d, d});
  p.heads = 2;
  auto h = random_tensor({n, d}, rng);
  auto table = random_tensor({2 * k, d}, rng);
  auto logits = da_attention_logits(h, p, table, k);
  CHECK(logits.shape() == Shape{2, n, n});
  for (double v : logits.data()) CHECK(v == 0.0);
  auto probs = softmax(logits, -1);
  for (double v : probs.data()) CHECK(v == doctest::Approx(1.0 / 3.0).epsilon(1e-12));
}

TEST_CASE("without position projections logits are scaled dot products") {
  const std::int64_t d = 6, n = 5, k = 3;
  std::mt19937_64 rng(2);
  auto p = random_params(d, 2, rng);
  p.w_qr = TD::zeros({d, d});
  p.w_kr = TD::zeros({d, d});
  auto h = random_tensor({n, d}, rng);
  auto table = random_tensor({2 * k, d}, rng);
  auto logits = da_attention_logits(h, p, table, k);
  auto q = vecmat(h.data().data(), p.w_qc);  // row 0 only is enough per head
  const double s = std::sqrt(3.0 * 3.0);
  for (int hd = 0; hd < 2; ++hd) {
    for (std::int64_t j = 0; j < n; ++j) {
      auto kj = vecmat(h.data().data() + j * d, p.w_kc);
      double dot = 0;
      for (int c = hd * 3; c < hd * 3 + 3; ++c) dot += q[c] * kj[c];
      CHECK(logits.data()[(hd * n + 0) * n + j] == doctest::Approx(dot / s).epsilon(1e-12));
    }
  }
}

TEST_CASE("hand-evaluated 2x2 logits") {
  // N=2, d=2, h=1, k=2: rows of P are buckets 0..3; bucket(i,j) = i-j+2.
  auto h = TD::from({2, 2}, {1, 2, -1, 0.5});
  auto table = TD::from({4, 2}, {0.1, 0.2, 0.3, -0.4, 0.5, 0.6, -0.7, 0.8});
  DAttentionParams<double> p;
  p.w_qc = TD::from({2, 2}, {1, 0, 0, 1});
  p.w_kc = TD::from({2, 2}, {0, 1, 1, 0});
  p.w_qr = TD::from({2, 2}, {2, 0, 0, 1});
  p.w_kr = TD::from({2, 2}, {1, 1, 0, 1});
  p.w_v = p.w_o = TD::from({2, 2}, {1, 0, 0, 1});
  p.heads = 1;
  // Qc = [[1,2],[-1,0.5]], Kc = [[2,1],[0.5,-1]]
  // Qr = P diag(2,1) = [[0.2,0.2],[0.6,-0.4],[1.0,0.6],[-1.4,0.8]]
  // Kr = P [[1,1],[0,1]] = [[0.1,0.3],[0.3,-0.1],[0.5,1.1],[-0.7,0.1]]
  // logits[i][j] = Qc_i.Kc_j + Qc_i.Kr[i-j+2] + Kc_j.Qr[j-i+2]
  const double c00 = 4 + (0.5 + 2.2) + (2 * 1.0 + 1 * 0.6);
  const double c01 = (0.5 - 2) + (1 * 0.3 + 2 * -0.1) + (0.5 * -1.4 + -1 * 0.8);
  const double c10 = (-1 * 2 + 0.5 * 1) + (-1 * -0.7 + 0.5 * 0.1) + (2 * 0.6 + 1 * -0.4);
  const double c11 = (-1 * 0.5 + 0.5 * -1) + (-1 * 0.5 + 0.5 * 1.1) + (0.5 * 1.0 + -1 * 0.6);
  const double s = std::sqrt(3.0 * 2.0);
  auto logits = da_attention_logits(h, p, table, 2);
  CHECK(logits.data()[0] == doctest::Approx(c00 / s).epsilon(1e-12));
  CHECK(logits.data()[1] == doctest::Approx(c01 / s).epsilon(1e-12));
  CHECK(logits.data()[2] == doctest::Approx(c10 / s).epsilon(1e-12));
  CHECK(logits.data()[3] == doctest::Approx(c11 / s).epsilon(1e-12));
  // Loop oracle agrees with the hand values.
  auto naive = naive_logits(h, p, table, 2, iota_positions(2));
  for (int i = 0; i < 4; ++i) CHECK(naive[i] == doctest::Approx(logits.data()[i]).epsilon(1e-12));
}

TEST_CASE("logits match the loop oracle across shapes and clipping") {
  std::mt19937_64 rng(3);
  for (auto [n, d, heads, k] : {std::tuple{1, 4, 2, 1}, std::tuple{5, 4, 1, 2},
                                std::tuple{7, 6, 3, 3}, std::tuple{9, 8, 2, 16}}) {
    auto p = random_params(d, heads, rng);
    auto h = random_tensor({n, d}, rng);
    auto table = random_tensor({2 * k, d}, rng);
    auto logits = da_attention_logits(h, p, table, k);
    auto naive = naive_logits(h, p, table, k, iota_positions(n));
    REQUIRE(logits.numel() == std::ssize(naive));
    for (std::size_t i = 0; i < naive.size(); ++i) {
      CHECK(logits.data()[i] == doctest::Approx(naive[i]).epsilon(1e-10));
    }
  }
}

TEST_CASE("logits are invariant to a shift of absolute positions") {
  std::mt19937_64 rng(4);
  const std::int64_t n = 6, d = 4, k = 3;
  auto p = random_params(d, 2, rng);
  auto h = random_tensor({n, d}, rng);
  auto table = random_tensor({2 * k, d}, rng);
  auto base = da_attention_logits(h, p, table, k, iota_positions(n, 0));
  for (std::int64_t shift : {1, 17, 1000}) {
    auto shifted = da_attention_logits(h, p, table, k, iota_positions(n, shift));
    for (std::int64_t i = 0; i < base.numel(); ++i) CHECK(shifted.data()[i] == base.data()[i]);
  }
}

TEST_CASE("parameter validation") {
  std::mt19937_64 rng(5);
  auto p = random_params(6, 4, rng);
  auto h = random_tensor({3, 6}, rng);
  CHECK_THROWS_AS(da_attention_logits(h, p, random_tensor({8, 6}, rng), 4), ShapeError);
  p.heads = 2;
  CHECK_THROWS_AS(da_attention_logits(h, p, random_tensor({6, 6}, rng), 4), ShapeError);
}

TEST_CASE("layer forward: single token, masking, fully masked rows") {
  std::mt19937_64 rng(6);
  const std::int64_t d = 4, k = 4;
  auto layer = random_layer(d, 2, rng);
  auto table = random_tensor({2 * k, d}, rng);
  RunContext ctx;

  auto one = random_tensor({1, 1, d}, rng);
  std::vector<std::uint8_t> v1{1};
  auto out1 = da_layer_forward(one, layer, table, k, padding_mask(1, 1, 1, v1), ctx);
  CHECK(out1.shape() == Shape{1, 1, d});
  for (double x : out1.data()) CHECK(std::isfinite(x));

  // Real prefix of length 3, padded to 5 with arbitrary junk.
  auto real = random_tensor({1, 3, d}, rng);
  auto padded = concat<double>({real, random_tensor({1, 2, d}, rng, 5, 9)}, 1);
  std::vector<std::uint8_t> all3{1, 1, 1}, pad5{1, 1, 1, 0, 0};
  auto a = da_layer_forward(real, layer, table, k, padding_mask(1, 3, 3, all3), ctx);
  auto b = da_layer_forward(padded, layer, table, k, padding_mask(1, 5, 5, pad5), ctx);
  for (std::int64_t i = 0; i < 3 * d; ++i) {
    CHECK(b.data()[i] == doctest::Approx(a.data()[i]).epsilon(1e-12));
  }

  // Attention contributes nothing to a row that may see no key.
  AttentionMask none{1, 2, 2, {0, 0, 1, 1}};
  auto x = random_tensor({1, 2, d}, rng);
  auto attn = da_attention(x, layer.attn, table, k, none, ctx);
  for (std::int64_t c = 0; c < d; ++c) CHECK(attn.data()[c] == 0.0);
}

TEST_CASE("gradient of mean layer output with respect to the relative table") {
  std::mt19937_64 rng(7);
  const std::int64_t n = 5, d = 4, k = 3;
  auto layer = random_layer(d, 2, rng);
  auto table = random_tensor({2 * k, d}, rng, -1, 1);
  auto x = random_tensor({1, n, d}, rng, -1, 1, false);
  std::vector<std::uint8_t> valid{1, 1, 1, 1, 0};
  const auto mask = padding_mask(1, n, n, valid);
  RunContext ctx;
  auto loss = [&] { return mean(da_layer_forward(x, layer, table, k, mask, ctx)); };
  backward(loss());
  auto numeric = numeric_gradient([&] { return loss().item(); }, table.mutable_data());
  for (std::size_t i = 0; i < numeric.size(); ++i) {
    const double a = table.grad().data()[i];
    CHECK(std::abs(a - numeric[i]) / std::max(1.0, std::abs(numeric[i])) <= 1e-4);
  }
}

TEST_CASE("score counter counts batch * N * N per call") {
  std::mt19937_64 rng(8);
  auto p = random_params(4, 2, rng);
  auto table = random_tensor({8, 4}, rng);
  std::uint64_t counter = 0;
  da_attention_logits(random_tensor({3, 5, 4}, rng), p, table, 4, {}, &counter);
  CHECK(counter == 3u * 25u);
}
