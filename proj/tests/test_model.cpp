// SPDX-License-Identifier: Apache-2.0
#include <cmath>
#include <algorithm>
#include <random>
#include <set>

#include "doctest.h"
#include "oracles.hpp"
#include "zsumm/errors.hpp"
#include "zsumm/model.hpp"

using namespace zsumm;
using zsumm::testing::numeric_gradient;

namespace {

ModelConfig tiny_config(int vocab = 40) {
  ModelConfig c;
  c.vocab_size = vocab;
  c.d_model = 8;
  c.heads = 2;
  c.d_ff = 16;
  c.encoder_layers = 2;
  c.decoder_layers = 2;
  c.generator_layers = 1;
  c.max_distance = 8;
  c.dropout = 0.0;
  c.init_std = 0.3;
  return c;
}

std::vector<TokenId> random_ids(std::size_t n, int vocab, std::mt19937_64& rng) {
  std::uniform_int_distribution<TokenId> u(1, vocab - 1);
  std::vector<TokenId> ids(n);
  for (auto& t : ids) t = u(rng);
  return ids;
}

bool all_zero(std::span<const double> v) {
  return std::all_of(v.begin(), v.end(), [](double x) { return x == 0.0; });
}

}  // namespace

TEST_CASE("config validation") {
  auto c = tiny_config();
  c.heads = 3;
  CHECK_THROWS_AS(Seq2SeqModel<double>(c, 1), InvalidArgument);
  c = tiny_config();
  c.generator_layers = 3;
  CHECK_THROWS_AS(Seq2SeqModel<double>(c, 1), InvalidArgument);
  c = tiny_config(0);
  CHECK_THROWS_AS(Seq2SeqModel<double>(c, 1), InvalidArgument);
  c = tiny_config();
  c.position_init_std = 0.0;
  CHECK_THROWS_AS(Seq2SeqModel<double>(c, 1), InvalidArgument);
}

TEST_CASE("parameter registry") {
  Seq2SeqModel<double> m(tiny_config(), 1);
  std::set<std::string> names;
  for (const auto& p : m.parameters()) CHECK(names.insert(p.name).second);
  REQUIRE(m.find("embed.delta"));
  CHECK_FALSE(m.find("embed.delta")->weight_decay);
  CHECK_FALSE(m.find("enc.0.ln1.gain")->weight_decay);
  CHECK(m.find("enc.0.attn.w_qc")->weight_decay);
  CHECK(m.find("no.such") == nullptr);
  for (double v : m.params().embed_delta.data()) CHECK(v == 0.0);
}

TEST_CASE("encoder shapes, padding invariance and zero-delta equality") {
  Seq2SeqModel<double> m(tiny_config(), 2);
  std::mt19937_64 rng(2);
  auto ids = random_ids(5, 40, rng);
  RunContext ctx;
  auto h = m.encode(TokenBatch::single(ids), ctx);
  CHECK(h.shape() == Shape{1, 5, 8});

  auto padded = TokenBatch::from_sequences({ids, random_ids(9, 40, rng)}, 0);
  auto hp = m.encode(padded, ctx);
  for (std::int64_t i = 0; i < 5 * 8; ++i) {
    CHECK(hp.data()[i] == doctest::Approx(h.data()[i]).epsilon(1e-12));
  }

  auto ed = m.discriminator_embeddings();
  CHECK(std::ranges::equal(ed.data(), m.params().embed_g.data()));
  CHECK_THROWS_AS(m.encode(TokenBatch{1, 0, {}, {}}, ctx), InvalidArgument);
  CHECK_THROWS_AS(m.encode(TokenBatch::single({3, 40}), ctx), OutOfRange);
}

TEST_CASE("materialized discriminator embeddings") {
  auto c = tiny_config(1);
  c.vocab_size = 1;
  c.d_model = 2;
  c.heads = 1;
  Seq2SeqModel<double> m(c, 3);
  m.params().embed_g.mutable_data()[0] = 1;
  m.params().embed_g.mutable_data()[1] = 2;
  m.params().embed_delta.mutable_data()[0] = 0.5;
  m.params().embed_delta.mutable_data()[1] = -0.5;
  auto e = m.materialize_discriminator_embeddings();
  CHECK(e.shape() == Shape{1, 2});
  CHECK(e.data()[0] == 1.5);
  CHECK(e.data()[1] == 1.5);
  CHECK_FALSE(e.requires_grad());
  CHECK(std::ranges::equal(e.data(), m.discriminator_embeddings().data()));
}

TEST_CASE("decoder causality and single step") {
  Seq2SeqModel<double> m(tiny_config(), 4);
  std::mt19937_64 rng(4);
  RunContext ctx;
  auto src = TokenBatch::single(random_ids(6, 40, rng));
  auto mem = m.encode(src, ctx);
  std::vector<TokenId> tgt{1, 7, 9, 11, 13};
  auto base = m.decode_teacher_forced(mem, src.valid, TokenBatch::single(tgt), ctx);
  CHECK(base.shape() == Shape{1, 5, 40});
  for (int t = 1; t < 5; ++t) {
    auto alt = tgt;
    for (int u = t; u < 5; ++u) alt[u] = 20 + u;
    auto out = m.decode_teacher_forced(mem, src.valid, TokenBatch::single(alt), ctx);
    for (std::int64_t i = 0; i < t * 40; ++i) CHECK(out.data()[i] == base.data()[i]);
  }
  auto one = m.decode_teacher_forced(mem, src.valid, TokenBatch::single({1}), ctx);
  CHECK(one.shape() == Shape{1, 1, 40});
  for (int v = 0; v < 40; ++v) CHECK(one.data()[v] == doctest::Approx(base.data()[v]).epsilon(1e-12));
}

TEST_CASE("NLL gradient with respect to memory matches finite differences") {
  auto c = tiny_config(12);
  c.init_std = 0.5;
  Seq2SeqModel<double> m(c, 5);
  std::mt19937_64 rng(5);
  auto mem = zsumm::testing::random_tensor({1, 4, 8}, rng, -1, 1);
  std::vector<std::uint8_t> valid{1, 1, 1, 1};
  auto inputs = TokenBatch::single({1, 5, 6});
  std::vector<TokenId> labels{5, 6, 2};
  RunContext ctx;
  auto loss = [&] {
    return cross_entropy_from_logits(m.decode_teacher_forced(mem, valid, inputs, ctx),
                                     std::span<const TokenId>(labels), TokenId{0});
  };
  backward(loss());
  auto numeric = numeric_gradient([&] { return loss().item(); }, mem.mutable_data());
  for (std::size_t i = 0; i < numeric.size(); ++i) {
    const double a = mem.grad().data()[i];
    CHECK(std::abs(a - numeric[i]) / std::max(1.0, std::abs(numeric[i])) <= 1e-4);
  }
}

TEST_CASE("untrained heads sit at their uniform baselines") {
  auto c = tiny_config(300);
  c.d_model = 32;
  c.heads = 4;
  c.d_ff = 64;
  c.init_std = 0.02;
  Seq2SeqModel<float> m(c, 6);
  std::mt19937_64 rng(6);
  RunContext ctx;

  std::vector<std::vector<TokenId>> seqs;
  for (int b = 0; b < 8; ++b) seqs.push_back(random_ids(128, 300, rng));
  auto batch = TokenBatch::from_sequences(seqs, 0);

  auto targets = random_ids(8 * 128, 300, rng);
  const double mlm =
      cross_entropy_from_logits(m.generator_forward(batch, ctx),
                                std::span<const TokenId>(targets), TokenId{-1})
          .item();
  CHECK(std::abs(mlm - std::log(300.0)) / std::log(300.0) < 0.05);

  auto scores = m.discriminator_forward(batch, ctx);
  CHECK(scores.shape() == Shape{8, 128});
  double mean_p = 0;
  for (float s : scores.data()) mean_p += 1.0 / (1.0 + std::exp(-double(s)));
  mean_p /= double(scores.numel());
  CHECK(std::abs(mean_p - 0.5) < 0.15);

  auto again = m.generator_forward(batch, ctx);
  CHECK(std::ranges::equal(again.data(), m.generator_forward(batch, ctx).data()));
}

TEST_CASE("gradient disentanglement between E_G and E_delta") {
  Seq2SeqModel<double> m(tiny_config(), 7);
  std::mt19937_64 rng(7);
  RunContext ctx;
  auto batch = TokenBatch::single(random_ids(6, 40, rng));

  // Discriminator-side losses land only in E_delta.
  std::vector<double> labels{1, 0, 1, 1, 0, 1}, weights(6, 1.0 / 6);
  backward(weighted_bce_with_logits<double>(m.discriminator_forward(batch, ctx), labels, weights));
  CHECK(all_zero(m.params().embed_g.grad()));
  CHECK_FALSE(all_zero(m.params().embed_delta.grad()));

  // Seq2seq losses through encoder, decoder and LM head also stay off E_G.
  m.zero_grad();
  auto mem = m.encode(batch, ctx);
  std::vector<TokenId> tgt{1, 4, 9}, lab{4, 9, 2};
  backward(cross_entropy_from_logits(
      m.decode_teacher_forced(mem, batch.valid, TokenBatch::single(tgt), ctx),
      std::span<const TokenId>(lab), TokenId{0}));
  CHECK(all_zero(m.params().embed_g.grad()));
  CHECK_FALSE(all_zero(m.params().embed_delta.grad()));

  // The generator loss touches E_G only.
  m.zero_grad();
  auto targets = random_ids(6, 40, rng);
  backward(cross_entropy_from_logits(m.generator_forward(batch, ctx),
                                     std::span<const TokenId>(targets), TokenId{0}));
  CHECK_FALSE(all_zero(m.params().embed_g.grad()));
  CHECK(all_zero(m.params().embed_delta.grad()));
  for (const auto& l : m.params().encoder) CHECK(all_zero(l.attn.w_qc.grad()));
}

TEST_CASE("FiE configured model agrees with the vanilla encoder on short input") {
  auto c = tiny_config();
  Seq2SeqModel<float> vanilla(c, 8);
  c.fie = FiEConfig::for_stack(c.encoder_layers, 1, 16);
  Seq2SeqModel<float> fused(c, 8);
  std::mt19937_64 rng(8);
  auto batch = TokenBatch::single(random_ids(12, 40, rng));
  RunContext ctx;
  auto a = vanilla.encode(batch, ctx);
  auto b = fused.encode(batch, ctx);
  for (std::int64_t i = 0; i < a.numel(); ++i) CHECK(std::abs(a.data()[i] - b.data()[i]) <= 1e-5f);
}
