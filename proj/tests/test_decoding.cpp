// SPDX-License-Identifier: Apache-2.0
#include <cmath>
#include <map>
#include <random>

#include "doctest.h"
#include "zsumm/decoding.hpp"
#include "zsumm/errors.hpp"
#include "zsumm/rng.hpp"
#include "zsumm/rouge.hpp"

using namespace zsumm;

namespace {

constexpr TokenId kBos = special::kBos, kEos = special::kEos;

// Next-token distributions keyed by generated prefix; unspecified prefixes
// are uniform over {3, 4, 5}; after three tokens EOS is certain.
class TableScorer : public NextTokenScorer {
 public:
  std::map<std::vector<TokenId>, std::map<TokenId, double>> table;

  std::int64_t vocab_size() const override { return 6; }
  std::vector<double> probs(const std::vector<TokenId>& gen) const {
    std::vector<double> p(6, 0.0);
    if (gen.size() == 3) {
      p[kEos] = 1.0;
    } else if (auto it = table.find(gen); it != table.end()) {
      for (auto [t, v] : it->second) p[t] = v;
    } else {
      p[3] = p[4] = p[5] = 1.0 / 3.0;
    }
    return p;
  }
  std::vector<std::vector<double>> log_probs(
      const std::vector<std::vector<TokenId>>& prefixes) override {
    std::vector<std::vector<double>> out;
    for (const auto& pre : prefixes) {
      auto p = probs(std::vector<TokenId>(pre.begin() + 1, pre.end()));
      for (auto& v : p) v = std::log(v);
      out.push_back(p);
    }
    return out;
  }
};

TableScorer toy_scorer() {
  TableScorer s;
  s.table[{}] = {{3, 0.5}, {4, 0.4}, {5, 0.1}};
  s.table[{4}] = {{3, 0.9}, {4, 0.05}, {5, 0.05}};
  s.table[{4, 3}] = {{3, 0.025}, {4, 0.95}, {5, 0.025}};
  return s;
}

// Pseudo-random but prefix-deterministic logits over `vocab` tokens.
class HashScorer : public NextTokenScorer {
 public:
  HashScorer(std::uint64_t seed, std::int64_t vocab, double eos_bias)
      : seed_(seed), vocab_(vocab), eos_bias_(eos_bias) {}
  std::int64_t vocab_size() const override { return vocab_; }
  std::vector<std::vector<double>> log_probs(
      const std::vector<std::vector<TokenId>>& prefixes) override {
    std::vector<std::vector<double>> out;
    for (const auto& pre : prefixes) {
      std::uint64_t h = seed_;
      for (auto t : pre) h = splitmix64(h ^ static_cast<std::uint64_t>(t));
      std::vector<double> logits(static_cast<std::size_t>(vocab_));
      for (std::int64_t v = 0; v < vocab_; ++v) {
        h = splitmix64(h + static_cast<std::uint64_t>(v));
        logits[v] = 3.0 * double(h >> 11) / double(1ULL << 53);
      }
      logits[kEos] += eos_bias_;
      double z = 0;
      for (double l : logits) z += std::exp(l);
      for (auto& l : logits) l -= std::log(z);
      out.push_back(logits);
    }
    return out;
  }

 private:
  std::uint64_t seed_;
  std::int64_t vocab_;
  double eos_bias_;
};

double score_of(const std::vector<TokenId>& gen, double log_prob, double alpha, bool finished) {
  return log_prob / length_penalty(std::ssize(gen) + (finished ? 1 : 0), alpha);
}

}  // namespace

TEST_CASE("config validation and length penalty") {
  DecodeConfig c;
  c.min_length = 10;
  c.max_length = 5;
  CHECK_THROWS_AS(c.validate(), InvalidArgument);
  c = DecodeConfig{};
  c.beam = 0;
  CHECK_THROWS_AS(c.validate(), InvalidArgument);
  CHECK(length_penalty(1, 1.0) == 1.0);
  CHECK(length_penalty(7, 0.0) == 1.0);
  CHECK(length_penalty(7, 0.5) == doctest::Approx(std::sqrt(2.0)));
}

TEST_CASE("repeated n-gram blocking") {
  std::vector<TokenId> prefix{10, 11, 12, 10, 11};
  CHECK(block_repeated_ngrams(prefix, 3) == std::set<TokenId>{12});
  CHECK(block_repeated_ngrams(prefix, 0).empty());
  CHECK(block_repeated_ngrams(prefix, 2) == std::set<TokenId>{12});
  CHECK(block_repeated_ngrams(std::vector<TokenId>{}, 3).empty());
  CHECK(block_repeated_ngrams(prefix, 1) == std::set<TokenId>{10, 11, 12});
}

TEST_CASE("beam search recovers the enumerated optimum that greedy misses") {
  auto scorer = toy_scorer();
  DecodeConfig cfg;
  cfg.beam = 2;
  cfg.block_ngram = 0;
  cfg.alpha = 1.0;
  cfg.suppress = {0, 1};

  // Exhaustive oracle over all length-3 sequences.
  double best_p = -1;
  std::vector<TokenId> best;
  for (TokenId a = 3; a <= 5; ++a) {
    for (TokenId b = 3; b <= 5; ++b) {
      for (TokenId c = 3; c <= 5; ++c) {
        const double p = scorer.probs({})[a] * scorer.probs({a})[b] * scorer.probs({a, b})[c];
        if (p > best_p) {
          best_p = p;
          best = {a, b, c};
        }
      }
    }
  }
  CHECK(best == std::vector<TokenId>{4, 3, 4});

  auto greedy = greedy_decode(scorer, cfg);
  CHECK(greedy.tokens != best);
  auto beam = beam_search(scorer, cfg);
  CHECK(beam.tokens == best);
  CHECK(beam.finished);
  CHECK(beam.log_prob == doctest::Approx(std::log(best_p)));
  CHECK(beam.score == doctest::Approx(std::log(best_p) / length_penalty(4, 1.0)));

  cfg.beam = 1;
  CHECK(beam_search(scorer, cfg).tokens == greedy.tokens);
}

TEST_CASE("alpha = 0 ranks by raw log-probability") {
  for (std::uint64_t seed = 0; seed < 20; ++seed) {
    HashScorer scorer(seed, 9, 0.5);
    DecodeConfig cfg;
    cfg.alpha = 0.0;
    cfg.beam = 4;
    cfg.max_length = 8;
    auto h = beam_search(scorer, cfg);
    CHECK(h.score == h.log_prob);
  }
}

TEST_CASE("beam never scores below greedy and blocking holds") {
  for (std::uint64_t seed = 0; seed < 100; ++seed) {
    HashScorer scorer(seed, 7, seed % 2 ? 0.0 : -1.0);
    DecodeConfig cfg;
    cfg.beam = 2 + static_cast<int>(seed % 4);
    cfg.alpha = 0.5 + 0.1 * double(seed % 8);
    cfg.max_length = 12;
    cfg.min_length = static_cast<int>(seed % 3);
    cfg.block_ngram = 3;
    cfg.suppress = {0, 1};
    auto g = greedy_decode(scorer, cfg);
    auto b = beam_search(scorer, cfg);
    CHECK(b.score >= g.score);
    CHECK(b.score == doctest::Approx(score_of(b.tokens, b.log_prob, cfg.alpha, b.finished)));
    for (const auto* h : {&g, &b}) {
      std::set<std::vector<TokenId>> seen;
      for (std::size_t i = 0; i + 3 <= h->tokens.size(); ++i) {
        CHECK(seen.insert({h->tokens.begin() + i, h->tokens.begin() + i + 3}).second);
      }
      if (h->finished) CHECK(std::ssize(h->tokens) >= cfg.min_length);
      for (auto t : h->tokens) {
        CHECK(t != kEos);
        CHECK(t > 1);
      }
    }
  }
}

TEST_CASE("model scorer agrees with teacher forcing") {
  ModelConfig c;
  c.vocab_size = special::kCount + 20;
  c.d_model = 16;
  c.heads = 2;
  c.d_ff = 32;
  c.encoder_layers = c.decoder_layers = 2;
  c.generator_layers = 1;
  c.max_distance = 16;
  c.init_std = 0.2;
  Seq2SeqModel<double> model(c, 11);
  std::vector<TokenId> input{1, 110, 111, 112, 113};
  DecodeConfig cfg;
  cfg.beam = 3;
  cfg.max_length = 6;
  auto h = generate(model, input, cfg);
  REQUIRE(!h.tokens.empty());
  for (auto t : h.tokens) CHECK(t >= special::kCount);

  // Recompute log p(Y) with one teacher-forced pass.
  std::vector<TokenId> dec{kBos};
  dec.insert(dec.end(), h.tokens.begin(), h.tokens.end());
  std::vector<TokenId> next(h.tokens);
  if (h.finished) {
    next.push_back(kEos);
  } else {
    dec.pop_back();
  }
  RunContext ctx;
  auto src = TokenBatch::single(input);
  auto logits =
      model.decode_teacher_forced(model.encode(src, ctx), src.valid, TokenBatch::single(dec), ctx);
  double lp = 0;
  const auto v = c.vocab_size;
  for (std::size_t t = 0; t < next.size(); ++t) {
    const double* row = logits.data().data() + t * v;
    double mx = row[0];
    for (int k = 0; k < v; ++k) mx = std::max(mx, row[k]);
    double z = 0;
    for (int k = 0; k < v; ++k) z += std::exp(row[k] - mx);
    lp += row[next[t]] - mx - std::log(z);
  }
  CHECK(h.log_prob == doctest::Approx(lp).epsilon(1e-9));

  cfg.beam = 1;
  auto g1 = generate(model, input, cfg);
  ModelScorer<double> scorer(model, input);
  cfg.suppress = model_suppressed_tokens();
  CHECK(g1.tokens == greedy_decode(scorer, cfg).tokens);
}

TEST_CASE("rouge-n") {
  using S = std::vector<std::string>;
  auto r = [](const S& c, const S& ref, int n) {
    return rouge_n(std::span<const std::string>(c), std::span<const std::string>(ref), n);
  };
  auto same = r({"a", "b", "c", "d"}, {"a", "b", "c", "d"}, 2);
  CHECK(same.precision == 1.0);
  CHECK(same.recall == 1.0);
  CHECK(same.f1 == 1.0);
  auto third = r({"a", "b", "c", "d"}, {"a", "b", "e", "d"}, 2);
  CHECK(third.precision == doctest::Approx(1.0 / 3));
  CHECK(third.recall == doctest::Approx(1.0 / 3));
  CHECK(third.f1 == doctest::Approx(1.0 / 3));
  auto none = r({"a", "b"}, {"c", "d"}, 1);
  CHECK(none.f1 == 0.0);
  CHECK(r({"a"}, {"a", "b"}, 2).f1 == 0.0);
  // Clipped counts.
  auto clip = r({"the", "the", "the"}, {"the", "cat"}, 1);
  CHECK(clip.precision == doctest::Approx(1.0 / 3));
  CHECK(clip.recall == doctest::Approx(0.5));
}

TEST_CASE("rouge-l") {
  using S = std::vector<std::string>;
  auto r = [](const S& c, const S& ref) {
    return rouge_l(std::span<const std::string>(c), std::span<const std::string>(ref));
  };
  auto abc = r({"a", "b", "c"}, {"a", "c", "b"});
  CHECK(abc.precision == doctest::Approx(2.0 / 3));
  CHECK(abc.recall == doctest::Approx(2.0 / 3));
  CHECK(abc.f1 == doctest::Approx(2.0 / 3));
  CHECK(r({"x", "y"}, {"x", "y"}).f1 == 1.0);
  CHECK(r({"a", "b", "c", "d"}, {"d", "c", "b", "a"}).precision == doctest::Approx(0.25));
  CHECK(r({}, {"a"}).f1 == 0.0);
}

TEST_CASE("rouge properties on random token sequences") {
  std::mt19937_64 rng(12);
  std::uniform_int_distribution<int> tok(0, 5), len(0, 12);
  for (int rep = 0; rep < 300; ++rep) {
    std::vector<int> c(len(rng)), ref(1 + len(rng));
    for (auto& t : c) t = tok(rng);
    for (auto& t : ref) t = tok(rng);
    for (int n = 1; n <= 3; ++n) {
      auto a = rouge_n(std::span<const int>(c), std::span<const int>(ref), n);
      auto b = rouge_n(std::span<const int>(ref), std::span<const int>(c), n);
      CHECK(a.precision == doctest::Approx(b.recall));
      CHECK(a.recall == doctest::Approx(b.precision));
      CHECK(a.f1 == doctest::Approx(b.f1));
      for (double v : {a.precision, a.recall, a.f1}) {
        CHECK(v >= 0.0);
        CHECK(v <= 1.0);
      }
    }
    auto l = rouge_l(std::span<const int>(c), std::span<const int>(ref));
    CHECK(l.f1 >= 0.0);
    CHECK(l.f1 <= 1.0);
    // Appending a reference token never lowers recall.
    auto longer = c;
    longer.push_back(ref[static_cast<std::size_t>(rep) % ref.size()]);
    CHECK(rouge_n(std::span<const int>(longer), std::span<const int>(ref), 1).recall >=
          rouge_n(std::span<const int>(c), std::span<const int>(ref), 1).recall);
    CHECK(rouge_l(std::span<const int>(longer), std::span<const int>(ref)).recall >=
          l.recall);
  }
}

TEST_CASE("text-level rouge") {
  auto t = rouge_text("The cat sat.", "the cat sat .");
  CHECK(t.r1.f1 == 1.0);
  CHECK(t.r2.f1 == 1.0);
  CHECK(t.rl.f1 == 1.0);
  std::vector<std::string> preds{"a b c d", "x"}, refs{"a b e d", "y"};
  auto m = mean_rouge(preds, refs);
  CHECK(m.count == 2);
  CHECK(m.r2 == doctest::Approx(1.0 / 6));
  CHECK_THROWS_AS(mean_rouge(preds, std::span<const std::string>(refs).first(1)), InvalidArgument);
}
