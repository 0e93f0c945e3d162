// SPDX-License-Identifier: Apache-2.0
#include <cmath>
#include <filesystem>
#include <fstream>

#include "doctest.h"
#include "zsumm/data.hpp"
#include "zsumm/errors.hpp"
#include "zsumm/model.hpp"
#include "zsumm/rng.hpp"

using namespace zsumm;
namespace fs = std::filesystem;

namespace {

fs::path temp_file(const std::string& name, const std::string& content) {
  const auto dir = fs::temp_directory_path() / "zsumm_test_data";
  fs::create_directories(dir);
  const auto p = dir / name;
  std::ofstream(p) << content;
  return p;
}

Vocabulary small_vocab() {
  return Vocabulary::build({"summarize : x y z the cat ."}, 200);
}

}  // namespace

TEST_CASE("tokenizer normalization") {
  CHECK(split_words("The cat.") == std::vector<std::string>{"the", "cat", "."});
  CHECK(split_words("  Don't\tstop!! ") ==
        std::vector<std::string>{"don", "'", "t", "stop", "!", "!"});
  CHECK(split_words("").empty());
  CHECK(normalize_text("Hello,   World") == "hello , world");
}

TEST_CASE("vocabulary construction") {
  auto v = Vocabulary::build({"a a b"}, 10 + special::kCount);
  REQUIRE(v.size() == special::kCount + 2);
  CHECK(v.id("a") < v.id("b"));
  CHECK(v.id("a") == special::kCount);

  auto one = Vocabulary::build({"b a a c c c"}, 1 + special::kCount);
  CHECK(one.size() == special::kCount + 1);
  CHECK(one.token(special::kCount) == "c");
  CHECK(one.id("a") == special::kUnk);

  // Ties are lexicographic.
  auto tie = Vocabulary::build({"zeta alpha mid"}, 200);
  CHECK(tie.token(special::kCount) == "alpha");
  CHECK(tie.token(special::kCount + 1) == "mid");

  CHECK(Vocabulary::build({"q w e r t y"}, 300) == Vocabulary::build({"q w e r t y"}, 300));
  CHECK_THROWS_AS(Vocabulary::build({"", "  "}, 300), InvalidArgument);
  CHECK_THROWS_AS(Vocabulary::build({"a"}, special::kCount), InvalidArgument);

  CHECK(v.token(special::kPad) == "[PAD]");
  CHECK(Vocabulary::sentinel(0) == 6);
  CHECK(Vocabulary::sentinel(99) == 105);
  CHECK_THROWS_AS(Vocabulary::sentinel(100), OutOfRange);
  CHECK_THROWS_AS(v.token(9999), OutOfRange);
}

TEST_CASE("vocabulary save and load") {
  auto v = small_vocab();
  const auto p = temp_file("vocab.json", "");
  v.save(p.string());
  CHECK(Vocabulary::load(p.string()) == v);
  const auto bad = temp_file("bad_vocab.json", "[\"x\", \"y\"]");
  CHECK_THROWS_AS(Vocabulary::load(bad.string()), FormatError);
  const auto garbage = temp_file("garbage_vocab.json", "{not json");
  CHECK_THROWS_AS(Vocabulary::load(garbage.string()), FormatError);
  CHECK_THROWS_AS(Vocabulary::load("/nonexistent/vocab.json"), IoError);
}

TEST_CASE("tokenize and detokenize") {
  auto v = small_vocab();
  auto ids = tokenize("The cat.", v);
  REQUIRE(ids.size() == 3);
  CHECK(ids[0] == v.id("the"));
  CHECK(ids[1] == v.id("cat"));
  CHECK(ids[2] == v.id("."));
  CHECK(tokenize("dog", v) == std::vector<TokenId>{special::kUnk});
  CHECK(detokenize(ids, v) == normalize_text("The cat."));
  for (auto id : tokenize("[MASK] [M_0] [PAD]", v)) {
    const bool ok = !Vocabulary::is_special(id) || id == special::kUnk;
    CHECK(ok);
  }
  std::vector<TokenId> with_specials{special::kBos, v.id("x"), special::kMask, special::kEos,
                                     special::kPad};
  CHECK(detokenize(with_specials, v) == "x [MASK]");
}

TEST_CASE("jsonl loading") {
  auto pairs = parse_jsonl(R"({"source":"a","summary":"b"})");
  REQUIRE(pairs.size() == 1);
  CHECK(pairs[0].source == "a");
  CHECK(pairs[0].summary == "b");
  CHECK_FALSE(pairs[0].instruction.has_value());

  auto full = parse_jsonl(
      "{\"source\":\"s\",\"summary\":\"t\",\"instruction\":\"do it\",\"task\":\"news\"}\n\n"
      "{\"source\":\"u\",\"summary\":\"v\"}\n");
  REQUIRE(full.size() == 2);
  CHECK(*full[0].instruction == "do it");
  CHECK(full[0].task == "news");
  CHECK(full[1].source == "u");

  std::string lines;
  for (int i = 0; i < 6; ++i) lines += "{\"source\":\"a\",\"summary\":\"b\"}\n";
  lines += "{\"source\": oops}\n";
  try {
    parse_jsonl(lines);
    FAIL("expected FormatError");
  } catch (const FormatError& e) {
    CHECK(std::string(e.what()).find("line 7") != std::string::npos);
  }
  CHECK_THROWS_WITH_AS(parse_jsonl("{\"source\":\"a\"}"), doctest::Contains("summary"),
                       FormatError);
  CHECK_THROWS_AS(parse_jsonl("{\"source\":\"\",\"summary\":\"b\"}"), FormatError);
  CHECK_THROWS_AS(parse_jsonl("[1,2]"), FormatError);

  const auto empty = temp_file("empty.jsonl", "");
  CHECK(load_jsonl(empty.string()).empty());
  const auto bad = temp_file("bad.jsonl", "{\"source\":\"a\",\"summary\":\"b\"}\nnope\n");
  CHECK_THROWS_WITH_AS(load_jsonl(bad.string()), doctest::Contains("line 2"), FormatError);
}

TEST_CASE("instruction templates") {
  auto t = InstructionTemplates::bundled();
  CHECK(t.for_task("multinews").front() ==
        "Summarize the news article into a one sentence summary.");
  CHECK(t.for_task("mediasum").front() ==
        "Summarize the following interview script into a two sentences summary.");
  CHECK(t.for_task("wikihow").size() == 2);
  CHECK(t.for_task("unknown-task").front() ==
        "Summarize the paragraph into a one sentence summary.");
  const auto p = temp_file("templates.json", "");
  t.save(p.string());
  CHECK(InstructionTemplates::load(p.string()).all() == t.all());
  CHECK_THROWS_AS(InstructionTemplates::from_map({{"x", {}}}), InvalidArgument);
  auto no_generic = InstructionTemplates::from_map({{"x", {"go"}}});
  CHECK_THROWS_AS(no_generic.for_task("y"), InvalidArgument);
}

TEST_CASE("grounded formatting") {
  auto v = small_vocab();
  std::mt19937_64 rng(1);
  TrainingPair pair{"x y", "z", std::string("summarize:"), ""};
  auto ex = format_grounded(pair, nullptr, v, rng);
  CHECK(ex.input == std::vector<TokenId>{special::kBos, v.id("summarize"), v.id(":"),
                                         special::kSep, v.id("x"), v.id("y")});
  CHECK(ex.target == std::vector<TokenId>{special::kBos, v.id("z"), special::kEos});

  TrainingPair plain{"x y", "z", std::nullopt, ""};
  CHECK(format_grounded(plain, nullptr, v, rng).input ==
        std::vector<TokenId>{special::kBos, v.id("x"), v.id("y")});

  // Truncation removes only source tail tokens.
  TrainingPair longer{"x y z x y z", "z z z z", std::string("summarize:"), ""};
  auto cut = format_grounded(longer, nullptr, v, rng, FormatLimits{6, 4});
  CHECK(cut.input == std::vector<TokenId>{special::kBos, v.id("summarize"), v.id(":"),
                                          special::kSep, v.id("x"), v.id("y")});
  CHECK(cut.target == std::vector<TokenId>{special::kBos, v.id("z"), v.id("z"), special::kEos});
  auto tiny = format_grounded(longer, nullptr, v, rng, FormatLimits{2, 4});
  CHECK(tiny.input.size() == 4);  // prefix is kept whole

  // Deterministic per (seed, index).
  std::vector<std::string> two{"the cat", "x"};
  auto r1 = stream_rng(9, 3, kStreamFormat), r2 = stream_rng(9, 3, kStreamFormat);
  CHECK(format_grounded(plain, &two, v, r1).input == format_grounded(plain, &two, v, r2).input);
}

TEST_CASE("instruction sampling is uniform") {
  auto v = small_vocab();
  std::vector<std::string> two{"the", "cat"};
  TrainingPair plain{"x", "z", std::nullopt, ""};
  int first = 0;
  const int n = 10000;
  for (int i = 0; i < n; ++i) {
    auto rng = stream_rng(42, static_cast<std::uint64_t>(i), kStreamFormat);
    first += format_grounded(plain, &two, v, rng).input[1] == v.id("the");
  }
  CHECK(std::abs(double(first) / n - 0.5) <= 0.02);
}

TEST_CASE("batch padding") {
  std::vector<Seq2SeqExample> exs{{{1, 7, 8}, {1, 9, 2}}, {{1, 7, 8, 9, 10}, {1, 9, 9, 9, 2}}};
  auto b = pad_batch(exs);
  CHECK(b.input.length == 5);
  CHECK(b.input.real_length(0) == 3);
  CHECK(b.input.real_length(1) == 5);
  CHECK(b.decoder_input.length == 4);
  CHECK(b.labels == std::vector<TokenId>{9, 2, 0, 0, 9, 9, 9, 2});

  auto single = pad_batch({exs[1]});
  CHECK(single.input.real_length(0) == single.input.length);
  CHECK_THROWS_AS(pad_batch({}), InvalidArgument);
}

TEST_CASE("padded batch loss equals the mean of per-example losses") {
  ModelConfig c;
  c.vocab_size = 20;
  c.d_model = 8;
  c.heads = 2;
  c.d_ff = 16;
  c.encoder_layers = c.decoder_layers = 2;
  c.generator_layers = 1;
  c.max_distance = 8;
  c.init_std = 0.3;
  Seq2SeqModel<double> m(c, 3);
  std::vector<Seq2SeqExample> exs{{{1, 7, 8}, {1, 9, 2}}, {{1, 7, 8, 9, 10}, {1, 9, 11, 12, 2}}};
  RunContext ctx;
  auto per_example = [&](const Seq2SeqBatch& b) {
    auto logits = m.decode_teacher_forced(m.encode(b.input, ctx), b.input.valid,
                                          b.decoder_input, ctx);
    std::vector<double> losses;
    const auto t = b.decoder_input.length;
    for (std::int64_t i = 0; i < b.input.batch; ++i) {
      std::span<const TokenId> lab(b.labels.data() + i * t, static_cast<std::size_t>(t));
      losses.push_back(cross_entropy_from_logits(slice(logits, 0, i, 1), lab, special::kPad).item());
    }
    return losses;
  };
  auto padded = per_example(pad_batch(exs));
  auto a = per_example(pad_batch({exs[0]}));
  auto b = per_example(pad_batch({exs[1]}));
  CHECK(std::abs(padded[0] - a[0]) <= 1e-6);
  CHECK(std::abs(padded[1] - b[0]) <= 1e-6);
}
