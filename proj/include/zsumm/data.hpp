// SPDX-License-Identifier: Apache-2.0
//
// Corpus ingestion: vocabulary, word-level tokenizer, JSONL pairs,
// instruction templates and (instruction ⊕ source, summary) formatting.
#pragma once

#include <cstdint>
#include <map>
#include <optional>
#include <random>
#include <string>
#include <string_view>
#include <unordered_map>
#include <vector>

#include "zsumm/batch.hpp"
#include "zsumm/tensor.hpp"

namespace zsumm {

namespace special {
inline constexpr TokenId kPad = 0;
inline constexpr TokenId kBos = 1;
inline constexpr TokenId kEos = 2;
inline constexpr TokenId kUnk = 3;
inline constexpr TokenId kMask = 4;
inline constexpr TokenId kSep = 5;
inline constexpr TokenId kFirstSentinel = 6;
inline constexpr int kSentinels = 100;
inline constexpr TokenId kCount = kFirstSentinel + kSentinels;  // 106
}  // namespace special

/// Lowercased words and single punctuation characters.
std::vector<std::string> split_words(std::string_view text);
/// Tokens of `text` joined by single spaces.
std::string normalize_text(std::string_view text);

class Vocabulary {
 public:
  /// Frequency-ranked, ties broken lexicographically, truncated so the
  /// whole vocabulary (specials included) holds at most `max_size` entries.
  static Vocabulary build(const std::vector<std::string>& texts, std::size_t max_size);
  static Vocabulary build_from_files(const std::vector<std::string>& paths,
                                     std::size_t max_size);
  /// Token array in id order; the special prefix must match.
  static Vocabulary from_tokens(std::vector<std::string> tokens);
  static Vocabulary load(const std::string& path);
  void save(const std::string& path) const;

  std::size_t size() const { return tokens_.size(); }
  TokenId id(std::string_view token) const;
  const std::string& token(TokenId id) const;
  const std::vector<std::string>& tokens() const { return tokens_; }

  static TokenId sentinel(int i);
  static bool is_special(TokenId id) { return id >= 0 && id < special::kCount; }
  static bool is_sentinel(TokenId id) {
    return id >= special::kFirstSentinel && id < special::kCount;
  }

  bool operator==(const Vocabulary& o) const { return tokens_ == o.tokens_; }

 private:
  std::vector<std::string> tokens_;
  std::unordered_map<std::string, TokenId> index_;
};

std::vector<TokenId> tokenize(std::string_view text, const Vocabulary& vocab);
/// Space-joined tokens; PAD/BOS/EOS are dropped, other specials print
/// their bracketed names.
std::string detokenize(std::span<const TokenId> ids, const Vocabulary& vocab);

struct TrainingPair {
  std::string source;
  std::string summary;
  std::optional<std::string> instruction;
  std::string task;
};

/// One JSON object per line with "source", "summary", optional
/// "instruction" and "task". Blank lines are skipped. Errors name the
/// 1-based line number.
std::vector<TrainingPair> load_jsonl(const std::string& path);
std::vector<TrainingPair> parse_jsonl(std::string_view content);

/// Unlabelled text for pretraining: each line's "text" field, or "source"
/// when there is none. Empty strings are skipped.
std::vector<std::string> load_documents(const std::string& path);
std::vector<std::string> parse_documents(std::string_view content);

/// task -> instruction strings.
class InstructionTemplates {
 public:
  /// The four grounded-training tasks plus a "generic" entry.
  static InstructionTemplates bundled();
  static InstructionTemplates load(const std::string& path);
  static InstructionTemplates from_map(std::map<std::string, std::vector<std::string>> m);
  void save(const std::string& path) const;

  /// Instructions for `task`, falling back to "generic".
  const std::vector<std::string>& for_task(const std::string& task) const;
  const std::map<std::string, std::vector<std::string>>& all() const { return by_task_; }

 private:
  std::map<std::string, std::vector<std::string>> by_task_;
};

struct FormatLimits {
  std::size_t max_input = 512;
  std::size_t max_target = 128;
};

struct Seq2SeqExample {
  std::vector<TokenId> input;
  std::vector<TokenId> target;  // BOS ... EOS
};

/// input = BOS ⊕ instruction ⊕ SEP ⊕ source, target = BOS ⊕ summary ⊕ EOS.
/// The pair's own instruction wins; otherwise one is drawn uniformly from
/// `instructions` when given; with neither the prefix is omitted. Only
/// source-tail tokens are truncated.
Seq2SeqExample format_grounded(const TrainingPair& pair,
                               const std::vector<std::string>* instructions,
                               const Vocabulary& vocab, std::mt19937_64& rng,
                               const FormatLimits& limits = {});

/// Padded encoder inputs, decoder inputs (target without its last token)
/// and labels (target without BOS, PAD where padded).
struct Seq2SeqBatch {
  TokenBatch input;
  TokenBatch decoder_input;
  std::vector<TokenId> labels;
};

Seq2SeqBatch pad_batch(const std::vector<Seq2SeqExample>& examples,
                       TokenId pad = special::kPad);

}  // namespace zsumm
