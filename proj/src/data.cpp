// SPDX-License-Identifier: Apache-2.0
#include "zsumm/data.hpp"

#include <algorithm>
#include <cctype>
#include <fstream>
#include <iostream>
#include <sstream>

#include "json.hpp"

#include "zsumm/errors.hpp"

namespace zsumm {

using json = nlohmann::json;

namespace {

const std::vector<std::string>& special_names() {
  static const std::vector<std::string> names = [] {
    std::vector<std::string> n = {"[PAD]", "[BOS]", "[EOS]", "[UNK]", "[MASK]", "[SEP]"};
    for (int i = 0; i < special::kSentinels; ++i) n.push_back("[M_" + std::to_string(i) + "]");
    return n;
  }();
  return names;
}

std::string read_file(const std::string& path) {
  std::ifstream in(path, std::ios::binary);
  if (!in) throw IoError("cannot open " + path);
  std::ostringstream ss;
  ss << in.rdbuf();
  return ss.str();
}

void write_file(const std::string& path, const std::string& content) {
  std::ofstream out(path, std::ios::binary | std::ios::trunc);
  if (!out) throw IoError("cannot write " + path);
  out << content;
  if (!out) throw IoError("write failed: " + path);
}

// Calls fn(object, "line N") for every non-blank line.
template <typename Fn>
void for_each_json_line(std::string_view content, Fn&& fn) {
  std::size_t line_no = 0, pos = 0;
  while (pos <= content.size()) {
    const auto end = std::min(content.find('\n', pos), content.size());
    std::string_view line = content.substr(pos, end - pos);
    pos = end + 1;
    ++line_no;
    if (std::all_of(line.begin(), line.end(),
                    [](char c) { return std::isspace(static_cast<unsigned char>(c)); })) {
      if (end == content.size()) break;
      continue;
    }
    const std::string where = "line " + std::to_string(line_no);
    json j;
    try {
      j = json::parse(line);
    } catch (const json::exception& e) {
      throw FormatError(where + ": malformed JSON (" + e.what() + ")");
    }
    if (!j.is_object()) throw FormatError(where + ": expected a JSON object");
    fn(j, where);
    if (end == content.size()) break;
  }
}

std::optional<std::string> string_field(const json& j, const char* key, bool required,
                                        const std::string& where) {
  const auto it = j.find(key);
  if (it == j.end() || it->is_null()) {
    if (required) throw FormatError(where + ": missing required field \"" + key + "\"");
    return std::nullopt;
  }
  if (!it->is_string()) throw FormatError(where + ": field \"" + key + "\" must be a string");
  return it->get<std::string>();
}

}  // namespace

std::vector<std::string> split_words(std::string_view text) {
  std::vector<std::string> out;
  std::string cur;
  auto flush = [&] {
    if (!cur.empty()) out.push_back(std::move(cur));
    cur.clear();
  };
  for (const char ch : text) {
    const auto c = static_cast<unsigned char>(ch);
    if (std::isspace(c)) {
      flush();
    } else if (c < 0x80 && std::ispunct(c)) {
      flush();
      out.emplace_back(1, ch);
    } else {
      cur.push_back(static_cast<char>(std::tolower(c)));
    }
  }
  flush();
  return out;
}

std::string normalize_text(std::string_view text) {
  std::string out;
  for (const auto& w : split_words(text)) {
    if (!out.empty()) out.push_back(' ');
    out += w;
  }
  return out;
}

Vocabulary Vocabulary::build(const std::vector<std::string>& texts, std::size_t max_size) {
  if (max_size <= static_cast<std::size_t>(special::kCount)) {
    throw InvalidArgument("vocabulary max size must exceed the " +
                          std::to_string(special::kCount) + " reserved entries");
  }
  std::unordered_map<std::string, std::int64_t> counts;
  for (const auto& t : texts) {
    for (auto& w : split_words(t)) ++counts[w];
  }
  if (counts.empty()) throw InvalidArgument("cannot build a vocabulary from an empty corpus");
  std::vector<std::pair<std::string, std::int64_t>> ranked(counts.begin(), counts.end());
  std::sort(ranked.begin(), ranked.end(), [](const auto& a, const auto& b) {
    return a.second != b.second ? a.second > b.second : a.first < b.first;
  });
  std::vector<std::string> tokens = special_names();
  const std::size_t room = max_size - tokens.size();
  for (std::size_t i = 0; i < ranked.size() && i < room; ++i) tokens.push_back(ranked[i].first);
  return from_tokens(std::move(tokens));
}

Vocabulary Vocabulary::build_from_files(const std::vector<std::string>& paths,
                                        std::size_t max_size) {
  std::vector<std::string> texts;
  for (const auto& p : paths) {
    try {
      for_each_json_line(read_file(p), [&](const json& j, const std::string& where) {
        for (const char* key : {"text", "source", "summary", "instruction"}) {
          if (auto t = string_field(j, key, false, where)) texts.push_back(std::move(*t));
        }
      });
    } catch (const FormatError& e) {
      throw FormatError(p + ": " + e.what());
    }
  }
  return build(texts, max_size);
}

Vocabulary Vocabulary::from_tokens(std::vector<std::string> tokens) {
  const auto& specials = special_names();
  if (tokens.size() < specials.size() ||
      !std::equal(specials.begin(), specials.end(), tokens.begin())) {
    throw FormatError("vocabulary does not start with the reserved special tokens");
  }
  Vocabulary v;
  v.tokens_ = std::move(tokens);
  for (std::size_t i = 0; i < v.tokens_.size(); ++i) {
    if (!v.index_.emplace(v.tokens_[i], static_cast<TokenId>(i)).second) {
      throw FormatError("duplicate vocabulary entry '" + v.tokens_[i] + "'");
    }
  }
  return v;
}

Vocabulary Vocabulary::load(const std::string& path) {
  json j;
  try {
    j = json::parse(read_file(path));
  } catch (const json::exception& e) {
    throw FormatError(path + ": " + e.what());
  }
  if (!j.is_array()) throw FormatError(path + ": vocabulary must be a JSON array");
  return from_tokens(j.get<std::vector<std::string>>());
}

void Vocabulary::save(const std::string& path) const {
  write_file(path, json(tokens_).dump() + "\n");
}

TokenId Vocabulary::id(std::string_view token) const {
  const auto it = index_.find(std::string(token));
  return it == index_.end() ? special::kUnk : it->second;
}

const std::string& Vocabulary::token(TokenId id) const {
  if (id < 0 || static_cast<std::size_t>(id) >= tokens_.size()) {
    throw OutOfRange("token id " + std::to_string(id) + " outside [0, " +
                     std::to_string(tokens_.size()) + ")");
  }
  return tokens_[static_cast<std::size_t>(id)];
}

TokenId Vocabulary::sentinel(int i) {
  if (i < 0 || i >= special::kSentinels) {
    throw OutOfRange("sentinel index " + std::to_string(i) + " outside [0, " +
                     std::to_string(special::kSentinels) + ")");
  }
  return special::kFirstSentinel + i;
}

std::vector<TokenId> tokenize(std::string_view text, const Vocabulary& vocab) {
  std::vector<TokenId> ids;
  for (const auto& w : split_words(text)) {
    const TokenId id = vocab.id(w);
    // Bracketed special names typed in raw text are split by punctuation and
    // can never map back onto a special id; the guard covers custom vocabs.
    ids.push_back(Vocabulary::is_special(id) ? special::kUnk : id);
  }
  return ids;
}

std::string detokenize(std::span<const TokenId> ids, const Vocabulary& vocab) {
  std::string out;
  for (const TokenId id : ids) {
    if (id == special::kPad || id == special::kBos || id == special::kEos) continue;
    if (!out.empty()) out.push_back(' ');
    out += vocab.token(id);
  }
  return out;
}

std::vector<TrainingPair> parse_jsonl(std::string_view content) {
  std::vector<TrainingPair> pairs;
  for_each_json_line(content, [&](const json& j, const std::string& where) {
    TrainingPair p;
    p.source = *string_field(j, "source", true, where);
    p.summary = *string_field(j, "summary", true, where);
    if (p.source.empty() || p.summary.empty()) {
      throw FormatError(where + ": source and summary must be non-empty");
    }
    p.instruction = string_field(j, "instruction", false, where);
    p.task = string_field(j, "task", false, where).value_or("");
    pairs.push_back(std::move(p));
  });
  return pairs;
}

std::vector<std::string> parse_documents(std::string_view content) {
  std::vector<std::string> docs;
  for_each_json_line(content, [&](const json& j, const std::string& where) {
    auto text = string_field(j, "text", false, where);
    if (!text) text = string_field(j, "source", false, where);
    if (!text) throw FormatError(where + ": expected a \"text\" or \"source\" field");
    if (!text->empty()) docs.push_back(std::move(*text));
  });
  return docs;
}

std::vector<std::string> load_documents(const std::string& path) {
  std::vector<std::string> docs;
  try {
    docs = parse_documents(read_file(path));
  } catch (const FormatError& e) {
    throw FormatError(path + ": " + e.what());
  }
  if (docs.empty()) std::cerr << "warning: " << path << " contains no documents\n";
  return docs;
}

std::vector<TrainingPair> load_jsonl(const std::string& path) {
  std::vector<TrainingPair> pairs;
  try {
    pairs = parse_jsonl(read_file(path));
  } catch (const FormatError& e) {
    throw FormatError(path + ": " + e.what());
  }
  if (pairs.empty()) std::cerr << "warning: " << path << " contains no training pairs\n";
  return pairs;
}

InstructionTemplates InstructionTemplates::bundled() {
  return from_map({
      {"mediasum", {"Summarize the following interview script into a two sentences summary."}},
      {"multinews", {"Summarize the news article into a one sentence summary."}},
      {"newsroom", {"Summarize the news article into a one sentence summary."}},
      {"wikihow",
       {"Summarize the paragraph into a one sentence summary.",
        "Summarize the paragraph with a few words."}},
      {"generic", {"Summarize the paragraph into a one sentence summary."}},
  });
}

InstructionTemplates InstructionTemplates::from_map(
    std::map<std::string, std::vector<std::string>> m) {
  for (const auto& [task, list] : m) {
    if (list.empty()) throw InvalidArgument("task '" + task + "' has no instructions");
  }
  InstructionTemplates t;
  t.by_task_ = std::move(m);
  return t;
}

InstructionTemplates InstructionTemplates::load(const std::string& path) {
  try {
    return from_map(
        json::parse(read_file(path)).get<std::map<std::string, std::vector<std::string>>>());
  } catch (const json::exception& e) {
    throw FormatError(path + ": " + e.what());
  }
}

void InstructionTemplates::save(const std::string& path) const {
  write_file(path, json(by_task_).dump(2) + "\n");
}

const std::vector<std::string>& InstructionTemplates::for_task(const std::string& task) const {
  auto it = by_task_.find(task);
  if (it == by_task_.end()) it = by_task_.find("generic");
  if (it == by_task_.end()) {
    throw InvalidArgument("no instructions for task '" + task + "' and no generic fallback");
  }
  return it->second;
}

Seq2SeqExample format_grounded(const TrainingPair& pair,
                               const std::vector<std::string>* instructions,
                               const Vocabulary& vocab, std::mt19937_64& rng,
                               const FormatLimits& limits) {
  if (limits.max_target < 2) throw InvalidArgument("max target length must be >= 2");
  std::optional<std::string> instruction = pair.instruction;
  if (!instruction && instructions) {
    if (instructions->empty()) throw InvalidArgument("instruction template is empty");
    std::uniform_int_distribution<std::size_t> pick(0, instructions->size() - 1);
    instruction = (*instructions)[pick(rng)];
  }

  Seq2SeqExample ex;
  ex.input.push_back(special::kBos);
  if (instruction) {
    const auto ins = tokenize(*instruction, vocab);
    ex.input.insert(ex.input.end(), ins.begin(), ins.end());
    ex.input.push_back(special::kSep);
  }
  const auto src = tokenize(pair.source, vocab);
  const std::size_t room =
      limits.max_input > ex.input.size() ? limits.max_input - ex.input.size() : 0;
  ex.input.insert(ex.input.end(), src.begin(),
                  src.begin() + static_cast<std::ptrdiff_t>(std::min(room, src.size())));

  const auto sum = tokenize(pair.summary, vocab);
  ex.target.push_back(special::kBos);
  ex.target.insert(ex.target.end(), sum.begin(),
                   sum.begin() + static_cast<std::ptrdiff_t>(
                                     std::min(limits.max_target - 2, sum.size())));
  ex.target.push_back(special::kEos);
  return ex;
}

Seq2SeqBatch pad_batch(const std::vector<Seq2SeqExample>& examples, TokenId pad) {
  if (examples.empty()) throw InvalidArgument("cannot batch zero examples");
  std::vector<std::vector<TokenId>> inputs, dec_in, labels;
  for (const auto& ex : examples) {
    if (ex.input.empty()) throw InvalidArgument("example has an empty input");
    if (ex.target.size() < 2) throw InvalidArgument("target needs at least BOS and EOS");
    inputs.push_back(ex.input);
    dec_in.emplace_back(ex.target.begin(), ex.target.end() - 1);
    labels.emplace_back(ex.target.begin() + 1, ex.target.end());
  }
  Seq2SeqBatch b;
  b.input = TokenBatch::from_sequences(inputs, pad);
  b.decoder_input = TokenBatch::from_sequences(dec_in, pad);
  const TokenBatch lab = TokenBatch::from_sequences(labels, pad);
  b.labels = lab.ids;
  for (std::size_t i = 0; i < b.labels.size(); ++i) {
    if (!lab.valid[i]) b.labels[i] = special::kPad;
  }
  return b;
}

}  // namespace zsumm
