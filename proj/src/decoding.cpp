// SPDX-License-Identifier: Apache-2.0
#include "zsumm/decoding.hpp"

#include <algorithm>
#include <cmath>
#include <limits>

#include "zsumm/errors.hpp"

namespace zsumm {

namespace {

constexpr double kNegInf = -std::numeric_limits<double>::infinity();

struct Live {
  std::vector<TokenId> seq;  // BOS first
  double log_prob = 0.0;
};

std::span<const TokenId> generated(const std::vector<TokenId>& seq) {
  return std::span<const TokenId>(seq).subspan(1);
}

// Applies suppression, n-gram blocking and the minimum length to one row.
void constrain(std::vector<double>& row, const std::vector<TokenId>& seq,
               const DecodeConfig& cfg) {
  const auto vocab = std::ssize(row);
  auto forbid = [&](TokenId t) {
    if (t >= 0 && t < vocab) row[static_cast<std::size_t>(t)] = kNegInf;
  };
  for (auto t : cfg.suppress) forbid(t);
  for (auto t : block_repeated_ngrams(generated(seq), cfg.block_ngram)) forbid(t);
  if (std::ssize(seq) - 1 < cfg.min_length) forbid(cfg.eos);
}

Hypothesis finalize(const std::vector<TokenId>& seq, double log_prob, bool finished,
                    double alpha) {
  Hypothesis h;
  h.tokens.assign(seq.begin() + 1, seq.end());
  h.log_prob = log_prob;
  h.finished = finished;
  const auto length = std::ssize(h.tokens) + (finished ? 1 : 0);
  h.score = log_prob / length_penalty(std::max<std::int64_t>(length, 1), alpha);
  return h;
}

}  // namespace

void DecodeConfig::validate() const {
  if (beam < 1) throw InvalidArgument("beam size must be >= 1");
  if (alpha < 0) throw InvalidArgument("length penalty alpha must be >= 0");
  if (block_ngram < 0) throw InvalidArgument("n-gram blocking size must be >= 0");
  if (max_length < 1) throw InvalidArgument("max length must be >= 1");
  if (min_length < 0 || min_length > max_length) {
    throw InvalidArgument("min length " + std::to_string(min_length) + " exceeds max length " +
                          std::to_string(max_length));
  }
}

double length_penalty(std::int64_t length, double alpha) {
  return std::pow((5.0 + double(length)) / 6.0, alpha);
}

std::set<TokenId> block_repeated_ngrams(std::span<const TokenId> prefix, int n) {
  std::set<TokenId> out;
  if (n <= 0 || std::ssize(prefix) < n - 1) return out;
  const auto len = std::ssize(prefix);
  const auto tail = prefix.subspan(static_cast<std::size_t>(len - (n - 1)));
  for (std::int64_t i = 0; i + n - 1 < len; ++i) {
    if (std::equal(tail.begin(), tail.end(), prefix.begin() + i)) {
      out.insert(prefix[static_cast<std::size_t>(i + n - 1)]);
    }
  }
  return out;
}

Hypothesis greedy_decode(NextTokenScorer& scorer, const DecodeConfig& cfg) {
  cfg.validate();
  std::vector<TokenId> seq{cfg.bos};
  double log_prob = 0.0;
  for (int step = 0; step < cfg.max_length; ++step) {
    auto row = std::move(scorer.log_probs({seq}).at(0));
    constrain(row, seq, cfg);
    const auto best = std::max_element(row.begin(), row.end());
    if (*best == kNegInf) break;
    log_prob += *best;
    const auto token = static_cast<TokenId>(best - row.begin());
    if (token == cfg.eos) return finalize(seq, log_prob, true, cfg.alpha);
    seq.push_back(token);
  }
  return finalize(seq, log_prob, false, cfg.alpha);
}

Hypothesis beam_search(NextTokenScorer& scorer, const DecodeConfig& cfg) {
  cfg.validate();
  if (cfg.beam == 1) return greedy_decode(scorer, cfg);
  const auto beam = static_cast<std::size_t>(cfg.beam);
  std::vector<Live> live{{{cfg.bos}, 0.0}};
  std::vector<Hypothesis> pool;
  bool hit_max = true;

  struct Candidate {
    double log_prob;
    std::size_t parent;
    TokenId token;
  };
  for (int step = 0; step < cfg.max_length; ++step) {
    std::vector<std::vector<TokenId>> prefixes;
    for (const auto& h : live) prefixes.push_back(h.seq);
    auto rows = scorer.log_probs(prefixes);
    std::vector<Candidate> cands;
    for (std::size_t i = 0; i < live.size(); ++i) {
      constrain(rows[i], live[i].seq, cfg);
      for (std::size_t v = 0; v < rows[i].size(); ++v) {
        if (rows[i][v] != kNegInf) {
          cands.push_back({live[i].log_prob + rows[i][v], i, static_cast<TokenId>(v)});
        }
      }
    }
    const auto keep = std::min(cands.size(), 2 * beam);
    std::partial_sort(cands.begin(), cands.begin() + static_cast<std::ptrdiff_t>(keep),
                      cands.end(), [](const Candidate& a, const Candidate& b) {
                        return a.log_prob != b.log_prob ? a.log_prob > b.log_prob
                               : a.parent != b.parent   ? a.parent < b.parent
                                                        : a.token < b.token;
                      });
    std::vector<Live> next;
    for (std::size_t r = 0; r < keep && next.size() < beam; ++r) {
      const auto& c = cands[r];
      if (c.token == cfg.eos) {
        if (r < beam) pool.push_back(finalize(live[c.parent].seq, c.log_prob, true, cfg.alpha));
        continue;
      }
      auto seq = live[c.parent].seq;
      seq.push_back(c.token);
      next.push_back({std::move(seq), c.log_prob});
    }
    live = std::move(next);
    if (live.empty()) {
      hit_max = false;
      break;
    }
    // Log-probabilities only fall and the penalty is capped at max_length,
    // so no live hypothesis can beat this bound.
    if (pool.size() >= beam) {
      double best_done = kNegInf, bound = kNegInf;
      for (const auto& h : pool) best_done = std::max(best_done, h.score);
      for (const auto& h : live) {
        bound = std::max(bound, h.log_prob / length_penalty(cfg.max_length, cfg.alpha));
      }
      if (best_done >= bound) {
        hit_max = false;
        break;
      }
    }
  }
  if (hit_max || pool.empty()) {
    for (const auto& h : live) pool.push_back(finalize(h.seq, h.log_prob, false, cfg.alpha));
  }
  pool.push_back(greedy_decode(scorer, cfg));
  const Hypothesis* best = &pool.front();
  for (const auto& h : pool) {
    if (h.score > best->score) best = &h;
  }
  return *best;
}

std::vector<TokenId> model_suppressed_tokens() {
  std::vector<TokenId> s{special::kPad, special::kBos, special::kMask, special::kSep};
  for (int i = 0; i < special::kSentinels; ++i) s.push_back(Vocabulary::sentinel(i));
  return s;
}

template <typename T>
ModelScorer<T>::ModelScorer(const Seq2SeqModel<T>& model, const std::vector<TokenId>& input)
    : model_(model) {
  NoGradGuard guard;
  const auto batch = TokenBatch::single(input);
  memory_ = model_.encode(batch, RunContext{});
  valid_ = batch.valid;
}

template <typename T>
std::vector<std::vector<double>> ModelScorer<T>::log_probs(
    const std::vector<std::vector<TokenId>>& prefixes) {
  NoGradGuard guard;
  const auto b = static_cast<std::int64_t>(prefixes.size());
  const auto batch = TokenBatch::from_sequences(prefixes, special::kPad);
  std::vector<Tensor<T>> copies(static_cast<std::size_t>(b), memory_);
  const auto memory = b == 1 ? memory_ : concat(copies, 0);
  std::vector<std::uint8_t> valid;
  for (std::int64_t i = 0; i < b; ++i) valid.insert(valid.end(), valid_.begin(), valid_.end());
  const auto logits = model_.decode_teacher_forced(memory, valid, batch, RunContext{});
  const auto v = vocab_size(), t = batch.length;
  std::vector<std::vector<double>> out;
  for (std::int64_t i = 0; i < b; ++i) {
    const auto last = std::ssize(prefixes[static_cast<std::size_t>(i)]) - 1;
    const T* row = logits.data().data() + (i * t + last) * v;
    double mx = kNegInf;
    for (std::int64_t k = 0; k < v; ++k) mx = std::max(mx, double(row[k]));
    double z = 0;
    for (std::int64_t k = 0; k < v; ++k) z += std::exp(double(row[k]) - mx);
    const double lse = mx + std::log(z);
    std::vector<double> lp(static_cast<std::size_t>(v));
    for (std::int64_t k = 0; k < v; ++k) lp[static_cast<std::size_t>(k)] = double(row[k]) - lse;
    out.push_back(std::move(lp));
  }
  return out;
}

template <typename T>
Hypothesis generate(const Seq2SeqModel<T>& model, const std::vector<TokenId>& input,
                    const DecodeConfig& cfg) {
  DecodeConfig c = cfg;
  if (c.suppress.empty()) c.suppress = model_suppressed_tokens();
  ModelScorer<T> scorer(model, input);
  return beam_search(scorer, c);
}

template class ModelScorer<float>;
template class ModelScorer<double>;
template Hypothesis generate<float>(const Seq2SeqModel<float>&, const std::vector<TokenId>&,
                                    const DecodeConfig&);
template Hypothesis generate<double>(const Seq2SeqModel<double>&, const std::vector<TokenId>&,
                                     const DecodeConfig&);

}  // namespace zsumm
