// SPDX-License-Identifier: Apache-2.0
#include "zsumm/zsumm.h"

#include <cstdlib>
#include <cstring>
#include <fstream>
#include <memory>
#include <new>
#include <optional>
#include <sstream>

#include "json.hpp"
#include "zsumm/checkpoint.hpp"
#include "zsumm/decoding.hpp"
#include "zsumm/errors.hpp"
#include "zsumm/fie.hpp"
#include "zsumm/gradcheck_suite.hpp"
#include "zsumm/rng.hpp"
#include "zsumm/rouge.hpp"
#include "zsumm/train.hpp"

using namespace zsumm;

struct zsumm_vocab {
  Vocabulary vocab;
};

struct zsumm_model {
  std::unique_ptr<Seq2SeqModel<float>> model;
  zsumm_vocab vocab;
};

struct zsumm_trainer {
  zsumm_model* owner = nullptr;
  std::unique_ptr<Trainer> trainer;
  std::vector<std::vector<TokenId>> docs;
  std::vector<TrainingPair> pairs;
  std::optional<InstructionTemplates> templates;
};

namespace {

thread_local std::string g_error;

zsumm_status to_status(ErrorCode code) {
  switch (code) {
    case ErrorCode::kInvalidArgument:
      return ZSUMM_ERR_INVALID_ARGUMENT;
    case ErrorCode::kShapeMismatch:
      return ZSUMM_ERR_SHAPE;
    case ErrorCode::kOutOfRange:
      return ZSUMM_ERR_OUT_OF_RANGE;
    case ErrorCode::kIo:
      return ZSUMM_ERR_IO;
    case ErrorCode::kFormat:
      return ZSUMM_ERR_FORMAT;
    case ErrorCode::kChecksum:
      return ZSUMM_ERR_CHECKSUM;
    case ErrorCode::kVersion:
      return ZSUMM_ERR_VERSION;
    case ErrorCode::kNumeric:
      return ZSUMM_ERR_NUMERIC;
  }
  return ZSUMM_ERR_INTERNAL;
}

template <typename Fn>
zsumm_status guarded(Fn&& fn) {
  g_error.clear();
  try {
    fn();
    return ZSUMM_OK;
  } catch (const Error& e) {
    g_error = e.what();
    return to_status(e.code());
  } catch (const std::bad_alloc&) {
    g_error = "out of memory";
  } catch (const std::exception& e) {
    g_error = e.what();
  } catch (...) {
    g_error = "unknown error";
  }
  return ZSUMM_ERR_INTERNAL;
}

void require(bool ok, const char* what) {
  if (!ok) throw InvalidArgument(what);
}

char* copy_string(const std::string& s) {
  auto* out = static_cast<char*>(std::malloc(s.size() + 1));
  if (!out) throw std::bad_alloc();
  std::memcpy(out, s.c_str(), s.size() + 1);
  return out;
}

DecodeConfig decode_config(const zsumm_decode_options* o) {
  DecodeConfig c;
  if (o) {
    c.beam = o->beam;
    c.alpha = o->alpha;
    c.block_ngram = o->block_ngram;
    c.max_length = o->max_length;
    c.min_length = o->min_length;
  }
  c.suppress = model_suppressed_tokens();
  c.validate();
  return c;
}

std::optional<InstructionTemplates> templates_for(zsumm_instructions mode, const char* path) {
  switch (mode) {
    case ZSUMM_INSTRUCTIONS_NONE:
      return std::nullopt;
    case ZSUMM_INSTRUCTIONS_BUNDLED:
      return InstructionTemplates::bundled();
    case ZSUMM_INSTRUCTIONS_FILE:
      require(path != nullptr, "templates path is required");
      return InstructionTemplates::load(path);
  }
  throw InvalidArgument("unknown instruction mode");
}

std::string summarize(const zsumm_model& m, const Seq2SeqExample& ex, const DecodeConfig& cfg) {
  const auto h = generate(*m.model, ex.input, cfg);
  return detokenize(h.tokens, m.vocab.vocab);
}

std::vector<nlohmann::json> read_json_lines(const std::string& path) {
  std::ifstream in(path);
  if (!in) throw IoError("cannot open '" + path + "'");
  std::vector<nlohmann::json> out;
  std::string line;
  std::size_t no = 0;
  while (std::getline(in, line)) {
    ++no;
    if (line.find_first_not_of(" \t\r") == std::string::npos) continue;
    try {
      out.push_back(nlohmann::json::parse(line));
    } catch (const nlohmann::json::exception& e) {
      throw FormatError(path + ": line " + std::to_string(no) + ": malformed JSON (" + e.what() +
                        ")");
    }
    if (!out.back().is_object()) {
      throw FormatError(path + ": line " + std::to_string(no) + ": expected a JSON object");
    }
  }
  return out;
}

std::string string_field(const nlohmann::json& j, std::initializer_list<const char*> keys,
                         const std::string& where) {
  for (const char* k : keys) {
    const auto it = j.find(k);
    if (it != j.end() && it->is_string()) return it->get<std::string>();
  }
  std::string names;
  for (const char* k : keys) names += std::string(names.empty() ? "" : " or ") + "\"" + k + "\"";
  throw FormatError(where + ": missing string field " + names);
}

}  // namespace

extern "C" {

const char* zsumm_version(void) { return "0.1.0"; }

const char* zsumm_last_error(void) { return g_error.c_str(); }

const char* zsumm_status_name(zsumm_status status) {
  switch (status) {
    case ZSUMM_OK:
      return "ok";
    case ZSUMM_ERR_INVALID_ARGUMENT:
      return "invalid argument";
    case ZSUMM_ERR_SHAPE:
      return "shape mismatch";
    case ZSUMM_ERR_OUT_OF_RANGE:
      return "out of range";
    case ZSUMM_ERR_IO:
      return "i/o error";
    case ZSUMM_ERR_FORMAT:
      return "format error";
    case ZSUMM_ERR_CHECKSUM:
      return "checksum mismatch";
    case ZSUMM_ERR_VERSION:
      return "unsupported version";
    case ZSUMM_ERR_NUMERIC:
      return "numeric error";
    case ZSUMM_ERR_INTERNAL:
      return "internal error";
  }
  return "unknown status";
}

void zsumm_string_free(char* s) { std::free(s); }
void zsumm_ids_free(int32_t* ids) { std::free(ids); }

zsumm_status zsumm_vocab_build(const char* const* jsonl_paths, size_t n_paths, size_t max_size,
                               zsumm_vocab** out) {
  return guarded([&] {
    require(out && (jsonl_paths || n_paths == 0), "null argument");
    std::vector<std::string> paths;
    for (size_t i = 0; i < n_paths; ++i) {
      require(jsonl_paths[i] != nullptr, "null corpus path");
      paths.emplace_back(jsonl_paths[i]);
    }
    *out = new zsumm_vocab{Vocabulary::build_from_files(paths, max_size)};
  });
}

zsumm_status zsumm_vocab_load(const char* path, zsumm_vocab** out) {
  return guarded([&] {
    require(path && out, "null argument");
    *out = new zsumm_vocab{Vocabulary::load(path)};
  });
}

zsumm_status zsumm_vocab_save(const zsumm_vocab* vocab, const char* path) {
  return guarded([&] {
    require(vocab && path, "null argument");
    vocab->vocab.save(path);
  });
}

size_t zsumm_vocab_size(const zsumm_vocab* vocab) { return vocab ? vocab->vocab.size() : 0; }

zsumm_status zsumm_vocab_encode(const zsumm_vocab* vocab, const char* text, int32_t** ids,
                                size_t* n) {
  return guarded([&] {
    require(vocab && text && ids && n, "null argument");
    const auto tokens = tokenize(text, vocab->vocab);
    auto* buf = static_cast<int32_t*>(std::malloc(std::max<size_t>(1, tokens.size()) * 4));
    if (!buf) throw std::bad_alloc();
    std::copy(tokens.begin(), tokens.end(), buf);
    *ids = buf;
    *n = tokens.size();
  });
}

zsumm_status zsumm_vocab_decode(const zsumm_vocab* vocab, const int32_t* ids, size_t n,
                                char** text) {
  return guarded([&] {
    require(vocab && text && (ids || n == 0), "null argument");
    *text = copy_string(detokenize(std::span<const TokenId>(ids, n), vocab->vocab));
  });
}

void zsumm_vocab_free(zsumm_vocab* vocab) { delete vocab; }

zsumm_status zsumm_model_create(const zsumm_vocab* vocab, const char* config_json, uint64_t seed,
                                zsumm_model** out) {
  return guarded([&] {
    require(vocab && out, "null argument");
    ModelConfig cfg;
    if (config_json) cfg = model_config_from_json(config_json);
    cfg.vocab_size = static_cast<int>(vocab->vocab.size());
    auto m = std::make_unique<zsumm_model>();
    m->model = std::make_unique<Seq2SeqModel<float>>(cfg, seed);
    m->vocab = *vocab;
    *out = m.release();
  });
}

zsumm_status zsumm_model_load(const char* checkpoint_path, zsumm_model** out) {
  return guarded([&] {
    require(checkpoint_path && out, "null argument");
    const auto ck = load_checkpoint(checkpoint_path);
    if (ck.vocab.empty()) {
      throw FormatError(std::string(checkpoint_path) + ": checkpoint stores no vocabulary");
    }
    auto m = std::make_unique<zsumm_model>();
    m->vocab.vocab = Vocabulary::from_tokens(ck.vocab);
    if (static_cast<int>(m->vocab.vocab.size()) != ck.model.vocab_size) {
      throw ShapeError("stored vocabulary has " + std::to_string(m->vocab.vocab.size()) +
                       " entries but the model expects " + std::to_string(ck.model.vocab_size));
    }
    m->model = restore_model(ck);
    *out = m.release();
  });
}

zsumm_status zsumm_model_save(const zsumm_model* model, const char* path, int finalize) {
  return guarded([&] {
    require(model && path, "null argument");
    save_checkpoint(path, *model->model, {nullptr, &model->vocab.vocab, finalize != 0});
  });
}

zsumm_status zsumm_model_config(const zsumm_model* model, char** config_json) {
  return guarded([&] {
    require(model && config_json, "null argument");
    *config_json = copy_string(model_config_to_json(model->model->config()));
  });
}

uint64_t zsumm_model_parameter_count(const zsumm_model* model) {
  if (!model) return 0;
  uint64_t n = 0;
  for (const auto& p : model->model->parameters()) n += static_cast<uint64_t>(p.tensor.numel());
  return n;
}

const zsumm_vocab* zsumm_model_vocab(const zsumm_model* model) {
  return model ? &model->vocab : nullptr;
}

void zsumm_model_free(zsumm_model* model) { delete model; }

static void init_trainer(zsumm_trainer& t, zsumm_model* model, TrainConfig cfg) {
  if (cfg.csp.mode == CspMode::kSentence && cfg.csp.sentence_delimiters.empty()) {
    cfg.csp.sentence_delimiters = default_sentence_delimiters(model->vocab.vocab);
  }
  t.owner = model;
  t.trainer = std::make_unique<Trainer>(*model->model, cfg);
  if (cfg.phase == Phase::kGrounded) t.templates = InstructionTemplates::bundled();
}

zsumm_status zsumm_trainer_create(zsumm_model* model, const char* train_json,
                                  zsumm_trainer** out) {
  return guarded([&] {
    require(model && out, "null argument");
    TrainConfig cfg;
    if (train_json) cfg = train_config_from_json(train_json);
    auto t = std::make_unique<zsumm_trainer>();
    init_trainer(*t, model, cfg);
    *out = t.release();
  });
}

zsumm_status zsumm_trainer_resume(zsumm_model* model, const char* checkpoint_path,
                                  zsumm_trainer** out) {
  return guarded([&] {
    require(model && checkpoint_path && out, "null argument");
    const auto ck = load_checkpoint(checkpoint_path);
    if (!ck.train) {
      throw FormatError(std::string(checkpoint_path) + ": checkpoint has no training state");
    }
    auto t = std::make_unique<zsumm_trainer>();
    init_trainer(*t, model, *ck.train);
    restore_trainer(ck, *t->trainer);
    *out = t.release();
  });
}

zsumm_status zsumm_trainer_add_corpus(zsumm_trainer* trainer, const char* jsonl_path) {
  return guarded([&] {
    require(trainer && jsonl_path, "null argument");
    const auto& vocab = trainer->owner->vocab.vocab;
    if (trainer->trainer->config().phase == Phase::kPretrain) {
      for (const auto& text : load_documents(jsonl_path)) {
        auto ids = tokenize(text, vocab);
        if (ids.size() >= 2) trainer->docs.push_back(std::move(ids));
      }
    } else {
      auto pairs = load_jsonl(jsonl_path);
      trainer->pairs.insert(trainer->pairs.end(), pairs.begin(), pairs.end());
    }
  });
}

zsumm_status zsumm_trainer_set_instructions(zsumm_trainer* trainer, zsumm_instructions mode,
                                            const char* templates_path) {
  return guarded([&] {
    require(trainer != nullptr, "null argument");
    trainer->templates = templates_for(mode, templates_path);
  });
}

zsumm_status zsumm_trainer_step(zsumm_trainer* trainer, char** metrics_json) {
  return guarded([&] {
    require(trainer && metrics_json, "null argument");
    auto& t = *trainer->trainer;
    const auto& cfg = t.config();
    StepMetrics m;
    if (cfg.phase == Phase::kPretrain) {
      if (trainer->docs.empty()) throw InvalidArgument("no pretraining documents loaded");
      m = t.pretrain_step(make_pretrain_batch(trainer->docs, cfg, t.step()));
    } else {
      if (trainer->pairs.empty()) throw InvalidArgument("no training pairs loaded");
      const auto* templates = trainer->templates ? &*trainer->templates : nullptr;
      m = t.seq2seq_step(make_seq2seq_batch(trainer->pairs, templates,
                                            trainer->owner->vocab.vocab, cfg, t.step()));
    }
    auto j = nlohmann::json::parse(m.to_json());
    j["phase"] = phase_name(cfg.phase);
    *metrics_json = copy_string(j.dump());
  });
}

int64_t zsumm_trainer_steps_done(const zsumm_trainer* trainer) {
  return trainer ? trainer->trainer->step() : 0;
}

zsumm_status zsumm_trainer_config(const zsumm_trainer* trainer, char** train_json) {
  return guarded([&] {
    require(trainer && train_json, "null argument");
    *train_json = copy_string(train_config_to_json(trainer->trainer->config()));
  });
}

zsumm_status zsumm_trainer_save(const zsumm_trainer* trainer, const char* path, int finalize) {
  return guarded([&] {
    require(trainer && path, "null argument");
    save_checkpoint(path, *trainer->owner->model,
                    {trainer->trainer.get(), &trainer->owner->vocab.vocab, finalize != 0});
  });
}

void zsumm_trainer_free(zsumm_trainer* trainer) { delete trainer; }

void zsumm_decode_options_default(zsumm_decode_options* options) {
  if (!options) return;
  const DecodeConfig d;
  options->beam = d.beam;
  options->alpha = d.alpha;
  options->block_ngram = d.block_ngram;
  options->max_length = d.max_length;
  options->min_length = d.min_length;
}

zsumm_status zsumm_generate(const zsumm_model* model, const char* source, const char* instruction,
                            const zsumm_decode_options* options, char** summary) {
  return guarded([&] {
    require(model && source && summary, "null argument");
    const auto cfg = decode_config(options);
    TrainingPair pair{source, "-", std::nullopt, ""};
    if (instruction) pair.instruction = instruction;
    auto rng = stream_rng(0, 0, kStreamFormat);
    const auto ex = format_grounded(pair, nullptr, model->vocab.vocab, rng);
    *summary = copy_string(summarize(*model, ex, cfg));
  });
}

zsumm_status zsumm_generate_file(const zsumm_model* model, const char* in_jsonl,
                                 const char* out_jsonl, zsumm_instructions mode,
                                 const char* templates_path, const zsumm_decode_options* options,
                                 size_t* count) {
  return guarded([&] {
    require(model && in_jsonl && out_jsonl, "null argument");
    const auto cfg = decode_config(options);
    const auto templates = templates_for(mode, templates_path);
    const auto pairs = load_jsonl(in_jsonl);
    std::ofstream out(out_jsonl, std::ios::trunc);
    if (!out) throw IoError("cannot open '" + std::string(out_jsonl) + "' for writing");
    for (std::size_t i = 0; i < pairs.size(); ++i) {
      auto rng = stream_rng(0, i, kStreamFormat);
      const auto* instr = templates ? &templates->for_task(pairs[i].task) : nullptr;
      const auto ex = format_grounded(pairs[i], instr, model->vocab.vocab, rng);
      nlohmann::json line{{"prediction", summarize(*model, ex, cfg)},
                          {"reference", pairs[i].summary},
                          {"task", pairs[i].task}};
      out << line.dump() << '\n';
    }
    out.flush();
    if (!out) throw IoError("write to '" + std::string(out_jsonl) + "' failed");
    if (count) *count = pairs.size();
  });
}

zsumm_status zsumm_rouge_text(const char* candidate, const char* reference, zsumm_rouge* out) {
  return guarded([&] {
    require(candidate && reference && out, "null argument");
    const auto t = ::zsumm::rouge_text(candidate, reference);
    *out = {t.r1.f1, t.r2.f1, t.rl.f1};
  });
}

zsumm_status zsumm_eval_jsonl(const char* predictions_jsonl, const char* references_jsonl,
                              zsumm_rouge* mean, size_t* count) {
  return guarded([&] {
    require(predictions_jsonl && mean, "null argument");
    const auto preds = read_json_lines(predictions_jsonl);
    std::vector<std::string> p, r;
    for (std::size_t i = 0; i < preds.size(); ++i) {
      const auto where = std::string(predictions_jsonl) + ": record " + std::to_string(i + 1);
      p.push_back(string_field(preds[i], {"prediction"}, where));
      if (!references_jsonl) r.push_back(string_field(preds[i], {"reference"}, where));
    }
    if (references_jsonl) {
      const auto refs = read_json_lines(references_jsonl);
      for (std::size_t i = 0; i < refs.size(); ++i) {
        const auto where = std::string(references_jsonl) + ": record " + std::to_string(i + 1);
        r.push_back(string_field(refs[i], {"summary", "reference"}, where));
      }
    }
    const auto s = mean_rouge(p, r);
    *mean = {s.r1, s.r2, s.rl};
    if (count) *count = s.count;
  });
}

zsumm_status zsumm_gradcheck(uint64_t seed, int instances, char** report_json, int* all_passed) {
  return guarded([&] {
    require(report_json != nullptr, "null argument");
    require(instances >= 1, "instances must be >= 1");
    GradCheckSuiteOptions opt;
    opt.seed = seed;
    opt.instances = instances;
    const auto results = gradcheck_suite(opt);
    auto arr = nlohmann::json::array();
    bool ok = true;
    for (const auto& r : results) {
      arr.push_back({{"name", r.name},
                     {"instances", r.instances},
                     {"coords", r.coords},
                     {"max_error", r.max_error},
                     {"worst", r.worst},
                     {"passed", r.passed}});
      ok = ok && r.passed;
    }
    *report_json = copy_string(arr.dump());
    if (all_passed) *all_passed = ok ? 1 : 0;
  });
}

zsumm_status zsumm_fie_cost(int64_t n, int layers, int global_layers, int64_t chunk,
                            uint64_t* fie_cost_out, uint64_t* full_cost_out) {
  return guarded([&] {
    require(fie_cost_out && full_cost_out, "null argument");
    require(n >= 1, "sequence length must be >= 1");
    const auto f = FiEConfig::for_stack(layers, global_layers, chunk);
    *fie_cost_out = fie_cost(n, layers, f.local_layers, f.global_layers, f.chunk);
    *full_cost_out = full_attention_cost(n, layers);
  });
}

zsumm_status zsumm_fie_count(int64_t n, int layers, int global_layers, int64_t chunk,
                             uint64_t* counted) {
  return guarded([&] {
    require(counted != nullptr, "null argument");
    require(n >= 1, "sequence length must be >= 1");
    const auto f = FiEConfig::for_stack(layers, global_layers, chunk);
    ModelConfig cfg;
    cfg.vocab_size = special::kCount;
    cfg.d_model = 8;
    cfg.heads = 1;
    cfg.d_ff = 8;
    cfg.encoder_layers = layers;
    cfg.generator_layers = 1;
    cfg.decoder_layers = 1;
    cfg.max_distance = 16;
    cfg.fie = f;
    const Seq2SeqModel<float> model(cfg, 1);
    std::vector<TokenId> ids(static_cast<std::size_t>(n), special::kUnk);
    std::uint64_t counter = 0;
    RunContext ctx;
    ctx.score_counter = &counter;
    NoGradGuard guard;
    model.encode(TokenBatch::single(ids), ctx);
    *counted = counter;
  });
}

}  // extern "C"
