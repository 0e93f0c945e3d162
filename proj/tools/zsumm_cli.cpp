// SPDX-License-Identifier: Apache-2.0
// Command-line front end. Talks to the library only through zsumm.h.
#include <algorithm>
#include <cstdlib>
#include <cstring>
#include <filesystem>
#include <fstream>
#include <iostream>
#include <optional>
#include <sstream>
#include <string>
#include <vector>

#include "CLI11.hpp"
#include "json.hpp"
#include "zsumm/zsumm.h"

namespace {

using nlohmann::json;

int g_argc = 0;
char** g_argv = nullptr;

struct Failure {
  int code;
};

// Throws after printing the library's message when a call fails.
void check(zsumm_status s, const char* what) {
  if (s == ZSUMM_OK) return;
  std::cerr << "error: " << what << ": " << zsumm_status_name(s) << ": " << zsumm_last_error()
            << '\n';
  throw Failure{s == ZSUMM_ERR_INVALID_ARGUMENT ? 2 : 1};
}

std::string take(char* s) {
  std::string out(s ? s : "");
  zsumm_string_free(s);
  return out;
}

template <typename T>
void put(json& j, const char* key, const std::optional<T>& v) {
  if (v) j[key] = *v;
}

struct ModelOptions {
  std::optional<int> d_model, heads, d_ff, encoder_layers, decoder_layers, generator_layers,
      max_distance;
  std::optional<double> dropout, init_std, position_init_std;
  std::optional<std::int64_t> fie_chunk;
  int fie_global_layers = 1;

  void add(CLI::App* app) {
    auto* g = app->add_option_group("model", "Architecture of a freshly created model");
    g->add_option("--d-model", d_model, "Hidden width");
    g->add_option("--heads", heads, "Attention heads");
    g->add_option("--d-ff", d_ff, "Feed-forward width");
    g->add_option("--encoder-layers", encoder_layers, "Encoder layers");
    g->add_option("--decoder-layers", decoder_layers, "Decoder layers");
    g->add_option("--generator-layers", generator_layers, "Generator layers");
    g->add_option("--max-distance", max_distance, "Relative-position bucket radius");
    g->add_option("--dropout", dropout, "Dropout rate");
    g->add_option("--init-std", init_std, "Initializer standard deviation");
    g->add_option("--position-init-std", position_init_std,
                  "Initializer standard deviation of the relative-position table");
    g->add_option("--fie-chunk", fie_chunk, "Enable fusion-in-encoder with this chunk length");
    g->add_option("--fie-global-layers", fie_global_layers,
                  "Full-sequence layers at the top of a fusion-in-encoder stack")
        ->capture_default_str();
  }

  json to_json() const {
    json j = json::object();
    put(j, "d_model", d_model);
    put(j, "heads", heads);
    put(j, "d_ff", d_ff);
    put(j, "encoder_layers", encoder_layers);
    put(j, "decoder_layers", decoder_layers);
    put(j, "generator_layers", generator_layers);
    put(j, "max_distance", max_distance);
    put(j, "dropout", dropout);
    put(j, "init_std", init_std);
    put(j, "position_init_std", position_init_std);
    if (fie_chunk) {
      const int layers = encoder_layers.value_or(4);
      j["fie"] = {{"local_layers", layers - fie_global_layers},
                  {"global_layers", fie_global_layers},
                  {"chunk", *fie_chunk}};
    }
    return j;
  }
};

struct TrainOptions {
  std::optional<double> lr, beta1, beta2, eps, weight_decay, clip_norm, lambda1, lambda2, lambda3,
      mask_rate, span_rate, mean_span;
  std::optional<int> warmup, total_steps, batch_size, max_span, max_input, max_target;
  std::optional<std::string> csp_mode;
  std::uint64_t seed = 0;

  void add(CLI::App* app) {
    auto* g = app->add_option_group("training", "Optimizer and objective settings");
    g->add_option("--lr", lr, "Peak learning rate");
    g->add_option("--warmup", warmup, "Warmup steps");
    g->add_option("--total-steps", total_steps, "Total optimizer steps");
    g->add_option("--batch-size", batch_size, "Examples per step");
    g->add_option("--beta1", beta1, "Adam beta1");
    g->add_option("--beta2", beta2, "Adam beta2");
    g->add_option("--eps", eps, "Adam epsilon");
    g->add_option("--weight-decay", weight_decay, "Decoupled weight decay");
    g->add_option("--clip-norm", clip_norm, "Global gradient norm limit");
    g->add_option("--lambda1", lambda1, "MLM loss weight");
    g->add_option("--lambda2", lambda2, "Replaced-token-detection loss weight");
    g->add_option("--lambda3", lambda3, "Corrupted-span loss weight");
    g->add_option("--mask-rate", mask_rate, "MLM masking rate");
    g->add_option("--span-rate", span_rate, "Fraction of tokens covered by corrupted spans");
    g->add_option("--mean-span", mean_span, "Mean corrupted span length");
    g->add_option("--max-span", max_span, "Longest corrupted span");
    g->add_option("--csp-mode", csp_mode, "Span selection")
        ->check(CLI::IsMember({"span", "sentence"}));
    g->add_option("--max-input", max_input, "Input tokens kept per example");
    g->add_option("--max-target", max_target, "Target tokens kept per example");
    g->add_option("--seed", seed, "Seed for initialization, sampling and shuffling")
        ->capture_default_str();
  }

  json to_json(const char* phase) const {
    json j = {{"phase", phase}, {"seed", seed}};
    put(j, "lr", lr);
    put(j, "warmup", warmup);
    put(j, "total_steps", total_steps);
    put(j, "batch_size", batch_size);
    put(j, "beta1", beta1);
    put(j, "beta2", beta2);
    put(j, "eps", eps);
    put(j, "weight_decay", weight_decay);
    put(j, "clip_norm", clip_norm);
    put(j, "lambda1", lambda1);
    put(j, "lambda2", lambda2);
    put(j, "lambda3", lambda3);
    put(j, "mask_rate", mask_rate);
    put(j, "span_rate", span_rate);
    put(j, "mean_span", mean_span);
    put(j, "max_span", max_span);
    put(j, "csp_mode", csp_mode);
    put(j, "max_input", max_input);
    put(j, "max_target", max_target);
    return j;
  }
};

struct DecodeOptions {
  zsumm_decode_options opt{};

  void add(CLI::App* app) {
    zsumm_decode_options_default(&opt);
    auto* g = app->add_option_group("decoding", "Search settings");
    g->add_option("--beam", opt.beam, "Beam width; 1 is greedy")->capture_default_str();
    g->add_option("--alpha", opt.alpha, "Length penalty exponent")->capture_default_str();
    g->add_option("--block-ngram", opt.block_ngram, "Forbid repeating n-grams of this size")
        ->capture_default_str();
    g->add_option("--max-len", opt.max_length, "Longest summary in tokens")->capture_default_str();
    g->add_option("--min-len", opt.min_length, "Shortest summary in tokens")->capture_default_str();
  }
};

struct InstructionOptions {
  std::optional<std::string> mode;
  std::string templates;

  void add(CLI::App* app) {
    app->add_option("--instructions", mode, "Instruction prefixes")
        ->check(CLI::IsMember({"none", "bundled", "file"}));
    app->add_option("--templates", templates, "JSON object of task -> instruction list");
  }

  zsumm_instructions resolve(zsumm_instructions fallback) const {
    if (!templates.empty() && !mode) return ZSUMM_INSTRUCTIONS_FILE;
    if (!mode) return fallback;
    if (*mode == "none") return ZSUMM_INSTRUCTIONS_NONE;
    if (*mode == "bundled") return ZSUMM_INSTRUCTIONS_BUNDLED;
    if (templates.empty()) {
      std::cerr << "error: --instructions file requires --templates\n";
      throw Failure{2};
    }
    return ZSUMM_INSTRUCTIONS_FILE;
  }
};

struct TrainCommand {
  explicit TrainCommand(const char* p) : phase(p) {}
  const char* phase;
  std::vector<std::string> corpus;
  std::string vocab_path, init, resume, out, log;
  std::size_t vocab_size = 8000;
  std::optional<std::int64_t> max_steps;
  std::int64_t save_every = 0;
  bool finalize = false;
  ModelOptions model;
  TrainOptions train;
  InstructionOptions instructions;
};

struct Handles {
  zsumm_vocab* vocab = nullptr;
  zsumm_model* model = nullptr;
  zsumm_trainer* trainer = nullptr;
  ~Handles() {
    zsumm_trainer_free(trainer);
    zsumm_model_free(model);
    zsumm_vocab_free(vocab);
  }
};

void load_or_build_vocab(const TrainCommand& c, Handles& h) {
  if (!c.vocab_path.empty() && std::filesystem::exists(c.vocab_path)) {
    check(zsumm_vocab_load(c.vocab_path.c_str(), &h.vocab), "loading vocabulary");
    return;
  }
  std::vector<const char*> paths;
  for (const auto& p : c.corpus) paths.push_back(p.c_str());
  check(zsumm_vocab_build(paths.data(), paths.size(), c.vocab_size, &h.vocab),
        "building vocabulary");
  if (!c.vocab_path.empty())
    check(zsumm_vocab_save(h.vocab, c.vocab_path.c_str()), "saving vocabulary");
}

// Explicit --seed beats the environment, which beats the config file.
void apply_seed_env(std::uint64_t& seed) {
  for (int i = 1; i < g_argc; ++i)
    if (std::strcmp(g_argv[i], "--seed") == 0 || std::strncmp(g_argv[i], "--seed=", 7) == 0)
      return;
  const char* env = std::getenv("ZSUMM_SEED");
  if (!env || !*env) return;
  try {
    std::size_t used = 0;
    seed = std::stoull(env, &used);
    if (used != std::strlen(env)) throw std::invalid_argument(env);
  } catch (const std::exception&) {
    std::cerr << "error: ZSUMM_SEED must be an unsigned integer, got '" << env << "'\n";
    throw Failure{2};
  }
}

int run_training(TrainCommand& c) {
  apply_seed_env(c.train.seed);
  Handles h;
  if (!c.resume.empty()) {
    check(zsumm_model_load(c.resume.c_str(), &h.model), "loading checkpoint");
    check(zsumm_trainer_resume(h.model, c.resume.c_str(), &h.trainer), "restoring trainer");
  } else {
    if (!c.init.empty()) {
      check(zsumm_model_load(c.init.c_str(), &h.model), "loading initial checkpoint");
    } else {
      load_or_build_vocab(c, h);
      const auto cfg = c.model.to_json().dump();
      check(zsumm_model_create(h.vocab, cfg.c_str(), c.train.seed, &h.model), "creating model");
    }
    const auto tcfg = c.train.to_json(c.phase).dump();
    check(zsumm_trainer_create(h.model, tcfg.c_str(), &h.trainer), "configuring trainer");
  }
  for (const auto& p : c.corpus)
    check(zsumm_trainer_add_corpus(h.trainer, p.c_str()), "reading corpus");
  if (std::strcmp(c.phase, "pretrain") != 0) {
    const auto fallback = std::strcmp(c.phase, "grounded") == 0 ? ZSUMM_INSTRUCTIONS_BUNDLED
                                                                : ZSUMM_INSTRUCTIONS_NONE;
    const auto mode = c.instructions.resolve(fallback);
    check(zsumm_trainer_set_instructions(
              h.trainer, mode,
              mode == ZSUMM_INSTRUCTIONS_FILE ? c.instructions.templates.c_str() : nullptr),
          "loading instructions");
  }

  const json config = json::parse(take([&] {
    char* s = nullptr;
    check(zsumm_trainer_config(h.trainer, &s), "reading config");
    return s;
  }()));
  std::int64_t total = config.at("total_steps").get<std::int64_t>();
  if (c.max_steps) total = std::min(total, zsumm_trainer_steps_done(h.trainer) + *c.max_steps);

  if (c.log.empty()) c.log = c.out + ".log.jsonl";
  std::ofstream log(c.log, c.resume.empty() ? std::ios::trunc : std::ios::app);
  if (!log) {
    std::cerr << "error: cannot open run log " << c.log << '\n';
    return 1;
  }
  const json header = {{"event", "start"}, {"config", config}};
  std::cerr << "zsumm " << zsumm_version() << ": " << config.at("phase").get<std::string>()
            << " from step " << zsumm_trainer_steps_done(h.trainer) << " to " << total << ", "
            << zsumm_model_parameter_count(h.model) << " parameters\n";
  log << header.dump() << '\n';

  while (zsumm_trainer_steps_done(h.trainer) < total) {
    char* metrics = nullptr;
    check(zsumm_trainer_step(h.trainer, &metrics), "training step");
    const auto line = take(metrics);
    std::cout << line << '\n' << std::flush;
    log << line << '\n' << std::flush;
    const auto done = zsumm_trainer_steps_done(h.trainer);
    if (c.save_every > 0 && done % c.save_every == 0 && done < total)
      check(zsumm_trainer_save(h.trainer, c.out.c_str(), 0), "saving checkpoint");
  }
  check(zsumm_trainer_save(h.trainer, c.out.c_str(), c.finalize ? 1 : 0), "saving checkpoint");
  log << json{{"event", "saved"}, {"path", c.out}, {"step", zsumm_trainer_steps_done(h.trainer)}}
             .dump()
      << '\n';
  return 0;
}

void add_training_command(CLI::App& app, TrainCommand& c, const char* name, const char* help,
                          bool from_checkpoint) {
  auto* sub = app.add_subcommand(name, help);
  sub->add_option("--corpus", c.corpus, "JSONL training files")->required();
  sub->add_option("--out", c.out, "Checkpoint to write")->required();
  sub->add_option("--log", c.log, "Run log (default: <out>.log.jsonl)");
  sub->add_option("--vocab", c.vocab_path,
                  "Vocabulary file; built from the corpus and written here when missing");
  sub->add_option("--vocab-size", c.vocab_size, "Vocabulary limit when building")
      ->capture_default_str();
  auto* init = sub->add_option("--init", c.init,
                               from_checkpoint ? "Starting weights; optimizer state is fresh"
                                               : "Starting weights instead of a random model");
  auto* resume = sub->add_option("--resume", c.resume,
                                 "Continue an interrupted run with its saved configuration");
  init->excludes(resume);
  if (from_checkpoint) init->required();
  sub->add_option("--max-steps", c.max_steps, "Stop after this many steps in this invocation");
  sub->add_option("--save-every", c.save_every, "Checkpoint interval in steps")
      ->capture_default_str();
  sub->add_flag("--finalize", c.finalize, "Also store materialized discriminator embeddings");
  c.model.add(sub);
  c.train.add(sub);
  if (std::strcmp(c.phase, "pretrain") != 0) c.instructions.add(sub);
  sub->callback([&c] { throw Failure{run_training(c)}; });
}

}  // namespace

int main(int argc, char** argv) {
  g_argc = argc;
  g_argv = argv;
  CLI::App app{"Summarization model training, generation and evaluation"};
  app.set_config("--config", "", "TOML file of option values; command-line flags win");
  app.set_version_flag("--version", std::string(zsumm_version()));
  app.require_subcommand(1);

  TrainCommand pretrain{"pretrain"}, ground{"grounded"}, finetune{"finetune"};
  add_training_command(app, pretrain, "pretrain",
                       "Joint masked-LM, replaced-token and corrupted-span pretraining", false);
  add_training_command(app, ground, "ground",
                       "Instruction-grounded continual training from a pretrained checkpoint",
                       true);
  add_training_command(app, finetune, "finetune", "Supervised summarization training", false);

  std::string model_path, input, output, text, instruction;
  DecodeOptions decode;
  InstructionOptions gen_instructions;
  auto* generate = app.add_subcommand("generate", "Summarize text or a JSONL file");
  generate->add_option("--model", model_path, "Checkpoint")->required();
  auto* in_opt = generate->add_option("--input", input, "JSONL pairs or documents");
  generate->add_option("--output", output, "JSONL predictions")->needs(in_opt);
  auto* text_opt = generate->add_option("--text", text, "Summarize this text and print it");
  generate->add_option("--instruction", instruction, "Prefix for --text")->needs(text_opt);
  in_opt->excludes(text_opt);
  gen_instructions.add(generate);
  decode.add(generate);
  generate->callback([&] {
    Handles h;
    check(zsumm_model_load(model_path.c_str(), &h.model), "loading model");
    if (!text.empty()) {
      char* s = nullptr;
      check(zsumm_generate(h.model, text.c_str(), instruction.empty() ? nullptr : instruction.c_str(),
                           &decode.opt, &s),
            "generating");
      std::cout << take(s) << '\n';
      throw Failure{0};
    }
    if (input.empty() || output.empty()) {
      std::cerr << "error: generate needs --text or both --input and --output\n";
      throw Failure{2};
    }
    const auto mode = gen_instructions.resolve(ZSUMM_INSTRUCTIONS_NONE);
    std::size_t count = 0;
    check(zsumm_generate_file(
              h.model, input.c_str(), output.c_str(), mode,
              mode == ZSUMM_INSTRUCTIONS_FILE ? gen_instructions.templates.c_str() : nullptr,
              &decode.opt, &count),
          "generating");
    std::cerr << "wrote " << count << " predictions to " << output << '\n';
    throw Failure{0};
  });

  std::string predictions, references;
  auto* eval = app.add_subcommand("eval", "Mean ROUGE F-measures as CSV");
  eval->add_option("--predictions", predictions, "JSONL with \"prediction\" fields")->required();
  eval->add_option("--references", references,
                   "JSONL with \"summary\" fields; default: references in the predictions file");
  eval->callback([&] {
    zsumm_rouge mean{};
    std::size_t count = 0;
    check(zsumm_eval_jsonl(predictions.c_str(), references.empty() ? nullptr : references.c_str(),
                           &mean, &count),
          "evaluating");
    std::cout << "count,rouge1,rouge2,rougeL\n"
              << count << ',' << mean.r1 << ',' << mean.r2 << ',' << mean.rl << '\n';
    throw Failure{0};
  });

  std::uint64_t gc_seed = 0;
  int gc_instances = 20;
  auto* gradcheck = app.add_subcommand("gradcheck", "Finite-difference gradient sweep");
  gradcheck->add_option("--seed", gc_seed, "Instance seed")->capture_default_str();
  gradcheck->add_option("--instances", gc_instances, "Random instances per case")
      ->capture_default_str()
      ->check(CLI::PositiveNumber);
  gradcheck->callback([&] {
    apply_seed_env(gc_seed);
    char* report = nullptr;
    int ok = 0;
    check(zsumm_gradcheck(gc_seed, gc_instances, &report, &ok), "gradient check");
    for (const auto& r : json::parse(take(report))) std::cout << r.dump() << '\n';
    std::cerr << (ok ? "all cases passed" : "gradient check FAILED") << '\n';
    throw Failure{ok ? 0 : 1};
  });

  std::vector<std::int64_t> lengths{512};
  int layers = 24, global_layers = 1;
  std::int64_t chunk = 256;
  std::string emit_cost;
  bool measure = false;
  auto* cost = app.add_subcommand("fie-cost", "Attention score elements, fused vs full");
  cost->add_option("--n", lengths, "Sequence lengths")->capture_default_str();
  cost->add_option("--layers", layers, "Encoder layers")->capture_default_str();
  cost->add_option("--fie-global-layers", global_layers, "Full-sequence layers")
      ->capture_default_str();
  cost->add_option("--fie-chunk", chunk, "Chunk length of the local layers")
      ->capture_default_str();
  cost->add_option("--emit-cost", emit_cost, "Also write the CSV here");
  cost->add_flag("--measure", measure,
                 "Count by running an instrumented encoder and compare with the formula");
  cost->callback([&] {
    std::ostringstream csv;
    csv << "N,full_cost,fie_cost\n";
    bool agree = true;
    for (const auto n : lengths) {
      std::uint64_t fie = 0, full = 0;
      check(zsumm_fie_cost(n, layers, global_layers, chunk, &fie, &full), "computing cost");
      if (measure) {
        std::uint64_t counted = 0;
        check(zsumm_fie_count(n, layers, global_layers, chunk, &counted), "counting");
        if (counted != fie) {
          std::cerr << "N=" << n << ": counted " << counted << " != formula " << fie << '\n';
          agree = false;
        }
      }
      csv << n << ',' << full << ',' << fie << '\n';
    }
    std::cout << csv.str();
    if (!emit_cost.empty()) {
      std::ofstream f(emit_cost);
      f << csv.str();
      if (!f) {
        std::cerr << "error: cannot write " << emit_cost << '\n';
        throw Failure{1};
      }
    }
    throw Failure{agree ? 0 : 1};
  });

  try {
    app.parse(argc, argv);
  } catch (const CLI::ParseError& e) {
    return app.exit(e);
  } catch (const Failure& f) {
    return f.code;
  }
  return 0;
}
