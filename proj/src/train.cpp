// SPDX-License-Identifier: Apache-2.0
#include "zsumm/train.hpp"

#include <algorithm>
#include <numeric>

#include "json.hpp"
#include "zsumm/errors.hpp"
#include "zsumm/rng.hpp"

namespace zsumm {

std::string phase_name(Phase phase) {
  switch (phase) {
    case Phase::kPretrain:
      return "pretrain";
    case Phase::kGrounded:
      return "grounded";
    case Phase::kFinetune:
      return "finetune";
  }
  return "unknown";
}

Phase parse_phase(const std::string& name) {
  if (name == "pretrain") return Phase::kPretrain;
  if (name == "grounded") return Phase::kGrounded;
  if (name == "finetune") return Phase::kFinetune;
  throw InvalidArgument("unknown phase '" + name + "' (pretrain, grounded, finetune)");
}

void TrainConfig::validate() const {
  optim.validate();
  weights.validate();
  if (batch_size < 1) throw InvalidArgument("batch size must be >= 1");
  if (!(mask_rate > 0 && mask_rate < 1)) throw InvalidArgument("mask rate must lie in (0, 1)");
  if (!(csp.rate > 0 && csp.rate < 1)) throw InvalidArgument("span rate must lie in (0, 1)");
  if (!(csp.mean_span > 0) || csp.max_span < 1) {
    throw InvalidArgument("span length mean must be > 0 and max >= 1");
  }
  if (limits.max_input < 3 || limits.max_target < 3) {
    throw InvalidArgument("input and target limits must be >= 3 tokens");
  }
}

std::string StepMetrics::to_json() const {
  nlohmann::json j{{"step", step}, {"lr", lr}, {"grad_norm", grad_norm}, {"loss", loss}};
  if (mlm) j["mlm"] = *mlm;
  if (rtd) j["rtd"] = *rtd;
  if (csp) j["csp"] = *csp;
  return j.dump();
}

Trainer::Trainer(Seq2SeqModel<float>& model, const TrainConfig& config)
    : model_(model), config_(config) {
  config_.validate();
  adam_.reset(model_.parameters());
}

RunContext Trainer::context(std::mt19937_64& rng) const {
  RunContext ctx;
  ctx.training = true;
  ctx.dropout = model_.config().dropout;
  ctx.rng = &rng;
  return ctx;
}

StepMetrics Trainer::finish(StepMetrics m) {
  const auto& params = model_.parameters();
  m.grad_norm = clip_global_norm<float>(params, config_.optim.clip_norm);
  // Update t (1-based) uses lr_at_step(t).
  m.lr = lr_at_step(step_ + 1, config_.optim);
  adamw_step<float>(params, adam_, config_.optim, m.lr);
  m.step = ++step_;
  return m;
}

StepMetrics Trainer::pretrain_step(const std::vector<std::vector<TokenId>>& docs) {
  if (docs.empty()) throw InvalidArgument("empty pretraining batch");
  const auto& w = config_.weights;
  const auto b = static_cast<std::int64_t>(docs.size());
  const std::int64_t vocab = model_.config().vocab_size;
  const auto base = static_cast<std::uint64_t>(step_ * config_.batch_size);
  model_.zero_grad();
  auto drop = stream_rng(config_.seed, static_cast<std::uint64_t>(step_), kStreamDropout);
  const auto ctx = context(drop);

  std::vector<MlmPlan> plans;
  std::vector<std::vector<TokenId>> masked;
  for (std::int64_t i = 0; i < b; ++i) {
    const auto& doc = docs[static_cast<std::size_t>(i)];
    if (doc.size() < 2) throw InvalidArgument("pretraining document shorter than 2 tokens");
    auto rng = stream_rng(config_.seed, base + static_cast<std::uint64_t>(i), kStreamMlm);
    plans.push_back(build_mlm_plan(doc, rng, config_.mask_rate));
    masked.push_back(apply_mlm_mask(doc, plans.back()));
  }
  const auto masked_batch = TokenBatch::from_sequences(masked, special::kPad);
  const auto gen_logits = model_.generator_forward(masked_batch, ctx);
  const auto mlm = mlm_loss(gen_logits, std::span<const MlmPlan>(plans));
  if (w.mlm > 0) backward(scale(mlm, static_cast<float>(w.mlm)));

  const std::int64_t n = masked_batch.length;
  std::vector<std::vector<TokenId>> replaced;
  std::vector<std::uint8_t> labels;
  for (std::int64_t i = 0; i < b; ++i) {
    const auto& doc = docs[static_cast<std::size_t>(i)];
    auto rng = stream_rng(config_.seed, base + static_cast<std::uint64_t>(i), kStreamSample);
    const auto rows = gen_logits.data().subspan(static_cast<std::size_t>(i * n * vocab),
                                                static_cast<std::size_t>(n * vocab));
    replaced.push_back(
        sample_discriminator_input<float>(doc, plans[static_cast<std::size_t>(i)], rows, vocab, rng));
    auto l = rtd_labels(doc, replaced.back());
    l.resize(static_cast<std::size_t>(n), 0);
    labels.insert(labels.end(), l.begin(), l.end());
  }
  const auto replaced_batch = TokenBatch::from_sequences(replaced, special::kPad);
  const auto scores = model_.discriminator_forward(replaced_batch, ctx);
  const auto rtd = rtd_loss(scores, labels, replaced_batch.valid);

  std::vector<Seq2SeqExample> spans;
  for (std::int64_t i = 0; i < b; ++i) {
    auto rng = stream_rng(config_.seed, base + static_cast<std::uint64_t>(i), kStreamCsp);
    auto plan = build_csp_plan(docs[static_cast<std::size_t>(i)], rng, config_.csp);
    std::vector<TokenId> target{special::kBos};
    target.insert(target.end(), plan.target.begin(), plan.target.end());
    spans.push_back({std::move(plan.input), std::move(target)});
  }
  const auto s2s = pad_batch(spans);
  const auto memory = model_.encode(s2s.input, ctx);
  const auto logits = model_.decode_teacher_forced(memory, s2s.input.valid, s2s.decoder_input, ctx);
  const auto csp = csp_loss(logits, s2s.labels);
  backward(add(scale(rtd, static_cast<float>(w.rtd)), scale(csp, static_cast<float>(w.csp))));

  StepMetrics m;
  m.mlm = mlm.item();
  m.rtd = rtd.item();
  m.csp = csp.item();
  m.loss = w.mlm * *m.mlm + w.rtd * *m.rtd + w.csp * *m.csp;
  return finish(m);
}

StepMetrics Trainer::seq2seq_step(const Seq2SeqBatch& batch) {
  model_.zero_grad();
  auto drop = stream_rng(config_.seed, static_cast<std::uint64_t>(step_), kStreamDropout);
  const auto ctx = context(drop);
  const auto memory = model_.encode(batch.input, ctx);
  const auto logits =
      model_.decode_teacher_forced(memory, batch.input.valid, batch.decoder_input, ctx);
  const auto loss = grounded_loss(logits, batch.labels);
  backward(loss);
  StepMetrics m;
  m.loss = loss.item();
  return finish(m);
}

std::vector<std::size_t> batch_indices(std::uint64_t seed, std::int64_t step, std::int64_t batch,
                                       std::size_t corpus_size) {
  if (corpus_size == 0) throw InvalidArgument("empty training corpus");
  if (step < 0 || batch < 1) throw InvalidArgument("step must be >= 0 and batch >= 1");
  std::vector<std::size_t> out;
  std::vector<std::size_t> order;
  std::uint64_t epoch = ~std::uint64_t{0};
  for (std::int64_t i = 0; i < batch; ++i) {
    const auto pos = static_cast<std::uint64_t>(step * batch + i);
    if (pos / corpus_size != epoch) {
      epoch = pos / corpus_size;
      order.resize(corpus_size);
      std::iota(order.begin(), order.end(), std::size_t{0});
      auto rng = stream_rng(seed, epoch, kStreamShuffle);
      std::shuffle(order.begin(), order.end(), rng);
    }
    out.push_back(order[pos % corpus_size]);
  }
  return out;
}

std::vector<std::vector<TokenId>> make_pretrain_batch(
    const std::vector<std::vector<TokenId>>& docs, const TrainConfig& config, std::int64_t step) {
  std::vector<std::vector<TokenId>> out;
  for (auto i : batch_indices(config.seed, step, config.batch_size, docs.size())) {
    const auto& d = docs[i];
    const auto len = std::min(d.size(), config.limits.max_input);
    out.emplace_back(d.begin(), d.begin() + static_cast<std::ptrdiff_t>(len));
  }
  return out;
}

Seq2SeqBatch make_seq2seq_batch(const std::vector<TrainingPair>& pairs,
                                const InstructionTemplates* templates, const Vocabulary& vocab,
                                const TrainConfig& config, std::int64_t step) {
  std::vector<Seq2SeqExample> examples;
  const auto idx = batch_indices(config.seed, step, config.batch_size, pairs.size());
  for (std::size_t slot = 0; slot < idx.size(); ++slot) {
    const auto& pair = pairs[idx[slot]];
    const auto pos = static_cast<std::uint64_t>(step * config.batch_size) + slot;
    auto rng = stream_rng(config.seed, pos, kStreamFormat);
    const auto* instr = templates ? &templates->for_task(pair.task) : nullptr;
    examples.push_back(format_grounded(pair, instr, vocab, rng, config.limits));
  }
  return pad_batch(examples);
}

std::vector<TokenId> default_sentence_delimiters(const Vocabulary& vocab) {
  std::vector<TokenId> out;
  for (const char* p : {".", "!", "?"}) {
    const auto id = vocab.id(p);
    if (id != special::kUnk) out.push_back(id);
  }
  return out;
}

}  // namespace zsumm
