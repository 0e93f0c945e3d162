// SPDX-License-Identifier: Apache-2.0
//
// Training steps for the three phases. Every random draw in a step comes
// from stream_rng(seed, ., .) keyed by the step number or by the example's
// global position (step * batch_size + slot), so a run resumed from a
// checkpoint continues exactly where it stopped.
#pragma once

#include <cstdint>
#include <optional>
#include <string>
#include <vector>

#include "zsumm/data.hpp"
#include "zsumm/model.hpp"
#include "zsumm/objectives.hpp"
#include "zsumm/optim.hpp"

namespace zsumm {

enum class Phase { kPretrain, kGrounded, kFinetune };

std::string phase_name(Phase phase);
Phase parse_phase(const std::string& name);

struct TrainConfig {
  Phase phase = Phase::kPretrain;
  OptimizerConfig optim;
  std::int64_t batch_size = 16;
  std::uint64_t seed = 0;
  LossWeights weights;
  double mask_rate = kDefaultMaskRate;
  CspConfig csp;
  FormatLimits limits;

  void validate() const;
};

struct StepMetrics {
  std::int64_t step = 0;  // updates completed, including this one
  double lr = 0.0;
  double grad_norm = 0.0;  // before clipping
  double loss = 0.0;       // weighted joint loss in pretraining, NLL otherwise
  std::optional<double> mlm, rtd, csp;

  std::string to_json() const;
};

class Trainer {
 public:
  Trainer(Seq2SeqModel<float>& model, const TrainConfig& config);

  const TrainConfig& config() const { return config_; }
  Seq2SeqModel<float>& model() { return model_; }
  std::int64_t step() const { return step_; }
  AdamState<float>& optimizer_state() { return adam_; }
  const AdamState<float>& optimizer_state() const { return adam_; }
  /// Resumes the step counter (checkpoint restore).
  void set_step(std::int64_t step) { step_ = step; }

  /// Generator forward and MLM backward, discriminator inputs sampled from
  /// the detached generator, then RTD and CSP backward together; one
  /// optimizer update. `docs` are unpadded token sequences.
  StepMetrics pretrain_step(const std::vector<std::vector<TokenId>>& docs);
  /// Conditional-likelihood update for the grounded and finetune phases.
  StepMetrics seq2seq_step(const Seq2SeqBatch& batch);

 private:
  StepMetrics finish(StepMetrics m);
  RunContext context(std::mt19937_64& rng) const;

  Seq2SeqModel<float>& model_;
  TrainConfig config_;
  AdamState<float> adam_;
  std::int64_t step_ = 0;
};

/// Corpus indices drawn at `step`: the corpus is reshuffled every epoch
/// with stream_rng(seed, epoch, kStreamShuffle).
std::vector<std::size_t> batch_indices(std::uint64_t seed, std::int64_t step,
                                       std::int64_t batch, std::size_t corpus_size);

std::vector<std::vector<TokenId>> make_pretrain_batch(
    const std::vector<std::vector<TokenId>>& docs, const TrainConfig& config, std::int64_t step);

/// Formats the pairs drawn at `step`. Without `templates` only a pair's
/// own instruction is used.
Seq2SeqBatch make_seq2seq_batch(const std::vector<TrainingPair>& pairs,
                                const InstructionTemplates* templates, const Vocabulary& vocab,
                                const TrainConfig& config, std::int64_t step);

/// Token ids of ".", "!" and "?" present in `vocab`.
std::vector<TokenId> default_sentence_delimiters(const Vocabulary& vocab);

}  // namespace zsumm
