// SPDX-License-Identifier: Apache-2.0
//
// Checkpoint file layout (all integers little-endian):
//   "ZSUMMCKP" | u32 format version | u64 header bytes | JSON header | payload
// The header holds the model config, optional training config, step, seed,
// vocabulary and a manifest {name, shape, offset, bytes, crc32} whose
// offsets are relative to the payload start. Payloads are raw float32 in
// manifest order. Optimizer moments are stored as "adam.m/<name>" and
// "adam.v/<name>"; a finalized checkpoint adds "embed.d" = E_G + E_delta.
// Random state is implied by (seed, step): every draw is keyed by them.
#pragma once

#include <cstdint>
#include <memory>
#include <optional>
#include <string>
#include <vector>

#include "zsumm/data.hpp"
#include "zsumm/model.hpp"
#include "zsumm/train.hpp"

namespace zsumm {

inline constexpr std::uint32_t kCheckpointVersion = 1;

std::string model_config_to_json(const ModelConfig& config);
/// Missing keys keep their defaults; unknown keys are a FormatError.
ModelConfig model_config_from_json(const std::string& json, ModelConfig base = {});
std::string train_config_to_json(const TrainConfig& config);
TrainConfig train_config_from_json(const std::string& json, TrainConfig base = {});

struct CheckpointTensor {
  std::string name;
  Shape shape;
  std::vector<float> values;
};

struct Checkpoint {
  ModelConfig model;
  std::optional<TrainConfig> train;
  std::int64_t step = 0;
  std::int64_t adam_step = 0;
  std::vector<std::string> vocab;  // empty when not stored
  bool finalized = false;
  std::vector<CheckpointTensor> tensors;

  const CheckpointTensor* find(const std::string& name) const;
};

struct SaveOptions {
  const Trainer* trainer = nullptr;     // adds training config, step and moments
  const Vocabulary* vocab = nullptr;
  bool finalize = false;                // adds materialized E_D
};

void save_checkpoint(const std::string& path, const Seq2SeqModel<float>& model,
                     const SaveOptions& options = {});
/// Verifies magic, version, sizes and every tensor checksum. Throws
/// FormatError, VersionError, ChecksumError or IoError.
Checkpoint load_checkpoint(const std::string& path);

/// Model built from the stored config with every parameter copied in.
/// Throws ShapeError naming a tensor whose shape disagrees with the config
/// and FormatError when a parameter is missing.
std::unique_ptr<Seq2SeqModel<float>> restore_model(const Checkpoint& ckpt);
/// Copies stored moments and the step counter into `trainer`. Throws
/// FormatError when the checkpoint carries no optimizer state.
void restore_trainer(const Checkpoint& ckpt, Trainer& trainer);

}  // namespace zsumm
