// SPDX-License-Identifier: Apache-2.0
#include "zsumm/checkpoint.hpp"

#include <zlib.h>

#include <bit>
#include <cstring>
#include <fstream>
#include <iterator>
#include <sstream>

#include "json.hpp"
#include "zsumm/errors.hpp"

namespace zsumm {

static_assert(std::endian::native == std::endian::little,
              "checkpoint payloads are written in host byte order");

namespace {

using nlohmann::json;

constexpr char kMagic[8] = {'Z', 'S', 'U', 'M', 'M', 'C', 'K', 'P'};
constexpr std::size_t kPreamble = sizeof(kMagic) + sizeof(std::uint32_t) + sizeof(std::uint64_t);

json parse_object(const std::string& text, const char* what) {
  json j;
  try {
    j = json::parse(text);
  } catch (const json::parse_error& e) {
    throw FormatError(std::string(what) + ": " + e.what());
  }
  if (!j.is_object()) throw FormatError(std::string(what) + ": expected a JSON object");
  return j;
}

template <typename V>
void read_key(const json& j, const std::string& key, V& out, const char* what) {
  try {
    out = j.at(key).get<V>();
  } catch (const json::exception& e) {
    throw FormatError(std::string(what) + " key '" + key + "': " + e.what());
  }
}

json model_json(const ModelConfig& c) {
  json j{{"vocab_size", c.vocab_size},
         {"d_model", c.d_model},
         {"heads", c.heads},
         {"d_ff", c.d_ff},
         {"encoder_layers", c.encoder_layers},
         {"decoder_layers", c.decoder_layers},
         {"generator_layers", c.generator_layers},
         {"max_distance", c.max_distance},
         {"dropout", c.dropout},
         {"init_std", c.init_std},
         {"position_init_std", c.position_init_std},
         {"fie", nullptr}};
  if (c.fie) {
    j["fie"] = {{"local_layers", c.fie->local_layers},
                {"global_layers", c.fie->global_layers},
                {"chunk", c.fie->chunk}};
  }
  return j;
}

ModelConfig model_from(const json& j, ModelConfig c) {
  constexpr const char* what = "model config";
  for (const auto& [key, value] : j.items()) {
    if (key == "vocab_size") read_key(j, key, c.vocab_size, what);
    else if (key == "d_model") read_key(j, key, c.d_model, what);
    else if (key == "heads") read_key(j, key, c.heads, what);
    else if (key == "d_ff") read_key(j, key, c.d_ff, what);
    else if (key == "encoder_layers") read_key(j, key, c.encoder_layers, what);
    else if (key == "decoder_layers") read_key(j, key, c.decoder_layers, what);
    else if (key == "generator_layers") read_key(j, key, c.generator_layers, what);
    else if (key == "max_distance") read_key(j, key, c.max_distance, what);
    else if (key == "dropout") read_key(j, key, c.dropout, what);
    else if (key == "init_std") read_key(j, key, c.init_std, what);
    else if (key == "position_init_std") read_key(j, key, c.position_init_std, what);
    else if (key == "fie") {
      if (value.is_null()) {
        c.fie.reset();
        continue;
      }
      FiEConfig f;
      read_key(value, "local_layers", f.local_layers, what);
      read_key(value, "global_layers", f.global_layers, what);
      read_key(value, "chunk", f.chunk, what);
      c.fie = f;
    } else {
      throw FormatError("unknown model config key '" + key + "'");
    }
  }
  return c;
}

std::string csp_mode_name(CspMode m) { return m == CspMode::kSentence ? "sentence" : "span"; }

json train_json(const TrainConfig& c) {
  return json{{"phase", phase_name(c.phase)},
              {"lr", c.optim.lr},
              {"warmup", c.optim.warmup},
              {"total_steps", c.optim.total},
              {"beta1", c.optim.beta1},
              {"beta2", c.optim.beta2},
              {"eps", c.optim.eps},
              {"weight_decay", c.optim.weight_decay},
              {"clip_norm", c.optim.clip_norm},
              {"batch_size", c.batch_size},
              {"seed", c.seed},
              {"lambda1", c.weights.mlm},
              {"lambda2", c.weights.rtd},
              {"lambda3", c.weights.csp},
              {"mask_rate", c.mask_rate},
              {"span_rate", c.csp.rate},
              {"mean_span", c.csp.mean_span},
              {"max_span", c.csp.max_span},
              {"csp_mode", csp_mode_name(c.csp.mode)},
              {"sentence_delimiters", c.csp.sentence_delimiters},
              {"max_input", c.limits.max_input},
              {"max_target", c.limits.max_target}};
}

TrainConfig train_from(const json& j, TrainConfig c) {
  constexpr const char* what = "train config";
  for (const auto& [key, value] : j.items()) {
    if (key == "phase") {
      std::string p;
      read_key(j, key, p, what);
      c.phase = parse_phase(p);
    } else if (key == "lr") read_key(j, key, c.optim.lr, what);
    else if (key == "warmup") read_key(j, key, c.optim.warmup, what);
    else if (key == "total_steps") read_key(j, key, c.optim.total, what);
    else if (key == "beta1") read_key(j, key, c.optim.beta1, what);
    else if (key == "beta2") read_key(j, key, c.optim.beta2, what);
    else if (key == "eps") read_key(j, key, c.optim.eps, what);
    else if (key == "weight_decay") read_key(j, key, c.optim.weight_decay, what);
    else if (key == "clip_norm") read_key(j, key, c.optim.clip_norm, what);
    else if (key == "batch_size") read_key(j, key, c.batch_size, what);
    else if (key == "seed") read_key(j, key, c.seed, what);
    else if (key == "lambda1") read_key(j, key, c.weights.mlm, what);
    else if (key == "lambda2") read_key(j, key, c.weights.rtd, what);
    else if (key == "lambda3") read_key(j, key, c.weights.csp, what);
    else if (key == "mask_rate") read_key(j, key, c.mask_rate, what);
    else if (key == "span_rate") read_key(j, key, c.csp.rate, what);
    else if (key == "mean_span") read_key(j, key, c.csp.mean_span, what);
    else if (key == "max_span") read_key(j, key, c.csp.max_span, what);
    else if (key == "csp_mode") {
      std::string m;
      read_key(j, key, m, what);
      if (m == "span") c.csp.mode = CspMode::kSpan;
      else if (m == "sentence") c.csp.mode = CspMode::kSentence;
      else throw FormatError("csp_mode must be 'span' or 'sentence', got '" + m + "'");
    } else if (key == "sentence_delimiters") read_key(j, key, c.csp.sentence_delimiters, what);
    else if (key == "max_input") read_key(j, key, c.limits.max_input, what);
    else if (key == "max_target") read_key(j, key, c.limits.max_target, what);
    else throw FormatError("unknown train config key '" + key + "'");
  }
  return c;
}

std::uint32_t crc_of(const float* data, std::size_t count) {
  const auto bytes = count * sizeof(float);
  return static_cast<std::uint32_t>(
      crc32(crc32(0L, Z_NULL, 0), reinterpret_cast<const Bytef*>(data), static_cast<uInt>(bytes)));
}

struct Entry {
  std::string name;
  Shape shape;
  std::span<const float> values;
};

}  // namespace

std::string model_config_to_json(const ModelConfig& config) { return model_json(config).dump(); }

ModelConfig model_config_from_json(const std::string& text, ModelConfig base) {
  return model_from(parse_object(text, "model config"), std::move(base));
}

std::string train_config_to_json(const TrainConfig& config) { return train_json(config).dump(); }

TrainConfig train_config_from_json(const std::string& text, TrainConfig base) {
  return train_from(parse_object(text, "train config"), std::move(base));
}

const CheckpointTensor* Checkpoint::find(const std::string& name) const {
  for (const auto& t : tensors) {
    if (t.name == name) return &t;
  }
  return nullptr;
}

void save_checkpoint(const std::string& path, const Seq2SeqModel<float>& model,
                     const SaveOptions& options) {
  std::vector<Entry> entries;
  for (const auto& p : model.parameters()) {
    entries.push_back({p.name, p.tensor.shape(), p.tensor.data()});
  }
  if (options.trainer) {
    const auto& state = options.trainer->optimizer_state();
    const auto& params = model.parameters();
    if (state.m.size() != params.size()) throw InvalidArgument("optimizer state does not match model");
    for (std::size_t i = 0; i < params.size(); ++i) {
      entries.push_back({"adam.m/" + params[i].name, params[i].tensor.shape(), state.m[i]});
    }
    for (std::size_t i = 0; i < params.size(); ++i) {
      entries.push_back({"adam.v/" + params[i].name, params[i].tensor.shape(), state.v[i]});
    }
  }
  Tensor<float> materialized;
  if (options.finalize) {
    materialized = model.materialize_discriminator_embeddings();
    entries.push_back({"embed.d", materialized.shape(), materialized.data()});
  }

  json manifest = json::array();
  std::uint64_t offset = 0;
  for (const auto& e : entries) {
    const std::uint64_t bytes = e.values.size() * sizeof(float);
    manifest.push_back({{"name", e.name},
                        {"shape", e.shape},
                        {"offset", offset},
                        {"bytes", bytes},
                        {"crc32", crc_of(e.values.data(), e.values.size())}});
    offset += bytes;
  }
  json header{{"model", model_json(model.config())},
              {"train", nullptr},
              {"step", 0},
              {"adam_step", 0},
              {"finalized", options.finalize},
              {"vocab", json::array()},
              {"tensors", std::move(manifest)}};
  if (options.trainer) {
    header["train"] = train_json(options.trainer->config());
    header["step"] = options.trainer->step();
    header["adam_step"] = options.trainer->optimizer_state().step;
  }
  if (options.vocab) header["vocab"] = options.vocab->tokens();
  const std::string text = header.dump();

  std::ofstream out(path, std::ios::binary | std::ios::trunc);
  if (!out) throw IoError("cannot open '" + path + "' for writing");
  const std::uint32_t version = kCheckpointVersion;
  const std::uint64_t header_bytes = text.size();
  out.write(kMagic, sizeof(kMagic));
  out.write(reinterpret_cast<const char*>(&version), sizeof(version));
  out.write(reinterpret_cast<const char*>(&header_bytes), sizeof(header_bytes));
  out.write(text.data(), static_cast<std::streamsize>(text.size()));
  for (const auto& e : entries) {
    out.write(reinterpret_cast<const char*>(e.values.data()),
              static_cast<std::streamsize>(e.values.size() * sizeof(float)));
  }
  out.flush();
  if (!out) throw IoError("write to '" + path + "' failed");
}

Checkpoint load_checkpoint(const std::string& path) {
  std::ifstream in(path, std::ios::binary);
  if (!in) throw IoError("cannot open checkpoint '" + path + "'");
  const std::string blob((std::istreambuf_iterator<char>(in)), std::istreambuf_iterator<char>());
  const auto fail = [&](const std::string& why) { return path + ": " + why; };

  if (blob.size() < kPreamble) throw FormatError(fail("truncated header"));
  if (std::memcmp(blob.data(), kMagic, sizeof(kMagic)) != 0) {
    throw FormatError(fail("not a checkpoint file"));
  }
  std::uint32_t version = 0;
  std::uint64_t header_bytes = 0;
  std::memcpy(&version, blob.data() + sizeof(kMagic), sizeof(version));
  std::memcpy(&header_bytes, blob.data() + sizeof(kMagic) + sizeof(version), sizeof(header_bytes));
  if (version != kCheckpointVersion) {
    throw VersionError(fail("unsupported checkpoint version " + std::to_string(version) +
                            " (expected " + std::to_string(kCheckpointVersion) + ")"));
  }
  if (header_bytes > blob.size() - kPreamble) throw FormatError(fail("truncated header"));
  const auto header = parse_object(blob.substr(kPreamble, header_bytes), "checkpoint header");
  const std::size_t payload_start = kPreamble + header_bytes;
  const std::size_t payload_size = blob.size() - payload_start;

  Checkpoint ck;
  constexpr const char* what = "checkpoint header";
  json model_j, train_j, tensors_j;
  read_key(header, "model", model_j, what);
  read_key(header, "train", train_j, what);
  read_key(header, "tensors", tensors_j, what);
  read_key(header, "step", ck.step, what);
  read_key(header, "adam_step", ck.adam_step, what);
  read_key(header, "finalized", ck.finalized, what);
  read_key(header, "vocab", ck.vocab, what);
  ck.model = model_from(model_j, ModelConfig{});
  if (!train_j.is_null()) ck.train = train_from(train_j, TrainConfig{});

  std::uint64_t expected_end = 0;
  for (const auto& t : tensors_j) {
    CheckpointTensor ct;
    std::uint64_t offset = 0, bytes = 0;
    std::uint32_t crc = 0;
    read_key(t, "name", ct.name, "tensor manifest");
    read_key(t, "shape", ct.shape, "tensor manifest");
    read_key(t, "offset", offset, "tensor manifest");
    read_key(t, "bytes", bytes, "tensor manifest");
    read_key(t, "crc32", crc, "tensor manifest");
    const auto numel = static_cast<std::uint64_t>(shape_numel(ct.shape));
    if (bytes != numel * sizeof(float)) {
      throw FormatError(fail("tensor " + ct.name + " size disagrees with its shape"));
    }
    if (offset != expected_end) throw FormatError(fail("tensor " + ct.name + " is out of order"));
    if (offset + bytes > payload_size) {
      throw FormatError(fail("truncated payload in tensor " + ct.name));
    }
    ct.values.resize(numel);
    std::memcpy(ct.values.data(), blob.data() + payload_start + offset, bytes);
    if (crc_of(ct.values.data(), ct.values.size()) != crc) {
      throw ChecksumError(fail("checksum mismatch in tensor " + ct.name));
    }
    expected_end = offset + bytes;
    ck.tensors.push_back(std::move(ct));
  }
  if (expected_end != payload_size) throw FormatError(fail("trailing bytes after payload"));
  return ck;
}

std::unique_ptr<Seq2SeqModel<float>> restore_model(const Checkpoint& ckpt) {
  auto model = std::make_unique<Seq2SeqModel<float>>(ckpt.model, 0);
  for (const auto& p : model->parameters()) {
    const auto* t = ckpt.find(p.name);
    if (!t) throw FormatError("checkpoint is missing tensor " + p.name);
    if (t->shape != p.tensor.shape()) {
      throw ShapeError("tensor " + p.name + " has shape " + shape_str(t->shape) +
                       " but the config expects " + shape_str(p.tensor.shape()));
    }
    auto dst = p.tensor;
    std::copy(t->values.begin(), t->values.end(), dst.mutable_data().begin());
  }
  if (ckpt.finalized) {
    const auto* e = ckpt.find("embed.d");
    const Shape expected{ckpt.model.vocab_size, ckpt.model.d_model};
    if (!e) throw FormatError("finalized checkpoint is missing tensor embed.d");
    if (e->shape != expected) {
      throw ShapeError("tensor embed.d has shape " + shape_str(e->shape) +
                       " but the config expects " + shape_str(expected));
    }
  }
  return model;
}

void restore_trainer(const Checkpoint& ckpt, Trainer& trainer) {
  const auto& params = trainer.model().parameters();
  auto& state = trainer.optimizer_state();
  state.reset(params);
  for (std::size_t i = 0; i < params.size(); ++i) {
    for (const char* prefix : {"adam.m/", "adam.v/"}) {
      const auto name = prefix + params[i].name;
      const auto* t = ckpt.find(name);
      if (!t) throw FormatError("checkpoint has no optimizer tensor " + name);
      if (t->shape != params[i].tensor.shape()) {
        throw ShapeError("tensor " + name + " has shape " + shape_str(t->shape) +
                         " but the config expects " + shape_str(params[i].tensor.shape()));
      }
      auto& dst = prefix[5] == 'm' ? state.m[i] : state.v[i];
      dst = t->values;
    }
  }
  state.step = ckpt.adam_step;
  trainer.set_step(ckpt.step);
}

}  // namespace zsumm
