// SPDX-License-Identifier: Apache-2.0
//
// Encoder-decoder summarizer with an ELECTRA-style generator and
// replaced-token discriminator.
//
// Token embeddings are shared with gradient disentanglement: the generator
// owns E_G; the encoder, decoder and LM head read
//     E_D = stop_gradient(E_G) + E_delta
// so only generator-side (MLM) losses move E_G, and every other loss lands
// in E_delta. E_delta starts at exactly zero.
#pragma once

#include <cstdint>
#include <optional>
#include <span>
#include <string>
#include <vector>

#include "zsumm/attention.hpp"
#include "zsumm/batch.hpp"
#include "zsumm/fie.hpp"

namespace zsumm {

struct ModelConfig {
  int vocab_size = 0;
  int d_model = 128;
  int heads = 4;
  int d_ff = 512;
  int encoder_layers = 4;
  int decoder_layers = 4;
  int generator_layers = 2;
  int max_distance = 128;
  double dropout = 0.1;
  double init_std = 0.02;
  /// The relative-position table sits outside the layer norms.
  double position_init_std = 1.0;
  std::optional<FiEConfig> fie;

  void validate() const;
};

template <typename T>
struct DecoderLayerParams {
  Tensor<T> ln1_gain, ln1_bias;
  Tensor<T> self_q, self_k, self_v, self_kr, self_o;
  Tensor<T> ln2_gain, ln2_bias;
  Tensor<T> cross_q, cross_k, cross_v, cross_o;
  Tensor<T> ln3_gain, ln3_bias;
  FeedForwardParams<T> ffn;
};

template <typename T>
struct ModelParams {
  Tensor<T> embed_g;      // E_G [V, d]
  Tensor<T> embed_delta;  // E_delta [V, d]
  Tensor<T> rel_table;    // [2k, d], shared by all relative-position users
  std::vector<DALayerParams<T>> encoder;
  Tensor<T> enc_ln_gain, enc_ln_bias;
  std::vector<DALayerParams<T>> generator;
  Tensor<T> gen_ln_gain, gen_ln_bias;
  std::vector<DecoderLayerParams<T>> decoder;
  Tensor<T> dec_ln_gain, dec_ln_bias;
  Tensor<T> rtd_w, rtd_b;  // [d, 1], [1]
};

template <typename T>
struct NamedParameter {
  std::string name;
  Tensor<T> tensor;
  bool weight_decay = true;
};

template <typename T>
class Seq2SeqModel {
 public:
  Seq2SeqModel(const ModelConfig& config, std::uint64_t seed);

  const ModelConfig& config() const { return config_; }
  ModelParams<T>& params() { return params_; }
  const ModelParams<T>& params() const { return params_; }
  /// Every trainable leaf, in a fixed order.
  const std::vector<NamedParameter<T>>& parameters() const { return named_; }
  const NamedParameter<T>* find(const std::string& name) const;
  void zero_grad();

  /// sg(E_G) + E_delta, recorded on the tape.
  Tensor<T> discriminator_embeddings() const;
  /// E_G + E_delta as a plain table (checkpoint finalization).
  Tensor<T> materialize_discriminator_embeddings() const;

  /// Encoder over E_D embeddings; [B, N, d]. FiE applies when configured.
  Tensor<T> encode(const TokenBatch& tokens, const RunContext& ctx) const;
  /// Causal decoder over E_D embeddings with cross-attention to `memory`;
  /// logits [B, T, V] from the LM head tied to E_D. `inputs` must start
  /// with BOS.
  Tensor<T> decode_teacher_forced(const Tensor<T>& memory,
                                  std::span<const std::uint8_t> memory_valid,
                                  const TokenBatch& inputs, const RunContext& ctx) const;
  /// Generator DA stack over E_G with the MLM head tied to E_G; [B, N, V].
  Tensor<T> generator_forward(const TokenBatch& masked, const RunContext& ctx) const;
  /// Per-token logit of "token is original"; [B, N].
  Tensor<T> discriminator_forward(const TokenBatch& replaced, const RunContext& ctx) const;

 private:
  Tensor<T> decoder_layer(const Tensor<T>& x, const DecoderLayerParams<T>& layer,
                          const Tensor<T>& memory, const AttentionMask& self_mask,
                          const AttentionMask& cross_mask, const RelativeIndex& rel,
                          const Tensor<T>& rel_rows, const RunContext& ctx) const;

  ModelConfig config_;
  ModelParams<T> params_;
  std::vector<NamedParameter<T>> named_;
};

}  // namespace zsumm
