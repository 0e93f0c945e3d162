// SPDX-License-Identifier: Apache-2.0
#include "zsumm/model.hpp"

#include <cmath>
#include <random>

#include "zsumm/errors.hpp"

namespace zsumm {

void ModelConfig::validate() const {
  if (vocab_size <= 0 || d_model <= 0 || heads <= 0 || d_ff <= 0 || encoder_layers <= 0 ||
      decoder_layers <= 0 || generator_layers <= 0 || max_distance <= 0) {
    throw InvalidArgument("model config: all sizes must be positive");
  }
  if (d_model % heads != 0) throw InvalidArgument("model config: d_model % heads != 0");
  if (generator_layers > encoder_layers) {
    throw InvalidArgument("model config: generator deeper than encoder");
  }
  if (dropout < 0.0 || dropout >= 1.0) throw InvalidArgument("model config: dropout in [0,1)");
  if (!(init_std > 0.0) || !(position_init_std > 0.0)) {
    throw InvalidArgument("model config: initializer scales must be positive");
  }
  if (fie) fie->validate(encoder_layers);
}

TokenBatch TokenBatch::single(const std::vector<TokenId>& ids) {
  return from_sequences({ids}, 0);
}

TokenBatch TokenBatch::from_sequences(const std::vector<std::vector<TokenId>>& seqs,
                                      TokenId pad) {
  if (seqs.empty()) throw InvalidArgument("empty batch");
  TokenBatch b;
  b.batch = static_cast<std::int64_t>(seqs.size());
  for (const auto& s : seqs) b.length = std::max<std::int64_t>(b.length, std::ssize(s));
  if (b.length == 0) throw InvalidArgument("batch of empty sequences");
  b.ids.assign(static_cast<std::size_t>(b.batch * b.length), pad);
  b.valid.assign(b.ids.size(), 0);
  for (std::size_t i = 0; i < seqs.size(); ++i) {
    for (std::size_t j = 0; j < seqs[i].size(); ++j) {
      b.ids[i * static_cast<std::size_t>(b.length) + j] = seqs[i][j];
      b.valid[i * static_cast<std::size_t>(b.length) + j] = 1;
    }
  }
  return b;
}

std::int64_t TokenBatch::real_length(std::int64_t b) const {
  std::int64_t n = 0;
  for (std::int64_t i = 0; i < length; ++i) n += is_valid(b, i);
  return n;
}

namespace {

template <typename T>
class Initializer {
 public:
  Initializer(std::uint64_t seed, double std) : rng_(seed), normal_(0.0, std) {}

  Tensor<T> normal(Shape shape) { return normal(std::move(shape), normal_.stddev()); }
  Tensor<T> normal(Shape shape, double std) {
    const double k = std / normal_.stddev();
    std::vector<T> v(static_cast<std::size_t>(shape_numel(shape)));
    for (auto& x : v) x = static_cast<T>(k * normal_(rng_));
    return Tensor<T>::from(std::move(shape), std::move(v), true);
  }
  static Tensor<T> constant(Shape shape, T value) {
    return Tensor<T>::full(std::move(shape), value, true);
  }

 private:
  std::mt19937_64 rng_;
  std::normal_distribution<double> normal_;
};

template <typename T>
DALayerParams<T> make_da_layer(Initializer<T>& init, const ModelConfig& c) {
  const std::int64_t d = c.d_model, f = c.d_ff;
  DALayerParams<T> l;
  l.ln1_gain = Initializer<T>::constant({d}, T(1));
  l.ln1_bias = Initializer<T>::constant({d}, T(0));
  l.attn.w_qc = init.normal({d, d});
  l.attn.w_kc = init.normal({d, d});
  l.attn.w_v = init.normal({d, d});
  l.attn.w_qr = init.normal({d, d});
  l.attn.w_kr = init.normal({d, d});
  l.attn.w_o = init.normal({d, d});
  l.attn.heads = c.heads;
  l.ln2_gain = Initializer<T>::constant({d}, T(1));
  l.ln2_bias = Initializer<T>::constant({d}, T(0));
  l.ffn.w1 = init.normal({d, f});
  l.ffn.b1 = Initializer<T>::constant({f}, T(0));
  l.ffn.w2 = init.normal({f, d});
  l.ffn.b2 = Initializer<T>::constant({d}, T(0));
  return l;
}

template <typename T>
void register_da_layer(std::vector<NamedParameter<T>>& out, const std::string& p,
                       const DALayerParams<T>& l) {
  out.push_back({p + ".ln1.gain", l.ln1_gain, false});
  out.push_back({p + ".ln1.bias", l.ln1_bias, false});
  out.push_back({p + ".attn.w_qc", l.attn.w_qc, true});
  out.push_back({p + ".attn.w_kc", l.attn.w_kc, true});
  out.push_back({p + ".attn.w_v", l.attn.w_v, true});
  out.push_back({p + ".attn.w_qr", l.attn.w_qr, true});
  out.push_back({p + ".attn.w_kr", l.attn.w_kr, true});
  out.push_back({p + ".attn.w_o", l.attn.w_o, true});
  out.push_back({p + ".ln2.gain", l.ln2_gain, false});
  out.push_back({p + ".ln2.bias", l.ln2_bias, false});
  out.push_back({p + ".ffn.w1", l.ffn.w1, true});
  out.push_back({p + ".ffn.b1", l.ffn.b1, false});
  out.push_back({p + ".ffn.w2", l.ffn.w2, true});
  out.push_back({p + ".ffn.b2", l.ffn.b2, false});
}

template <typename T>
Tensor<T> embed(const Tensor<T>& table, const TokenBatch& tokens) {
  if (tokens.batch <= 0 || tokens.length <= 0) throw InvalidArgument("empty token sequence");
  return reshape(embedding_lookup(table, tokens.ids), {tokens.batch, tokens.length, table.dim(1)});
}

// [B, N, d] x [V, d]^T -> [B, N, V]
template <typename T>
Tensor<T> tied_head(const Tensor<T>& h, const Tensor<T>& table) {
  return matmul(h, transpose(table));
}

}  // namespace

template <typename T>
Seq2SeqModel<T>::Seq2SeqModel(const ModelConfig& config, std::uint64_t seed) : config_(config) {
  config_.validate();
  Initializer<T> init(seed, config_.init_std);
  const std::int64_t v = config_.vocab_size, d = config_.d_model, f = config_.d_ff;
  auto& p = params_;
  p.embed_g = init.normal({v, d});
  p.embed_delta = Tensor<T>::zeros({v, d}, true);
  p.rel_table = init.normal({2 * static_cast<std::int64_t>(config_.max_distance), d},
                            config_.position_init_std);
  for (int i = 0; i < config_.encoder_layers; ++i) p.encoder.push_back(make_da_layer(init, config_));
  p.enc_ln_gain = Initializer<T>::constant({d}, T(1));
  p.enc_ln_bias = Initializer<T>::constant({d}, T(0));
  for (int i = 0; i < config_.generator_layers; ++i) {
    p.generator.push_back(make_da_layer(init, config_));
  }
  p.gen_ln_gain = Initializer<T>::constant({d}, T(1));
  p.gen_ln_bias = Initializer<T>::constant({d}, T(0));
  for (int i = 0; i < config_.decoder_layers; ++i) {
    DecoderLayerParams<T> l;
    l.ln1_gain = Initializer<T>::constant({d}, T(1));
    l.ln1_bias = Initializer<T>::constant({d}, T(0));
    l.self_q = init.normal({d, d});
    l.self_k = init.normal({d, d});
    l.self_v = init.normal({d, d});
    l.self_kr = init.normal({d, d});
    l.self_o = init.normal({d, d});
    l.ln2_gain = Initializer<T>::constant({d}, T(1));
    l.ln2_bias = Initializer<T>::constant({d}, T(0));
    l.cross_q = init.normal({d, d});
    l.cross_k = init.normal({d, d});
    l.cross_v = init.normal({d, d});
    l.cross_o = init.normal({d, d});
    l.ln3_gain = Initializer<T>::constant({d}, T(1));
    l.ln3_bias = Initializer<T>::constant({d}, T(0));
    l.ffn.w1 = init.normal({d, f});
    l.ffn.b1 = Initializer<T>::constant({f}, T(0));
    l.ffn.w2 = init.normal({f, d});
    l.ffn.b2 = Initializer<T>::constant({d}, T(0));
    p.decoder.push_back(std::move(l));
  }
  p.dec_ln_gain = Initializer<T>::constant({d}, T(1));
  p.dec_ln_bias = Initializer<T>::constant({d}, T(0));
  p.rtd_w = init.normal({d, 1});
  p.rtd_b = Initializer<T>::constant({1}, T(0));

  named_.push_back({"embed.g", p.embed_g, false});
  named_.push_back({"embed.delta", p.embed_delta, false});
  named_.push_back({"rel_table", p.rel_table, false});
  for (std::size_t i = 0; i < p.encoder.size(); ++i) {
    register_da_layer(named_, "enc." + std::to_string(i), p.encoder[i]);
  }
  named_.push_back({"enc.ln.gain", p.enc_ln_gain, false});
  named_.push_back({"enc.ln.bias", p.enc_ln_bias, false});
  for (std::size_t i = 0; i < p.generator.size(); ++i) {
    register_da_layer(named_, "gen." + std::to_string(i), p.generator[i]);
  }
  named_.push_back({"gen.ln.gain", p.gen_ln_gain, false});
  named_.push_back({"gen.ln.bias", p.gen_ln_bias, false});
  for (std::size_t i = 0; i < p.decoder.size(); ++i) {
    const auto& l = p.decoder[i];
    const std::string n = "dec." + std::to_string(i);
    named_.push_back({n + ".ln1.gain", l.ln1_gain, false});
    named_.push_back({n + ".ln1.bias", l.ln1_bias, false});
    named_.push_back({n + ".self.w_q", l.self_q, true});
    named_.push_back({n + ".self.w_k", l.self_k, true});
    named_.push_back({n + ".self.w_v", l.self_v, true});
    named_.push_back({n + ".self.w_kr", l.self_kr, true});
    named_.push_back({n + ".self.w_o", l.self_o, true});
    named_.push_back({n + ".ln2.gain", l.ln2_gain, false});
    named_.push_back({n + ".ln2.bias", l.ln2_bias, false});
    named_.push_back({n + ".cross.w_q", l.cross_q, true});
    named_.push_back({n + ".cross.w_k", l.cross_k, true});
    named_.push_back({n + ".cross.w_v", l.cross_v, true});
    named_.push_back({n + ".cross.w_o", l.cross_o, true});
    named_.push_back({n + ".ln3.gain", l.ln3_gain, false});
    named_.push_back({n + ".ln3.bias", l.ln3_bias, false});
    named_.push_back({n + ".ffn.w1", l.ffn.w1, true});
    named_.push_back({n + ".ffn.b1", l.ffn.b1, false});
    named_.push_back({n + ".ffn.w2", l.ffn.w2, true});
    named_.push_back({n + ".ffn.b2", l.ffn.b2, false});
  }
  named_.push_back({"dec.ln.gain", p.dec_ln_gain, false});
  named_.push_back({"dec.ln.bias", p.dec_ln_bias, false});
  named_.push_back({"rtd.w", p.rtd_w, true});
  named_.push_back({"rtd.b", p.rtd_b, false});
}

template <typename T>
const NamedParameter<T>* Seq2SeqModel<T>::find(const std::string& name) const {
  for (const auto& p : named_) {
    if (p.name == name) return &p;
  }
  return nullptr;
}

template <typename T>
void Seq2SeqModel<T>::zero_grad() {
  for (auto& p : named_) p.tensor.zero_grad();
}

template <typename T>
Tensor<T> Seq2SeqModel<T>::discriminator_embeddings() const {
  return add(stop_gradient(params_.embed_g), params_.embed_delta);
}

template <typename T>
Tensor<T> Seq2SeqModel<T>::materialize_discriminator_embeddings() const {
  NoGradGuard guard;
  const auto sum = add(params_.embed_g, params_.embed_delta);
  return Tensor<T>::from(sum.shape(), std::vector<T>(sum.data().begin(), sum.data().end()));
}

template <typename T>
Tensor<T> Seq2SeqModel<T>::encode(const TokenBatch& tokens, const RunContext& ctx) const {
  auto x = embed(discriminator_embeddings(), tokens);
  const double rate = ctx.active_dropout();
  if (rate > 0) x = dropout(x, rate, *ctx.rng);
  x = run_encoder_stack<T>(x, params_.encoder, params_.rel_table, config_.max_distance,
                           tokens.valid, config_.fie, ctx);
  return layer_norm(x, params_.enc_ln_gain, params_.enc_ln_bias, T(kLayerNormEps));
}

template <typename T>
Tensor<T> Seq2SeqModel<T>::decoder_layer(const Tensor<T>& x, const DecoderLayerParams<T>& l,
                                         const Tensor<T>& memory, const AttentionMask& self_mask,
                                         const AttentionMask& cross_mask,
                                         const RelativeIndex& rel, const Tensor<T>& rel_rows,
                                         const RunContext& ctx) const {
  const T eps = T(kLayerNormEps);
  const int h = config_.heads;
  const std::int64_t d = config_.d_model, dh = d / h, t = x.dim(1);
  const double rate = ctx.active_dropout();

  // Causal self-attention: content-to-content plus content-to-position.
  const auto xn = layer_norm(x, l.ln1_gain, l.ln1_bias, eps);
  const auto q = split_heads(matmul(xn, l.self_q), h);
  const auto k = split_heads(matmul(xn, l.self_k), h);
  const auto v = split_heads(matmul(xn, l.self_v), h);
  const auto kr = permute(reshape(matmul(rel_rows, l.self_kr), {rel.rows, h, dh}), {1, 0, 2});
  const auto c2p = gather_last(matmul(q, transpose(kr)), rel.query_key, t);
  auto probs = masked_softmax(
      scale(add(matmul(q, transpose(k)), c2p), T(1.0 / std::sqrt(2.0 * double(dh)))), self_mask);
  if (rate > 0) probs = dropout(probs, rate, *ctx.rng);
  auto a = matmul(merge_heads(matmul(probs, v)), l.self_o);
  if (rate > 0) a = dropout(a, rate, *ctx.rng);
  auto x1 = add(x, a);

  // Content-only cross-attention.
  const auto yn = layer_norm(x1, l.ln2_gain, l.ln2_bias, eps);
  const auto cq = split_heads(matmul(yn, l.cross_q), h);
  const auto ck = split_heads(matmul(memory, l.cross_k), h);
  const auto cv = split_heads(matmul(memory, l.cross_v), h);
  auto cprobs = masked_softmax(scale(matmul(cq, transpose(ck)), T(1.0 / std::sqrt(double(dh)))),
                               cross_mask);
  if (rate > 0) cprobs = dropout(cprobs, rate, *ctx.rng);
  auto c = matmul(merge_heads(matmul(cprobs, cv)), l.cross_o);
  if (rate > 0) c = dropout(c, rate, *ctx.rng);
  auto x2 = add(x1, c);

  auto f = feed_forward(layer_norm(x2, l.ln3_gain, l.ln3_bias, eps), l.ffn, ctx);
  if (rate > 0) f = dropout(f, rate, *ctx.rng);
  return add(x2, f);
}

template <typename T>
Tensor<T> Seq2SeqModel<T>::decode_teacher_forced(const Tensor<T>& memory,
                                                 std::span<const std::uint8_t> memory_valid,
                                                 const TokenBatch& inputs,
                                                 const RunContext& ctx) const {
  if (memory.rank() != 3 || memory.dim(0) != inputs.batch) {
    throw ShapeError("decoder: memory " + shape_str(memory.shape()) + " vs batch " +
                     std::to_string(inputs.batch));
  }
  const std::int64_t b = inputs.batch, t = inputs.length, n = memory.dim(1);
  const auto table = discriminator_embeddings();
  auto x = embed(table, inputs);
  const double rate = ctx.active_dropout();
  if (rate > 0) x = dropout(x, rate, *ctx.rng);
  const auto self_mask = padding_mask(b, t, t, inputs.valid, true);
  const auto cross_mask = padding_mask(b, t, n, memory_valid);
  const auto rel = RelativeIndex::build(t, t, config_.max_distance);
  const auto rel_rows = slice(params_.rel_table, 0, rel.first_row, rel.rows);
  RunContext dctx = ctx;
  dctx.score_counter = nullptr;
  for (const auto& layer : params_.decoder) {
    x = decoder_layer(x, layer, memory, self_mask, cross_mask, rel, rel_rows, dctx);
  }
  x = layer_norm(x, params_.dec_ln_gain, params_.dec_ln_bias, T(kLayerNormEps));
  return tied_head(x, table);
}

template <typename T>
Tensor<T> Seq2SeqModel<T>::generator_forward(const TokenBatch& masked,
                                             const RunContext& ctx) const {
  auto x = embed(params_.embed_g, masked);
  const double rate = ctx.active_dropout();
  if (rate > 0) x = dropout(x, rate, *ctx.rng);
  RunContext gctx = ctx;
  gctx.score_counter = nullptr;
  x = run_encoder_stack<T>(x, params_.generator, params_.rel_table, config_.max_distance,
                           masked.valid, std::nullopt, gctx);
  x = layer_norm(x, params_.gen_ln_gain, params_.gen_ln_bias, T(kLayerNormEps));
  return tied_head(x, params_.embed_g);
}

template <typename T>
Tensor<T> Seq2SeqModel<T>::discriminator_forward(const TokenBatch& replaced,
                                                 const RunContext& ctx) const {
  const auto h = encode(replaced, ctx);
  const auto s = add(matmul(h, params_.rtd_w), params_.rtd_b);  // [B, N, 1]
  return reshape(s, {replaced.batch, replaced.length});
}

template class Seq2SeqModel<float>;
template class Seq2SeqModel<double>;

}  // namespace zsumm
