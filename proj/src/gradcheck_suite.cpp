// SPDX-License-Identifier: Apache-2.0
#include "zsumm/gradcheck_suite.hpp"

#include <functional>
#include <random>
#include <utility>

#include "zsumm/attention.hpp"
#include "zsumm/fie.hpp"
#include "zsumm/model.hpp"
#include "zsumm/objectives.hpp"

namespace zsumm {

namespace {

using TD = Tensor<double>;

TD uniform(Shape shape, std::mt19937_64& rng, double lo = -2.0, double hi = 2.0) {
  std::uniform_real_distribution<double> u(lo, hi);
  std::vector<double> v(static_cast<std::size_t>(shape_numel(shape)));
  for (auto& x : v) x = u(rng);
  return TD::from(std::move(shape), std::move(v), true);
}

DALayerParams<double> random_layer(std::int64_t d, std::int64_t f, int heads,
                                   std::mt19937_64& rng) {
  DALayerParams<double> l;
  l.ln1_gain = uniform({d}, rng, 0.5, 1.5);
  l.ln1_bias = uniform({d}, rng, -0.5, 0.5);
  l.attn.w_qc = uniform({d, d}, rng, -0.5, 0.5);
  l.attn.w_kc = uniform({d, d}, rng, -0.5, 0.5);
  l.attn.w_v = uniform({d, d}, rng, -0.5, 0.5);
  l.attn.w_qr = uniform({d, d}, rng, -0.5, 0.5);
  l.attn.w_kr = uniform({d, d}, rng, -0.5, 0.5);
  l.attn.w_o = uniform({d, d}, rng, -0.5, 0.5);
  l.attn.heads = heads;
  l.ln2_gain = uniform({d}, rng, 0.5, 1.5);
  l.ln2_bias = uniform({d}, rng, -0.5, 0.5);
  l.ffn.w1 = uniform({d, f}, rng, -0.5, 0.5);
  l.ffn.b1 = uniform({f}, rng, -0.5, 0.5);
  l.ffn.w2 = uniform({f, d}, rng, -0.5, 0.5);
  l.ffn.b2 = uniform({d}, rng, -0.5, 0.5);
  return l;
}

std::vector<TD> layer_tensors(const DALayerParams<double>& l) {
  return {l.ln1_gain, l.ln1_bias, l.attn.w_qc, l.attn.w_kc, l.attn.w_v, l.attn.w_qr,
          l.attn.w_kr, l.attn.w_o, l.ln2_gain, l.ln2_bias, l.ffn.w1, l.ffn.b1,
          l.ffn.w2, l.ffn.b2};
}

struct Instance {
  std::function<TD()> loss;
  std::vector<TD> wrt;
  GradCheckOptions options;
};

using Builder = std::function<Instance(std::mt19937_64&, const GradCheckOptions&)>;

void accumulate(GradCheckCaseResult& r, const GradCheckResult& g, int instance) {
  r.coords += g.coords;
  if (g.max_error >= r.max_error) {
    r.max_error = g.max_error;
    r.worst = std::to_string(instance) + ":" + g.worst;
  }
}

// Random elementwise inputs shared by the op cases.
struct OpInputs {
  TD a, b, m, w, gain, bias, table;
  explicit OpInputs(std::mt19937_64& rng)
      : a(uniform({2, 3, 4}, rng)),
        b(uniform({3, 4}, rng)),
        m(uniform({4, 2}, rng)),
        w(uniform({4}, rng)),
        gain(uniform({4}, rng)),
        bias(uniform({4}, rng)),
        table(uniform({5, 4}, rng)) {}
  std::vector<TD> all() const { return {a, b, m, w, gain, bias, table}; }
};

std::vector<std::pair<std::string, Builder>> op_cases() {
  std::vector<std::pair<std::string, Builder>> cases;
  auto op = [&](std::string name, std::function<std::function<TD()>(const OpInputs&)> make) {
    cases.emplace_back(std::move(name), [make](std::mt19937_64& rng, const GradCheckOptions& o) {
      OpInputs in(rng);
      return Instance{make(in), in.all(), o};
    });
  };
  op("matmul", [](const OpInputs& x) {
    return [x] { return sum(mul(matmul(x.a, x.m), matmul(x.a, x.m))); };
  });
  op("batched matmul", [](const OpInputs& x) {
    return [x] {
      auto p = matmul(x.a, transpose(x.b));
      return sum(mul(p, p));
    };
  });
  op("add/sub/mul", [](const OpInputs& x) {
    return [x] { return sum(mul(sub(x.a, x.b), add(x.a, x.w))); };
  });
  op("scale", [](const OpInputs& x) { return [x] { return sum(mul(scale(x.a, 0.37), x.a)); }; });
  op("gelu", [](const OpInputs& x) { return [x] { return sum(mul(gelu(x.a), x.w)); }; });
  op("tanh", [](const OpInputs& x) { return [x] { return sum(mul(tanh(x.a), x.w)); }; });
  op("sigmoid", [](const OpInputs& x) { return [x] { return sum(mul(sigmoid(x.a), x.w)); }; });
  op("softmax", [](const OpInputs& x) { return [x] { return sum(mul(softmax(x.a, 1), x.a)); }; });
  op("masked_softmax", [](const OpInputs& x) {
    const AttentionMask mask{2, 3, 4, {1, 1, 0, 1, 0, 0, 0, 0, 1, 0, 1, 1,
                                       1, 1, 1, 1, 0, 1, 0, 1, 1, 0, 0, 0}};
    return [x, mask] { return sum(mul(masked_softmax(x.a, mask), x.a)); };
  });
  op("layer_norm", [](const OpInputs& x) {
    return [x] { return sum(mul(layer_norm(x.a, x.gain, x.bias, 1e-5), x.a)); };
  });
  op("embedding_lookup", [](const OpInputs& x) {
    return [x] {
      const std::vector<TokenId> ids{4, 0, 4, 2};
      return sum(mul(embedding_lookup(x.table, ids), reshape(slice(x.a, 1, 0, 2), {4, 4})));
    };
  });
  op("gather_last", [](const OpInputs& x) {
    return [x] {
      const std::vector<std::int32_t> idx{0, 3, 1, 1, 2, 0, 3, 3, 2};
      return sum(mul(gather_last(x.a, idx, 3), slice(x.a, 2, 0, 3)));
    };
  });
  op("permute/transpose/reshape", [](const OpInputs& x) {
    return [x] {
      return sum(mul(reshape(permute(x.a, {2, 0, 1}), {4, 6}), reshape(transpose(x.a), {4, 6})));
    };
  });
  op("concat/slice", [](const OpInputs& x) {
    return [x] {
      auto c = concat<double>({slice(x.a, 1, 0, 1), x.a, slice(x.a, 1, 2, 1)}, 1);
      return sum(mul(c, c));
    };
  });
  op("sum", [](const OpInputs& x) { return [x] { return mul(sum(x.b), sum(mul(x.a, x.a))); }; });
  op("mean", [](const OpInputs& x) { return [x] { return mean(mul(x.a, x.a)); }; });
  op("dropout", [](const OpInputs& x) {
    // A fresh generator per evaluation keeps the mask fixed across probes.
    return [x] {
      std::mt19937_64 mask_rng(17);
      auto d = dropout(x.a, 0.4, mask_rng);
      return sum(mul(d, d));
    };
  });
  op("cross_entropy", [](const OpInputs& x) {
    return [x] {
      const std::vector<TokenId> targets{1, 0, -1, 3, 2, 1};
      return cross_entropy_from_logits(reshape(x.a, {6, 4}), targets, -1);
    };
  });
  op("weighted_cross_entropy", [](const OpInputs& x) {
    return [x] {
      const std::vector<TokenId> targets{1, 0, 2, 3, 2, 1};
      const std::vector<double> w{0.5, 1, 0, 2, 1, 0.25};
      return weighted_cross_entropy<double>(reshape(x.a, {6, 4}), targets, w);
    };
  });
  op("bce_with_logits", [](const OpInputs& x) {
    return [x] {
      const std::vector<double> labels{1, 0, 1, 1, 0, 0};
      const std::vector<double> w{0.5, 1, 0, 2, 1, 1};
      return weighted_bce_with_logits<double>(reshape(slice(x.a, 2, 0, 1), {6}), labels, w);
    };
  });
  return cases;
}

std::vector<std::pair<std::string, Builder>> layer_cases() {
  std::vector<std::pair<std::string, Builder>> cases;
  cases.emplace_back("disentangled attention", [](std::mt19937_64& rng,
                                                  const GradCheckOptions& o) {
    const std::int64_t d = 8, n = 5, k = 3;
    auto h = uniform({2, n, d}, rng, -1, 1);
    auto layer = random_layer(d, 16, 2, rng);
    auto rel = uniform({2 * k, d}, rng, -1, 1);
    const std::vector<std::uint8_t> valid{1, 1, 1, 1, 1, 1, 1, 1, 0, 0};
    const auto mask = padding_mask(2, n, n, valid);
    auto wrt = layer_tensors(layer);
    wrt.push_back(h);
    wrt.push_back(rel);
    return Instance{[=] {
                      auto out = da_attention(h, layer.attn, rel, k, mask, RunContext{});
                      return sum(mul(out, out));
                    },
                    wrt, o};
  });
  cases.emplace_back("DA layer", [](std::mt19937_64& rng, const GradCheckOptions& o) {
    const std::int64_t d = 8, n = 6, k = 4;
    auto h = uniform({1, n, d}, rng, -1, 1);
    auto layer = random_layer(d, 16, 2, rng);
    auto rel = uniform({2 * k, d}, rng, -1, 1);
    const std::vector<std::uint8_t> valid(n, 1);
    const auto mask = padding_mask(1, n, n, valid, true);
    auto wrt = layer_tensors(layer);
    wrt.push_back(h);
    wrt.push_back(rel);
    return Instance{[=] {
                      auto out = da_layer_forward(h, layer, rel, k, mask, RunContext{});
                      return sum(mul(out, out));
                    },
                    wrt, o};
  });
  cases.emplace_back("fusion-in-encoder stack", [](std::mt19937_64& rng,
                                                   const GradCheckOptions& o) {
    const std::int64_t d = 8, n = 7, k = 4;
    auto h = uniform({1, n, d}, rng, -1, 1);
    std::vector<DALayerParams<double>> layers{random_layer(d, 16, 2, rng),
                                              random_layer(d, 16, 2, rng)};
    auto rel = uniform({2 * k, d}, rng, -1, 1);
    const std::vector<std::uint8_t> valid(n, 1);
    const auto fie = std::optional<FiEConfig>(FiEConfig{1, 1, 3});
    std::vector<TD> wrt{h, rel};
    for (const auto& l : layers) {
      for (auto& t : layer_tensors(l)) wrt.push_back(t);
    }
    return Instance{[=] {
                      auto out = run_encoder_stack<double>(h, layers, rel, k, valid, fie,
                                                           RunContext{});
                      return sum(mul(out, out));
                    },
                    wrt, o};
  });
  return cases;
}

ModelConfig gradcheck_model_config() {
  ModelConfig c;
  c.vocab_size = special::kCount + 14;
  c.d_model = 16;
  c.heads = 2;
  c.d_ff = 32;
  c.encoder_layers = 2;
  c.decoder_layers = 2;
  c.generator_layers = 2;
  c.max_distance = 4;
  c.dropout = 0.0;
  c.init_std = 0.3;
  return c;
}

std::vector<TokenId> random_tokens(std::mt19937_64& rng, std::int64_t n, int vocab) {
  std::uniform_int_distribution<TokenId> tok(special::kCount, vocab - 1);
  std::vector<TokenId> out(static_cast<std::size_t>(n));
  for (auto& t : out) t = tok(rng);
  return out;
}

std::vector<std::pair<std::string, Builder>> model_cases(std::size_t coords) {
  std::vector<std::pair<std::string, Builder>> cases;
  // The model is shared through a shared_ptr so the loss closure keeps it alive.
  auto wrt_of = [](const Seq2SeqModel<double>& m, bool include_eg) {
    std::vector<TD> out;
    for (const auto& p : m.parameters()) {
      if (!include_eg && p.name == "embed.g") continue;
      out.push_back(p.tensor);
    }
    return out;
  };
  cases.emplace_back("model: masked LM loss", [=](std::mt19937_64& rng, GradCheckOptions o) {
    const auto cfg = gradcheck_model_config();
    auto model = std::make_shared<Seq2SeqModel<double>>(cfg, rng());
    std::vector<std::vector<TokenId>> docs{random_tokens(rng, 7, cfg.vocab_size),
                                           random_tokens(rng, 5, cfg.vocab_size)};
    std::vector<MlmPlan> plans;
    std::vector<std::vector<TokenId>> masked;
    for (const auto& d : docs) {
      plans.push_back(build_mlm_plan(d, rng, 0.3));
      masked.push_back(apply_mlm_mask(d, plans.back()));
    }
    const auto batch = TokenBatch::from_sequences(masked, special::kPad);
    o.coords_per_tensor = coords;
    return Instance{[=] {
                      return mlm_loss(model->generator_forward(batch, RunContext{}),
                                      std::span<const MlmPlan>(plans));
                    },
                    wrt_of(*model, true), o};
  });
  cases.emplace_back("model: replaced-token detection loss",
                     [=](std::mt19937_64& rng, GradCheckOptions o) {
                       const auto cfg = gradcheck_model_config();
                       auto model = std::make_shared<Seq2SeqModel<double>>(cfg, rng());
                       std::vector<std::vector<TokenId>> docs{
                           random_tokens(rng, 6, cfg.vocab_size),
                           random_tokens(rng, 4, cfg.vocab_size)};
                       const auto batch = TokenBatch::from_sequences(docs, special::kPad);
                       std::vector<std::uint8_t> labels;
                       std::bernoulli_distribution coin(0.7);
                       for (std::size_t i = 0; i < batch.ids.size(); ++i) {
                         labels.push_back(coin(rng) ? 1 : 0);
                       }
                       o.coords_per_tensor = coords;
                       return Instance{[=] {
                                         return rtd_loss(
                                             model->discriminator_forward(batch, RunContext{}),
                                             labels, batch.valid);
                                       },
                                       wrt_of(*model, false), o};
                     });
  cases.emplace_back("model: corrupted span loss", [=](std::mt19937_64& rng,
                                                       GradCheckOptions o) {
    const auto cfg = gradcheck_model_config();
    auto model = std::make_shared<Seq2SeqModel<double>>(cfg, rng());
    std::vector<Seq2SeqExample> examples;
    CspConfig csp;
    csp.rate = 0.3;
    for (std::int64_t n : {9, 6}) {
      auto plan = build_csp_plan(random_tokens(rng, n, cfg.vocab_size), rng, csp);
      std::vector<TokenId> target{special::kBos};
      target.insert(target.end(), plan.target.begin(), plan.target.end());
      examples.push_back({plan.input, target});
    }
    const auto batch = pad_batch(examples);
    o.coords_per_tensor = coords;
    return Instance{[=] {
                      const RunContext ctx;
                      auto memory = model->encode(batch.input, ctx);
                      return csp_loss(model->decode_teacher_forced(memory, batch.input.valid,
                                                                   batch.decoder_input, ctx),
                                      batch.labels);
                    },
                    wrt_of(*model, false), o};
  });
  return cases;
}

}  // namespace

std::vector<GradCheckCaseResult> gradcheck_suite(const GradCheckSuiteOptions& options) {
  auto cases = op_cases();
  for (auto& c : layer_cases()) cases.push_back(std::move(c));
  if (!options.ops_only) {
    for (auto& c : model_cases(options.model_coords_per_tensor)) cases.push_back(std::move(c));
  }
  std::vector<GradCheckCaseResult> results;
  for (std::size_t c = 0; c < cases.size(); ++c) {
    GradCheckCaseResult r;
    r.name = cases[c].first;
    for (int i = 0; i < options.instances; ++i) {
      std::mt19937_64 rng(options.seed * 1000003 + c * 1009 + static_cast<std::uint64_t>(i));
      auto inst = cases[c].second(rng, options.check);
      inst.options.seed = rng();
      accumulate(r, check_gradients(inst.loss, inst.wrt, inst.options), i);
      ++r.instances;
    }
    r.passed = r.max_error <= options.check.tolerance;
    results.push_back(std::move(r));
  }
  return results;
}

}  // namespace zsumm
