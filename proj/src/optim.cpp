// SPDX-License-Identifier: Apache-2.0
#include "zsumm/optim.hpp"

#include <cmath>

#include "zsumm/errors.hpp"

namespace zsumm {

void OptimizerConfig::validate() const {
  if (!(lr >= 0)) throw InvalidArgument("learning rate must be >= 0");
  if (warmup < 0 || total < 1 || warmup >= total) {
    throw InvalidArgument("warmup steps (" + std::to_string(warmup) +
                          ") must be below total steps (" + std::to_string(total) + ")");
  }
  if (!(beta1 >= 0 && beta1 < 1) || !(beta2 >= 0 && beta2 < 1)) {
    throw InvalidArgument("adam betas must lie in [0, 1)");
  }
  if (!(eps > 0)) throw InvalidArgument("adam eps must be > 0");
  if (!(weight_decay >= 0)) throw InvalidArgument("weight decay must be >= 0");
}

double lr_at_step(std::int64_t step, const OptimizerConfig& cfg) {
  if (step < 0) throw InvalidArgument("step must be >= 0");
  if (step < cfg.warmup) return cfg.lr * double(step) / double(cfg.warmup);
  if (step >= cfg.total) return 0.0;
  return cfg.lr * double(cfg.total - step) / double(cfg.total - cfg.warmup);
}

template <typename T>
double clip_global_norm(std::span<const NamedParameter<T>> params, double max_norm) {
  double sq = 0.0;
  for (const auto& p : params) {
    for (T g : p.tensor.grad()) sq += double(g) * double(g);
  }
  const double norm = std::sqrt(sq);
  if (max_norm > 0 && norm > max_norm) {
    const T factor = static_cast<T>(max_norm / norm);
    for (const auto& p : params) {
      auto t = p.tensor;
      for (T& g : t.mutable_grad()) g *= factor;
    }
  }
  return norm;
}

template <typename T>
void AdamState<T>::reset(std::span<const NamedParameter<T>> params) {
  step = 0;
  m.clear();
  v.clear();
  for (const auto& p : params) {
    m.emplace_back(static_cast<std::size_t>(p.tensor.numel()), T(0));
    v.emplace_back(static_cast<std::size_t>(p.tensor.numel()), T(0));
  }
}

template <typename T>
void adamw_step(std::span<const NamedParameter<T>> params, AdamState<T>& state,
                const OptimizerConfig& cfg, double lr) {
  if (state.m.size() != params.size()) state.reset(params);
  for (const auto& p : params) {
    for (T g : p.tensor.grad()) {
      if (!std::isfinite(g)) throw NumericError("non-finite gradient in " + p.name);
    }
  }
  state.step += 1;
  const double c1 = 1.0 - std::pow(cfg.beta1, double(state.step));
  const double c2 = 1.0 - std::pow(cfg.beta2, double(state.step));
  const T b1 = T(cfg.beta1), b2 = T(cfg.beta2);
  for (std::size_t i = 0; i < params.size(); ++i) {
    auto t = params[i].tensor;
    auto theta = t.mutable_data();
    const auto grad = t.grad();
    auto& m = state.m[i];
    auto& v = state.v[i];
    if (m.size() != theta.size()) throw ShapeError("optimizer state does not match " + params[i].name);
    const double wd = params[i].weight_decay ? cfg.weight_decay : 0.0;
    for (std::size_t j = 0; j < theta.size(); ++j) {
      m[j] = b1 * m[j] + (T(1) - b1) * grad[j];
      v[j] = b2 * v[j] + (T(1) - b2) * grad[j] * grad[j];
      const double mhat = double(m[j]) / c1;
      const double vhat = double(v[j]) / c2;
      const double update = mhat / (std::sqrt(vhat) + cfg.eps) + wd * double(theta[j]);
      theta[j] = static_cast<T>(double(theta[j]) - lr * update);
    }
  }
}

template double clip_global_norm<float>(std::span<const NamedParameter<float>>, double);
template double clip_global_norm<double>(std::span<const NamedParameter<double>>, double);
template struct AdamState<float>;
template struct AdamState<double>;
template void adamw_step<float>(std::span<const NamedParameter<float>>, AdamState<float>&,
                                const OptimizerConfig&, double);
template void adamw_step<double>(std::span<const NamedParameter<double>>, AdamState<double>&,
                                 const OptimizerConfig&, double);

}  // namespace zsumm
