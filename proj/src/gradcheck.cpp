// SPDX-License-Identifier: Apache-2.0
#include "zsumm/gradcheck.hpp"

#include <algorithm>
#include <cmath>
#include <numeric>
#include <random>

namespace zsumm {

GradCheckResult check_gradients(const std::function<Tensor<double>()>& loss,
                                std::vector<Tensor<double>> wrt,
                                const GradCheckOptions& options) {
  for (auto& t : wrt) t.zero_grad();
  backward(loss());
  std::vector<std::vector<double>> analytic;
  analytic.reserve(wrt.size());
  for (const auto& t : wrt) analytic.emplace_back(t.grad().begin(), t.grad().end());

  GradCheckResult result;
  std::mt19937_64 rng(options.seed);
  for (std::size_t k = 0; k < wrt.size(); ++k) {
    auto values = wrt[k].mutable_data();
    std::vector<std::size_t> coords(values.size());
    std::iota(coords.begin(), coords.end(), 0);
    if (options.coords_per_tensor > 0 && coords.size() > options.coords_per_tensor) {
      std::shuffle(coords.begin(), coords.end(), rng);
      coords.resize(options.coords_per_tensor);
    }
    for (auto i : coords) {
      const double saved = values[i];
      double plus = 0, minus = 0;
      {
        NoGradGuard guard;
        values[i] = saved + options.step;
        plus = loss().item();
        values[i] = saved - options.step;
        minus = loss().item();
      }
      values[i] = saved;
      const double numeric = (plus - minus) / (2 * options.step);
      const double err = std::abs(analytic[k][i] - numeric) / std::max(1.0, std::abs(numeric));
      ++result.coords;
      if (err > result.max_error || result.worst.empty()) {
        if (err >= result.max_error) {
          result.max_error = err;
          result.worst = "#" + std::to_string(k) + "[" + std::to_string(i) + "]";
        }
      }
    }
  }
  return result;
}

}  // namespace zsumm
