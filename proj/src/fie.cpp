// SPDX-License-Identifier: Apache-2.0
#include "zsumm/fie.hpp"

#include "zsumm/errors.hpp"

namespace zsumm {

void FiEConfig::validate(int total_layers) const {
  if (local_layers < 0 || global_layers < 0 || local_layers + global_layers != total_layers) {
    throw InvalidArgument("fusion-in-encoder: " + std::to_string(local_layers) + " local + " +
                          std::to_string(global_layers) + " global != " +
                          std::to_string(total_layers) + " encoder layers");
  }
  if (chunk < 1) throw InvalidArgument("fusion-in-encoder: chunk size must be >= 1");
}

FiEConfig FiEConfig::for_stack(int total_layers, int global_layers, std::int64_t chunk) {
  FiEConfig c{total_layers - global_layers, global_layers, chunk};
  c.validate(total_layers);
  return c;
}

std::vector<std::int64_t> chunk_lengths(std::int64_t n, std::int64_t chunk) {
  if (n < 1 || chunk < 1) throw InvalidArgument("chunk_lengths needs N >= 1 and l >= 1");
  std::vector<std::int64_t> out;
  for (std::int64_t start = 0; start < n; start += chunk) out.push_back(std::min(chunk, n - start));
  return out;
}

template <typename T>
std::vector<Tensor<T>> split_into_chunks(const Tensor<T>& h, std::int64_t chunk) {
  const std::int64_t n = h.dim(-2);
  std::vector<Tensor<T>> out;
  std::int64_t start = 0;
  for (auto len : chunk_lengths(n, chunk)) {
    out.push_back(slice(h, h.rank() - 2, start, len));
    start += len;
  }
  return out;
}

std::uint64_t fie_cost(std::int64_t n, int total_layers, int local_layers, int global_layers,
                       std::int64_t chunk) {
  FiEConfig{local_layers, global_layers, chunk}.validate(total_layers);
  std::uint64_t local = 0;
  for (auto c : chunk_lengths(n, chunk)) local += static_cast<std::uint64_t>(c * c);
  return static_cast<std::uint64_t>(local_layers) * local +
         static_cast<std::uint64_t>(global_layers) * static_cast<std::uint64_t>(n * n);
}

std::uint64_t full_attention_cost(std::int64_t n, int total_layers) {
  return static_cast<std::uint64_t>(total_layers) * static_cast<std::uint64_t>(n * n);
}

namespace {

template <typename T>
Tensor<T> local_layer(const Tensor<T>& h, const DALayerParams<T>& layer,
                      const Tensor<T>& rel_table, std::int64_t max_distance,
                      std::span<const std::uint8_t> valid, std::int64_t chunk,
                      const RunContext& ctx) {
  const std::int64_t batch = h.dim(0), n = h.dim(1);
  const auto lengths = chunk_lengths(n, chunk);
  if (lengths.size() == 1) {
    return da_layer_forward(h, layer, rel_table, max_distance,
                            padding_mask(batch, n, n, valid), ctx);
  }
  std::vector<Tensor<T>> outputs;
  std::int64_t start = 0;
  for (auto len : lengths) {
    std::vector<std::uint8_t> cv(static_cast<std::size_t>(batch * len));
    for (std::int64_t b = 0; b < batch; ++b) {
      for (std::int64_t i = 0; i < len; ++i) {
        cv[static_cast<std::size_t>(b * len + i)] = valid[static_cast<std::size_t>(b * n + start + i)];
      }
    }
    outputs.push_back(da_layer_forward(slice(h, 1, start, len), layer, rel_table, max_distance,
                                       padding_mask(batch, len, len, cv), ctx));
    start += len;
  }
  return concat(outputs, 1);
}

}  // namespace

template <typename T>
Tensor<T> run_encoder_stack(const Tensor<T>& h, std::span<const DALayerParams<T>> layers,
                            const Tensor<T>& rel_table, std::int64_t max_distance,
                            std::span<const std::uint8_t> valid,
                            const std::optional<FiEConfig>& fie, const RunContext& ctx) {
  const int total = static_cast<int>(layers.size());
  int local = 0;
  if (fie) {
    fie->validate(total);
    local = fie->local_layers;
  }
  const std::int64_t batch = h.dim(0), n = h.dim(1);
  const auto global_mask = padding_mask(batch, n, n, valid);
  Tensor<T> x = h;
  for (int i = 0; i < total; ++i) {
    const auto& layer = layers[static_cast<std::size_t>(i)];
    if (i < local) {
      x = local_layer(x, layer, rel_table, max_distance, valid, fie->chunk, ctx);
    } else {
      x = da_layer_forward(x, layer, rel_table, max_distance, global_mask, ctx);
    }
  }
  return x;
}

template std::vector<Tensor<float>> split_into_chunks<float>(const Tensor<float>&, std::int64_t);
template std::vector<Tensor<double>> split_into_chunks<double>(const Tensor<double>&,
                                                               std::int64_t);
template Tensor<float> run_encoder_stack<float>(const Tensor<float>&,
                                                std::span<const DALayerParams<float>>,
                                                const Tensor<float>&, std::int64_t,
                                                std::span<const std::uint8_t>,
                                                const std::optional<FiEConfig>&,
                                                const RunContext&);
template Tensor<double> run_encoder_stack<double>(const Tensor<double>&,
                                                  std::span<const DALayerParams<double>>,
                                                  const Tensor<double>&, std::int64_t,
                                                  std::span<const std::uint8_t>,
                                                  const std::optional<FiEConfig>&,
                                                  const RunContext&);

}  // namespace zsumm
