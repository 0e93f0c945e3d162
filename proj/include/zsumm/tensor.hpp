// SPDX-License-Identifier: Apache-2.0
//
// Dense tensors with reverse-mode differentiation.
//
// Every op allocates a fresh result. When gradient recording is enabled and
// any input requires a gradient, the result keeps its inputs alive and a
// closure that pushes its gradient back into them; `backward` sorts that
// graph topologically and runs each closure once. Tensors are instantiated
// for `float` (training) and `double` (gradient checking).
#pragma once

#include <cstdint>
#include <functional>
#include <memory>
#include <random>
#include <span>
#include <string>
#include <vector>

namespace zsumm {

using Shape = std::vector<std::int64_t>;
using TokenId = std::int32_t;

std::int64_t shape_numel(const Shape& shape);
std::string shape_str(const Shape& shape);

template <typename T>
struct TensorNode {
  std::uint64_t id = 0;
  Shape shape;
  std::vector<T> data;
  std::vector<T> grad;  // allocated on first use
  bool requires_grad = false;
  std::vector<std::shared_ptr<TensorNode>> parents;
  std::function<void(TensorNode&)> backward_fn;

  std::span<T> ensure_grad();
};

template <typename T>
class Tensor {
 public:
  using value_type = T;

  Tensor() = default;
  explicit Tensor(std::shared_ptr<TensorNode<T>> node) : node_(std::move(node)) {}

  static Tensor zeros(Shape shape, bool requires_grad = false);
  static Tensor full(Shape shape, T value, bool requires_grad = false);
  static Tensor from(Shape shape, std::vector<T> values,
                     bool requires_grad = false);
  static Tensor scalar(T value);

  bool defined() const { return node_ != nullptr; }
  const Shape& shape() const { return node_->shape; }
  std::int64_t rank() const { return static_cast<std::int64_t>(shape().size()); }
  std::int64_t dim(std::int64_t axis) const;
  std::int64_t numel() const { return static_cast<std::int64_t>(node_->data.size()); }
  std::uint64_t id() const { return node_->id; }
  bool requires_grad() const { return node_->requires_grad; }

  std::span<const T> data() const { return node_->data; }
  /// Writable storage. Only meaningful for leaves (parameters); writing into
  /// an interior node does not invalidate recorded closures.
  std::span<T> mutable_data() { return node_->data; }
  T item() const;

  /// Accumulated gradient (zeros if nothing has reached this tensor yet).
  std::span<const T> grad() const { return node_->ensure_grad(); }
  std::span<T> mutable_grad() { return node_->ensure_grad(); }
  void zero_grad();

  TensorNode<T>* node() const { return node_.get(); }
  const std::shared_ptr<TensorNode<T>>& node_ptr() const { return node_; }

 private:
  std::shared_ptr<TensorNode<T>> node_;
};

/// Disables gradient recording on the current thread while alive.
class NoGradGuard {
 public:
  NoGradGuard();
  ~NoGradGuard();
  NoGradGuard(const NoGradGuard&) = delete;
  NoGradGuard& operator=(const NoGradGuard&) = delete;

 private:
  bool previous_;
};

bool grad_enabled();

/// Ordered op record reachable from a root: inputs always precede users.
template <typename T>
class Tape {
 public:
  static Tape from_root(const Tensor<T>& root);
  const std::vector<TensorNode<T>*>& nodes() const { return order_; }

 private:
  std::vector<TensorNode<T>*> order_;
};

/// Propagates d(loss)/d(.) to every reachable tensor that requires a
/// gradient. Leaf gradients accumulate across calls until `zero_grad`.
/// Throws InvalidArgument when `loss` has more than one element.
template <typename T>
void backward(const Tensor<T>& loss);

// ---------------------------------------------------------------------------
// Ops.

/// [..., p, q] x [..., q, r]. Batch shapes must match or one must be a
/// suffix of the other (including empty).
template <typename T>
Tensor<T> matmul(const Tensor<T>& a, const Tensor<T>& b);
/// Swaps the last two axes.
template <typename T>
Tensor<T> transpose(const Tensor<T>& x);
template <typename T>
Tensor<T> permute(const Tensor<T>& x, const std::vector<int>& order);
template <typename T>
Tensor<T> reshape(const Tensor<T>& x, Shape shape);

/// Elementwise; `b` may equal `a` in shape, be a trailing-suffix shape of
/// `a`, or hold a single element.
template <typename T>
Tensor<T> add(const Tensor<T>& a, const Tensor<T>& b);
template <typename T>
Tensor<T> sub(const Tensor<T>& a, const Tensor<T>& b);
template <typename T>
Tensor<T> mul(const Tensor<T>& a, const Tensor<T>& b);
template <typename T>
Tensor<T> scale(const Tensor<T>& x, T factor);

template <typename T>
Tensor<T> gelu(const Tensor<T>& x);
template <typename T>
Tensor<T> tanh(const Tensor<T>& x);
template <typename T>
Tensor<T> sigmoid(const Tensor<T>& x);

template <typename T>
Tensor<T> softmax(const Tensor<T>& x, std::int64_t axis);

/// Boolean attention mask for logits shaped [groups * heads, rows, cols]
/// (any leading layout); `allow` is [groups, rows, cols] and is broadcast
/// over heads.
struct AttentionMask {
  std::int64_t groups = 0;
  std::int64_t rows = 0;
  std::int64_t cols = 0;
  std::vector<std::uint8_t> allow;

  bool at(std::int64_t g, std::int64_t r, std::int64_t c) const {
    return allow[static_cast<std::size_t>((g * rows + r) * cols + c)] != 0;
  }
};

/// Softmax over the last axis with disallowed entries fixed at probability
/// zero. A row with no allowed entry yields all zeros.
template <typename T>
Tensor<T> masked_softmax(const Tensor<T>& logits, const AttentionMask& mask);

template <typename T>
Tensor<T> layer_norm(const Tensor<T>& x, const Tensor<T>& gain,
                     const Tensor<T>& bias, T eps);

/// Row gather from a [V, d] table. Throws OutOfRange naming the offending
/// index and id.
template <typename T>
Tensor<T> embedding_lookup(const Tensor<T>& table, std::span<const TokenId> ids);

/// out[..., i, j] = x[..., i, index[i * cols + j]] for x shaped [..., rows, R].
template <typename T>
Tensor<T> gather_last(const Tensor<T>& x, std::span<const std::int32_t> index,
                      std::int64_t cols);

template <typename T>
Tensor<T> concat(const std::vector<Tensor<T>>& parts, std::int64_t axis);
template <typename T>
Tensor<T> slice(const Tensor<T>& x, std::int64_t axis, std::int64_t start,
                std::int64_t length);

template <typename T>
Tensor<T> sum(const Tensor<T>& x);
template <typename T>
Tensor<T> mean(const Tensor<T>& x);

/// Forward identity, gradient exactly zero.
template <typename T>
Tensor<T> stop_gradient(const Tensor<T>& x);

/// Inverted dropout; identity when `rate` is 0.
template <typename T>
Tensor<T> dropout(const Tensor<T>& x, double rate, std::mt19937_64& rng);

/// Mean of -log softmax(logits)[target] over rows whose target differs from
/// `ignore_id`. Logits are [..., V] and flattened to rows. An all-ignored
/// batch yields 0 with zero gradient.
template <typename T>
Tensor<T> cross_entropy_from_logits(const Tensor<T>& logits,
                                    std::span<const TokenId> targets,
                                    TokenId ignore_id);

/// sum_i weight[i] * -log softmax(logits_i)[target_i]; rows with weight 0
/// are skipped entirely (their targets are not validated).
template <typename T>
Tensor<T> weighted_cross_entropy(const Tensor<T>& logits,
                                 std::span<const TokenId> targets,
                                 std::span<const T> weights);

/// sum_i weight[i] * BCE(sigmoid(score_i), label_i), evaluated stably.
template <typename T>
Tensor<T> weighted_bce_with_logits(const Tensor<T>& scores,
                                   std::span<const T> labels,
                                   std::span<const T> weights);

}  // namespace zsumm
