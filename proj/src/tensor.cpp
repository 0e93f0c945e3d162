// SPDX-License-Identifier: Apache-2.0
#include "zsumm/tensor.hpp"

#include <Eigen/Dense>

#include <algorithm>
#include <atomic>
#include <cmath>
#include <limits>
#include <numeric>
#include <sstream>
#include <unordered_set>

#include "zsumm/errors.hpp"

namespace zsumm {

std::int64_t shape_numel(const Shape& shape) {
  std::int64_t n = 1;
  for (auto e : shape) n *= e;
  return n;
}

std::string shape_str(const Shape& shape) {
  std::ostringstream os;
  os << '[';
  for (std::size_t i = 0; i < shape.size(); ++i) {
    if (i) os << ',';
    os << shape[i];
  }
  os << ']';
  return os.str();
}

namespace {

thread_local bool g_grad_enabled = true;
std::atomic<std::uint64_t> g_next_id{1};

template <typename T>
using RowMat = Eigen::Matrix<T, Eigen::Dynamic, Eigen::Dynamic, Eigen::RowMajor>;
template <typename T>
using MapC = Eigen::Map<const RowMat<T>>;
template <typename T>
using MapM = Eigen::Map<RowMat<T>>;

template <typename T>
std::shared_ptr<TensorNode<T>> new_node(Shape shape, std::vector<T> data) {
  auto n = std::make_shared<TensorNode<T>>();
  n->id = g_next_id.fetch_add(1, std::memory_order_relaxed);
  n->shape = std::move(shape);
  n->data = std::move(data);
  return n;
}

// Wraps an op result, wiring it into the graph when any input needs a
// gradient and recording is on.
template <typename T>
Tensor<T> make_result(Shape shape, std::vector<T> data,
                      std::vector<std::shared_ptr<TensorNode<T>>> parents,
                      std::function<void(TensorNode<T>&)> fn) {
  auto n = new_node<T>(std::move(shape), std::move(data));
  bool any = false;
  for (const auto& p : parents) any = any || p->requires_grad;
  if (g_grad_enabled && any) {
    n->requires_grad = true;
    n->parents = std::move(parents);
    n->backward_fn = std::move(fn);
  }
  return Tensor<T>(std::move(n));
}

std::int64_t norm_axis(std::int64_t axis, std::int64_t rank) {
  if (axis < 0) axis += rank;
  if (axis < 0 || axis >= rank) {
    throw InvalidArgument("axis " + std::to_string(axis) +
                          " out of range for rank " + std::to_string(rank));
  }
  return axis;
}

// Broadcast kinds for binary elementwise ops.
enum class Bcast { kSame, kSuffix, kScalar };

template <typename T>
Bcast classify(const Tensor<T>& a, const Tensor<T>& b, const char* op) {
  if (a.shape() == b.shape()) return Bcast::kSame;
  if (b.numel() == 1) return Bcast::kScalar;
  const auto& as = a.shape();
  const auto& bs = b.shape();
  if (bs.size() <= as.size() &&
      std::equal(bs.begin(), bs.end(), as.end() - static_cast<long>(bs.size()))) {
    return Bcast::kSuffix;
  }
  throw ShapeError(std::string(op) + ": cannot broadcast " + shape_str(bs) +
                   " onto " + shape_str(as));
}

}  // namespace

template <typename T>
std::span<T> TensorNode<T>::ensure_grad() {
  if (grad.size() != data.size()) grad.assign(data.size(), T(0));
  return grad;
}

NoGradGuard::NoGradGuard() : previous_(g_grad_enabled) { g_grad_enabled = false; }
NoGradGuard::~NoGradGuard() { g_grad_enabled = previous_; }
bool grad_enabled() { return g_grad_enabled; }

template <typename T>
Tensor<T> Tensor<T>::zeros(Shape shape, bool requires_grad) {
  return full(std::move(shape), T(0), requires_grad);
}

template <typename T>
Tensor<T> Tensor<T>::full(Shape shape, T value, bool requires_grad) {
  const auto n = shape_numel(shape);
  auto node = new_node<T>(std::move(shape),
                          std::vector<T>(static_cast<std::size_t>(n), value));
  node->requires_grad = requires_grad;
  return Tensor(std::move(node));
}

template <typename T>
Tensor<T> Tensor<T>::from(Shape shape, std::vector<T> values, bool requires_grad) {
  for (auto e : shape) {
    if (e <= 0) throw ShapeError("non-positive extent in " + shape_str(shape));
  }
  if (shape_numel(shape) != static_cast<std::int64_t>(values.size())) {
    throw ShapeError("shape " + shape_str(shape) + " does not hold " +
                     std::to_string(values.size()) + " values");
  }
  auto node = new_node<T>(std::move(shape), std::move(values));
  node->requires_grad = requires_grad;
  return Tensor(std::move(node));
}

template <typename T>
Tensor<T> Tensor<T>::scalar(T value) {
  return from({}, {value});
}

template <typename T>
std::int64_t Tensor<T>::dim(std::int64_t axis) const {
  return shape()[static_cast<std::size_t>(norm_axis(axis, rank()))];
}

template <typename T>
T Tensor<T>::item() const {
  if (numel() != 1) {
    throw InvalidArgument("item() on tensor of shape " + shape_str(shape()));
  }
  return node_->data[0];
}

template <typename T>
void Tensor<T>::zero_grad() {
  std::fill(node_->grad.begin(), node_->grad.end(), T(0));
}

template <typename T>
Tape<T> Tape<T>::from_root(const Tensor<T>& root) {
  Tape tape;
  std::unordered_set<const TensorNode<T>*> seen;
  // Iterative post-order DFS: a node is emitted after all of its parents.
  std::vector<std::pair<TensorNode<T>*, std::size_t>> stack;
  if (!root.requires_grad()) return tape;
  stack.emplace_back(root.node(), 0);
  seen.insert(root.node());
  while (!stack.empty()) {
    auto& [node, next] = stack.back();
    if (next < node->parents.size()) {
      TensorNode<T>* p = node->parents[next++].get();
      if (p->requires_grad && seen.insert(p).second) stack.emplace_back(p, 0);
    } else {
      tape.order_.push_back(node);
      stack.pop_back();
    }
  }
  return tape;
}

template <typename T>
void backward(const Tensor<T>& loss) {
  if (loss.numel() != 1) {
    throw InvalidArgument("backward needs a scalar loss, got shape " +
                          shape_str(loss.shape()));
  }
  if (!loss.requires_grad()) return;
  const auto tape = Tape<T>::from_root(loss);
  const auto& order = tape.nodes();
  for (auto* n : order) {
    if (n->backward_fn) std::fill(n->grad.begin(), n->grad.end(), T(0));
  }
  loss.node()->ensure_grad()[0] += T(1);
  for (auto it = order.rbegin(); it != order.rend(); ++it) {
    TensorNode<T>* n = *it;
    if (n->backward_fn) {
      n->ensure_grad();
      n->backward_fn(*n);
    }
  }
  for (auto* n : order) {
    if (n->backward_fn) {
      n->grad.clear();
      n->grad.shrink_to_fit();
    }
  }
}

// ---------------------------------------------------------------------------

template <typename T>
Tensor<T> matmul(const Tensor<T>& a, const Tensor<T>& b) {
  if (a.rank() < 2 || b.rank() < 2 || a.dim(-1) != b.dim(-2)) {
    throw ShapeError("matmul: incompatible shapes " + shape_str(a.shape()) +
                     " and " + shape_str(b.shape()));
  }
  const Shape abatch(a.shape().begin(), a.shape().end() - 2);
  const Shape bbatch(b.shape().begin(), b.shape().end() - 2);
  const bool a_longer = abatch.size() >= bbatch.size();
  const Shape& lo = a_longer ? abatch : bbatch;
  const Shape& sh = a_longer ? bbatch : abatch;
  if (!std::equal(sh.begin(), sh.end(), lo.end() - static_cast<long>(sh.size()))) {
    throw ShapeError("matmul: batch shapes do not broadcast: " +
                     shape_str(a.shape()) + " and " + shape_str(b.shape()));
  }
  const std::int64_t p = a.dim(-2), q = a.dim(-1), r = b.dim(-1);
  const std::int64_t ba = shape_numel(abatch), bb = shape_numel(bbatch);
  const std::int64_t bo = std::max(ba, bb);
  Shape out_shape = lo;
  out_shape.push_back(p);
  out_shape.push_back(r);
  std::vector<T> out(static_cast<std::size_t>(bo * p * r));
  const T* ad = a.data().data();
  const T* bd = b.data().data();
  // A [ba*p, q] x B [q, r] in one product when B carries no batch.
  const bool flat = bb == 1 && ba >= 1;
  if (flat) {
    MapM<T>(out.data(), ba * p, r).noalias() =
        MapC<T>(ad, ba * p, q) * MapC<T>(bd, q, r);
  } else {
    for (std::int64_t i = 0; i < bo; ++i) {
      MapM<T>(out.data() + i * p * r, p, r).noalias() =
          MapC<T>(ad + (i % ba) * p * q, p, q) * MapC<T>(bd + (i % bb) * q * r, q, r);
    }
  }
  auto an = a.node_ptr(), bn = b.node_ptr();
  return make_result<T>(
      std::move(out_shape), std::move(out), {an, bn},
      [=](TensorNode<T>& self) {
        const T* g = self.grad.data();
        if (an->requires_grad) {
          T* ga = an->ensure_grad().data();
          if (flat) {
            MapM<T>(ga, ba * p, q).noalias() +=
                MapC<T>(g, ba * p, r) * MapC<T>(bn->data.data(), q, r).transpose();
          } else {
            for (std::int64_t i = 0; i < bo; ++i) {
              MapM<T>(ga + (i % ba) * p * q, p, q).noalias() +=
                  MapC<T>(g + i * p * r, p, r) *
                  MapC<T>(bn->data.data() + (i % bb) * q * r, q, r).transpose();
            }
          }
        }
        if (bn->requires_grad) {
          T* gb = bn->ensure_grad().data();
          if (flat) {
            MapM<T>(gb, q, r).noalias() +=
                MapC<T>(an->data.data(), ba * p, q).transpose() * MapC<T>(g, ba * p, r);
          } else {
            for (std::int64_t i = 0; i < bo; ++i) {
              MapM<T>(gb + (i % bb) * q * r, q, r).noalias() +=
                  MapC<T>(an->data.data() + (i % ba) * p * q, p, q).transpose() *
                  MapC<T>(g + i * p * r, p, r);
            }
          }
        }
      });
}

template <typename T>
Tensor<T> transpose(const Tensor<T>& x) {
  if (x.rank() < 2) throw ShapeError("transpose needs rank >= 2");
  std::vector<int> order(static_cast<std::size_t>(x.rank()));
  std::iota(order.begin(), order.end(), 0);
  std::swap(order[order.size() - 1], order[order.size() - 2]);
  return permute(x, order);
}

template <typename T>
Tensor<T> permute(const Tensor<T>& x, const std::vector<int>& order) {
  const auto rank = static_cast<std::size_t>(x.rank());
  if (order.size() != rank) throw ShapeError("permute: order length mismatch");
  std::vector<std::int64_t> in_stride(rank, 1);
  for (std::size_t i = rank; i-- > 1;) in_stride[i - 1] = in_stride[i] * x.shape()[i];
  Shape out_shape(rank);
  std::vector<std::int64_t> src_stride(rank);
  std::vector<bool> used(rank, false);
  for (std::size_t i = 0; i < rank; ++i) {
    const auto o = static_cast<std::size_t>(order[i]);
    if (o >= rank || used[o]) throw ShapeError("permute: invalid order");
    used[o] = true;
    out_shape[i] = x.shape()[o];
    src_stride[i] = in_stride[o];
  }
  // Flat source offset for every output element, shared by both directions.
  const auto n = static_cast<std::size_t>(x.numel());
  auto index = std::make_shared<std::vector<std::int64_t>>(n);
  std::vector<std::int64_t> ctr(rank, 0);
  std::int64_t off = 0;
  for (std::size_t k = 0; k < n; ++k) {
    (*index)[k] = off;
    for (std::size_t d = rank; d-- > 0;) {
      if (++ctr[d] < out_shape[d]) {
        off += src_stride[d];
        break;
      }
      off -= src_stride[d] * (out_shape[d] - 1);
      ctr[d] = 0;
    }
  }
  std::vector<T> out(n);
  const T* src = x.data().data();
  for (std::size_t k = 0; k < n; ++k) out[k] = src[(*index)[k]];
  auto xn = x.node_ptr();
  return make_result<T>(std::move(out_shape), std::move(out), {xn},
                        [xn, index](TensorNode<T>& self) {
                          T* gx = xn->ensure_grad().data();
                          const auto& idx = *index;
                          for (std::size_t k = 0; k < idx.size(); ++k) {
                            gx[idx[k]] += self.grad[k];
                          }
                        });
}

template <typename T>
Tensor<T> reshape(const Tensor<T>& x, Shape shape) {
  if (shape_numel(shape) != x.numel()) {
    throw ShapeError("reshape: " + shape_str(x.shape()) + " -> " + shape_str(shape));
  }
  auto xn = x.node_ptr();
  return make_result<T>(std::move(shape), xn->data, {xn}, [xn](TensorNode<T>& self) {
    T* gx = xn->ensure_grad().data();
    for (std::size_t k = 0; k < self.grad.size(); ++k) gx[k] += self.grad[k];
  });
}

namespace {

template <typename T, typename Fwd, typename Da, typename Db>
Tensor<T> binary(const Tensor<T>& a, const Tensor<T>& b, const char* op, Fwd f,
                 Da dfa, Db dfb) {
  const Bcast kind = classify(a, b, op);
  const auto n = static_cast<std::size_t>(a.numel());
  const auto m = static_cast<std::size_t>(b.numel());
  std::vector<T> out(n);
  const T* ad = a.data().data();
  const T* bd = b.data().data();
  auto bidx = [kind, m](std::size_t i) {
    return kind == Bcast::kSame ? i : (kind == Bcast::kScalar ? 0 : i % m);
  };
  for (std::size_t i = 0; i < n; ++i) out[i] = f(ad[i], bd[bidx(i)]);
  auto an = a.node_ptr(), bn = b.node_ptr();
  return make_result<T>(a.shape(), std::move(out), {an, bn},
                        [=](TensorNode<T>& self) {
                          const T* g = self.grad.data();
                          const T* av = an->data.data();
                          const T* bv = bn->data.data();
                          if (an->requires_grad) {
                            T* ga = an->ensure_grad().data();
                            for (std::size_t i = 0; i < n; ++i) {
                              ga[i] += g[i] * dfa(av[i], bv[bidx(i)]);
                            }
                          }
                          if (bn->requires_grad) {
                            T* gb = bn->ensure_grad().data();
                            for (std::size_t i = 0; i < n; ++i) {
                              gb[bidx(i)] += g[i] * dfb(av[i], bv[bidx(i)]);
                            }
                          }
                        });
}

template <typename T, typename Fwd, typename Deriv>
Tensor<T> unary(const Tensor<T>& x, Fwd f, Deriv df) {
  const auto n = static_cast<std::size_t>(x.numel());
  std::vector<T> out(n);
  const T* xd = x.data().data();
  for (std::size_t i = 0; i < n; ++i) out[i] = f(xd[i]);
  auto xn = x.node_ptr();
  return make_result<T>(x.shape(), std::move(out), {xn}, [=](TensorNode<T>& self) {
    T* gx = xn->ensure_grad().data();
    const T* xv = xn->data.data();
    for (std::size_t i = 0; i < n; ++i) gx[i] += self.grad[i] * df(xv[i], self.data[i]);
  });
}

}  // namespace

template <typename T>
Tensor<T> add(const Tensor<T>& a, const Tensor<T>& b) {
  return binary(
      a, b, "add", [](T x, T y) { return x + y; }, [](T, T) { return T(1); },
      [](T, T) { return T(1); });
}

template <typename T>
Tensor<T> sub(const Tensor<T>& a, const Tensor<T>& b) {
  return binary(
      a, b, "sub", [](T x, T y) { return x - y; }, [](T, T) { return T(1); },
      [](T, T) { return T(-1); });
}

template <typename T>
Tensor<T> mul(const Tensor<T>& a, const Tensor<T>& b) {
  return binary(
      a, b, "mul", [](T x, T y) { return x * y; }, [](T, T y) { return y; },
      [](T x, T) { return x; });
}

template <typename T>
Tensor<T> scale(const Tensor<T>& x, T factor) {
  return unary(
      x, [factor](T v) { return v * factor; }, [factor](T, T) { return factor; });
}

template <typename T>
Tensor<T> gelu(const Tensor<T>& x) {
  // tanh approximation
  constexpr T c = T(0.7978845608028654);  // sqrt(2/pi)
  constexpr T k = T(0.044715);
  return unary(
      x,
      [](T v) { return T(0.5) * v * (T(1) + std::tanh(c * (v + k * v * v * v))); },
      [](T v, T) {
        const T u = c * (v + k * v * v * v);
        const T t = std::tanh(u);
        return T(0.5) * (T(1) + t) +
               T(0.5) * v * (T(1) - t * t) * c * (T(1) + T(3) * k * v * v);
      });
}

template <typename T>
Tensor<T> tanh(const Tensor<T>& x) {
  return unary(
      x, [](T v) { return std::tanh(v); }, [](T, T y) { return T(1) - y * y; });
}

template <typename T>
Tensor<T> sigmoid(const Tensor<T>& x) {
  return unary(
      x,
      [](T v) {
        return v >= 0 ? T(1) / (T(1) + std::exp(-v))
                      : std::exp(v) / (T(1) + std::exp(v));
      },
      [](T, T y) { return y * (T(1) - y); });
}

template <typename T>
Tensor<T> softmax(const Tensor<T>& x, std::int64_t axis) {
  axis = norm_axis(axis, x.rank());
  const auto& s = x.shape();
  std::int64_t outer = 1, inner = 1;
  for (std::int64_t i = 0; i < axis; ++i) outer *= s[static_cast<std::size_t>(i)];
  for (std::int64_t i = axis + 1; i < x.rank(); ++i) inner *= s[static_cast<std::size_t>(i)];
  const std::int64_t len = s[static_cast<std::size_t>(axis)];
  std::vector<T> out(static_cast<std::size_t>(x.numel()));
  const T* xd = x.data().data();
  for (std::int64_t o = 0; o < outer; ++o) {
    for (std::int64_t in = 0; in < inner; ++in) {
      const std::int64_t base = o * len * inner + in;
      T mx = -std::numeric_limits<T>::infinity();
      for (std::int64_t j = 0; j < len; ++j) mx = std::max(mx, xd[base + j * inner]);
      T z = 0;
      for (std::int64_t j = 0; j < len; ++j) {
        const T e = std::exp(xd[base + j * inner] - mx);
        out[static_cast<std::size_t>(base + j * inner)] = e;
        z += e;
      }
      for (std::int64_t j = 0; j < len; ++j) out[static_cast<std::size_t>(base + j * inner)] /= z;
    }
  }
  auto xn = x.node_ptr();
  return make_result<T>(s, std::move(out), {xn}, [=](TensorNode<T>& self) {
    T* gx = xn->ensure_grad().data();
    const T* y = self.data.data();
    const T* g = self.grad.data();
    for (std::int64_t o = 0; o < outer; ++o) {
      for (std::int64_t in = 0; in < inner; ++in) {
        const std::int64_t base = o * len * inner + in;
        T dot = 0;
        for (std::int64_t j = 0; j < len; ++j) dot += g[base + j * inner] * y[base + j * inner];
        for (std::int64_t j = 0; j < len; ++j) {
          const auto k = base + j * inner;
          gx[k] += y[k] * (g[k] - dot);
        }
      }
    }
  });
}

template <typename T>
Tensor<T> masked_softmax(const Tensor<T>& logits, const AttentionMask& mask) {
  if (logits.rank() < 2 || logits.dim(-2) != mask.rows || logits.dim(-1) != mask.cols ||
      mask.groups <= 0 ||
      static_cast<std::int64_t>(mask.allow.size()) != mask.groups * mask.rows * mask.cols) {
    throw ShapeError("masked_softmax: mask [" + std::to_string(mask.groups) + "," +
                     std::to_string(mask.rows) + "," + std::to_string(mask.cols) +
                     "] does not fit logits " + shape_str(logits.shape()));
  }
  const std::int64_t rows = mask.rows, cols = mask.cols;
  const std::int64_t lead = logits.numel() / (rows * cols);
  if (lead % mask.groups != 0) {
    throw ShapeError("masked_softmax: leading extent not divisible by mask groups");
  }
  const std::int64_t per_group = lead / mask.groups;
  std::vector<T> out(static_cast<std::size_t>(logits.numel()), T(0));
  const T* xd = logits.data().data();
  for (std::int64_t l = 0; l < lead; ++l) {
    const std::int64_t g = l / per_group;
    for (std::int64_t r = 0; r < rows; ++r) {
      const std::int64_t base = (l * rows + r) * cols;
      const std::uint8_t* allow = mask.allow.data() + (g * rows + r) * cols;
      T mx = -std::numeric_limits<T>::infinity();
      for (std::int64_t c = 0; c < cols; ++c) {
        if (allow[c]) mx = std::max(mx, xd[base + c]);
      }
      if (mx == -std::numeric_limits<T>::infinity()) continue;
      T z = 0;
      for (std::int64_t c = 0; c < cols; ++c) {
        if (allow[c]) {
          const T e = std::exp(xd[base + c] - mx);
          out[static_cast<std::size_t>(base + c)] = e;
          z += e;
        }
      }
      for (std::int64_t c = 0; c < cols; ++c) out[static_cast<std::size_t>(base + c)] /= z;
    }
  }
  auto xn = logits.node_ptr();
  return make_result<T>(logits.shape(), std::move(out), {xn}, [=](TensorNode<T>& self) {
    T* gx = xn->ensure_grad().data();
    const T* y = self.data.data();
    const T* g = self.grad.data();
    const std::int64_t nrows = lead * rows;
    for (std::int64_t r = 0; r < nrows; ++r) {
      const std::int64_t base = r * cols;
      T dot = 0;
      for (std::int64_t c = 0; c < cols; ++c) dot += g[base + c] * y[base + c];
      for (std::int64_t c = 0; c < cols; ++c) gx[base + c] += y[base + c] * (g[base + c] - dot);
    }
  });
}

template <typename T>
Tensor<T> layer_norm(const Tensor<T>& x, const Tensor<T>& gain, const Tensor<T>& bias,
                     T eps) {
  const std::int64_t d = x.dim(-1);
  if (gain.numel() != d || bias.numel() != d) {
    throw ShapeError("layer_norm: gain/bias " + shape_str(gain.shape()) + "/" +
                     shape_str(bias.shape()) + " vs input " + shape_str(x.shape()));
  }
  const std::int64_t rows = x.numel() / d;
  std::vector<T> out(static_cast<std::size_t>(x.numel()));
  auto xhat = std::make_shared<std::vector<T>>(out.size());
  auto rstd = std::make_shared<std::vector<T>>(static_cast<std::size_t>(rows));
  const T* xd = x.data().data();
  const T* gd = gain.data().data();
  const T* bd = bias.data().data();
  for (std::int64_t r = 0; r < rows; ++r) {
    const T* row = xd + r * d;
    T mu = 0;
    for (std::int64_t i = 0; i < d; ++i) mu += row[i];
    mu /= T(d);
    T var = 0;
    for (std::int64_t i = 0; i < d; ++i) var += (row[i] - mu) * (row[i] - mu);
    var /= T(d);
    const T rs = T(1) / std::sqrt(var + eps);
    (*rstd)[static_cast<std::size_t>(r)] = rs;
    for (std::int64_t i = 0; i < d; ++i) {
      const auto k = static_cast<std::size_t>(r * d + i);
      (*xhat)[k] = (row[i] - mu) * rs;
      out[k] = (*xhat)[k] * gd[i] + bd[i];
    }
  }
  auto xn = x.node_ptr(), gn = gain.node_ptr(), bn = bias.node_ptr();
  return make_result<T>(x.shape(), std::move(out), {xn, gn, bn}, [=](TensorNode<T>& self) {
    const T* g = self.grad.data();
    const T* gv = gn->data.data();
    if (gn->requires_grad || bn->requires_grad) {
      T* gg = gn->requires_grad ? gn->ensure_grad().data() : nullptr;
      T* gb = bn->requires_grad ? bn->ensure_grad().data() : nullptr;
      for (std::int64_t r = 0; r < rows; ++r) {
        for (std::int64_t i = 0; i < d; ++i) {
          const auto k = static_cast<std::size_t>(r * d + i);
          if (gg) gg[i] += g[k] * (*xhat)[k];
          if (gb) gb[i] += g[k];
        }
      }
    }
    if (xn->requires_grad) {
      T* gx = xn->ensure_grad().data();
      for (std::int64_t r = 0; r < rows; ++r) {
        T s1 = 0, s2 = 0;
        for (std::int64_t i = 0; i < d; ++i) {
          const auto k = static_cast<std::size_t>(r * d + i);
          const T dy = g[k] * gv[i];
          s1 += dy;
          s2 += dy * (*xhat)[k];
        }
        const T rs = (*rstd)[static_cast<std::size_t>(r)];
        for (std::int64_t i = 0; i < d; ++i) {
          const auto k = static_cast<std::size_t>(r * d + i);
          const T dy = g[k] * gv[i];
          gx[k] += rs * (dy - s1 / T(d) - (*xhat)[k] * s2 / T(d));
        }
      }
    }
  });
}

template <typename T>
Tensor<T> embedding_lookup(const Tensor<T>& table, std::span<const TokenId> ids) {
  if (table.rank() != 2) throw ShapeError("embedding table must be [V, d]");
  const std::int64_t v = table.dim(0), d = table.dim(1);
  auto idv = std::make_shared<std::vector<TokenId>>(ids.begin(), ids.end());
  for (std::size_t i = 0; i < idv->size(); ++i) {
    const TokenId t = (*idv)[i];
    if (t < 0 || t >= v) {
      throw OutOfRange("embedding_lookup: id " + std::to_string(t) + " at index " +
                       std::to_string(i) + " outside [0, " + std::to_string(v) + ")");
    }
  }
  if (idv->empty()) throw ShapeError("embedding_lookup: empty id sequence");
  std::vector<T> out(idv->size() * static_cast<std::size_t>(d));
  const T* td = table.data().data();
  for (std::size_t i = 0; i < idv->size(); ++i) {
    std::copy_n(td + (*idv)[i] * d, d, out.data() + i * static_cast<std::size_t>(d));
  }
  auto tn = table.node_ptr();
  return make_result<T>({static_cast<std::int64_t>(idv->size()), d}, std::move(out), {tn},
                        [=](TensorNode<T>& self) {
                          T* gt = tn->ensure_grad().data();
                          for (std::size_t i = 0; i < idv->size(); ++i) {
                            T* dst = gt + (*idv)[i] * d;
                            const T* src = self.grad.data() + i * static_cast<std::size_t>(d);
                            for (std::int64_t j = 0; j < d; ++j) dst[j] += src[j];
                          }
                        });
}

template <typename T>
Tensor<T> gather_last(const Tensor<T>& x, std::span<const std::int32_t> index,
                      std::int64_t cols) {
  if (x.rank() < 2) throw ShapeError("gather_last needs rank >= 2");
  const std::int64_t rows = x.dim(-2), width = x.dim(-1);
  if (static_cast<std::int64_t>(index.size()) != rows * cols) {
    throw ShapeError("gather_last: index size mismatch");
  }
  for (auto i : index) {
    if (i < 0 || i >= width) throw OutOfRange("gather_last: index out of range");
  }
  const std::int64_t lead = x.numel() / (rows * width);
  auto idx = std::make_shared<std::vector<std::int32_t>>(index.begin(), index.end());
  Shape out_shape = x.shape();
  out_shape.back() = cols;
  std::vector<T> out(static_cast<std::size_t>(lead * rows * cols));
  const T* xd = x.data().data();
  for (std::int64_t l = 0; l < lead; ++l) {
    for (std::int64_t r = 0; r < rows; ++r) {
      const T* src = xd + (l * rows + r) * width;
      T* dst = out.data() + (l * rows + r) * cols;
      const std::int32_t* ir = idx->data() + r * cols;
      for (std::int64_t c = 0; c < cols; ++c) dst[c] = src[ir[c]];
    }
  }
  auto xn = x.node_ptr();
  return make_result<T>(std::move(out_shape), std::move(out), {xn}, [=](TensorNode<T>& self) {
    T* gx = xn->ensure_grad().data();
    for (std::int64_t l = 0; l < lead; ++l) {
      for (std::int64_t r = 0; r < rows; ++r) {
        T* dst = gx + (l * rows + r) * width;
        const T* src = self.grad.data() + (l * rows + r) * cols;
        const std::int32_t* ir = idx->data() + r * cols;
        for (std::int64_t c = 0; c < cols; ++c) dst[ir[c]] += src[c];
      }
    }
  });
}

template <typename T>
Tensor<T> concat(const std::vector<Tensor<T>>& parts, std::int64_t axis) {
  if (parts.empty()) throw InvalidArgument("concat of zero tensors");
  const auto rank = parts[0].rank();
  axis = norm_axis(axis, rank);
  Shape out_shape = parts[0].shape();
  out_shape[static_cast<std::size_t>(axis)] = 0;
  for (const auto& p : parts) {
    if (p.rank() != rank) throw ShapeError("concat: rank mismatch");
    for (std::int64_t i = 0; i < rank; ++i) {
      if (i != axis && p.dim(i) != parts[0].dim(i)) {
        throw ShapeError("concat: " + shape_str(p.shape()) + " vs " +
                         shape_str(parts[0].shape()));
      }
    }
    out_shape[static_cast<std::size_t>(axis)] += p.dim(axis);
  }
  std::int64_t outer = 1, inner = 1;
  for (std::int64_t i = 0; i < axis; ++i) outer *= out_shape[static_cast<std::size_t>(i)];
  for (std::int64_t i = axis + 1; i < rank; ++i) inner *= out_shape[static_cast<std::size_t>(i)];
  const std::int64_t total = out_shape[static_cast<std::size_t>(axis)];
  std::vector<T> out(static_cast<std::size_t>(shape_numel(out_shape)));
  std::vector<std::shared_ptr<TensorNode<T>>> nodes;
  auto offsets = std::make_shared<std::vector<std::int64_t>>();
  std::int64_t off = 0;
  for (const auto& p : parts) {
    const std::int64_t len = p.dim(axis);
    for (std::int64_t o = 0; o < outer; ++o) {
      std::copy_n(p.data().data() + o * len * inner, len * inner,
                  out.data() + (o * total + off) * inner);
    }
    offsets->push_back(off);
    nodes.push_back(p.node_ptr());
    off += len;
  }
  return make_result<T>(std::move(out_shape), std::move(out), nodes,
                        [=](TensorNode<T>& self) {
                          for (std::size_t k = 0; k < self.parents.size(); ++k) {
                            auto& pn = self.parents[k];
                            if (!pn->requires_grad) continue;
                            const std::int64_t len = pn->shape[static_cast<std::size_t>(axis)];
                            T* gp = pn->ensure_grad().data();
                            for (std::int64_t o = 0; o < outer; ++o) {
                              const T* src = self.grad.data() + (o * total + (*offsets)[k]) * inner;
                              T* dst = gp + o * len * inner;
                              for (std::int64_t i = 0; i < len * inner; ++i) dst[i] += src[i];
                            }
                          }
                        });
}

template <typename T>
Tensor<T> slice(const Tensor<T>& x, std::int64_t axis, std::int64_t start,
                std::int64_t length) {
  axis = norm_axis(axis, x.rank());
  const std::int64_t full = x.dim(axis);
  if (start < 0 || length <= 0 || start + length > full) {
    throw OutOfRange("slice [" + std::to_string(start) + ", " +
                     std::to_string(start + length) + ") outside extent " +
                     std::to_string(full));
  }
  std::int64_t outer = 1, inner = 1;
  for (std::int64_t i = 0; i < axis; ++i) outer *= x.dim(i);
  for (std::int64_t i = axis + 1; i < x.rank(); ++i) inner *= x.dim(i);
  Shape out_shape = x.shape();
  out_shape[static_cast<std::size_t>(axis)] = length;
  std::vector<T> out(static_cast<std::size_t>(outer * length * inner));
  for (std::int64_t o = 0; o < outer; ++o) {
    std::copy_n(x.data().data() + (o * full + start) * inner, length * inner,
                out.data() + o * length * inner);
  }
  auto xn = x.node_ptr();
  return make_result<T>(std::move(out_shape), std::move(out), {xn}, [=](TensorNode<T>& self) {
    T* gx = xn->ensure_grad().data();
    for (std::int64_t o = 0; o < outer; ++o) {
      const T* src = self.grad.data() + o * length * inner;
      T* dst = gx + (o * full + start) * inner;
      for (std::int64_t i = 0; i < length * inner; ++i) dst[i] += src[i];
    }
  });
}

template <typename T>
Tensor<T> sum(const Tensor<T>& x) {
  T s = 0;
  for (T v : x.data()) s += v;
  auto xn = x.node_ptr();
  return make_result<T>({}, {s}, {xn}, [xn](TensorNode<T>& self) {
    const T g = self.grad[0];
    for (T& v : xn->ensure_grad()) v += g;
  });
}

template <typename T>
Tensor<T> mean(const Tensor<T>& x) {
  return scale(sum(x), T(1) / T(x.numel()));
}

template <typename T>
Tensor<T> stop_gradient(const Tensor<T>& x) {
  auto n = new_node<T>(x.shape(), std::vector<T>(x.data().begin(), x.data().end()));
  return Tensor<T>(std::move(n));
}

template <typename T>
Tensor<T> dropout(const Tensor<T>& x, double rate, std::mt19937_64& rng) {
  if (rate <= 0.0) return x;
  if (rate >= 1.0) throw InvalidArgument("dropout rate must be < 1");
  std::bernoulli_distribution keep(1.0 - rate);
  const T s = T(1.0 / (1.0 - rate));
  std::vector<T> m(static_cast<std::size_t>(x.numel()));
  for (auto& v : m) v = keep(rng) ? s : T(0);
  return mul(x, Tensor<T>::from(x.shape(), std::move(m)));
}

template <typename T>
Tensor<T> weighted_cross_entropy(const Tensor<T>& logits, std::span<const TokenId> targets,
                                 std::span<const T> weights) {
  const std::int64_t v = logits.dim(-1);
  const std::int64_t rows = logits.numel() / v;
  if (static_cast<std::int64_t>(targets.size()) != rows ||
      static_cast<std::int64_t>(weights.size()) != rows) {
    throw ShapeError("cross entropy: " + std::to_string(rows) + " rows vs " +
                     std::to_string(targets.size()) + " targets");
  }
  auto tg = std::make_shared<std::vector<TokenId>>(targets.begin(), targets.end());
  auto wt = std::make_shared<std::vector<T>>(weights.begin(), weights.end());
  auto probs = std::make_shared<std::vector<T>>(static_cast<std::size_t>(logits.numel()));
  const T* ld = logits.data().data();
  T total = 0;
  for (std::int64_t r = 0; r < rows; ++r) {
    const T w = (*wt)[static_cast<std::size_t>(r)];
    if (w == T(0)) continue;
    const TokenId t = (*tg)[static_cast<std::size_t>(r)];
    if (t < 0 || t >= v) {
      throw OutOfRange("cross entropy: target " + std::to_string(t) + " at row " +
                       std::to_string(r) + " outside [0, " + std::to_string(v) + ")");
    }
    const T* row = ld + r * v;
    T mx = *std::max_element(row, row + v);
    T z = 0;
    for (std::int64_t j = 0; j < v; ++j) z += std::exp(row[j] - mx);
    const T lse = mx + std::log(z);
    total += w * (lse - row[t]);
    T* pr = probs->data() + r * v;
    for (std::int64_t j = 0; j < v; ++j) pr[j] = std::exp(row[j] - lse);
  }
  auto ln = logits.node_ptr();
  return make_result<T>({}, {total}, {ln}, [=](TensorNode<T>& self) {
    const T g = self.grad[0];
    T* gl = ln->ensure_grad().data();
    for (std::int64_t r = 0; r < rows; ++r) {
      const T w = (*wt)[static_cast<std::size_t>(r)];
      if (w == T(0)) continue;
      const T* pr = probs->data() + r * v;
      T* dst = gl + r * v;
      for (std::int64_t j = 0; j < v; ++j) dst[j] += g * w * pr[j];
      dst[(*tg)[static_cast<std::size_t>(r)]] -= g * w;
    }
  });
}

template <typename T>
Tensor<T> cross_entropy_from_logits(const Tensor<T>& logits, std::span<const TokenId> targets,
                                    TokenId ignore_id) {
  std::size_t count = 0;
  for (auto t : targets) count += t != ignore_id;
  std::vector<T> w(targets.size(), T(0));
  if (count > 0) {
    for (std::size_t i = 0; i < targets.size(); ++i) {
      if (targets[i] != ignore_id) w[i] = T(1) / T(count);
    }
  }
  return weighted_cross_entropy<T>(logits, targets, w);
}

template <typename T>
Tensor<T> weighted_bce_with_logits(const Tensor<T>& scores, std::span<const T> labels,
                                   std::span<const T> weights) {
  const auto n = static_cast<std::size_t>(scores.numel());
  if (labels.size() != n || weights.size() != n) {
    throw ShapeError("bce: scores/labels/weights length mismatch");
  }
  auto lb = std::make_shared<std::vector<T>>(labels.begin(), labels.end());
  auto wt = std::make_shared<std::vector<T>>(weights.begin(), weights.end());
  const T* sd = scores.data().data();
  T total = 0;
  for (std::size_t i = 0; i < n; ++i) {
    const T s = sd[i];
    total += (*wt)[i] * (std::max(s, T(0)) - s * (*lb)[i] + std::log1p(std::exp(-std::abs(s))));
  }
  auto sn = scores.node_ptr();
  return make_result<T>({}, {total}, {sn}, [=](TensorNode<T>& self) {
    const T g = self.grad[0];
    T* gs = sn->ensure_grad().data();
    for (std::size_t i = 0; i < n; ++i) {
      const T s = sn->data[i];
      const T p = s >= 0 ? T(1) / (T(1) + std::exp(-s)) : std::exp(s) / (T(1) + std::exp(s));
      gs[i] += g * (*wt)[i] * (p - (*lb)[i]);
    }
  });
}

// ---------------------------------------------------------------------------

#define ZSUMM_INSTANTIATE(T)                                                        \
  template struct TensorNode<T>;                                                    \
  template class Tensor<T>;                                                         \
  template class Tape<T>;                                                           \
  template void backward<T>(const Tensor<T>&);                                      \
  template Tensor<T> matmul<T>(const Tensor<T>&, const Tensor<T>&);                 \
  template Tensor<T> transpose<T>(const Tensor<T>&);                                \
  template Tensor<T> permute<T>(const Tensor<T>&, const std::vector<int>&);         \
  template Tensor<T> reshape<T>(const Tensor<T>&, Shape);                           \
  template Tensor<T> add<T>(const Tensor<T>&, const Tensor<T>&);                    \
  template Tensor<T> sub<T>(const Tensor<T>&, const Tensor<T>&);                    \
  template Tensor<T> mul<T>(const Tensor<T>&, const Tensor<T>&);                    \
  template Tensor<T> scale<T>(const Tensor<T>&, T);                                 \
  template Tensor<T> gelu<T>(const Tensor<T>&);                                     \
  template Tensor<T> tanh<T>(const Tensor<T>&);                                     \
  template Tensor<T> sigmoid<T>(const Tensor<T>&);                                  \
  template Tensor<T> softmax<T>(const Tensor<T>&, std::int64_t);                    \
  template Tensor<T> masked_softmax<T>(const Tensor<T>&, const AttentionMask&);     \
  template Tensor<T> layer_norm<T>(const Tensor<T>&, const Tensor<T>&,              \
                                   const Tensor<T>&, T);                            \
  template Tensor<T> embedding_lookup<T>(const Tensor<T>&, std::span<const TokenId>); \
  template Tensor<T> gather_last<T>(const Tensor<T>&, std::span<const std::int32_t>, \
                                    std::int64_t);                                  \
  template Tensor<T> concat<T>(const std::vector<Tensor<T>>&, std::int64_t);        \
  template Tensor<T> slice<T>(const Tensor<T>&, std::int64_t, std::int64_t,         \
                              std::int64_t);                                        \
  template Tensor<T> sum<T>(const Tensor<T>&);                                      \
  template Tensor<T> mean<T>(const Tensor<T>&);                                     \
  template Tensor<T> stop_gradient<T>(const Tensor<T>&);                            \
  template Tensor<T> dropout<T>(const Tensor<T>&, double, std::mt19937_64&);        \
  template Tensor<T> cross_entropy_from_logits<T>(const Tensor<T>&,                 \
                                                  std::span<const TokenId>, TokenId); \
  template Tensor<T> weighted_cross_entropy<T>(const Tensor<T>&,                    \
                                               std::span<const TokenId>,            \
                                               std::span<const T>);                 \
  template Tensor<T> weighted_bce_with_logits<T>(const Tensor<T>&, std::span<const T>, \
                                                 std::span<const T>);

ZSUMM_INSTANTIATE(float)
ZSUMM_INSTANTIATE(double)

#undef ZSUMM_INSTANTIATE

}  // namespace zsumm
