#pragma once

#include <algorithm>
#include <cmath>
#include <cstdint>
#include <functional>
#include <initializer_list>
#include <limits>
#include <memory>
#include <optional>
#include <stdexcept>
#include <string>
#include <vector>

#include "infomax/rng.hpp"

namespace infomax {

using Shape = std::vector<std::int64_t>;

inline std::int64_t shape_numel(const Shape& s) {
  std::int64_t n = 1;
  for (auto e : s) n *= e;
  return n;
}

inline std::string shape_str(const Shape& s) {
  std::string out = "[";
  for (std::size_t i = 0; i < s.size(); ++i) {
    if (i) out += "x";
    out += std::to_string(s[i]);
  }
  return out + "]";
}

template <typename T>
class Tape;

// Dense row-major tensor. `data` is shared between copies; ops never mutate
// their inputs, so sharing is safe. A tensor is "tracked" when it carries a
// tape node id; gradients for tracked tensors live on the tape.
template <typename T>
struct Tensor {
  Shape shape;
  std::shared_ptr<std::vector<T>> data;
  Tape<T>* tape = nullptr;
  std::int64_t node = -1;

  Tensor() : data(std::make_shared<std::vector<T>>()) {}

  static Tensor from(Shape s, std::vector<T> values) {
    if (shape_numel(s) != static_cast<std::int64_t>(values.size()))
      throw std::invalid_argument("Tensor::from: shape " + shape_str(s) + " does not match " +
                                  std::to_string(values.size()) + " values");
    Tensor t;
    t.shape = std::move(s);
    t.data = std::make_shared<std::vector<T>>(std::move(values));
    return t;
  }

  static Tensor zeros(Shape s) {
    auto n = shape_numel(s);
    return from(std::move(s), std::vector<T>(static_cast<std::size_t>(n), T(0)));
  }

  static Tensor full(Shape s, T v) {
    auto n = shape_numel(s);
    return from(std::move(s), std::vector<T>(static_cast<std::size_t>(n), v));
  }

  static Tensor scalar(T v) { return from({}, {v}); }

  static Tensor uniform(Shape s, Rng& rng, double lo, double hi) {
    auto n = shape_numel(s);
    std::vector<T> v(static_cast<std::size_t>(n));
    for (auto& x : v) x = static_cast<T>(rng.uniform(lo, hi));
    return from(std::move(s), std::move(v));
  }

  static Tensor normal(Shape s, Rng& rng, double mean, double stddev) {
    auto n = shape_numel(s);
    std::vector<T> v(static_cast<std::size_t>(n));
    for (auto& x : v) x = static_cast<T>(mean + stddev * rng.normal());
    return from(std::move(s), std::move(v));
  }

  std::int64_t size() const { return static_cast<std::int64_t>(data->size()); }
  std::int64_t rank() const { return static_cast<std::int64_t>(shape.size()); }
  bool tracked() const { return node >= 0; }

  T operator[](std::int64_t i) const { return (*data)[static_cast<std::size_t>(i)]; }
  T& mut(std::int64_t i) { return (*data)[static_cast<std::size_t>(i)]; }

  T at(std::initializer_list<std::int64_t> idx) const {
    if (static_cast<std::int64_t>(idx.size()) != rank())
      throw std::invalid_argument("Tensor::at: rank mismatch");
    std::int64_t flat = 0;
    std::size_t k = 0;
    for (auto i : idx) {
      if (i < 0 || i >= shape[k]) throw std::invalid_argument("Tensor::at: index out of range");
      flat = flat * shape[k] + i;
      ++k;
    }
    return (*data)[static_cast<std::size_t>(flat)];
  }

  // Untracked view of the same values.
  Tensor detached() const {
    Tensor t;
    t.shape = shape;
    t.data = data;
    return t;
  }

  // Deep copy of the values (still untracked).
  Tensor clone() const {
    Tensor t;
    t.shape = shape;
    t.data = std::make_shared<std::vector<T>>(*data);
    return t;
  }
};

// Reverse-mode tape. Nodes are appended in execution order, so every node's
// inputs precede it. backward() runs one reverse sweep over a scratch adjoint
// buffer and then folds the sweep's result into the persistent per-node
// gradients, so repeated backward calls accumulate until zero_grads().
template <typename T>
class Tape {
 public:
  using BackwardFn = std::function<void(Tape&, const std::vector<T>&)>;

  struct Node {
    const char* op;
    std::vector<std::int64_t> inputs;
    std::int64_t numel;
    BackwardFn backward;
  };

  std::int64_t record(const char* op, std::int64_t numel, std::vector<std::int64_t> inputs,
                      BackwardFn backward) {
    const auto id = static_cast<std::int64_t>(nodes_.size());
    for (auto in : inputs)
      if (in >= id) throw std::logic_error("Tape::record: input does not precede node");
    nodes_.push_back(Node{op, std::move(inputs), numel, std::move(backward)});
    grads_.emplace_back();
    return id;
  }

  Tensor<T> watch(const Tensor<T>& t) {
    if (t.tracked()) {
      if (t.tape != this) throw std::invalid_argument("Tape::watch: tensor tracked on another tape");
      return t;
    }
    Tensor<T> out = t.detached();
    out.tape = this;
    out.node = record("leaf", t.size(), {}, nullptr);
    return out;
  }

  void backward(const Tensor<T>& root) {
    if (root.size() != 1) throw std::invalid_argument("Tape::backward: root must be scalar");
    if (!root.tracked() || root.tape != this)
      throw std::invalid_argument("Tape::backward: root is not tracked on this tape");
    adjoint_.assign(nodes_.size(), {});
    touched_.assign(nodes_.size(), false);
    adjoint_buffer(root.node)[0] = T(1);
    for (std::int64_t id = root.node; id >= 0; --id) {
      const auto uid = static_cast<std::size_t>(id);
      if (!touched_[uid]) continue;
      if (nodes_[uid].backward) nodes_[uid].backward(*this, adjoint_[uid]);
    }
    for (std::size_t id = 0; id < nodes_.size(); ++id) {
      if (!touched_[id]) continue;
      auto& g = grads_[id];
      if (g.empty()) {
        g = std::move(adjoint_[id]);
      } else {
        const auto& a = adjoint_[id];
        for (std::size_t i = 0; i < g.size(); ++i) g[i] += a[i];
      }
    }
    adjoint_.clear();
    touched_.clear();
  }

  // Adjoint accumulator for `id`, valid during a backward sweep.
  std::vector<T>& adjoint_buffer(std::int64_t id) {
    const auto uid = static_cast<std::size_t>(id);
    if (!touched_[uid]) {
      adjoint_[uid].assign(static_cast<std::size_t>(nodes_[uid].numel), T(0));
      touched_[uid] = true;
    }
    return adjoint_[uid];
  }

  // Persistent gradient of a node (zeros if it never received one).
  const std::vector<T>& grad(std::int64_t id) {
    auto& g = grads_[static_cast<std::size_t>(id)];
    if (g.empty()) g.assign(static_cast<std::size_t>(nodes_[static_cast<std::size_t>(id)].numel), T(0));
    return g;
  }

  Tensor<T> grad_tensor(const Tensor<T>& t) {
    if (!t.tracked() || t.tape != this)
      throw std::invalid_argument("Tape::grad_tensor: tensor not tracked on this tape");
    return Tensor<T>::from(t.shape, grad(t.node));
  }

  void zero_grads() {
    for (auto& g : grads_) g.clear();
  }

  std::int64_t size() const { return static_cast<std::int64_t>(nodes_.size()); }
  const Node& node_info(std::int64_t id) const { return nodes_[static_cast<std::size_t>(id)]; }

 private:
  std::vector<Node> nodes_;
  std::vector<std::vector<T>> grads_;
  std::vector<std::vector<T>> adjoint_;
  std::vector<bool> touched_;
};

namespace detail {

template <typename T>
inline void check_finite(const char* op, const std::vector<T>& v) {
  for (const auto x : v)
    if (!std::isfinite(static_cast<double>(x)))
      throw std::runtime_error(std::string(op) + ": non-finite result");
}

template <typename T>
inline Tape<T>* result_tape(std::initializer_list<const Tensor<T>*> inputs) {
  Tape<T>* tape = nullptr;
  for (const auto* t : inputs) {
    if (!t || !t->tracked()) continue;
    if (tape && tape != t->tape)
      throw std::invalid_argument("op mixes tensors from different tapes");
    tape = t->tape;
  }
  return tape;
}

template <typename T>
inline Tensor<T> make_op_result(const char* op, Shape shape, std::vector<T> values,
                                std::initializer_list<const Tensor<T>*> inputs,
                                std::function<typename Tape<T>::BackwardFn()> make_backward) {
  check_finite(op, values);
  Tensor<T> out = Tensor<T>::from(std::move(shape), std::move(values));
  Tape<T>* tape = result_tape<T>(inputs);
  if (tape) {
    std::vector<std::int64_t> ids;
    for (const auto* t : inputs)
      if (t && t->tracked()) ids.push_back(t->node);
    out.tape = tape;
    out.node = tape->record(op, out.size(), std::move(ids), make_backward());
  }
  return out;
}

// Accumulate g (scaled) into the adjoint of `node` if it is tracked.
template <typename T>
inline void add_to(Tape<T>& tape, std::int64_t node, const std::vector<T>& g) {
  if (node < 0) return;
  auto& a = tape.adjoint_buffer(node);
  for (std::size_t i = 0; i < g.size(); ++i) a[i] += g[i];
}

}  // namespace detail

// ---------------------------------------------------------------------------
// Elementwise operations. Broadcasting is restricted to equal shapes and
// scalar-vs-tensor (a one-element tensor against any shape).

enum class EwKind { Add, Sub, Mul, Div, Relu, Softplus, Sigmoid, Exp, Log, Neg, Sqrt };

namespace detail {

template <typename T>
inline T softplus_scalar(T z) {
  const T a = z > T(0) ? z : T(0);
  return a + std::log1p(std::exp(-std::abs(z)));
}

template <typename T>
inline T sigmoid_scalar(T z) {
  if (z >= T(0)) return T(1) / (T(1) + std::exp(-z));
  const T e = std::exp(z);
  return e / (T(1) + e);
}

enum class Bcast { Equal, AScalar, BScalar };

template <typename T>
inline Bcast binary_broadcast(const char* op, const Tensor<T>& a, const Tensor<T>& b) {
  if (a.shape == b.shape) return Bcast::Equal;
  if (a.size() == 1) return Bcast::AScalar;
  if (b.size() == 1) return Bcast::BScalar;
  throw std::invalid_argument(std::string(op) + ": shapes " + shape_str(a.shape) + " and " +
                              shape_str(b.shape) + " are not broadcast-compatible");
}

template <typename T, typename Fwd, typename Bwd>
Tensor<T> binary_op(const char* op, const Tensor<T>& a, const Tensor<T>& b, Fwd fwd, Bwd bwd) {
  const Bcast bc = binary_broadcast(op, a, b);
  const Shape& out_shape = bc == Bcast::AScalar ? b.shape : a.shape;
  const auto n = static_cast<std::size_t>(bc == Bcast::AScalar ? b.size() : a.size());
  std::vector<T> out(n);
  const auto& av = *a.data;
  const auto& bv = *b.data;
  for (std::size_t i = 0; i < n; ++i) {
    const T x = bc == Bcast::AScalar ? av[0] : av[i];
    const T y = bc == Bcast::BScalar ? bv[0] : bv[i];
    out[i] = fwd(x, y);
  }
  auto make_backward = [&]() -> typename Tape<T>::BackwardFn {
    auto ad = a.data;
    auto bd = b.data;
    const auto an = a.node;
    const auto bn = b.node;
    return [ad, bd, an, bn, bc, bwd](Tape<T>& tape, const std::vector<T>& g) {
      const std::size_t n = g.size();
      if (an >= 0) {
        auto& acc = tape.adjoint_buffer(an);
        for (std::size_t i = 0; i < n; ++i) {
          const T x = bc == Bcast::AScalar ? (*ad)[0] : (*ad)[i];
          const T y = bc == Bcast::BScalar ? (*bd)[0] : (*bd)[i];
          T da, db;
          bwd(x, y, da, db);
          acc[bc == Bcast::AScalar ? 0 : i] += g[i] * da;
        }
      }
      if (bn >= 0) {
        auto& acc = tape.adjoint_buffer(bn);
        for (std::size_t i = 0; i < n; ++i) {
          const T x = bc == Bcast::AScalar ? (*ad)[0] : (*ad)[i];
          const T y = bc == Bcast::BScalar ? (*bd)[0] : (*bd)[i];
          T da, db;
          bwd(x, y, da, db);
          acc[bc == Bcast::BScalar ? 0 : i] += g[i] * db;
        }
      }
    };
  };
  return make_op_result<T>(op, out_shape, std::move(out), {&a, &b}, make_backward);
}

template <typename T, typename Fwd, typename Bwd>
Tensor<T> unary_op(const char* op, const Tensor<T>& a, Fwd fwd, Bwd bwd) {
  const auto n = static_cast<std::size_t>(a.size());
  std::vector<T> out(n);
  const auto& av = *a.data;
  for (std::size_t i = 0; i < n; ++i) out[i] = fwd(av[i]);
  auto out_copy = std::make_shared<std::vector<T>>(out);
  auto make_backward = [&]() -> typename Tape<T>::BackwardFn {
    auto ad = a.data;
    const auto an = a.node;
    return [ad, an, out_copy, bwd](Tape<T>& tape, const std::vector<T>& g) {
      if (an < 0) return;
      auto& acc = tape.adjoint_buffer(an);
      for (std::size_t i = 0; i < g.size(); ++i) acc[i] += g[i] * bwd((*ad)[i], (*out_copy)[i]);
    };
  };
  return make_op_result<T>(op, a.shape, std::move(out), {&a}, make_backward);
}

}  // namespace detail

template <typename T>
Tensor<T> add(const Tensor<T>& a, const Tensor<T>& b) {
  return detail::binary_op<T>(
      "add", a, b, [](T x, T y) { return x + y; },
      [](T, T, T& da, T& db) { da = T(1); db = T(1); });
}

template <typename T>
Tensor<T> sub(const Tensor<T>& a, const Tensor<T>& b) {
  return detail::binary_op<T>(
      "sub", a, b, [](T x, T y) { return x - y; },
      [](T, T, T& da, T& db) { da = T(1); db = T(-1); });
}

template <typename T>
Tensor<T> mul(const Tensor<T>& a, const Tensor<T>& b) {
  return detail::binary_op<T>(
      "mul", a, b, [](T x, T y) { return x * y; },
      [](T x, T y, T& da, T& db) { da = y; db = x; });
}

template <typename T>
Tensor<T> div(const Tensor<T>& a, const Tensor<T>& b) {
  return detail::binary_op<T>(
      "div", a, b, [](T x, T y) { return x / y; },
      [](T x, T y, T& da, T& db) { da = T(1) / y; db = -x / (y * y); });
}

template <typename T>
Tensor<T> relu(const Tensor<T>& a) {
  return detail::unary_op<T>(
      "relu", a, [](T x) { return x > T(0) ? x : T(0); },
      [](T x, T) { return x > T(0) ? T(1) : T(0); });
}

template <typename T>
Tensor<T> softplus(const Tensor<T>& a) {
  return detail::unary_op<T>(
      "softplus", a, [](T x) { return detail::softplus_scalar(x); },
      [](T x, T) { return detail::sigmoid_scalar(x); });
}

template <typename T>
Tensor<T> sigmoid(const Tensor<T>& a) {
  return detail::unary_op<T>(
      "sigmoid", a, [](T x) { return detail::sigmoid_scalar(x); },
      [](T, T y) { return y * (T(1) - y); });
}

template <typename T>
Tensor<T> exp(const Tensor<T>& a) {
  return detail::unary_op<T>(
      "exp", a, [](T x) { return std::exp(x); }, [](T, T y) { return y; });
}

template <typename T>
Tensor<T> log(const Tensor<T>& a) {
  for (const auto x : *a.data)
    if (!(x > T(0))) throw std::domain_error("log: input must be strictly positive");
  return detail::unary_op<T>(
      "log", a, [](T x) { return std::log(x); }, [](T x, T) { return T(1) / x; });
}

template <typename T>
Tensor<T> neg(const Tensor<T>& a) {
  return detail::unary_op<T>(
      "neg", a, [](T x) { return -x; }, [](T, T) { return T(-1); });
}

template <typename T>
Tensor<T> sqrt(const Tensor<T>& a) {
  for (const auto x : *a.data)
    if (x < T(0)) throw std::domain_error("sqrt: input must be nonnegative");
  return detail::unary_op<T>(
      "sqrt", a, [](T x) { return std::sqrt(x); },
      [](T, T y) { return T(1) / (T(2) * y); });
}

template <typename T>
Tensor<T> elementwise(EwKind kind, const Tensor<T>& a, const Tensor<T>* b = nullptr) {
  const bool needs_b = kind == EwKind::Add || kind == EwKind::Sub || kind == EwKind::Mul ||
                       kind == EwKind::Div;
  if (needs_b && !b) throw std::invalid_argument("elementwise: binary kind requires two operands");
  switch (kind) {
    case EwKind::Add: return add(a, *b);
    case EwKind::Sub: return sub(a, *b);
    case EwKind::Mul: return mul(a, *b);
    case EwKind::Div: return div(a, *b);
    case EwKind::Relu: return relu(a);
    case EwKind::Softplus: return softplus(a);
    case EwKind::Sigmoid: return sigmoid(a);
    case EwKind::Exp: return exp(a);
    case EwKind::Log: return log(a);
    case EwKind::Neg: return neg(a);
    case EwKind::Sqrt: return sqrt(a);
  }
  throw std::logic_error("elementwise: unknown kind");
}

// ---------------------------------------------------------------------------
// Matrix product and layout ops.

template <typename T>
Tensor<T> matmul(const Tensor<T>& a, const Tensor<T>& b) {
  if (a.rank() != 2 || b.rank() != 2)
    throw std::invalid_argument("matmul: expects rank-2 tensors");
  const auto m = a.shape[0], k = a.shape[1], k2 = b.shape[0], n = b.shape[1];
  if (k != k2)
    throw std::invalid_argument("matmul: inner dimensions " + shape_str(a.shape) + " vs " +
                                shape_str(b.shape));
  std::vector<T> out(static_cast<std::size_t>(m * n), T(0));
  const T* av = a.data->data();
  const T* bv = b.data->data();
  for (std::int64_t i = 0; i < m; ++i) {
    T* orow = out.data() + i * n;
    const T* arow = av + i * k;
    for (std::int64_t kk = 0; kk < k; ++kk) {
      const T aik = arow[kk];
      const T* brow = bv + kk * n;
      for (std::int64_t j = 0; j < n; ++j) orow[j] += aik * brow[j];
    }
  }
  auto make_backward = [&]() -> typename Tape<T>::BackwardFn {
    auto ad = a.data;
    auto bd = b.data;
    const auto an = a.node, bn = b.node;
    return [ad, bd, an, bn, m, k, n](Tape<T>& tape, const std::vector<T>& g) {
      if (an >= 0) {
        auto& da = tape.adjoint_buffer(an);  // dA[i,kk] = dot(g[i,:], B[kk,:])
        for (std::int64_t i = 0; i < m; ++i) {
          const T* grow = g.data() + i * n;
          for (std::int64_t kk = 0; kk < k; ++kk) {
            const T* brow = bd->data() + kk * n;
            T acc = T(0);
            for (std::int64_t j = 0; j < n; ++j) acc += grow[j] * brow[j];
            da[static_cast<std::size_t>(i * k + kk)] += acc;
          }
        }
      }
      if (bn >= 0) {
        auto& db = tape.adjoint_buffer(bn);  // dB = A^T * g
        for (std::int64_t kk = 0; kk < k; ++kk)
          for (std::int64_t i = 0; i < m; ++i) {
            const T aik = (*ad)[static_cast<std::size_t>(i * k + kk)];
            const T* grow = g.data() + i * n;
            T* drow = db.data() + kk * n;
            for (std::int64_t j = 0; j < n; ++j) drow[j] += aik * grow[j];
          }
      }
    };
  };
  return detail::make_op_result<T>("matmul", {m, n}, std::move(out), {&a, &b}, make_backward);
}

template <typename T>
Tensor<T> transpose2d(const Tensor<T>& a) {
  if (a.rank() != 2) throw std::invalid_argument("transpose2d: expects rank-2 tensor");
  const auto r = a.shape[0], c = a.shape[1];
  std::vector<T> out(static_cast<std::size_t>(r * c));
  for (std::int64_t i = 0; i < r; ++i)
    for (std::int64_t j = 0; j < c; ++j)
      out[static_cast<std::size_t>(j * r + i)] = (*a.data)[static_cast<std::size_t>(i * c + j)];
  auto make_backward = [&]() -> typename Tape<T>::BackwardFn {
    const auto an = a.node;
    return [an, r, c](Tape<T>& tape, const std::vector<T>& g) {
      if (an < 0) return;
      auto& da = tape.adjoint_buffer(an);
      for (std::int64_t j = 0; j < c; ++j)
        for (std::int64_t i = 0; i < r; ++i)
          da[static_cast<std::size_t>(i * c + j)] += g[static_cast<std::size_t>(j * r + i)];
    };
  };
  return detail::make_op_result<T>("transpose2d", {c, r}, std::move(out), {&a}, make_backward);
}

template <typename T>
Tensor<T> reshape(const Tensor<T>& a, Shape target) {
  if (shape_numel(target) != a.size())
    throw std::invalid_argument("reshape: cannot view " + shape_str(a.shape) + " as " +
                                shape_str(target));
  std::vector<T> out(*a.data);
  auto make_backward = [&]() -> typename Tape<T>::BackwardFn {
    const auto an = a.node;
    return [an](Tape<T>& tape, const std::vector<T>& g) { detail::add_to(tape, an, g); };
  };
  return detail::make_op_result<T>("reshape", std::move(target), std::move(out), {&a},
                                   make_backward);
}

// General axis permutation (copying).
template <typename T>
Tensor<T> permute(const Tensor<T>& a, const std::vector<int>& perm) {
  const auto rank = a.rank();
  if (static_cast<std::int64_t>(perm.size()) != rank)
    throw std::invalid_argument("permute: perm length must equal rank");
  std::vector<bool> seen(perm.size(), false);
  Shape out_shape(perm.size());
  for (std::size_t i = 0; i < perm.size(); ++i) {
    if (perm[i] < 0 || perm[i] >= rank || seen[static_cast<std::size_t>(perm[i])])
      throw std::invalid_argument("permute: invalid permutation");
    seen[static_cast<std::size_t>(perm[i])] = true;
    out_shape[i] = a.shape[static_cast<std::size_t>(perm[i])];
  }
  // Strides of the input, walked in output order.
  std::vector<std::int64_t> in_strides(perm.size(), 1);
  for (std::int64_t i = rank - 2; i >= 0; --i)
    in_strides[static_cast<std::size_t>(i)] =
        in_strides[static_cast<std::size_t>(i + 1)] * a.shape[static_cast<std::size_t>(i + 1)];
  std::vector<std::int64_t> walk(perm.size());
  for (std::size_t i = 0; i < perm.size(); ++i) walk[i] = in_strides[static_cast<std::size_t>(perm[i])];

  const auto n = static_cast<std::size_t>(a.size());
  auto src_index = std::make_shared<std::vector<std::int64_t>>(n);
  std::vector<std::int64_t> idx(perm.size(), 0);
  for (std::size_t flat = 0; flat < n; ++flat) {
    std::int64_t src = 0;
    for (std::size_t d = 0; d < perm.size(); ++d) src += idx[d] * walk[d];
    (*src_index)[flat] = src;
    for (std::int64_t d = rank - 1; d >= 0; --d) {
      auto ud = static_cast<std::size_t>(d);
      if (++idx[ud] < out_shape[ud]) break;
      idx[ud] = 0;
    }
  }
  std::vector<T> out(n);
  for (std::size_t i = 0; i < n; ++i) out[i] = (*a.data)[static_cast<std::size_t>((*src_index)[i])];
  auto make_backward = [&]() -> typename Tape<T>::BackwardFn {
    const auto an = a.node;
    return [an, src_index](Tape<T>& tape, const std::vector<T>& g) {
      if (an < 0) return;
      auto& da = tape.adjoint_buffer(an);
      for (std::size_t i = 0; i < g.size(); ++i)
        da[static_cast<std::size_t>((*src_index)[i])] += g[i];
    };
  };
  return detail::make_op_result<T>("permute", std::move(out_shape), std::move(out), {&a},
                                   make_backward);
}

// Gather by flat index: out[k] = a[idx[k]]. Gradient scatter-adds.
template <typename T>
Tensor<T> take(const Tensor<T>& a, std::vector<std::int64_t> idx, Shape out_shape) {
  if (shape_numel(out_shape) != static_cast<std::int64_t>(idx.size()))
    throw std::invalid_argument("take: output shape does not match index count");
  for (auto i : idx)
    if (i < 0 || i >= a.size()) throw std::invalid_argument("take: index out of range");
  std::vector<T> out(idx.size());
  for (std::size_t k = 0; k < idx.size(); ++k)
    out[k] = (*a.data)[static_cast<std::size_t>(idx[k])];
  auto shared_idx = std::make_shared<std::vector<std::int64_t>>(std::move(idx));
  auto make_backward = [&]() -> typename Tape<T>::BackwardFn {
    const auto an = a.node;
    return [an, shared_idx](Tape<T>& tape, const std::vector<T>& g) {
      if (an < 0) return;
      auto& da = tape.adjoint_buffer(an);
      for (std::size_t k = 0; k < g.size(); ++k)
        da[static_cast<std::size_t>((*shared_idx)[k])] += g[k];
    };
  };
  return detail::make_op_result<T>("take", std::move(out_shape), std::move(out), {&a},
                                   make_backward);
}

// Concatenate matched rows: [a_i, b_i].
template <typename T>
Tensor<T> concat_cols(const Tensor<T>& a, const Tensor<T>& b) {
  if (a.rank() != 2 || b.rank() != 2 || a.shape[0] != b.shape[0])
    throw std::invalid_argument("concat_cols: expects rank-2 tensors with equal row counts");
  const auto rows = a.shape[0], ca = a.shape[1], cb = b.shape[1];
  std::vector<T> out(static_cast<std::size_t>(rows * (ca + cb)));
  for (std::int64_t i = 0; i < rows; ++i) {
    std::copy_n(a.data->data() + i * ca, ca, out.data() + i * (ca + cb));
    std::copy_n(b.data->data() + i * cb, cb, out.data() + i * (ca + cb) + ca);
  }
  auto make_backward = [&]() -> typename Tape<T>::BackwardFn {
    const auto an = a.node, bn = b.node;
    return [an, bn, rows, ca, cb](Tape<T>& tape, const std::vector<T>& g) {
      if (an >= 0) {
        auto& da = tape.adjoint_buffer(an);
        for (std::int64_t i = 0; i < rows; ++i)
          for (std::int64_t j = 0; j < ca; ++j)
            da[static_cast<std::size_t>(i * ca + j)] += g[static_cast<std::size_t>(i * (ca + cb) + j)];
      }
      if (bn >= 0) {
        auto& db = tape.adjoint_buffer(bn);
        for (std::int64_t i = 0; i < rows; ++i)
          for (std::int64_t j = 0; j < cb; ++j)
            db[static_cast<std::size_t>(i * cb + j)] +=
                g[static_cast<std::size_t>(i * (ca + cb) + ca + j)];
      }
    };
  };
  return detail::make_op_result<T>("concat_cols", {rows, ca + cb}, std::move(out), {&a, &b},
                                   make_backward);
}

// All-pairs row concatenation: row (i*Nb + j) of the result is [a_i, b_j].
template <typename T>
Tensor<T> pair_concat(const Tensor<T>& a, const Tensor<T>& b) {
  if (a.rank() != 2 || b.rank() != 2)
    throw std::invalid_argument("pair_concat: expects rank-2 tensors");
  const auto na = a.shape[0], ca = a.shape[1], nb = b.shape[0], cb = b.shape[1];
  std::vector<T> out(static_cast<std::size_t>(na * nb * (ca + cb)));
  for (std::int64_t i = 0; i < na; ++i)
    for (std::int64_t j = 0; j < nb; ++j) {
      T* row = out.data() + (i * nb + j) * (ca + cb);
      std::copy_n(a.data->data() + i * ca, ca, row);
      std::copy_n(b.data->data() + j * cb, cb, row + ca);
    }
  auto make_backward = [&]() -> typename Tape<T>::BackwardFn {
    const auto an = a.node, bn = b.node;
    return [an, bn, na, ca, nb, cb](Tape<T>& tape, const std::vector<T>& g) {
      const auto stride = ca + cb;
      if (an >= 0) {
        auto& da = tape.adjoint_buffer(an);
        for (std::int64_t i = 0; i < na; ++i)
          for (std::int64_t j = 0; j < nb; ++j) {
            const T* row = g.data() + (i * nb + j) * stride;
            for (std::int64_t c = 0; c < ca; ++c) da[static_cast<std::size_t>(i * ca + c)] += row[c];
          }
      }
      if (bn >= 0) {
        auto& db = tape.adjoint_buffer(bn);
        for (std::int64_t i = 0; i < na; ++i)
          for (std::int64_t j = 0; j < nb; ++j) {
            const T* row = g.data() + (i * nb + j) * stride + ca;
            for (std::int64_t c = 0; c < cb; ++c) db[static_cast<std::size_t>(j * cb + c)] += row[c];
          }
      }
    };
  };
  return detail::make_op_result<T>("pair_concat", {na * nb, ca + cb}, std::move(out), {&a, &b},
                                   make_backward);
}

// Row-wise bias add: x[N x F] + b[F].
template <typename T>
Tensor<T> add_bias(const Tensor<T>& x, const Tensor<T>& b) {
  if (x.rank() != 2 || b.rank() != 1 || x.shape[1] != b.shape[0])
    throw std::invalid_argument("add_bias: expects x[N x F] and b[F]");
  const auto rows = x.shape[0], cols = x.shape[1];
  std::vector<T> out(static_cast<std::size_t>(rows * cols));
  for (std::int64_t i = 0; i < rows; ++i)
    for (std::int64_t j = 0; j < cols; ++j)
      out[static_cast<std::size_t>(i * cols + j)] =
          (*x.data)[static_cast<std::size_t>(i * cols + j)] + (*b.data)[static_cast<std::size_t>(j)];
  auto make_backward = [&]() -> typename Tape<T>::BackwardFn {
    const auto xn = x.node, bn = b.node;
    return [xn, bn, rows, cols](Tape<T>& tape, const std::vector<T>& g) {
      if (xn >= 0) detail::add_to(tape, xn, g);
      if (bn >= 0) {
        auto& db = tape.adjoint_buffer(bn);
        for (std::int64_t i = 0; i < rows; ++i)
          for (std::int64_t j = 0; j < cols; ++j)
            db[static_cast<std::size_t>(j)] += g[static_cast<std::size_t>(i * cols + j)];
      }
    };
  };
  return detail::make_op_result<T>("add_bias", x.shape, std::move(out), {&x, &b}, make_backward);
}

// Channel bias add: x[B x C x H x W] + b[C].
template <typename T>
Tensor<T> add_channel_bias(const Tensor<T>& x, const Tensor<T>& b) {
  if (x.rank() != 4 || b.rank() != 1 || x.shape[1] != b.shape[0])
    throw std::invalid_argument("add_channel_bias: expects x[B x C x H x W] and b[C]");
  const auto batch = x.shape[0], ch = x.shape[1], hw = x.shape[2] * x.shape[3];
  std::vector<T> out(*x.data);
  for (std::int64_t n = 0; n < batch; ++n)
    for (std::int64_t c = 0; c < ch; ++c) {
      const T bc = (*b.data)[static_cast<std::size_t>(c)];
      T* px = out.data() + (n * ch + c) * hw;
      for (std::int64_t i = 0; i < hw; ++i) px[i] += bc;
    }
  auto make_backward = [&]() -> typename Tape<T>::BackwardFn {
    const auto xn = x.node, bn = b.node;
    return [xn, bn, batch, ch, hw](Tape<T>& tape, const std::vector<T>& g) {
      if (xn >= 0) detail::add_to(tape, xn, g);
      if (bn >= 0) {
        auto& db = tape.adjoint_buffer(bn);
        for (std::int64_t n = 0; n < batch; ++n)
          for (std::int64_t c = 0; c < ch; ++c) {
            const T* pg = g.data() + (n * ch + c) * hw;
            T acc = T(0);
            for (std::int64_t i = 0; i < hw; ++i) acc += pg[i];
            db[static_cast<std::size_t>(c)] += acc;
          }
      }
    };
  };
  return detail::make_op_result<T>("add_channel_bias", x.shape, std::move(out), {&x, &b},
                                   make_backward);
}

// ---------------------------------------------------------------------------
// Convolution. Direct (nested loop) implementation; spatial output size is
// H' = floor((H + pad_total - kh) / stride) + 1. Same-padding splits the total
// as pad_before = pad_total / 2 (extra pixel goes after).

enum class Pad { Valid, Same };

namespace detail {
inline std::int64_t same_pad_total(std::int64_t in, std::int64_t k, std::int64_t stride) {
  const std::int64_t out = (in + stride - 1) / stride;
  return std::max<std::int64_t>((out - 1) * stride + k - in, 0);
}
}  // namespace detail

template <typename T>
Tensor<T> conv2d(const Tensor<T>& input, const Tensor<T>& kernel, std::int64_t stride, Pad pad) {
  if (input.rank() != 4 || kernel.rank() != 4)
    throw std::invalid_argument("conv2d: expects input[B x Cin x H x W] and kernel[Cout x Cin x kh x kw]");
  if (stride < 1) throw std::invalid_argument("conv2d: stride must be positive");
  const auto batch = input.shape[0], cin = input.shape[1], h = input.shape[2], w = input.shape[3];
  const auto cout = kernel.shape[0], kc = kernel.shape[1], kh = kernel.shape[2], kw = kernel.shape[3];
  if (kc != cin) throw std::invalid_argument("conv2d: kernel channel count mismatch");
  const std::int64_t pad_h = pad == Pad::Same ? detail::same_pad_total(h, kh, stride) : 0;
  const std::int64_t pad_w = pad == Pad::Same ? detail::same_pad_total(w, kw, stride) : 0;
  if (kh > h + pad_h || kw > w + pad_w)
    throw std::invalid_argument("conv2d: kernel larger than padded input");
  const std::int64_t top = pad_h / 2, left = pad_w / 2;
  const std::int64_t oh = (h + pad_h - kh) / stride + 1;
  const std::int64_t ow = (w + pad_w - kw) / stride + 1;

  // Direct convolution through a per-pixel patch buffer: the receptive field
  // of one output location is gathered into a contiguous vector (zero-filled
  // at the padding), so each output channel reduces to one contiguous dot
  // product against its kernel row.
  const auto patch_len = static_cast<std::size_t>(cin * kh * kw);
  auto gather_patch = [&](const T* in_image, std::int64_t y, std::int64_t x, T* patch) {
    std::size_t p = 0;
    for (std::int64_t ci = 0; ci < cin; ++ci)
      for (std::int64_t ky = 0; ky < kh; ++ky) {
        const std::int64_t iy = y * stride - top + ky;
        if (iy < 0 || iy >= h) {
          for (std::int64_t kx = 0; kx < kw; ++kx) patch[p++] = T(0);
          continue;
        }
        const T* in_row = in_image + (ci * h + iy) * w;
        for (std::int64_t kx = 0; kx < kw; ++kx) {
          const std::int64_t ix = x * stride - left + kx;
          patch[p++] = (ix < 0 || ix >= w) ? T(0) : in_row[ix];
        }
      }
  };

  std::vector<T> out(static_cast<std::size_t>(batch * cout * oh * ow), T(0));
  const T* in = input.data->data();
  const T* ker = kernel.data->data();
  {
    std::vector<T> patch(patch_len);
    for (std::int64_t n = 0; n < batch; ++n) {
      const T* in_image = in + n * cin * h * w;
      for (std::int64_t y = 0; y < oh; ++y)
        for (std::int64_t x = 0; x < ow; ++x) {
          gather_patch(in_image, y, x, patch.data());
          for (std::int64_t co = 0; co < cout; ++co) {
            const T* krow = ker + co * static_cast<std::int64_t>(patch_len);
            T acc = T(0);
            for (std::size_t p = 0; p < patch_len; ++p) acc += krow[p] * patch[p];
            out[static_cast<std::size_t>(((n * cout + co) * oh + y) * ow + x)] = acc;
          }
        }
    }
  }

  auto make_backward = [&]() -> typename Tape<T>::BackwardFn {
    auto ind = input.data;
    auto kd = kernel.data;
    const auto inode = input.node, knode = kernel.node;
    return [=](Tape<T>& tape, const std::vector<T>& g) {
      std::vector<T>* din = inode >= 0 ? &tape.adjoint_buffer(inode) : nullptr;
      std::vector<T>* dker = knode >= 0 ? &tape.adjoint_buffer(knode) : nullptr;
      if (!din && !dker) return;
      std::vector<T> patch(patch_len), dpatch(patch_len);
      for (std::int64_t n = 0; n < batch; ++n) {
        const T* in_image = ind->data() + n * cin * h * w;
        for (std::int64_t y = 0; y < oh; ++y)
          for (std::int64_t x = 0; x < ow; ++x) {
            if (dker) {
              std::size_t p = 0;
              for (std::int64_t ci = 0; ci < cin; ++ci)
                for (std::int64_t ky = 0; ky < kh; ++ky) {
                  const std::int64_t iy = y * stride - top + ky;
                  const T* in_row = in_image + (ci * h + iy) * w;
                  for (std::int64_t kx = 0; kx < kw; ++kx) {
                    const std::int64_t ix = x * stride - left + kx;
                    patch[p++] = (iy < 0 || iy >= h || ix < 0 || ix >= w) ? T(0) : in_row[ix];
                  }
                }
            }
            if (din) std::fill(dpatch.begin(), dpatch.end(), T(0));
            for (std::int64_t co = 0; co < cout; ++co) {
              const T gv = g[static_cast<std::size_t>(((n * cout + co) * oh + y) * ow + x)];
              if (gv == T(0)) continue;
              const std::int64_t row = co * static_cast<std::int64_t>(patch_len);
              if (dker) {
                T* dkrow = dker->data() + row;
                for (std::size_t p = 0; p < patch_len; ++p) dkrow[p] += gv * patch[p];
              }
              if (din) {
                const T* krow = kd->data() + row;
                for (std::size_t p = 0; p < patch_len; ++p) dpatch[p] += gv * krow[p];
              }
            }
            if (din) {
              // Scatter the patch adjoint back to the input locations.
              std::size_t p = 0;
              T* din_image = din->data() + n * cin * h * w;
              for (std::int64_t ci = 0; ci < cin; ++ci)
                for (std::int64_t ky = 0; ky < kh; ++ky) {
                  const std::int64_t iy = y * stride - top + ky;
                  for (std::int64_t kx = 0; kx < kw; ++kx, ++p) {
                    const std::int64_t ix = x * stride - left + kx;
                    if (iy < 0 || iy >= h || ix < 0 || ix >= w) continue;
                    din_image[(ci * h + iy) * w + ix] += dpatch[p];
                  }
                }
            }
          }
      }
    };
  };
  return detail::make_op_result<T>("conv2d", {batch, cout, oh, ow}, std::move(out),
                                   {&input, &kernel}, make_backward);
}

// ---------------------------------------------------------------------------
// Reductions. With no axis the whole tensor reduces to a scalar (shape []).
// logsumexp is computed as m + log(sum exp(a - m)); max breaks ties toward the
// first maximal index so the subgradient is deterministic.

enum class ReduceKind { Sum, Mean, LogSumExp, Max };

namespace detail {

// Decompose shape around `axis` as [outer, n, inner].
inline void axis_split(const Shape& s, int axis, std::int64_t& outer, std::int64_t& n,
                       std::int64_t& inner) {
  outer = 1;
  inner = 1;
  for (int i = 0; i < axis; ++i) outer *= s[static_cast<std::size_t>(i)];
  n = s[static_cast<std::size_t>(axis)];
  for (std::size_t i = static_cast<std::size_t>(axis) + 1; i < s.size(); ++i) inner *= s[i];
}

}  // namespace detail

template <typename T>
Tensor<T> reduce(ReduceKind kind, const Tensor<T>& a, std::optional<int> axis = std::nullopt) {
  if (a.size() == 0) throw std::invalid_argument("reduce: empty tensor");
  std::int64_t outer = 1, n = a.size(), inner = 1;
  Shape out_shape;
  if (axis) {
    if (*axis < 0 || *axis >= a.rank()) throw std::invalid_argument("reduce: axis out of range");
    if (a.shape[static_cast<std::size_t>(*axis)] == 0)
      throw std::invalid_argument("reduce: empty reduction axis");
    detail::axis_split(a.shape, *axis, outer, n, inner);
    out_shape = a.shape;
    out_shape.erase(out_shape.begin() + *axis);
  }
  const auto groups = static_cast<std::size_t>(outer * inner);
  std::vector<T> out(groups);
  const auto& av = *a.data;
  auto element = [&](std::int64_t o, std::int64_t i, std::int64_t idx) {
    return av[static_cast<std::size_t>((o * n + idx) * inner + i)];
  };

  auto argmax_store = std::make_shared<std::vector<std::int64_t>>();
  if (kind == ReduceKind::Max) argmax_store->resize(groups);

  for (std::int64_t o = 0; o < outer; ++o)
    for (std::int64_t i = 0; i < inner; ++i) {
      const auto gidx = static_cast<std::size_t>(o * inner + i);
      switch (kind) {
        case ReduceKind::Sum:
        case ReduceKind::Mean: {
          T acc = T(0);
          for (std::int64_t k = 0; k < n; ++k) acc += element(o, i, k);
          out[gidx] = kind == ReduceKind::Mean ? acc / static_cast<T>(n) : acc;
          break;
        }
        case ReduceKind::LogSumExp: {
          T m = element(o, i, 0);
          for (std::int64_t k = 1; k < n; ++k) m = std::max(m, element(o, i, k));
          T acc = T(0);
          for (std::int64_t k = 0; k < n; ++k) acc += std::exp(element(o, i, k) - m);
          out[gidx] = m + std::log(acc);
          break;
        }
        case ReduceKind::Max: {
          T m = element(o, i, 0);
          std::int64_t arg = 0;
          for (std::int64_t k = 1; k < n; ++k) {
            const T v = element(o, i, k);
            if (v > m) {
              m = v;
              arg = k;
            }
          }
          out[gidx] = m;
          (*argmax_store)[gidx] = arg;
          break;
        }
      }
    }

  auto out_copy = std::make_shared<std::vector<T>>(out);
  auto make_backward = [&]() -> typename Tape<T>::BackwardFn {
    auto ad = a.data;
    const auto an = a.node;
    return [=](Tape<T>& tape, const std::vector<T>& g) {
      if (an < 0) return;
      auto& da = tape.adjoint_buffer(an);
      for (std::int64_t o = 0; o < outer; ++o)
        for (std::int64_t i = 0; i < inner; ++i) {
          const auto gidx = static_cast<std::size_t>(o * inner + i);
          const T go = g[gidx];
          switch (kind) {
            case ReduceKind::Sum:
              for (std::int64_t k = 0; k < n; ++k)
                da[static_cast<std::size_t>((o * n + k) * inner + i)] += go;
              break;
            case ReduceKind::Mean:
              for (std::int64_t k = 0; k < n; ++k)
                da[static_cast<std::size_t>((o * n + k) * inner + i)] += go / static_cast<T>(n);
              break;
            case ReduceKind::LogSumExp: {
              const T lse = (*out_copy)[gidx];
              for (std::int64_t k = 0; k < n; ++k) {
                const auto src = static_cast<std::size_t>((o * n + k) * inner + i);
                da[src] += go * std::exp((*ad)[src] - lse);
              }
              break;
            }
            case ReduceKind::Max: {
              const auto src =
                  static_cast<std::size_t>((o * n + (*argmax_store)[gidx]) * inner + i);
              da[src] += go;
              break;
            }
          }
        }
    };
  };
  return detail::make_op_result<T>("reduce", std::move(out_shape), std::move(out), {&a},
                                   make_backward);
}

template <typename T>
Tensor<T> sum(const Tensor<T>& a, std::optional<int> axis = std::nullopt) {
  return reduce(ReduceKind::Sum, a, axis);
}
template <typename T>
Tensor<T> mean(const Tensor<T>& a, std::optional<int> axis = std::nullopt) {
  return reduce(ReduceKind::Mean, a, axis);
}
template <typename T>
Tensor<T> logsumexp(const Tensor<T>& a, std::optional<int> axis = std::nullopt) {
  return reduce(ReduceKind::LogSumExp, a, axis);
}
template <typename T>
Tensor<T> reduce_max(const Tensor<T>& a, std::optional<int> axis = std::nullopt) {
  return reduce(ReduceKind::Max, a, axis);
}

// Row-wise layer normalization without affine parameters (biased variance).
template <typename T>
Tensor<T> layer_norm_rows(const Tensor<T>& x, T eps) {
  if (x.rank() != 2) throw std::invalid_argument("layer_norm_rows: expects rank-2 tensor");
  const auto rows = x.shape[0], cols = x.shape[1];
  std::vector<T> out(static_cast<std::size_t>(rows * cols));
  auto inv_sigma = std::make_shared<std::vector<T>>(static_cast<std::size_t>(rows));
  for (std::int64_t i = 0; i < rows; ++i) {
    const T* px = x.data->data() + i * cols;
    T m = T(0);
    for (std::int64_t j = 0; j < cols; ++j) m += px[j];
    m /= static_cast<T>(cols);
    T var = T(0);
    for (std::int64_t j = 0; j < cols; ++j) var += (px[j] - m) * (px[j] - m);
    var /= static_cast<T>(cols);
    const T is = T(1) / std::sqrt(var + eps);
    (*inv_sigma)[static_cast<std::size_t>(i)] = is;
    for (std::int64_t j = 0; j < cols; ++j)
      out[static_cast<std::size_t>(i * cols + j)] = (px[j] - m) * is;
  }
  auto y = std::make_shared<std::vector<T>>(out);
  auto make_backward = [&]() -> typename Tape<T>::BackwardFn {
    const auto xn = x.node;
    return [xn, y, inv_sigma, rows, cols](Tape<T>& tape, const std::vector<T>& g) {
      if (xn < 0) return;
      auto& dx = tape.adjoint_buffer(xn);
      for (std::int64_t i = 0; i < rows; ++i) {
        const T* gi = g.data() + i * cols;
        const T* yi = y->data() + i * cols;
        T gmean = T(0), gymean = T(0);
        for (std::int64_t j = 0; j < cols; ++j) {
          gmean += gi[j];
          gymean += gi[j] * yi[j];
        }
        gmean /= static_cast<T>(cols);
        gymean /= static_cast<T>(cols);
        const T is = (*inv_sigma)[static_cast<std::size_t>(i)];
        for (std::int64_t j = 0; j < cols; ++j)
          dx[static_cast<std::size_t>(i * cols + j)] += is * (gi[j] - gmean - yi[j] * gymean);
      }
    };
  };
  return detail::make_op_result<T>("layer_norm_rows", x.shape, std::move(out), {&x}, make_backward);
}

template <typename T>
T value(const Tensor<T>& t) {
  if (t.size() != 1) throw std::invalid_argument("value: tensor is not scalar");
  return (*t.data)[0];
}

// Convenience: scale by a plain constant.
template <typename T>
Tensor<T> scale(const Tensor<T>& t, T factor) {
  return mul(t, Tensor<T>::scalar(factor));
}

}  // namespace infomax
