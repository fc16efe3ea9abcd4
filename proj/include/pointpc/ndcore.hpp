#pragma once

// Dense row-major float64 arrays and a reverse-mode tape over them.

#include <algorithm>
#include <cmath>
#include <cstddef>
#include <deque>
#include <functional>
#include <initializer_list>
#include <limits>
#include <numeric>
#include <optional>
#include <span>
#include <sstream>
#include <string>
#include <utility>
#include <vector>

#include "pointpc/errors.hpp"

namespace pointpc::nd {

using Shape = std::vector<std::size_t>;

inline std::size_t element_count(const Shape& shape) {
  return std::accumulate(shape.begin(), shape.end(), std::size_t{1}, std::multiplies<>());
}

inline std::string shape_string(const Shape& shape) {
  std::ostringstream os;
  os << '[';
  for (std::size_t i = 0; i < shape.size(); ++i) os << (i ? "x" : "") << shape[i];
  os << ']';
  return os.str();
}

class Array {
 public:
  /// Rank-0 array holding 0.
  Array() : data_(1, 0.0) {}

  explicit Array(Shape shape, double fill = 0.0)
      : shape_(std::move(shape)), data_(element_count(shape_), fill) {}

  Array(Shape shape, std::vector<double> data) : shape_(std::move(shape)), data_(std::move(data)) {
    if (element_count(shape_) != data_.size()) {
      throw ContractError("Array: shape " + shape_string(shape_) + " does not match " +
                          std::to_string(data_.size()) + " elements");
    }
  }

  static Array scalar(double v) { return Array(Shape{}, std::vector<double>{v}); }
  static Array vector(std::vector<double> v) {
    const std::size_t n = v.size();
    return Array(Shape{n}, std::move(v));
  }
  static Array matrix(std::initializer_list<std::initializer_list<double>> rows) {
    const std::size_t r = rows.size();
    const std::size_t c = r ? rows.begin()->size() : 0;
    std::vector<double> data;
    data.reserve(r * c);
    for (const auto& row : rows) {
      if (row.size() != c) throw ContractError("Array::matrix: ragged rows");
      data.insert(data.end(), row.begin(), row.end());
    }
    return Array(Shape{r, c}, std::move(data));
  }
  static Array identity(std::size_t n) {
    Array out(Shape{n, n});
    for (std::size_t i = 0; i < n; ++i) out.data_[i * n + i] = 1.0;
    return out;
  }

  const Shape& shape() const { return shape_; }
  std::size_t rank() const { return shape_.size(); }
  std::size_t extent(std::size_t axis) const { return shape_.at(axis); }
  std::size_t size() const { return data_.size(); }

  std::span<const double> data() const { return data_; }
  std::span<double> data() { return data_; }
  const std::vector<double>& values() const { return data_; }

  double operator[](std::size_t i) const { return data_[i]; }
  double& operator[](std::size_t i) { return data_[i]; }
  double operator()(std::size_t r, std::size_t c) const { return data_[r * shape_[1] + c]; }
  double& operator()(std::size_t r, std::size_t c) { return data_[r * shape_[1] + c]; }

  double item() const {
    if (data_.size() != 1) throw ContractError("Array::item: array has " + std::to_string(data_.size()) + " elements");
    return data_[0];
  }

  Array reshaped(Shape shape) const { return Array(std::move(shape), data_); }

  bool operator==(const Array&) const = default;

 private:
  Shape shape_;
  std::vector<double> data_;
};

using NodeId = std::size_t;
class Tape;

class Var {
 public:
  Var() = default;
  Var(Tape* tape, NodeId id) : tape_(tape), id_(id) {}

  const Array& value() const;
  const Shape& shape() const { return value().shape(); }
  double item() const { return value().item(); }
  NodeId id() const { return id_; }
  Tape& tape() const { return *tape_; }
  bool valid() const { return tape_ != nullptr; }

 private:
  Tape* tape_ = nullptr;
  NodeId id_ = 0;
};

/// Append-only record of array operations. Node ids are assigned in creation order,
/// so inputs always precede outputs and the reverse sweep is a simple countdown.
class Tape {
 public:
  using BackwardFn = std::function<void(Tape&, NodeId)>;

  Tape() = default;
  Tape(const Tape&) = delete;
  Tape& operator=(const Tape&) = delete;

  Var leaf(Array value) { return push(std::move(value), {}, nullptr, true); }
  Var constant(Array value) { return push(std::move(value), {}, nullptr, false); }

  /// Records an operation. The node participates in differentiation iff one of its
  /// inputs does; otherwise the backward closure is dropped.
  Var record(Array value, std::vector<NodeId> inputs, BackwardFn backward) {
    bool needs = false;
    for (NodeId in : inputs) needs = needs || nodes_[in].requires_grad;
    if (!needs) backward = nullptr;
    return push(std::move(value), std::move(inputs), std::move(backward), needs);
  }

  std::size_t size() const { return nodes_.size(); }
  const Array& value(NodeId id) const { return nodes_[id].value; }
  bool requires_grad(NodeId id) const { return nodes_[id].requires_grad; }

  /// Gradient flowing into `id` during the reverse sweep.
  const Array& upstream(NodeId id) const { return grads_[id]; }

  /// Accumulation buffer for an input, or nullptr when that input is a constant.
  Array* grad_target(NodeId id) {
    if (!nodes_[id].requires_grad) return nullptr;
    ensure_grad(id);
    return &grads_[id];
  }

  void backward(Var root) {
    if (root.value().size() != 1) {
      throw ContractError("backward: root must be scalar, got shape " + shape_string(root.shape()));
    }
    backward(root, Array(root.shape(), 1.0));
  }

  /// Reverse sweep seeded with an explicit upstream gradient for a non-scalar root.
  void backward(Var root, const Array& seed) {
    if (&root.tape() != this) throw ContractError("backward: root belongs to another tape");
    if (seed.shape() != root.shape()) throw ContractError("backward: seed shape mismatch");
    grads_.assign(nodes_.size(), Array());
    has_grad_.assign(nodes_.size(), false);
    if (!nodes_[root.id()].requires_grad) return;
    grads_[root.id()] = seed;
    has_grad_[root.id()] = true;
    for (NodeId id = root.id() + 1; id-- > 0;) {
      if (!has_grad_[id] || !nodes_[id].backward) continue;
      nodes_[id].backward(*this, id);
    }
  }

  /// Gradient of the last backward root w.r.t. `v`; zeros when `v` was not reached.
  Array grad(Var v) const {
    if (v.id() < has_grad_.size() && has_grad_[v.id()]) return grads_[v.id()];
    return Array(v.shape(), 0.0);
  }

 private:
  struct Node {
    Array value;
    std::vector<NodeId> inputs;
    BackwardFn backward;
    bool requires_grad = false;
  };

  Var push(Array value, std::vector<NodeId> inputs, BackwardFn backward, bool requires_grad) {
    nodes_.push_back(Node{std::move(value), std::move(inputs), std::move(backward), requires_grad});
    return Var(this, nodes_.size() - 1);
  }

  void ensure_grad(NodeId id) {
    if (!has_grad_[id]) {
      grads_[id] = Array(nodes_[id].value.shape(), 0.0);
      has_grad_[id] = true;
    }
  }

  std::deque<Node> nodes_;
  std::deque<Array> grads_;
  std::deque<bool> has_grad_;
};

inline const Array& Var::value() const { return tape_->value(id_); }

namespace detail {

inline Tape& common_tape(const Var& a, const Var& b) {
  if (!a.valid() || !b.valid() || &a.tape() != &b.tape()) {
    throw ContractError("operands live on different tapes");
  }
  return a.tape();
}

inline void require_same_shape(const Var& a, const Var& b, const char* op) {
  if (a.shape() != b.shape()) {
    throw ContractError(std::string(op) + ": shape mismatch " + shape_string(a.shape()) + " vs " +
                        shape_string(b.shape()));
  }
}

inline void require_rank(const Var& a, std::size_t rank, const char* op) {
  if (a.value().rank() != rank) {
    throw ContractError(std::string(op) + ": expected rank " + std::to_string(rank) + ", got " +
                        shape_string(a.shape()));
  }
}

template <typename Fwd, typename Deriv>
Var unary(const Var& a, Fwd fwd, Deriv deriv) {
  const Array& av = a.value();
  Array out(av.shape());
  for (std::size_t i = 0; i < av.size(); ++i) out[i] = fwd(av[i]);
  const NodeId ai = a.id();
  return a.tape().record(std::move(out), {ai}, [ai, deriv](Tape& t, NodeId self) {
    if (Array* ga = t.grad_target(ai)) {
      const Array& x = t.value(ai);
      const Array& y = t.value(self);
      const Array& g = t.upstream(self);
      for (std::size_t i = 0; i < x.size(); ++i) (*ga)[i] += g[i] * deriv(x[i], y[i]);
    }
  });
}

}  // namespace detail

inline Var matmul(const Var& a, const Var& b) {
  Tape& t = detail::common_tape(a, b);
  detail::require_rank(a, 2, "matmul");
  detail::require_rank(b, 2, "matmul");
  const Array& av = a.value();
  const Array& bv = b.value();
  const std::size_t m = av.extent(0), k = av.extent(1), n = bv.extent(1);
  if (bv.extent(0) != k) {
    throw ContractError("matmul: inner extents differ " + shape_string(av.shape()) + " x " + shape_string(bv.shape()));
  }
  Array out(Shape{m, n});
  const double* A = av.data().data();
  const double* B = bv.data().data();
  double* C = out.data().data();
  for (std::size_t i = 0; i < m; ++i) {
    double* crow = C + i * n;
    for (std::size_t p = 0; p < k; ++p) {
      const double aip = A[i * k + p];
      if (aip == 0.0) continue;
      const double* brow = B + p * n;
      for (std::size_t j = 0; j < n; ++j) crow[j] += aip * brow[j];
    }
  }
  const NodeId ai = a.id(), bi = b.id();
  return t.record(std::move(out), {ai, bi}, [ai, bi, m, k, n](Tape& tp, NodeId self) {
    const double* G = tp.upstream(self).data().data();
    if (Array* ga = tp.grad_target(ai)) {
      const double* B = tp.value(bi).data().data();
      double* dA = ga->data().data();
      for (std::size_t i = 0; i < m; ++i) {
        const double* grow = G + i * n;
        for (std::size_t p = 0; p < k; ++p) {
          const double* brow = B + p * n;
          double acc = 0.0;
          for (std::size_t j = 0; j < n; ++j) acc += grow[j] * brow[j];
          dA[i * k + p] += acc;
        }
      }
    }
    if (Array* gb = tp.grad_target(bi)) {
      const double* A = tp.value(ai).data().data();
      double* dB = gb->data().data();
      for (std::size_t i = 0; i < m; ++i) {
        const double* grow = G + i * n;
        for (std::size_t p = 0; p < k; ++p) {
          const double aip = A[i * k + p];
          if (aip == 0.0) continue;
          double* drow = dB + p * n;
          for (std::size_t j = 0; j < n; ++j) drow[j] += aip * grow[j];
        }
      }
    }
  });
}

inline Var add(const Var& a, const Var& b) {
  Tape& t = detail::common_tape(a, b);
  detail::require_same_shape(a, b, "add");
  Array out = a.value();
  const Array& bv = b.value();
  for (std::size_t i = 0; i < out.size(); ++i) out[i] += bv[i];
  const NodeId ai = a.id(), bi = b.id();
  return t.record(std::move(out), {ai, bi}, [ai, bi](Tape& tp, NodeId self) {
    const Array& g = tp.upstream(self);
    for (NodeId in : {ai, bi}) {
      if (Array* gi = tp.grad_target(in)) {
        for (std::size_t i = 0; i < g.size(); ++i) (*gi)[i] += g[i];
      }
    }
  });
}

inline Var sub(const Var& a, const Var& b) {
  Tape& t = detail::common_tape(a, b);
  detail::require_same_shape(a, b, "sub");
  Array out = a.value();
  const Array& bv = b.value();
  for (std::size_t i = 0; i < out.size(); ++i) out[i] -= bv[i];
  const NodeId ai = a.id(), bi = b.id();
  return t.record(std::move(out), {ai, bi}, [ai, bi](Tape& tp, NodeId self) {
    const Array& g = tp.upstream(self);
    if (Array* ga = tp.grad_target(ai)) {
      for (std::size_t i = 0; i < g.size(); ++i) (*ga)[i] += g[i];
    }
    if (Array* gb = tp.grad_target(bi)) {
      for (std::size_t i = 0; i < g.size(); ++i) (*gb)[i] -= g[i];
    }
  });
}

inline Var mul(const Var& a, const Var& b) {
  Tape& t = detail::common_tape(a, b);
  detail::require_same_shape(a, b, "mul");
  Array out = a.value();
  const Array& bv = b.value();
  for (std::size_t i = 0; i < out.size(); ++i) out[i] *= bv[i];
  const NodeId ai = a.id(), bi = b.id();
  return t.record(std::move(out), {ai, bi}, [ai, bi](Tape& tp, NodeId self) {
    const Array& g = tp.upstream(self);
    if (Array* ga = tp.grad_target(ai)) {
      const Array& bv = tp.value(bi);
      for (std::size_t i = 0; i < g.size(); ++i) (*ga)[i] += g[i] * bv[i];
    }
    if (Array* gb = tp.grad_target(bi)) {
      const Array& av = tp.value(ai);
      for (std::size_t i = 0; i < g.size(); ++i) (*gb)[i] += g[i] * av[i];
    }
  });
}

inline Var div(const Var& a, const Var& b) {
  Tape& t = detail::common_tape(a, b);
  detail::require_same_shape(a, b, "div");
  const Array& bv = b.value();
  for (std::size_t i = 0; i < bv.size(); ++i) {
    if (bv[i] == 0.0) throw DomainError("div: zero denominator at index " + std::to_string(i));
  }
  Array out = a.value();
  for (std::size_t i = 0; i < out.size(); ++i) out[i] /= bv[i];
  const NodeId ai = a.id(), bi = b.id();
  return t.record(std::move(out), {ai, bi}, [ai, bi](Tape& tp, NodeId self) {
    const Array& g = tp.upstream(self);
    const Array& bv = tp.value(bi);
    if (Array* ga = tp.grad_target(ai)) {
      for (std::size_t i = 0; i < g.size(); ++i) (*ga)[i] += g[i] / bv[i];
    }
    if (Array* gb = tp.grad_target(bi)) {
      const Array& y = tp.value(self);
      for (std::size_t i = 0; i < g.size(); ++i) (*gb)[i] -= g[i] * y[i] / bv[i];
    }
  });
}

inline Var neg(const Var& a) {
  return detail::unary(a, [](double x) { return -x; }, [](double, double) { return -1.0; });
}

inline Var exp(const Var& a) {
  return detail::unary(a, [](double x) { return std::exp(x); }, [](double, double y) { return y; });
}

inline Var log(const Var& a) {
  const Array& av = a.value();
  for (std::size_t i = 0; i < av.size(); ++i) {
    if (!(av[i] > 0.0)) throw DomainError("log: non-positive input at index " + std::to_string(i));
  }
  return detail::unary(a, [](double x) { return std::log(x); }, [](double x, double) { return 1.0 / x; });
}

/// Subgradient at exactly 0 is 0.
inline Var relu(const Var& a) {
  return detail::unary(a, [](double x) { return x > 0.0 ? x : 0.0; },
                       [](double x, double) { return x > 0.0 ? 1.0 : 0.0; });
}

inline Var scale(const Var& a, double factor) {
  return detail::unary(a, [factor](double x) { return x * factor; },
                       [factor](double, double) { return factor; });
}

enum class Elementwise { add, sub, mul, div, exp, log, relu, neg };

inline Var elementwise(Elementwise op, const Var& a, std::optional<Var> b = std::nullopt) {
  const bool binary = op == Elementwise::add || op == Elementwise::sub || op == Elementwise::mul ||
                      op == Elementwise::div;
  if (binary != b.has_value()) throw ContractError("elementwise: wrong operand count");
  switch (op) {
    case Elementwise::add: return add(a, *b);
    case Elementwise::sub: return sub(a, *b);
    case Elementwise::mul: return mul(a, *b);
    case Elementwise::div: return div(a, *b);
    case Elementwise::exp: return exp(a);
    case Elementwise::log: return log(a);
    case Elementwise::relu: return relu(a);
    case Elementwise::neg: return neg(a);
  }
  throw ContractError("elementwise: unknown op");
}

/// a[m x n] + bias[n] broadcast over rows.
inline Var add_bias(const Var& a, const Var& bias) {
  Tape& t = detail::common_tape(a, bias);
  detail::require_rank(a, 2, "add_bias");
  detail::require_rank(bias, 1, "add_bias");
  const std::size_t m = a.value().extent(0), n = a.value().extent(1);
  if (bias.value().extent(0) != n) throw ContractError("add_bias: bias length mismatch");
  Array out = a.value();
  const Array& bv = bias.value();
  for (std::size_t i = 0; i < m; ++i)
    for (std::size_t j = 0; j < n; ++j) out[i * n + j] += bv[j];
  const NodeId ai = a.id(), bi = bias.id();
  return t.record(std::move(out), {ai, bi}, [ai, bi, m, n](Tape& tp, NodeId self) {
    const Array& g = tp.upstream(self);
    if (Array* ga = tp.grad_target(ai)) {
      for (std::size_t i = 0; i < g.size(); ++i) (*ga)[i] += g[i];
    }
    if (Array* gb = tp.grad_target(bi)) {
      for (std::size_t i = 0; i < m; ++i)
        for (std::size_t j = 0; j < n; ++j) (*gb)[j] += g[i * n + j];
    }
  });
}

enum class Reduction { sum, mean, max };

/// Reduces over `axis`, or over every element when no axis is given. Max routes
/// the gradient to the first argmax in iteration order.
inline Var reduce(Reduction op, const Var& a, std::optional<std::size_t> axis = std::nullopt) {
  const Array& av = a.value();
  std::size_t outer = 1, len = av.size(), inner = 1;
  Shape out_shape;
  if (axis) {
    if (*axis >= av.rank()) throw ContractError("reduce: axis " + std::to_string(*axis) + " out of range");
    for (std::size_t d = 0; d < *axis; ++d) outer *= av.extent(d);
    len = av.extent(*axis);
    for (std::size_t d = *axis + 1; d < av.rank(); ++d) inner *= av.extent(d);
    out_shape = av.shape();
    out_shape.erase(out_shape.begin() + static_cast<std::ptrdiff_t>(*axis));
  }
  if (len == 0 && op != Reduction::sum) throw ContractError("reduce: empty reduction axis");

  Array out(out_shape);
  std::vector<std::size_t> argmax;
  if (op == Reduction::max) argmax.assign(outer * inner, 0);
  for (std::size_t o = 0; o < outer; ++o) {
    for (std::size_t in = 0; in < inner; ++in) {
      const std::size_t base = o * len * inner + in;
      double acc = op == Reduction::max ? -std::numeric_limits<double>::infinity() : 0.0;
      std::size_t best = 0;
      for (std::size_t l = 0; l < len; ++l) {
        const double v = av[base + l * inner];
        if (op == Reduction::max) {
          if (v > acc) {
            acc = v;
            best = l;
          }
        } else {
          acc += v;
        }
      }
      if (op == Reduction::mean) acc /= static_cast<double>(len);
      out[o * inner + in] = acc;
      if (op == Reduction::max) argmax[o * inner + in] = best;
    }
  }
  const NodeId ai = a.id();
  return a.tape().record(std::move(out), {ai}, [ai, op, outer, len, inner, argmax = std::move(argmax)](Tape& tp, NodeId self) {
    Array* ga = tp.grad_target(ai);
    if (!ga) return;
    const Array& g = tp.upstream(self);
    const double w = op == Reduction::mean ? 1.0 / static_cast<double>(len) : 1.0;
    for (std::size_t o = 0; o < outer; ++o) {
      for (std::size_t in = 0; in < inner; ++in) {
        const std::size_t base = o * len * inner + in;
        const double gv = g[o * inner + in];
        if (op == Reduction::max) {
          (*ga)[base + argmax[o * inner + in] * inner] += gv;
        } else {
          for (std::size_t l = 0; l < len; ++l) (*ga)[base + l * inner] += gv * w;
        }
      }
    }
  });
}

inline Var sum(const Var& a, std::optional<std::size_t> axis = std::nullopt) { return reduce(Reduction::sum, a, axis); }
inline Var mean(const Var& a, std::optional<std::size_t> axis = std::nullopt) { return reduce(Reduction::mean, a, axis); }
inline Var max(const Var& a, std::optional<std::size_t> axis = std::nullopt) { return reduce(Reduction::max, a, axis); }

/// v / ||v|| over all elements.
inline Var l2_normalize(const Var& v) {
  const Array& x = v.value();
  double sq = 0.0;
  for (double e : x.data()) sq += e * e;
  const double norm = std::sqrt(sq);
  if (!(norm > 0.0)) throw DomainError("l2_normalize: zero vector");
  Array out = x;
  for (double& e : out.data()) e /= norm;
  const NodeId vi = v.id();
  return v.tape().record(std::move(out), {vi}, [vi, norm](Tape& tp, NodeId self) {
    Array* gv = tp.grad_target(vi);
    if (!gv) return;
    const Array& y = tp.value(self);
    const Array& g = tp.upstream(self);
    double dot = 0.0;
    for (std::size_t i = 0; i < y.size(); ++i) dot += y[i] * g[i];
    for (std::size_t i = 0; i < y.size(); ++i) (*gv)[i] += (g[i] - y[i] * dot) / norm;
  });
}

/// Row-wise l2 normalization of a[m x d].
inline Var normalize_rows(const Var& a) {
  detail::require_rank(a, 2, "normalize_rows");
  const Array& x = a.value();
  const std::size_t m = x.extent(0), d = x.extent(1);
  std::vector<double> norms(m);
  Array out = x;
  for (std::size_t r = 0; r < m; ++r) {
    double sq = 0.0;
    for (std::size_t c = 0; c < d; ++c) sq += x[r * d + c] * x[r * d + c];
    norms[r] = std::sqrt(sq);
    if (!(norms[r] > 0.0)) throw DomainError("normalize_rows: zero row " + std::to_string(r));
    for (std::size_t c = 0; c < d; ++c) out[r * d + c] /= norms[r];
  }
  const NodeId ai = a.id();
  return a.tape().record(std::move(out), {ai}, [ai, m, d, norms = std::move(norms)](Tape& tp, NodeId self) {
    Array* ga = tp.grad_target(ai);
    if (!ga) return;
    const Array& y = tp.value(self);
    const Array& g = tp.upstream(self);
    for (std::size_t r = 0; r < m; ++r) {
      double dot = 0.0;
      for (std::size_t c = 0; c < d; ++c) dot += y[r * d + c] * g[r * d + c];
      for (std::size_t c = 0; c < d; ++c) (*ga)[r * d + c] += (g[r * d + c] - y[r * d + c] * dot) / norms[r];
    }
  });
}

inline Var reshape(const Var& a, Shape shape) {
  if (element_count(shape) != a.value().size()) {
    throw ContractError("reshape: " + shape_string(a.shape()) + " -> " + shape_string(shape));
  }
  const NodeId ai = a.id();
  return a.tape().record(a.value().reshaped(std::move(shape)), {ai}, [ai](Tape& tp, NodeId self) {
    if (Array* ga = tp.grad_target(ai)) {
      const Array& g = tp.upstream(self);
      for (std::size_t i = 0; i < g.size(); ++i) (*ga)[i] += g[i];
    }
  });
}

inline Var transpose(const Var& a) {
  detail::require_rank(a, 2, "transpose");
  const Array& x = a.value();
  const std::size_t m = x.extent(0), n = x.extent(1);
  Array out(Shape{n, m});
  for (std::size_t i = 0; i < m; ++i)
    for (std::size_t j = 0; j < n; ++j) out[j * m + i] = x[i * n + j];
  const NodeId ai = a.id();
  return a.tape().record(std::move(out), {ai}, [ai, m, n](Tape& tp, NodeId self) {
    if (Array* ga = tp.grad_target(ai)) {
      const Array& g = tp.upstream(self);
      for (std::size_t i = 0; i < m; ++i)
        for (std::size_t j = 0; j < n; ++j) (*ga)[i * n + j] += g[j * m + i];
    }
  });
}

/// Flat concatenation of every input into a rank-1 array.
inline Var concat(std::span<const Var> parts) {
  if (parts.empty()) throw ContractError("concat: no inputs");
  Tape& t = parts.front().tape();
  std::vector<double> data;
  std::vector<NodeId> ids;
  std::vector<std::size_t> offsets;
  for (const Var& p : parts) {
    if (&p.tape() != &t) throw ContractError("concat: operands live on different tapes");
    offsets.push_back(data.size());
    ids.push_back(p.id());
    data.insert(data.end(), p.value().data().begin(), p.value().data().end());
  }
  Array out = Array::vector(std::move(data));
  return t.record(std::move(out), ids, [ids, offsets](Tape& tp, NodeId self) {
    const Array& g = tp.upstream(self);
    for (std::size_t k = 0; k < ids.size(); ++k) {
      if (Array* gi = tp.grad_target(ids[k])) {
        for (std::size_t i = 0; i < gi->size(); ++i) (*gi)[i] += g[offsets[k] + i];
      }
    }
  });
}

inline Var concat(std::initializer_list<Var> parts) {
  return concat(std::span<const Var>(parts.begin(), parts.size()));
}

/// Contiguous flat range [offset, offset + |shape|) of `a`, reshaped.
inline Var slice(const Var& a, std::size_t offset, Shape shape) {
  const std::size_t count = element_count(shape);
  const Array& x = a.value();
  if (offset + count > x.size()) throw ContractError("slice: range exceeds array");
  std::vector<double> data(x.data().begin() + static_cast<std::ptrdiff_t>(offset),
                           x.data().begin() + static_cast<std::ptrdiff_t>(offset + count));
  const NodeId ai = a.id();
  return a.tape().record(Array(std::move(shape), std::move(data)), {ai}, [ai, offset](Tape& tp, NodeId self) {
    if (Array* ga = tp.grad_target(ai)) {
      const Array& g = tp.upstream(self);
      for (std::size_t i = 0; i < g.size(); ++i) (*ga)[offset + i] += g[i];
    }
  });
}

/// a[m x d] -> [m*times x d], each row repeated `times` times consecutively.
inline Var repeat_rows(const Var& a, std::size_t times) {
  detail::require_rank(a, 2, "repeat_rows");
  const Array& x = a.value();
  const std::size_t m = x.extent(0), d = x.extent(1);
  Array out(Shape{m * times, d});
  for (std::size_t r = 0; r < m; ++r)
    for (std::size_t k = 0; k < times; ++k)
      for (std::size_t c = 0; c < d; ++c) out[(r * times + k) * d + c] = x[r * d + c];
  const NodeId ai = a.id();
  return a.tape().record(std::move(out), {ai}, [ai, m, d, times](Tape& tp, NodeId self) {
    if (Array* ga = tp.grad_target(ai)) {
      const Array& g = tp.upstream(self);
      for (std::size_t r = 0; r < m; ++r)
        for (std::size_t k = 0; k < times; ++k)
          for (std::size_t c = 0; c < d; ++c) (*ga)[r * d + c] += g[(r * times + k) * d + c];
    }
  });
}

/// Convenience: seeds a fresh tape with `x`, runs f, and returns (value, gradient).
inline std::pair<double, Array> value_and_grad(const std::function<Var(Var)>& f, const Array& x) {
  Tape tape;
  Var in = tape.leaf(x);
  Var out = f(in);
  tape.backward(out);
  return {out.item(), tape.grad(in)};
}

struct GradientCheckReport {
  std::vector<double> analytic;
  std::vector<double> numeric;
  std::vector<double> relative_error;
  /// Coordinates where a kink lies within two steps; reported, not judged.
  std::vector<bool> kink;
  double max_error = 0.0;
  std::size_t excluded = 0;
  bool passed = true;
};

/// Compares the reverse-mode gradient of f at x with central differences. A
/// coordinate is treated as sitting on a kink when the second difference at step
/// 2h is not twice the one at step h (true for any C^4 function up to O(h^3)).
/// Relative error is |a - n| / max(|a|, |n|, 1e-4).
inline GradientCheckReport gradient_check(const std::function<Var(Var)>& f, const Array& x, double h = 1e-5,
                                          double tol = 1e-4) {
  auto eval = [&](const Array& at) {
    Tape tape;
    const double v = f(tape.constant(at)).item();
    if (!std::isfinite(v)) throw EvaluationError("gradient_check: non-finite function value");
    return v;
  };
  const auto [f0, grad] = value_and_grad(f, x);
  if (!std::isfinite(f0)) throw EvaluationError("gradient_check: non-finite function value");

  GradientCheckReport report;
  const std::size_t n = x.size();
  report.analytic.assign(grad.data().begin(), grad.data().end());
  report.numeric.resize(n);
  report.relative_error.resize(n);
  report.kink.resize(n);
  Array probe = x;
  for (std::size_t i = 0; i < n; ++i) {
    const double xi = x[i];
    auto at = [&](double step) {
      probe[i] = xi + step;
      const double v = eval(probe);
      probe[i] = xi;
      return v;
    };
    const double fp1 = at(h), fm1 = at(-h), fp2 = at(2 * h), fm2 = at(-2 * h);
    const double dplus = (fp1 - f0) / h;
    const double dminus = (f0 - fm1) / h;
    const double second1 = (fp1 - 2 * f0 + fm1) / h;
    const double second2 = (fp2 - 2 * f0 + fm2) / (2 * h);
    const double numeric = (fp1 - fm1) / (2 * h);
    const double slope = std::max(std::abs(dplus), std::abs(dminus));
    report.kink[i] = std::abs(second2 - 2 * second1) > 1e-6 * slope + 1e-9 * std::max(1.0, std::abs(f0));
    report.numeric[i] = numeric;
    const double a = report.analytic[i];
    const double err = std::abs(a - numeric) / std::max({std::abs(a), std::abs(numeric), 1e-4});
    report.relative_error[i] = err;
    if (report.kink[i]) {
      ++report.excluded;
      continue;
    }
    report.max_error = std::max(report.max_error, err);
  }
  report.passed = report.max_error < tol;
  return report;
}

}  // namespace pointpc::nd
