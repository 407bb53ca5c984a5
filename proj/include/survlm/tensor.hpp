// Copyright (c) 2026, The survlm Authors
// SPDX-License-Identifier: Apache-2.0
//
// Reverse-mode differentiation over dense 64-bit tensors.
//
// A Tensor is a handle to a graph node. Ops record their parents and a
// backward closure; Tensor::backward() walks the graph once in reverse
// topological order. Row-major storage throughout, and every op that
// produces row i reads only row i of its row-indexed inputs, so causal
// models stay bit-identical when rows are appended.

#pragma once

#include <algorithm>
#include <cassert>
#include <cmath>
#include <cstddef>
#include <functional>
#include <memory>
#include <numbers>
#include <numeric>
#include <span>
#include <sstream>
#include <stdexcept>
#include <string>
#include <unordered_set>
#include <utility>
#include <vector>

namespace survlm {

using Shape = std::vector<std::size_t>;

inline std::size_t shape_numel(const Shape& s) {
  return std::accumulate(s.begin(), s.end(), std::size_t{1}, std::multiplies<>());
}

inline std::string shape_str(const Shape& s) {
  std::ostringstream os;
  os << '[';
  for (std::size_t i = 0; i < s.size(); ++i) os << (i ? " x " : "") << s[i];
  os << ']';
  return os.str();
}

namespace detail {

struct Node {
  Shape shape;
  std::vector<double> value;
  std::vector<double> grad;  // empty until first accumulation
  bool requires_grad = false;
  std::vector<std::shared_ptr<Node>> parents;
  std::function<void(Node&)> backward;

  std::vector<double>& grad_buffer() {
    if (grad.empty()) grad.assign(value.size(), 0.0);
    return grad;
  }
};

inline bool& grad_enabled_flag() {
  thread_local bool enabled = true;
  return enabled;
}

}  // namespace detail

inline bool grad_enabled() { return detail::grad_enabled_flag(); }

// Disables graph recording on this thread for the guard's lifetime.
class NoGradGuard {
 public:
  NoGradGuard() : previous_(detail::grad_enabled_flag()) { detail::grad_enabled_flag() = false; }
  ~NoGradGuard() { detail::grad_enabled_flag() = previous_; }
  NoGradGuard(const NoGradGuard&) = delete;
  NoGradGuard& operator=(const NoGradGuard&) = delete;

 private:
  bool previous_;
};

class Tensor {
 public:
  Tensor() = default;

  static Tensor zeros(Shape shape, bool requires_grad = false) {
    const auto n = shape_numel(shape);
    return from(std::move(shape), std::vector<double>(n, 0.0), requires_grad);
  }

  static Tensor from(Shape shape, std::vector<double> data, bool requires_grad = false) {
    if (data.size() != shape_numel(shape))
      throw std::invalid_argument("Tensor: data length " + std::to_string(data.size()) +
                                  " does not match shape " + shape_str(shape));
    auto node = std::make_shared<detail::Node>();
    node->shape = std::move(shape);
    node->value = std::move(data);
    node->requires_grad = requires_grad;
    return Tensor(std::move(node));
  }

  static Tensor scalar(double v, bool requires_grad = false) {
    return from({}, {v}, requires_grad);
  }

  static Tensor vector(std::vector<double> v, bool requires_grad = false) {
    const auto n = v.size();
    return from({n}, std::move(v), requires_grad);
  }

  static Tensor matrix(std::size_t rows, std::size_t cols, std::vector<double> v,
                       bool requires_grad = false) {
    return from({rows, cols}, std::move(v), requires_grad);
  }

  bool defined() const { return node_ != nullptr; }
  const Shape& shape() const { return node_->shape; }
  std::size_t dim(std::size_t i) const { return node_->shape.at(i); }
  std::size_t rank() const { return node_->shape.size(); }
  std::size_t numel() const { return node_->value.size(); }
  bool requires_grad() const { return node_->requires_grad; }
  void set_requires_grad(bool on) { node_->requires_grad = on; }

  std::span<const double> data() const { return node_->value; }
  std::span<double> mutable_data() { return node_->value; }
  const std::vector<double>& values() const { return node_->value; }
  double item() const {
    if (numel() != 1) throw std::logic_error("item() on tensor of shape " + shape_str(shape()));
    return node_->value[0];
  }
  double at(std::size_t i) const { return node_->value.at(i); }
  double at(std::size_t r, std::size_t c) const { return node_->value.at(r * dim(1) + c); }

  // Gradient accumulated by backward(); zeros if none reached this node.
  std::vector<double> grad() const {
    if (node_->grad.empty()) return std::vector<double>(numel(), 0.0);
    return node_->grad;
  }
  bool has_grad() const { return !node_->grad.empty(); }
  void zero_grad() { node_->grad.clear(); }

  // Seeds d(self)/d(self) = 1 for a scalar and propagates to every
  // reachable node that requires a gradient.
  void backward() const {
    if (numel() != 1) throw std::logic_error("backward() requires a scalar tensor");
    if (!node_->requires_grad) return;
    std::vector<detail::Node*> order;
    std::unordered_set<detail::Node*> visited;
    // Iterative post-order DFS.
    std::vector<std::pair<detail::Node*, std::size_t>> stack{{node_.get(), 0}};
    visited.insert(node_.get());
    while (!stack.empty()) {
      auto& [n, next] = stack.back();
      if (next < n->parents.size()) {
        detail::Node* p = n->parents[next++].get();
        if (p->requires_grad && visited.insert(p).second) stack.push_back({p, 0});
      } else {
        order.push_back(n);
        stack.pop_back();
      }
    }
    node_->grad_buffer()[0] += 1.0;
    for (auto it = order.rbegin(); it != order.rend(); ++it) {
      detail::Node* n = *it;
      if (n->backward && !n->grad.empty()) n->backward(*n);
    }
  }

  // Copy of the values with no graph history.
  Tensor detach() const { return from(shape(), node_->value, false); }

  detail::Node* node() const { return node_.get(); }
  const std::shared_ptr<detail::Node>& node_ptr() const { return node_; }

 private:
  explicit Tensor(std::shared_ptr<detail::Node> n) : node_(std::move(n)) {}
  std::shared_ptr<detail::Node> node_;

  friend Tensor make_op(Shape, std::vector<double>, std::vector<Tensor>,
                        std::function<void(detail::Node&)>);
};

// Builds a result node. The backward closure is kept only when grad
// mode is on and some parent needs a gradient.
inline Tensor make_op(Shape shape, std::vector<double> value, std::vector<Tensor> parents,
                      std::function<void(detail::Node&)> backward) {
  auto node = std::make_shared<detail::Node>();
  node->shape = std::move(shape);
  node->value = std::move(value);
  bool needs = false;
  if (grad_enabled())
    for (const auto& p : parents) needs = needs || p.requires_grad();
  if (needs) {
    node->requires_grad = true;
    node->parents.reserve(parents.size());
    for (auto& p : parents) node->parents.push_back(p.node_);
    node->backward = std::move(backward);
  }
  return Tensor(std::move(node));
}

namespace detail {

inline std::vector<double>* grad_of(Node& self, std::size_t parent) {
  Node& p = *self.parents[parent];
  return p.requires_grad ? &p.grad_buffer() : nullptr;
}

inline void require_shape(const Tensor& t, const Shape& s, const char* op) {
  if (t.shape() != s)
    throw std::invalid_argument(std::string(op) + ": expected shape " + shape_str(s) + ", got " +
                                shape_str(t.shape()));
}

inline void require_rank(const Tensor& t, std::size_t r, const char* op) {
  if (t.rank() != r)
    throw std::invalid_argument(std::string(op) + ": expected rank " + std::to_string(r) +
                                ", got shape " + shape_str(t.shape()));
}

}  // namespace detail

// ---------------------------------------------------------------------------
// Elementwise

inline Tensor add(const Tensor& a, const Tensor& b) {
  detail::require_shape(b, a.shape(), "add");
  std::vector<double> v(a.numel());
  for (std::size_t i = 0; i < v.size(); ++i) v[i] = a.data()[i] + b.data()[i];
  return make_op(a.shape(), std::move(v), {a, b}, [](detail::Node& self) {
    for (std::size_t k = 0; k < 2; ++k)
      if (auto* g = detail::grad_of(self, k))
        for (std::size_t i = 0; i < g->size(); ++i) (*g)[i] += self.grad[i];
  });
}

inline Tensor sub(const Tensor& a, const Tensor& b) {
  detail::require_shape(b, a.shape(), "sub");
  std::vector<double> v(a.numel());
  for (std::size_t i = 0; i < v.size(); ++i) v[i] = a.data()[i] - b.data()[i];
  return make_op(a.shape(), std::move(v), {a, b}, [](detail::Node& self) {
    if (auto* g = detail::grad_of(self, 0))
      for (std::size_t i = 0; i < g->size(); ++i) (*g)[i] += self.grad[i];
    if (auto* g = detail::grad_of(self, 1))
      for (std::size_t i = 0; i < g->size(); ++i) (*g)[i] -= self.grad[i];
  });
}

inline Tensor mul(const Tensor& a, const Tensor& b) {
  detail::require_shape(b, a.shape(), "mul");
  std::vector<double> v(a.numel());
  for (std::size_t i = 0; i < v.size(); ++i) v[i] = a.data()[i] * b.data()[i];
  return make_op(a.shape(), std::move(v), {a, b}, [](detail::Node& self) {
    const auto& av = self.parents[0]->value;
    const auto& bv = self.parents[1]->value;
    if (auto* g = detail::grad_of(self, 0))
      for (std::size_t i = 0; i < g->size(); ++i) (*g)[i] += self.grad[i] * bv[i];
    if (auto* g = detail::grad_of(self, 1))
      for (std::size_t i = 0; i < g->size(); ++i) (*g)[i] += self.grad[i] * av[i];
  });
}

inline Tensor scale(const Tensor& a, double c) {
  std::vector<double> v(a.numel());
  for (std::size_t i = 0; i < v.size(); ++i) v[i] = a.data()[i] * c;
  return make_op(a.shape(), std::move(v), {a}, [c](detail::Node& self) {
    if (auto* g = detail::grad_of(self, 0))
      for (std::size_t i = 0; i < g->size(); ++i) (*g)[i] += self.grad[i] * c;
  });
}

inline Tensor reshape(const Tensor& a, Shape shape) {
  if (shape_numel(shape) != a.numel())
    throw std::invalid_argument("reshape: " + shape_str(a.shape()) + " -> " + shape_str(shape));
  return make_op(std::move(shape), a.values(), {a}, [](detail::Node& self) {
    if (auto* g = detail::grad_of(self, 0))
      for (std::size_t i = 0; i < g->size(); ++i) (*g)[i] += self.grad[i];
  });
}

// Exact GELU, x * Phi(x).
inline Tensor gelu(const Tensor& a) {
  std::vector<double> v(a.numel());
  for (std::size_t i = 0; i < v.size(); ++i) {
    const double x = a.data()[i];
    v[i] = 0.5 * x * (1.0 + std::erf(x / std::numbers::sqrt2));
  }
  return make_op(a.shape(), std::move(v), {a}, [](detail::Node& self) {
    auto* g = detail::grad_of(self, 0);
    if (!g) return;
    const auto& xv = self.parents[0]->value;
    const double inv_sqrt_2pi = 0.5 * std::numbers::inv_sqrtpi * std::numbers::sqrt2;
    for (std::size_t i = 0; i < g->size(); ++i) {
      const double x = xv[i];
      const double cdf = 0.5 * (1.0 + std::erf(x / std::numbers::sqrt2));
      const double pdf = inv_sqrt_2pi * std::exp(-0.5 * x * x);
      (*g)[i] += self.grad[i] * (cdf + x * pdf);
    }
  });
}

// ---------------------------------------------------------------------------
// Reductions

inline Tensor sum(const Tensor& a) {
  double s = 0.0;
  for (double x : a.data()) s += x;
  return make_op({}, {s}, {a}, [](detail::Node& self) {
    if (auto* g = detail::grad_of(self, 0))
      for (double& x : *g) x += self.grad[0];
  });
}

inline Tensor mean(const Tensor& a) { return scale(sum(a), 1.0 / static_cast<double>(a.numel())); }

inline Tensor dot(const Tensor& a, const Tensor& b) { return sum(mul(a, b)); }

// Euclidean norm of all entries; the subgradient at zero is taken as 0.
inline Tensor norm2(const Tensor& a) {
  double s = 0.0;
  for (double x : a.data()) s += x * x;
  const double n = std::sqrt(s);
  return make_op({}, {n}, {a}, [n](detail::Node& self) {
    auto* g = detail::grad_of(self, 0);
    if (!g || n == 0.0) return;
    const auto& av = self.parents[0]->value;
    for (std::size_t i = 0; i < g->size(); ++i) (*g)[i] += self.grad[0] * av[i] / n;
  });
}

// Sum of scalar tensors in the given order.
inline Tensor add_all(const std::vector<Tensor>& terms) {
  if (terms.empty()) return Tensor::scalar(0.0);
  Tensor acc = terms.front();
  for (std::size_t i = 1; i < terms.size(); ++i) acc = add(acc, terms[i]);
  return acc;
}

// ---------------------------------------------------------------------------
// Matrix ops

// [m x k] * [k x n]
inline Tensor matmul(const Tensor& a, const Tensor& b) {
  detail::require_rank(a, 2, "matmul");
  detail::require_rank(b, 2, "matmul");
  const std::size_t m = a.dim(0), k = a.dim(1), n = b.dim(1);
  if (b.dim(0) != k)
    throw std::invalid_argument("matmul: inner dimension mismatch " + shape_str(a.shape()) +
                                " * " + shape_str(b.shape()));
  std::vector<double> c(m * n, 0.0);
  const double* av = a.data().data();
  const double* bv = b.data().data();
  for (std::size_t i = 0; i < m; ++i) {
    double* crow = c.data() + i * n;
    for (std::size_t p = 0; p < k; ++p) {
      const double aip = av[i * k + p];
      const double* brow = bv + p * n;
      for (std::size_t j = 0; j < n; ++j) crow[j] += aip * brow[j];
    }
  }
  return make_op({m, n}, std::move(c), {a, b}, [m, k, n](detail::Node& self) {
    const double* gc = self.grad.data();
    if (auto* ga = detail::grad_of(self, 0)) {
      const double* bv = self.parents[1]->value.data();
      for (std::size_t i = 0; i < m; ++i)
        for (std::size_t p = 0; p < k; ++p) {
          const double* brow = bv + p * n;
          const double* grow = gc + i * n;
          double s = 0.0;
          for (std::size_t j = 0; j < n; ++j) s += grow[j] * brow[j];
          (*ga)[i * k + p] += s;
        }
    }
    if (auto* gb = detail::grad_of(self, 1)) {
      const double* av = self.parents[0]->value.data();
      for (std::size_t i = 0; i < m; ++i)
        for (std::size_t p = 0; p < k; ++p) {
          const double aip = av[i * k + p];
          double* gbrow = gb->data() + p * n;
          const double* grow = gc + i * n;
          for (std::size_t j = 0; j < n; ++j) gbrow[j] += aip * grow[j];
        }
    }
  });
}

// [m x k] * [n x k]^T -> [m x n]. Linear layers store weights as
// [out x in], so y = x W^T is matmul_nt(x, W).
inline Tensor matmul_nt(const Tensor& a, const Tensor& b) {
  detail::require_rank(a, 2, "matmul_nt");
  detail::require_rank(b, 2, "matmul_nt");
  const std::size_t m = a.dim(0), k = a.dim(1), n = b.dim(0);
  if (b.dim(1) != k)
    throw std::invalid_argument("matmul_nt: inner dimension mismatch " + shape_str(a.shape()) +
                                " * " + shape_str(b.shape()) + "^T");
  // Transpose once so the inner loop runs over contiguous memory.
  std::vector<double> bt(k * n);
  const double* bv = b.data().data();
  for (std::size_t j = 0; j < n; ++j)
    for (std::size_t p = 0; p < k; ++p) bt[p * n + j] = bv[j * k + p];
  std::vector<double> c(m * n, 0.0);
  const double* av = a.data().data();
  for (std::size_t i = 0; i < m; ++i) {
    double* crow = c.data() + i * n;
    for (std::size_t p = 0; p < k; ++p) {
      const double aip = av[i * k + p];
      const double* brow = bt.data() + p * n;
      for (std::size_t j = 0; j < n; ++j) crow[j] += aip * brow[j];
    }
  }
  return make_op({m, n}, std::move(c), {a, b}, [m, k, n](detail::Node& self) {
    const double* gc = self.grad.data();
    if (auto* ga = detail::grad_of(self, 0)) {
      // dA = dC * B
      const double* bv = self.parents[1]->value.data();
      for (std::size_t i = 0; i < m; ++i) {
        double* garow = ga->data() + i * k;
        for (std::size_t j = 0; j < n; ++j) {
          const double gij = gc[i * n + j];
          if (gij == 0.0) continue;
          const double* brow = bv + j * k;
          for (std::size_t p = 0; p < k; ++p) garow[p] += gij * brow[p];
        }
      }
    }
    if (auto* gb = detail::grad_of(self, 1)) {
      // dB = dC^T * A
      const double* av = self.parents[0]->value.data();
      for (std::size_t i = 0; i < m; ++i) {
        const double* arow = av + i * k;
        for (std::size_t j = 0; j < n; ++j) {
          const double gij = gc[i * n + j];
          if (gij == 0.0) continue;
          double* gbrow = gb->data() + j * k;
          for (std::size_t p = 0; p < k; ++p) gbrow[p] += gij * arow[p];
        }
      }
    }
  });
}

// Matrix-vector product with a [out x in] weight: y = W x.
inline Tensor linear_vec(const Tensor& w, const Tensor& x) {
  detail::require_rank(x, 1, "linear_vec");
  return reshape(matmul_nt(reshape(x, {1, x.numel()}), w), {w.dim(0)});
}

// Adds a length-n bias to every row of [m x n].
inline Tensor add_row_broadcast(const Tensor& a, const Tensor& bias) {
  detail::require_rank(a, 2, "add_row_broadcast");
  const std::size_t m = a.dim(0), n = a.dim(1);
  detail::require_shape(bias, {n}, "add_row_broadcast");
  std::vector<double> v(a.values());
  for (std::size_t i = 0; i < m; ++i)
    for (std::size_t j = 0; j < n; ++j) v[i * n + j] += bias.data()[j];
  return make_op(a.shape(), std::move(v), {a, bias}, [m, n](detail::Node& self) {
    if (auto* g = detail::grad_of(self, 0))
      for (std::size_t i = 0; i < g->size(); ++i) (*g)[i] += self.grad[i];
    if (auto* g = detail::grad_of(self, 1))
      for (std::size_t i = 0; i < m; ++i)
        for (std::size_t j = 0; j < n; ++j) (*g)[j] += self.grad[i * n + j];
  });
}

// Row-wise layer normalization with affine gain and shift.
inline Tensor layer_norm(const Tensor& x, const Tensor& gain, const Tensor& shift,
                         double eps = 1e-5) {
  detail::require_rank(x, 2, "layer_norm");
  const std::size_t m = x.dim(0), n = x.dim(1);
  detail::require_shape(gain, {n}, "layer_norm");
  detail::require_shape(shift, {n}, "layer_norm");
  std::vector<double> xhat(m * n), inv_std(m), out(m * n);
  const double* xv = x.data().data();
  for (std::size_t i = 0; i < m; ++i) {
    double mu = 0.0;
    for (std::size_t j = 0; j < n; ++j) mu += xv[i * n + j];
    mu /= static_cast<double>(n);
    double var = 0.0;
    for (std::size_t j = 0; j < n; ++j) {
      const double d = xv[i * n + j] - mu;
      var += d * d;
    }
    var /= static_cast<double>(n);
    inv_std[i] = 1.0 / std::sqrt(var + eps);
    for (std::size_t j = 0; j < n; ++j) {
      xhat[i * n + j] = (xv[i * n + j] - mu) * inv_std[i];
      out[i * n + j] = xhat[i * n + j] * gain.data()[j] + shift.data()[j];
    }
  }
  return make_op(x.shape(), std::move(out), {x, gain, shift},
                 [m, n, xhat = std::move(xhat), inv_std = std::move(inv_std)](detail::Node& self) {
                   const double* gy = self.grad.data();
                   const auto& gv = self.parents[1]->value;
                   if (auto* gx = detail::grad_of(self, 0)) {
                     for (std::size_t i = 0; i < m; ++i) {
                       double mean_g = 0.0, mean_gx = 0.0;
                       for (std::size_t j = 0; j < n; ++j) {
                         const double gh = gy[i * n + j] * gv[j];
                         mean_g += gh;
                         mean_gx += gh * xhat[i * n + j];
                       }
                       mean_g /= static_cast<double>(n);
                       mean_gx /= static_cast<double>(n);
                       for (std::size_t j = 0; j < n; ++j) {
                         const double gh = gy[i * n + j] * gv[j];
                         (*gx)[i * n + j] +=
                             inv_std[i] * (gh - mean_g - xhat[i * n + j] * mean_gx);
                       }
                     }
                   }
                   if (auto* gg = detail::grad_of(self, 1))
                     for (std::size_t i = 0; i < m; ++i)
                       for (std::size_t j = 0; j < n; ++j)
                         (*gg)[j] += gy[i * n + j] * xhat[i * n + j];
                   if (auto* gb = detail::grad_of(self, 2))
                     for (std::size_t i = 0; i < m; ++i)
                       for (std::size_t j = 0; j < n; ++j) (*gb)[j] += gy[i * n + j];
                 });
}

// Softmax over the last axis of a [m x n] matrix or an [n] vector.
inline Tensor softmax(const Tensor& x) {
  if (x.rank() != 1 && x.rank() != 2) throw std::invalid_argument("softmax: rank must be 1 or 2");
  const std::size_t n = x.shape().back();
  const std::size_t m = x.numel() / n;
  std::vector<double> p(x.numel());
  for (std::size_t i = 0; i < m; ++i) {
    const double* row = x.data().data() + i * n;
    const double mx = *std::max_element(row, row + n);
    double s = 0.0;
    for (std::size_t j = 0; j < n; ++j) s += (p[i * n + j] = std::exp(row[j] - mx));
    for (std::size_t j = 0; j < n; ++j) p[i * n + j] /= s;
  }
  return make_op(x.shape(), std::move(p), {x}, [m, n](detail::Node& self) {
    auto* g = detail::grad_of(self, 0);
    if (!g) return;
    const auto& pv = self.value;
    for (std::size_t i = 0; i < m; ++i) {
      double s = 0.0;
      for (std::size_t j = 0; j < n; ++j) s += self.grad[i * n + j] * pv[i * n + j];
      for (std::size_t j = 0; j < n; ++j)
        (*g)[i * n + j] += pv[i * n + j] * (self.grad[i * n + j] - s);
    }
  });
}

// Softmax of a square score matrix where row i attends to columns <= i.
// Entries above the diagonal are exactly zero and never read.
inline Tensor causal_softmax(const Tensor& scores) {
  detail::require_rank(scores, 2, "causal_softmax");
  const std::size_t n = scores.dim(0);
  if (scores.dim(1) != n) throw std::invalid_argument("causal_softmax: scores must be square");
  std::vector<double> p(n * n, 0.0);
  for (std::size_t i = 0; i < n; ++i) {
    const double* row = scores.data().data() + i * n;
    const double mx = *std::max_element(row, row + i + 1);
    double s = 0.0;
    for (std::size_t j = 0; j <= i; ++j) s += (p[i * n + j] = std::exp(row[j] - mx));
    for (std::size_t j = 0; j <= i; ++j) p[i * n + j] /= s;
  }
  return make_op(scores.shape(), std::move(p), {scores}, [n](detail::Node& self) {
    auto* g = detail::grad_of(self, 0);
    if (!g) return;
    const auto& pv = self.value;
    for (std::size_t i = 0; i < n; ++i) {
      double s = 0.0;
      for (std::size_t j = 0; j <= i; ++j) s += self.grad[i * n + j] * pv[i * n + j];
      for (std::size_t j = 0; j <= i; ++j)
        (*g)[i * n + j] += pv[i * n + j] * (self.grad[i * n + j] - s);
    }
  });
}

// ---------------------------------------------------------------------------
// Indexing and assembly

// Gathers rows of a [V x D] table.
inline Tensor embedding(const Tensor& table, const std::vector<int>& ids) {
  detail::require_rank(table, 2, "embedding");
  const std::size_t vocab = table.dim(0), d = table.dim(1);
  std::vector<double> v(ids.size() * d);
  for (std::size_t i = 0; i < ids.size(); ++i) {
    if (ids[i] < 0 || static_cast<std::size_t>(ids[i]) >= vocab)
      throw std::out_of_range("embedding: id " + std::to_string(ids[i]) + " outside vocabulary");
    std::copy_n(table.data().data() + static_cast<std::size_t>(ids[i]) * d, d, v.data() + i * d);
  }
  return make_op({ids.size(), d}, std::move(v), {table}, [ids, d](detail::Node& self) {
    auto* g = detail::grad_of(self, 0);
    if (!g) return;
    for (std::size_t i = 0; i < ids.size(); ++i)
      for (std::size_t j = 0; j < d; ++j)
        (*g)[static_cast<std::size_t>(ids[i]) * d + j] += self.grad[i * d + j];
  });
}

// Rows [start, start + count) of a matrix.
inline Tensor slice_rows(const Tensor& a, std::size_t start, std::size_t count) {
  detail::require_rank(a, 2, "slice_rows");
  const std::size_t n = a.dim(1);
  if (start + count > a.dim(0)) throw std::out_of_range("slice_rows: range outside tensor");
  std::vector<double> v(a.data().begin() + static_cast<std::ptrdiff_t>(start * n),
                        a.data().begin() + static_cast<std::ptrdiff_t>((start + count) * n));
  return make_op({count, n}, std::move(v), {a}, [start, n](detail::Node& self) {
    if (auto* g = detail::grad_of(self, 0))
      for (std::size_t i = 0; i < self.grad.size(); ++i) (*g)[start * n + i] += self.grad[i];
  });
}

// Row r of a matrix as a vector.
inline Tensor row(const Tensor& a, std::size_t r) {
  return reshape(slice_rows(a, r, 1), {a.dim(1)});
}

inline Tensor slice_cols(const Tensor& a, std::size_t start, std::size_t count) {
  detail::require_rank(a, 2, "slice_cols");
  const std::size_t m = a.dim(0), n = a.dim(1);
  if (start + count > n) throw std::out_of_range("slice_cols: range outside tensor");
  std::vector<double> v(m * count);
  for (std::size_t i = 0; i < m; ++i)
    for (std::size_t j = 0; j < count; ++j) v[i * count + j] = a.data()[i * n + start + j];
  return make_op({m, count}, std::move(v), {a}, [m, n, start, count](detail::Node& self) {
    if (auto* g = detail::grad_of(self, 0))
      for (std::size_t i = 0; i < m; ++i)
        for (std::size_t j = 0; j < count; ++j)
          (*g)[i * n + start + j] += self.grad[i * count + j];
  });
}

// Vertical stack of matrices sharing a column count. Empty (0-row)
// parts are allowed.
inline Tensor concat_rows(const std::vector<Tensor>& parts) {
  if (parts.empty()) throw std::invalid_argument("concat_rows: no parts");
  const std::size_t n = parts.front().dim(1);
  std::size_t m = 0;
  for (const auto& p : parts) {
    detail::require_rank(p, 2, "concat_rows");
    if (p.dim(1) != n) throw std::invalid_argument("concat_rows: column mismatch");
    m += p.dim(0);
  }
  std::vector<double> v;
  v.reserve(m * n);
  std::vector<std::size_t> offsets;
  for (const auto& p : parts) {
    offsets.push_back(v.size());
    v.insert(v.end(), p.data().begin(), p.data().end());
  }
  return make_op({m, n}, std::move(v), parts, [offsets](detail::Node& self) {
    for (std::size_t k = 0; k < offsets.size(); ++k)
      if (auto* g = detail::grad_of(self, k))
        for (std::size_t i = 0; i < g->size(); ++i) (*g)[i] += self.grad[offsets[k] + i];
  });
}

// Horizontal concatenation of matrices sharing a row count.
inline Tensor concat_cols(const std::vector<Tensor>& parts) {
  if (parts.empty()) throw std::invalid_argument("concat_cols: no parts");
  const std::size_t m = parts.front().dim(0);
  std::vector<std::size_t> widths, offsets;
  std::size_t n = 0;
  for (const auto& p : parts) {
    detail::require_rank(p, 2, "concat_cols");
    if (p.dim(0) != m) throw std::invalid_argument("concat_cols: row mismatch");
    offsets.push_back(n);
    widths.push_back(p.dim(1));
    n += p.dim(1);
  }
  std::vector<double> v(m * n);
  for (std::size_t k = 0; k < parts.size(); ++k)
    for (std::size_t i = 0; i < m; ++i)
      for (std::size_t j = 0; j < widths[k]; ++j)
        v[i * n + offsets[k] + j] = parts[k].data()[i * widths[k] + j];
  return make_op({m, n}, std::move(v), parts, [m, n, widths, offsets](detail::Node& self) {
    for (std::size_t k = 0; k < widths.size(); ++k)
      if (auto* g = detail::grad_of(self, k))
        for (std::size_t i = 0; i < m; ++i)
          for (std::size_t j = 0; j < widths[k]; ++j)
            (*g)[i * widths[k] + j] += self.grad[i * n + offsets[k] + j];
  });
}

// Stacks equal-shaped tensors along a new leading axis: scalars give
// [N], vectors of length D give [N x D].
inline Tensor stack(const std::vector<Tensor>& items) {
  if (items.empty()) throw std::invalid_argument("stack: no items");
  const Shape inner = items.front().shape();
  const std::size_t d = shape_numel(inner);
  std::vector<double> v;
  v.reserve(items.size() * d);
  for (const auto& t : items) {
    detail::require_shape(t, inner, "stack");
    v.insert(v.end(), t.data().begin(), t.data().end());
  }
  Shape out{items.size()};
  out.insert(out.end(), inner.begin(), inner.end());
  return make_op(std::move(out), std::move(v), items, [d](detail::Node& self) {
    for (std::size_t k = 0; k < self.parents.size(); ++k)
      if (auto* g = detail::grad_of(self, k))
        for (std::size_t i = 0; i < d; ++i) (*g)[i] += self.grad[k * d + i];
  });
}

// Column means of a [m x n] matrix.
inline Tensor mean_rows(const Tensor& a) {
  detail::require_rank(a, 2, "mean_rows");
  const std::size_t m = a.dim(0), n = a.dim(1);
  if (m == 0) throw std::invalid_argument("mean_rows: no rows");
  std::vector<double> v(n, 0.0);
  for (std::size_t i = 0; i < m; ++i)
    for (std::size_t j = 0; j < n; ++j) v[j] += a.data()[i * n + j];
  for (double& x : v) x /= static_cast<double>(m);
  return make_op({n}, std::move(v), {a}, [m, n](detail::Node& self) {
    if (auto* g = detail::grad_of(self, 0))
      for (std::size_t i = 0; i < m; ++i)
        for (std::size_t j = 0; j < n; ++j)
          (*g)[i * n + j] += self.grad[j] / static_cast<double>(m);
  });
}

}  // namespace survlm
