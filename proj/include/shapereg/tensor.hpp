#pragma once

#include <algorithm>
#include <cmath>
#include <functional>
#include <memory>
#include <sstream>
#include <string>
#include <unordered_set>
#include <vector>

#include "shapereg/common.hpp"

namespace shapereg {

// Dense 64-bit float tensors with reverse-mode autodiff. The graph is built
// eagerly during the forward pass and released by backward(). Tensors are
// value handles onto a shared node; leaf data may be mutated between graphs
// (optimizer updates), never while a live graph references it.

using Dims = std::vector<int>;

inline std::string dims_str(const Dims& d) {
  std::ostringstream os;
  os << "[";
  for (size_t i = 0; i < d.size(); ++i) os << (i ? ", " : "") << d[i];
  os << "]";
  return os.str();
}

inline long long dims_numel(const Dims& d) {
  long long n = 1;
  for (int v : d) n *= v;
  return n;
}

namespace detail {

struct Node {
  Dims shape;
  std::vector<double> data;
  std::vector<double> grad;
  bool requires_grad = false;
  std::vector<std::shared_ptr<Node>> parents;
  std::function<void()> backprop;

  std::vector<double>& ensure_grad() {
    if (grad.size() != data.size()) grad.assign(data.size(), 0.0);
    return grad;
  }
};

}  // namespace detail

class Tensor {
 public:
  Tensor() = default;

  static Tensor zeros(const Dims& dims) { return constant(dims, 0.0); }

  static Tensor constant(const Dims& dims, double v) {
    auto n = std::make_shared<detail::Node>();
    n->shape = dims;
    n->data.assign(static_cast<size_t>(dims_numel(dims)), v);
    return Tensor(std::move(n));
  }

  static Tensor scalar(double v) { return constant({}, v); }

  static Tensor from(const Dims& dims, std::vector<double> values) {
    require(static_cast<long long>(values.size()) == dims_numel(dims),
            "Tensor::from: " + std::to_string(values.size()) +
                " values do not fill shape " + dims_str(dims));
    auto n = std::make_shared<detail::Node>();
    n->shape = dims;
    n->data = std::move(values);
    return Tensor(std::move(n));
  }

  static Tensor randn(const Dims& dims, Rng& rng, double sd = 1.0) {
    auto n = std::make_shared<detail::Node>();
    n->shape = dims;
    n->data.resize(static_cast<size_t>(dims_numel(dims)));
    for (auto& v : n->data) v = rng.normal() * sd;
    return Tensor(std::move(n));
  }

  bool defined() const { return node_ != nullptr; }
  const Dims& shape() const { return node_->shape; }
  int dim(int i) const { return node_->shape[static_cast<size_t>(i)]; }
  int rank() const { return static_cast<int>(node_->shape.size()); }
  long long numel() const { return static_cast<long long>(node_->data.size()); }

  // Reference accessors are lvalue-only: on a temporary Tensor the returned
  // reference would dangle as soon as the handle dies (range-for is the
  // classic trap), so those calls must not compile.
  const std::vector<double>& values() const& { return node_->data; }
  const std::vector<double>& values() && = delete;
  // Mutable leaf data, for optimizers and finite differencing. Only valid
  // while no live graph depends on the old values.
  std::vector<double>& raw_data() & { return node_->data; }
  std::vector<double>& raw_data() && = delete;

  double item() const {
    require(numel() == 1, "item: tensor has " + std::to_string(numel()) +
                              " elements, expected 1");
    return node_->data[0];
  }

  bool requires_grad() const { return node_->requires_grad; }

  Tensor& set_requires_grad(bool v) {
    require(node_->parents.empty(),
            "set_requires_grad: only valid on leaf tensors");
    node_->requires_grad = v;
    return *this;
  }

  const std::vector<double>& grad() const& {
    node_->ensure_grad();
    return node_->grad;
  }
  const std::vector<double>& grad() && = delete;

  void zero_grad() { node_->grad.assign(node_->data.size(), 0.0); }

  std::shared_ptr<detail::Node> node() const { return node_; }

  explicit Tensor(std::shared_ptr<detail::Node> n) : node_(std::move(n)) {}

 private:
  std::shared_ptr<detail::Node> node_;
};

namespace detail {

inline std::shared_ptr<Node> new_node(Dims shape) {
  auto n = std::make_shared<Node>();
  n->data.resize(static_cast<size_t>(dims_numel(shape)));
  n->shape = std::move(shape);
  return n;
}

// Wires the output into the graph. The backprop closure may capture raw Node
// pointers of out/parents; the parents vector keeps them alive.
inline void attach(const std::shared_ptr<Node>& out,
                   std::vector<std::shared_ptr<Node>> parents,
                   std::function<void()> backprop) {
  bool rg = false;
  for (const auto& p : parents) rg = rg || p->requires_grad;
  if (!rg) return;  // constant subgraph, keep it detached
  out->requires_grad = true;
  out->parents = std::move(parents);
  out->backprop = std::move(backprop);
}

inline void check_same_shape(const char* op, const Tensor& a,
                             const Tensor& b) {
  require(a.shape() == b.shape(),
          std::string(op) + ": shapes differ: " + dims_str(a.shape()) +
              " vs " + dims_str(b.shape()));
}

}  // namespace detail

// ---------------------------------------------------------------------------
// Elementwise and scalar ops

inline Tensor add(const Tensor& a, const Tensor& b) {
  detail::check_same_shape("add", a, b);
  auto out = detail::new_node(a.shape());
  const auto& av = a.values();
  const auto& bv = b.values();
  for (size_t i = 0; i < av.size(); ++i) out->data[i] = av[i] + bv[i];
  detail::attach(out, {a.node(), b.node()},
                 [o = out.get(), pa = a.node().get(), pb = b.node().get()] {
                   if (pa->requires_grad) {
                     auto& g = pa->ensure_grad();
                     for (size_t i = 0; i < g.size(); ++i) g[i] += o->grad[i];
                   }
                   if (pb->requires_grad) {
                     auto& g = pb->ensure_grad();
                     for (size_t i = 0; i < g.size(); ++i) g[i] += o->grad[i];
                   }
                 });
  return Tensor(out);
}

inline Tensor sub(const Tensor& a, const Tensor& b) {
  detail::check_same_shape("sub", a, b);
  auto out = detail::new_node(a.shape());
  const auto& av = a.values();
  const auto& bv = b.values();
  for (size_t i = 0; i < av.size(); ++i) out->data[i] = av[i] - bv[i];
  detail::attach(out, {a.node(), b.node()},
                 [o = out.get(), pa = a.node().get(), pb = b.node().get()] {
                   if (pa->requires_grad) {
                     auto& g = pa->ensure_grad();
                     for (size_t i = 0; i < g.size(); ++i) g[i] += o->grad[i];
                   }
                   if (pb->requires_grad) {
                     auto& g = pb->ensure_grad();
                     for (size_t i = 0; i < g.size(); ++i) g[i] -= o->grad[i];
                   }
                 });
  return Tensor(out);
}

inline Tensor mul(const Tensor& a, const Tensor& b) {
  detail::check_same_shape("mul", a, b);
  auto out = detail::new_node(a.shape());
  const auto& av = a.values();
  const auto& bv = b.values();
  for (size_t i = 0; i < av.size(); ++i) out->data[i] = av[i] * bv[i];
  detail::attach(out, {a.node(), b.node()},
                 [o = out.get(), pa = a.node().get(), pb = b.node().get()] {
                   if (pa->requires_grad) {
                     auto& g = pa->ensure_grad();
                     for (size_t i = 0; i < g.size(); ++i)
                       g[i] += o->grad[i] * pb->data[i];
                   }
                   if (pb->requires_grad) {
                     auto& g = pb->ensure_grad();
                     for (size_t i = 0; i < g.size(); ++i)
                       g[i] += o->grad[i] * pa->data[i];
                   }
                 });
  return Tensor(out);
}

inline Tensor add_scalar(const Tensor& a, double s) {
  auto out = detail::new_node(a.shape());
  const auto& av = a.values();
  for (size_t i = 0; i < av.size(); ++i) out->data[i] = av[i] + s;
  detail::attach(out, {a.node()}, [o = out.get(), pa = a.node().get()] {
    auto& g = pa->ensure_grad();
    for (size_t i = 0; i < g.size(); ++i) g[i] += o->grad[i];
  });
  return Tensor(out);
}

inline Tensor mul_scalar(const Tensor& a, double s) {
  auto out = detail::new_node(a.shape());
  const auto& av = a.values();
  for (size_t i = 0; i < av.size(); ++i) out->data[i] = av[i] * s;
  detail::attach(out, {a.node()}, [o = out.get(), pa = a.node().get(), s] {
    auto& g = pa->ensure_grad();
    for (size_t i = 0; i < g.size(); ++i) g[i] += o->grad[i] * s;
  });
  return Tensor(out);
}

// Broadcast bias add: matrix {m,n} + row vector {n}, or volume {C,H,W} +
// per-channel vector {C}. The only broadcasts the engine supports besides
// scalars, so shape errors stay loud.
inline Tensor add_bias(const Tensor& x, const Tensor& b) {
  require(b.rank() == 1, "add_bias: bias must be rank 1, got " +
                             dims_str(b.shape()));
  auto out = detail::new_node(x.shape());
  const auto& xv = x.values();
  const auto& bv = b.values();
  if (x.rank() == 2) {
    int m = x.dim(0), n = x.dim(1);
    require(b.dim(0) == n, "add_bias: bias " + dims_str(b.shape()) +
                               " does not match matrix " +
                               dims_str(x.shape()));
    for (int i = 0; i < m; ++i)
      for (int j = 0; j < n; ++j) out->data[i * n + j] = xv[i * n + j] + bv[j];
    detail::attach(out, {x.node(), b.node()},
                   [o = out.get(), px = x.node().get(), pb = b.node().get(), m,
                    n] {
                     if (px->requires_grad) {
                       auto& g = px->ensure_grad();
                       for (size_t i = 0; i < g.size(); ++i)
                         g[i] += o->grad[i];
                     }
                     if (pb->requires_grad) {
                       auto& g = pb->ensure_grad();
                       for (int i = 0; i < m; ++i)
                         for (int j = 0; j < n; ++j)
                           g[j] += o->grad[static_cast<size_t>(i) * n + j];
                     }
                   });
  } else if (x.rank() == 3) {
    int c = x.dim(0);
    long long hw = static_cast<long long>(x.dim(1)) * x.dim(2);
    require(b.dim(0) == c, "add_bias: bias " + dims_str(b.shape()) +
                               " does not match volume " +
                               dims_str(x.shape()));
    for (int ci = 0; ci < c; ++ci)
      for (long long i = 0; i < hw; ++i)
        out->data[ci * hw + i] = xv[ci * hw + i] + bv[ci];
    detail::attach(out, {x.node(), b.node()},
                   [o = out.get(), px = x.node().get(), pb = b.node().get(), c,
                    hw] {
                     if (px->requires_grad) {
                       auto& g = px->ensure_grad();
                       for (size_t i = 0; i < g.size(); ++i)
                         g[i] += o->grad[i];
                     }
                     if (pb->requires_grad) {
                       auto& g = pb->ensure_grad();
                       for (int ci = 0; ci < c; ++ci)
                         for (long long i = 0; i < hw; ++i)
                           g[ci] += o->grad[ci * hw + i];
                     }
                   });
  } else {
    fail("add_bias: input must be rank 2 or 3, got " + dims_str(x.shape()));
  }
  return Tensor(out);
}

// ---------------------------------------------------------------------------
// Activations

inline Tensor relu(const Tensor& x) {
  auto out = detail::new_node(x.shape());
  const auto& xv = x.values();
  for (size_t i = 0; i < xv.size(); ++i) out->data[i] = xv[i] > 0 ? xv[i] : 0;
  detail::attach(out, {x.node()}, [o = out.get(), px = x.node().get()] {
    auto& g = px->ensure_grad();
    for (size_t i = 0; i < g.size(); ++i)
      if (px->data[i] > 0) g[i] += o->grad[i];
  });
  return Tensor(out);
}

inline Tensor tanh(const Tensor& x) {
  auto out = detail::new_node(x.shape());
  const auto& xv = x.values();
  for (size_t i = 0; i < xv.size(); ++i) out->data[i] = std::tanh(xv[i]);
  detail::attach(out, {x.node()}, [o = out.get(), px = x.node().get()] {
    auto& g = px->ensure_grad();
    for (size_t i = 0; i < g.size(); ++i) {
      double t = o->data[i];
      g[i] += o->grad[i] * (1.0 - t * t);
    }
  });
  return Tensor(out);
}

inline Tensor sigmoid(const Tensor& x) {
  auto out = detail::new_node(x.shape());
  const auto& xv = x.values();
  for (size_t i = 0; i < xv.size(); ++i) {
    double v = xv[i];
    out->data[i] = v >= 0 ? 1.0 / (1.0 + std::exp(-v))
                          : std::exp(v) / (1.0 + std::exp(v));
  }
  detail::attach(out, {x.node()}, [o = out.get(), px = x.node().get()] {
    auto& g = px->ensure_grad();
    for (size_t i = 0; i < g.size(); ++i) {
      double s = o->data[i];
      g[i] += o->grad[i] * s * (1.0 - s);
    }
  });
  return Tensor(out);
}

inline Tensor exp(const Tensor& x) {
  auto out = detail::new_node(x.shape());
  const auto& xv = x.values();
  for (size_t i = 0; i < xv.size(); ++i) out->data[i] = std::exp(xv[i]);
  detail::attach(out, {x.node()}, [o = out.get(), px = x.node().get()] {
    auto& g = px->ensure_grad();
    for (size_t i = 0; i < g.size(); ++i) g[i] += o->grad[i] * o->data[i];
  });
  return Tensor(out);
}

inline Tensor log(const Tensor& x) {
  auto out = detail::new_node(x.shape());
  const auto& xv = x.values();
  for (size_t i = 0; i < xv.size(); ++i) {
    require(xv[i] > 0, "log: non-positive input");
    out->data[i] = std::log(xv[i]);
  }
  detail::attach(out, {x.node()}, [o = out.get(), px = x.node().get()] {
    auto& g = px->ensure_grad();
    for (size_t i = 0; i < g.size(); ++i) g[i] += o->grad[i] / px->data[i];
  });
  return Tensor(out);
}

// Gradient passes only strictly inside (lo, hi).
inline Tensor clamp(const Tensor& x, double lo, double hi) {
  require(lo < hi, "clamp: lo must be below hi");
  auto out = detail::new_node(x.shape());
  const auto& xv = x.values();
  for (size_t i = 0; i < xv.size(); ++i)
    out->data[i] = std::min(hi, std::max(lo, xv[i]));
  detail::attach(out, {x.node()},
                 [o = out.get(), px = x.node().get(), lo, hi] {
                   auto& g = px->ensure_grad();
                   for (size_t i = 0; i < g.size(); ++i)
                     if (px->data[i] > lo && px->data[i] < hi)
                       g[i] += o->grad[i];
                 });
  return Tensor(out);
}

// ---------------------------------------------------------------------------
// Matrix ops

inline Tensor matmul(const Tensor& a, const Tensor& b) {
  require(a.rank() == 2 && b.rank() == 2,
          "matmul: expects matrices, got " + dims_str(a.shape()) + " x " +
              dims_str(b.shape()));
  require(a.dim(1) == b.dim(0),
          "matmul: inner dimensions differ: " + dims_str(a.shape()) + " x " +
              dims_str(b.shape()));
  const int m = a.dim(0), k = a.dim(1), n = b.dim(1);
  auto out = detail::new_node({m, n});
  const double* A = a.values().data();
  const double* B = b.values().data();
  double* C = out->data.data();
  // i-k-j order: each C element accumulates over ascending k, matching the
  // plain triple loop, while the inner j loop vectorizes.
  for (int i = 0; i < m; ++i) {
    double* crow = C + static_cast<size_t>(i) * n;
    std::fill(crow, crow + n, 0.0);
    for (int p = 0; p < k; ++p) {
      const double av = A[static_cast<size_t>(i) * k + p];
      const double* brow = B + static_cast<size_t>(p) * n;
      for (int j = 0; j < n; ++j) crow[j] += av * brow[j];
    }
  }
  detail::attach(
      out, {a.node(), b.node()},
      [o = out.get(), pa = a.node().get(), pb = b.node().get(), m, k, n] {
        const double* G = o->grad.data();
        if (pa->requires_grad) {
          auto& ga = pa->ensure_grad();
          const double* B = pb->data.data();
          for (int i = 0; i < m; ++i)
            for (int p = 0; p < k; ++p) {
              const double* grow = G + static_cast<size_t>(i) * n;
              const double* brow = B + static_cast<size_t>(p) * n;
              double acc = 0.0;
              for (int j = 0; j < n; ++j) acc += grow[j] * brow[j];
              ga[static_cast<size_t>(i) * k + p] += acc;
            }
        }
        if (pb->requires_grad) {
          auto& gb = pb->ensure_grad();
          const double* A = pa->data.data();
          for (int i = 0; i < m; ++i)
            for (int p = 0; p < k; ++p) {
              const double av = A[static_cast<size_t>(i) * k + p];
              const double* grow = G + static_cast<size_t>(i) * n;
              double* gbrow = gb.data() + static_cast<size_t>(p) * n;
              for (int j = 0; j < n; ++j) gbrow[j] += av * grow[j];
            }
        }
      });
  return Tensor(out);
}

inline Tensor transpose(const Tensor& x) {
  require(x.rank() == 2, "transpose: expects a matrix, got " +
                             dims_str(x.shape()));
  int m = x.dim(0), n = x.dim(1);
  auto out = detail::new_node({n, m});
  const auto& xv = x.values();
  for (int i = 0; i < m; ++i)
    for (int j = 0; j < n; ++j)
      out->data[static_cast<size_t>(j) * m + i] =
          xv[static_cast<size_t>(i) * n + j];
  detail::attach(out, {x.node()}, [o = out.get(), px = x.node().get(), m, n] {
    auto& g = px->ensure_grad();
    for (int i = 0; i < m; ++i)
      for (int j = 0; j < n; ++j)
        g[static_cast<size_t>(i) * n + j] +=
            o->grad[static_cast<size_t>(j) * m + i];
  });
  return Tensor(out);
}

inline Tensor reshape(const Tensor& x, const Dims& dims) {
  require(dims_numel(dims) == x.numel(),
          "reshape: cannot view " + dims_str(x.shape()) + " as " +
              dims_str(dims));
  auto out = detail::new_node(dims);
  out->data = x.values();
  detail::attach(out, {x.node()}, [o = out.get(), px = x.node().get()] {
    auto& g = px->ensure_grad();
    for (size_t i = 0; i < g.size(); ++i) g[i] += o->grad[i];
  });
  return Tensor(out);
}

// ---------------------------------------------------------------------------
// Softmax

namespace detail {

// Shared softmax kernel over (base, stride, count) groups.
inline void softmax_grouped(const std::vector<double>& in,
                            std::vector<double>& out, size_t base,
                            size_t stride, int count) {
  double mx = in[base];
  for (int i = 1; i < count; ++i) mx = std::max(mx, in[base + i * stride]);
  double s = 0.0;
  for (int i = 0; i < count; ++i) {
    double e = std::exp(in[base + i * stride] - mx);
    out[base + i * stride] = e;
    s += e;
  }
  for (int i = 0; i < count; ++i) out[base + i * stride] /= s;
}

inline void softmax_grouped_backward(const std::vector<double>& p,
                                     const std::vector<double>& gout,
                                     std::vector<double>& gin, size_t base,
                                     size_t stride, int count) {
  double acc = 0.0;
  for (int i = 0; i < count; ++i)
    acc += gout[base + i * stride] * p[base + i * stride];
  for (int i = 0; i < count; ++i) {
    size_t idx = base + i * stride;
    gin[idx] += p[idx] * (gout[idx] - acc);
  }
}

}  // namespace detail

// Softmax along `axis` of a vector (axis 0) or matrix (axis 0 = down columns,
// axis 1 = along rows). Stabilized by max subtraction.
inline Tensor softmax(const Tensor& x, int axis) {
  for (double v : x.values())
    require(std::isfinite(v), "softmax: non-finite input");
  auto out = detail::new_node(x.shape());
  std::vector<std::pair<size_t, size_t>> groups;  // (base, stride)
  int count = 0;
  if (x.rank() == 1) {
    require(axis == 0, "softmax: vector input requires axis 0");
    count = x.dim(0);
    groups.push_back({0, 1});
  } else if (x.rank() == 2) {
    int m = x.dim(0), n = x.dim(1);
    require(axis == 0 || axis == 1, "softmax: axis must be 0 or 1");
    if (axis == 1) {
      count = n;
      for (int i = 0; i < m; ++i) groups.push_back({static_cast<size_t>(i) * n, 1});
    } else {
      count = m;
      for (int j = 0; j < n; ++j)
        groups.push_back({static_cast<size_t>(j), static_cast<size_t>(n)});
    }
  } else {
    fail("softmax: expects rank 1 or 2, got " + dims_str(x.shape()));
  }
  for (auto [base, stride] : groups)
    detail::softmax_grouped(x.values(), out->data, base, stride, count);
  detail::attach(out, {x.node()},
                 [o = out.get(), px = x.node().get(), groups, count] {
                   auto& g = px->ensure_grad();
                   for (auto [base, stride] : groups)
                     detail::softmax_grouped_backward(o->data, o->grad, g,
                                                      base, stride, count);
                 });
  return Tensor(out);
}

// Softmax over consecutive row groups of size k, independently per column.
// Input {G*k, d}; used for per-neighborhood per-channel attention weights.
// Each k x d block is swept row-major (columns share the sweep), which keeps
// the per-column reduction order identical to a strided column walk.
inline Tensor softmax_groups(const Tensor& x, int k) {
  require(x.rank() == 2, "softmax_groups: expects a matrix");
  require(k >= 1 && x.dim(0) % k == 0,
          "softmax_groups: rows " + std::to_string(x.dim(0)) +
              " not divisible by group size " + std::to_string(k));
  for (double v : x.values())
    require(std::isfinite(v), "softmax_groups: non-finite input");
  const int groups = x.dim(0) / k, d = x.dim(1);
  auto out = detail::new_node(x.shape());
  const double* X = x.values().data();
  double* O = out->data.data();
  std::vector<double> mx(static_cast<size_t>(d));
  std::vector<double> sum(static_cast<size_t>(d));
  for (int gidx = 0; gidx < groups; ++gidx) {
    const double* xb = X + static_cast<size_t>(gidx) * k * d;
    double* ob = O + static_cast<size_t>(gidx) * k * d;
    std::copy(xb, xb + d, mx.begin());
    for (int r = 1; r < k; ++r)
      for (int j = 0; j < d; ++j)
        mx[static_cast<size_t>(j)] =
            std::max(mx[static_cast<size_t>(j)], xb[static_cast<size_t>(r) * d + j]);
    std::fill(sum.begin(), sum.end(), 0.0);
    for (int r = 0; r < k; ++r)
      for (int j = 0; j < d; ++j) {
        double e = std::exp(xb[static_cast<size_t>(r) * d + j] -
                            mx[static_cast<size_t>(j)]);
        ob[static_cast<size_t>(r) * d + j] = e;
        sum[static_cast<size_t>(j)] += e;
      }
    for (int r = 0; r < k; ++r)
      for (int j = 0; j < d; ++j)
        ob[static_cast<size_t>(r) * d + j] /= sum[static_cast<size_t>(j)];
  }
  detail::attach(out, {x.node()},
                 [o = out.get(), px = x.node().get(), groups, d, k] {
                   auto& g = px->ensure_grad();
                   const double* P = o->data.data();
                   const double* GO = o->grad.data();
                   std::vector<double> acc(static_cast<size_t>(d));
                   for (int gidx = 0; gidx < groups; ++gidx) {
                     const size_t base = static_cast<size_t>(gidx) * k * d;
                     std::fill(acc.begin(), acc.end(), 0.0);
                     for (int r = 0; r < k; ++r)
                       for (int j = 0; j < d; ++j)
                         acc[static_cast<size_t>(j)] +=
                             GO[base + static_cast<size_t>(r) * d + j] *
                             P[base + static_cast<size_t>(r) * d + j];
                     for (int r = 0; r < k; ++r)
                       for (int j = 0; j < d; ++j) {
                         const size_t i = base + static_cast<size_t>(r) * d + j;
                         g[i] += P[i] * (GO[i] - acc[static_cast<size_t>(j)]);
                       }
                   }
                 });
  return Tensor(out);
}

// ---------------------------------------------------------------------------
// Reductions

inline Tensor sum(const Tensor& x) {
  auto out = detail::new_node(Dims{});
  double s = 0.0;
  for (double v : x.values()) s += v;
  out->data[0] = s;
  detail::attach(out, {x.node()}, [o = out.get(), px = x.node().get()] {
    auto& g = px->ensure_grad();
    for (size_t i = 0; i < g.size(); ++i) g[i] += o->grad[0];
  });
  return Tensor(out);
}

inline Tensor mean(const Tensor& x) {
  require(x.numel() > 0, "mean: empty tensor");
  auto out = detail::new_node(Dims{});
  double s = 0.0;
  for (double v : x.values()) s += v;
  double inv = 1.0 / static_cast<double>(x.numel());
  out->data[0] = s * inv;
  detail::attach(out, {x.node()}, [o = out.get(), px = x.node().get(), inv] {
    auto& g = px->ensure_grad();
    for (size_t i = 0; i < g.size(); ++i) g[i] += o->grad[0] * inv;
  });
  return Tensor(out);
}

// Column-wise max over all rows (max-pool over a point set). Ties route the
// gradient to the lowest row index.
inline Tensor max_over_rows(const Tensor& x) {
  require(x.rank() == 2 && x.dim(0) > 0, "max_over_rows: expects a non-empty matrix");
  int m = x.dim(0), n = x.dim(1);
  auto out = detail::new_node({n});
  std::vector<int> argmax(static_cast<size_t>(n), 0);
  const auto& xv = x.values();
  for (int j = 0; j < n; ++j) {
    double best = xv[j];
    int bi = 0;
    for (int i = 1; i < m; ++i) {
      double v = xv[static_cast<size_t>(i) * n + j];
      if (v > best) {
        best = v;
        bi = i;
      }
    }
    out->data[j] = best;
    argmax[j] = bi;
  }
  detail::attach(out, {x.node()},
                 [o = out.get(), px = x.node().get(), argmax, n] {
                   auto& g = px->ensure_grad();
                   for (int j = 0; j < n; ++j)
                     g[static_cast<size_t>(argmax[j]) * n + j] += o->grad[j];
                 });
  return Tensor(out);
}

inline Tensor mean_over_rows(const Tensor& x) {
  require(x.rank() == 2 && x.dim(0) > 0, "mean_over_rows: expects a non-empty matrix");
  int m = x.dim(0), n = x.dim(1);
  auto out = detail::new_node({n});
  const auto& xv = x.values();
  for (int i = 0; i < m; ++i)
    for (int j = 0; j < n; ++j) out->data[j] += xv[static_cast<size_t>(i) * n + j];
  double inv = 1.0 / m;
  for (int j = 0; j < n; ++j) out->data[j] *= inv;
  detail::attach(out, {x.node()},
                 [o = out.get(), px = x.node().get(), m, n, inv] {
                   auto& g = px->ensure_grad();
                   for (int i = 0; i < m; ++i)
                     for (int j = 0; j < n; ++j)
                       g[static_cast<size_t>(i) * n + j] += o->grad[j] * inv;
                 });
  return Tensor(out);
}

// Sums consecutive row groups of size k: {G*k, d} -> {G, d}.
inline Tensor sum_groups(const Tensor& x, int k) {
  require(x.rank() == 2, "sum_groups: expects a matrix");
  require(k >= 1 && x.dim(0) % k == 0,
          "sum_groups: rows not divisible by group size");
  int groups = x.dim(0) / k, d = x.dim(1);
  auto out = detail::new_node({groups, d});
  const auto& xv = x.values();
  for (int gidx = 0; gidx < groups; ++gidx)
    for (int i = 0; i < k; ++i)
      for (int j = 0; j < d; ++j)
        out->data[static_cast<size_t>(gidx) * d + j] +=
            xv[(static_cast<size_t>(gidx) * k + i) * d + j];
  detail::attach(out, {x.node()},
                 [o = out.get(), px = x.node().get(), groups, d, k] {
                   auto& g = px->ensure_grad();
                   for (int gidx = 0; gidx < groups; ++gidx)
                     for (int i = 0; i < k; ++i)
                       for (int j = 0; j < d; ++j)
                         g[(static_cast<size_t>(gidx) * k + i) * d + j] +=
                             o->grad[static_cast<size_t>(gidx) * d + j];
                 });
  return Tensor(out);
}

// ---------------------------------------------------------------------------
// Shuffling rows: concat, repeat, gather, slice

inline Tensor concat_cols(const Tensor& a, const Tensor& b) {
  require(a.rank() == 2 && b.rank() == 2 && a.dim(0) == b.dim(0),
          "concat_cols: row counts differ: " + dims_str(a.shape()) + " vs " +
              dims_str(b.shape()));
  int m = a.dim(0), na = a.dim(1), nb = b.dim(1);
  auto out = detail::new_node({m, na + nb});
  const auto& av = a.values();
  const auto& bv = b.values();
  for (int i = 0; i < m; ++i) {
    for (int j = 0; j < na; ++j)
      out->data[static_cast<size_t>(i) * (na + nb) + j] =
          av[static_cast<size_t>(i) * na + j];
    for (int j = 0; j < nb; ++j)
      out->data[static_cast<size_t>(i) * (na + nb) + na + j] =
          bv[static_cast<size_t>(i) * nb + j];
  }
  detail::attach(out, {a.node(), b.node()},
                 [o = out.get(), pa = a.node().get(), pb = b.node().get(), m,
                  na, nb] {
                   if (pa->requires_grad) {
                     auto& g = pa->ensure_grad();
                     for (int i = 0; i < m; ++i)
                       for (int j = 0; j < na; ++j)
                         g[static_cast<size_t>(i) * na + j] +=
                             o->grad[static_cast<size_t>(i) * (na + nb) + j];
                   }
                   if (pb->requires_grad) {
                     auto& g = pb->ensure_grad();
                     for (int i = 0; i < m; ++i)
                       for (int j = 0; j < nb; ++j)
                         g[static_cast<size_t>(i) * nb + j] +=
                             o->grad[static_cast<size_t>(i) * (na + nb) + na +
                                     j];
                   }
                 });
  return Tensor(out);
}

// Vector {n} tiled into {rows, n}.
inline Tensor repeat_row(const Tensor& v, int rows) {
  require(v.rank() == 1, "repeat_row: expects a vector");
  require(rows >= 1, "repeat_row: rows must be positive");
  int n = v.dim(0);
  auto out = detail::new_node({rows, n});
  const auto& vv = v.values();
  for (int i = 0; i < rows; ++i)
    for (int j = 0; j < n; ++j) out->data[static_cast<size_t>(i) * n + j] = vv[j];
  detail::attach(out, {v.node()},
                 [o = out.get(), pv = v.node().get(), rows, n] {
                   auto& g = pv->ensure_grad();
                   for (int i = 0; i < rows; ++i)
                     for (int j = 0; j < n; ++j)
                       g[j] += o->grad[static_cast<size_t>(i) * n + j];
                 });
  return Tensor(out);
}

// Each row repeated k consecutive times: {m, d} -> {m*k, d}.
inline Tensor repeat_rows(const Tensor& x, int k) {
  require(x.rank() == 2, "repeat_rows: expects a matrix");
  require(k >= 1, "repeat_rows: k must be positive");
  int m = x.dim(0), d = x.dim(1);
  auto out = detail::new_node({m * k, d});
  const auto& xv = x.values();
  for (int i = 0; i < m; ++i)
    for (int r = 0; r < k; ++r)
      for (int j = 0; j < d; ++j)
        out->data[(static_cast<size_t>(i) * k + r) * d + j] =
            xv[static_cast<size_t>(i) * d + j];
  detail::attach(out, {x.node()},
                 [o = out.get(), px = x.node().get(), m, d, k] {
                   auto& g = px->ensure_grad();
                   for (int i = 0; i < m; ++i)
                     for (int r = 0; r < k; ++r)
                       for (int j = 0; j < d; ++j)
                         g[static_cast<size_t>(i) * d + j] +=
                             o->grad[(static_cast<size_t>(i) * k + r) * d + j];
                 });
  return Tensor(out);
}

inline Tensor gather_rows(const Tensor& x, const std::vector<int>& idx) {
  require(x.rank() == 2, "gather_rows: expects a matrix");
  int m = x.dim(0), d = x.dim(1);
  for (int i : idx)
    if (i < 0 || i >= m)
      fail("gather_rows: index " + std::to_string(i) + " out of range [0, " +
           std::to_string(m) + ")");
  auto out = detail::new_node({static_cast<int>(idx.size()), d});
  const auto& xv = x.values();
  for (size_t r = 0; r < idx.size(); ++r)
    for (int j = 0; j < d; ++j)
      out->data[r * d + j] = xv[static_cast<size_t>(idx[r]) * d + j];
  detail::attach(out, {x.node()},
                 [o = out.get(), px = x.node().get(), idx, d] {
                   auto& g = px->ensure_grad();
                   for (size_t r = 0; r < idx.size(); ++r)
                     for (int j = 0; j < d; ++j)
                       g[static_cast<size_t>(idx[r]) * d + j] +=
                           o->grad[r * d + j];
                 });
  return Tensor(out);
}

inline Tensor slice_rows(const Tensor& x, int begin, int end) {
  require(x.rank() == 2, "slice_rows: expects a matrix");
  require(0 <= begin && begin < end && end <= x.dim(0),
          "slice_rows: invalid range [" + std::to_string(begin) + ", " +
              std::to_string(end) + ") for " + dims_str(x.shape()));
  int d = x.dim(1);
  auto out = detail::new_node({end - begin, d});
  const auto& xv = x.values();
  std::copy(xv.begin() + static_cast<size_t>(begin) * d,
            xv.begin() + static_cast<size_t>(end) * d, out->data.begin());
  detail::attach(out, {x.node()},
                 [o = out.get(), px = x.node().get(), begin, d] {
                   auto& g = px->ensure_grad();
                   for (size_t i = 0; i < o->grad.size(); ++i)
                     g[static_cast<size_t>(begin) * d + i] += o->grad[i];
                 });
  return Tensor(out);
}

// ---------------------------------------------------------------------------
// Convolution and spatial ops

// input {C_in,H,W}, kernel {C_out,C_in,kh,kw}; zero padding; odd kernels.
inline Tensor conv2d(const Tensor& input, const Tensor& kernel, int stride,
                     int dilation, int padding) {
  require(input.rank() == 3, "conv2d: input must be {C,H,W}, got " +
                                 dims_str(input.shape()));
  require(kernel.rank() == 4, "conv2d: kernel must be {Co,Ci,kh,kw}, got " +
                                  dims_str(kernel.shape()));
  require(kernel.dim(1) == input.dim(0),
          "conv2d: channel mismatch: input " + dims_str(input.shape()) +
              ", kernel " + dims_str(kernel.shape()));
  require(kernel.dim(2) % 2 == 1 && kernel.dim(3) % 2 == 1,
          "conv2d: kernel dims must be odd");
  require(stride >= 1 && dilation >= 1 && padding >= 0,
          "conv2d: stride/dilation must be >= 1, padding >= 0");
  const int ci = input.dim(0), h = input.dim(1), w = input.dim(2);
  const int co = kernel.dim(0), kh = kernel.dim(2), kw = kernel.dim(3);
  const int oh = (h + 2 * padding - dilation * (kh - 1) - 1) / stride + 1;
  const int ow = (w + 2 * padding - dilation * (kw - 1) - 1) / stride + 1;
  require(h + 2 * padding - dilation * (kh - 1) - 1 >= 0 &&
              w + 2 * padding - dilation * (kw - 1) - 1 >= 0 && oh > 0 &&
              ow > 0,
          "conv2d: non-positive output size for input " +
              dims_str(input.shape()) + " kernel " + dims_str(kernel.shape()));
  auto out = detail::new_node({co, oh, ow});
  const double* X = input.values().data();
  const double* K = kernel.values().data();
  // Hoisted-tap form: for each (ic, ky, kx) accumulate w * shifted input over
  // the precomputed in-bounds output range. Each output element still sums
  // its taps in ascending (ic, ky, kx) order, so the result is bit-identical
  // to the naive per-pixel loop while the inner loops stay branch-free.
  auto out_range = [stride, padding, dilation](int kpos, int in_n,
                                               int out_n) {
    int shift = kpos * dilation - padding;  // in = out*stride + shift
    int lo = shift < 0 ? (-shift + stride - 1) / stride : 0;
    int hi_excl = shift >= in_n
                      ? 0
                      : std::min(out_n, (in_n - 1 - shift) / stride + 1);
    return std::pair<int, int>{std::min(lo, out_n), std::max(hi_excl, 0)};
  };
  for (int oc = 0; oc < co; ++oc) {
    double* O = out->data.data() + static_cast<size_t>(oc) * oh * ow;
    for (int ic = 0; ic < ci; ++ic)
      for (int ky = 0; ky < kh; ++ky) {
        auto [oy_lo, oy_hi] = out_range(ky, h, oh);
        for (int kx = 0; kx < kw; ++kx) {
          auto [ox_lo, ox_hi] = out_range(kx, w, ow);
          if (oy_lo >= oy_hi || ox_lo >= ox_hi) continue;
          const double kv =
              K[((static_cast<size_t>(oc) * ci + ic) * kh + ky) * kw + kx];
          const int y_shift = ky * dilation - padding;
          const int x_shift = kx * dilation - padding;
          for (int oy = oy_lo; oy < oy_hi; ++oy) {
            const double* xrow =
                X + (static_cast<size_t>(ic) * h + oy * stride + y_shift) * w;
            double* orow = O + static_cast<size_t>(oy) * ow;
            if (stride == 1) {
              for (int ox = ox_lo; ox < ox_hi; ++ox)
                orow[ox] += kv * xrow[ox + x_shift];
            } else {
              for (int ox = ox_lo; ox < ox_hi; ++ox)
                orow[ox] += kv * xrow[ox * stride + x_shift];
            }
          }
        }
      }
  }
  detail::attach(
      out, {input.node(), kernel.node()},
      [o = out.get(), px = input.node().get(), pk = kernel.node().get(), ci, h,
       w, co, kh, kw, oh, ow, stride, dilation, padding, out_range] {
        const double* G = o->grad.data();
        const bool gx = px->requires_grad, gk = pk->requires_grad;
        auto* gxd = gx ? px->ensure_grad().data() : nullptr;
        auto* gkd = gk ? pk->ensure_grad().data() : nullptr;
        const double* X = px->data.data();
        const double* K = pk->data.data();
        for (int oc = 0; oc < co; ++oc) {
          const double* grow0 = G + static_cast<size_t>(oc) * oh * ow;
          for (int ic = 0; ic < ci; ++ic)
            for (int ky = 0; ky < kh; ++ky) {
              auto [oy_lo, oy_hi] = out_range(ky, h, oh);
              for (int kx = 0; kx < kw; ++kx) {
                auto [ox_lo, ox_hi] = out_range(kx, w, ow);
                if (oy_lo >= oy_hi || ox_lo >= ox_hi) continue;
                const size_t ki =
                    ((static_cast<size_t>(oc) * ci + ic) * kh + ky) * kw + kx;
                const double kv = K[ki];
                const int y_shift = ky * dilation - padding;
                const int x_shift = kx * dilation - padding;
                double kacc = 0.0;
                for (int oy = oy_lo; oy < oy_hi; ++oy) {
                  const double* grow = grow0 + static_cast<size_t>(oy) * ow;
                  const size_t in_row =
                      (static_cast<size_t>(ic) * h + oy * stride + y_shift) * w;
                  for (int ox = ox_lo; ox < ox_hi; ++ox) {
                    const size_t xi = in_row + ox * stride + x_shift;
                    if (gx) gxd[xi] += grow[ox] * kv;
                    if (gk) kacc += grow[ox] * X[xi];
                  }
                }
                if (gk) gkd[ki] += kacc;
              }
            }
        }
      });
  return Tensor(out);
}

inline Tensor global_avg_pool(const Tensor& x) {
  require(x.rank() == 3, "global_avg_pool: expects {C,H,W}");
  int c = x.dim(0);
  long long hw = static_cast<long long>(x.dim(1)) * x.dim(2);
  auto out = detail::new_node({c});
  const auto& xv = x.values();
  double inv = 1.0 / static_cast<double>(hw);
  for (int ci = 0; ci < c; ++ci) {
    double s = 0.0;
    for (long long i = 0; i < hw; ++i) s += xv[ci * hw + i];
    out->data[ci] = s * inv;
  }
  detail::attach(out, {x.node()},
                 [o = out.get(), px = x.node().get(), c, hw, inv] {
                   auto& g = px->ensure_grad();
                   for (int ci = 0; ci < c; ++ci)
                     for (long long i = 0; i < hw; ++i)
                       g[ci * hw + i] += o->grad[ci] * inv;
                 });
  return Tensor(out);
}

inline Tensor scale_channels(const Tensor& x, const Tensor& s) {
  require(x.rank() == 3 && s.rank() == 1 && s.dim(0) == x.dim(0),
          "scale_channels: scale " + dims_str(s.shape()) +
              " does not match volume " + dims_str(x.shape()));
  int c = x.dim(0);
  long long hw = static_cast<long long>(x.dim(1)) * x.dim(2);
  auto out = detail::new_node(x.shape());
  const auto& xv = x.values();
  const auto& sv = s.values();
  for (int ci = 0; ci < c; ++ci)
    for (long long i = 0; i < hw; ++i)
      out->data[ci * hw + i] = xv[ci * hw + i] * sv[ci];
  detail::attach(out, {x.node(), s.node()},
                 [o = out.get(), px = x.node().get(), ps = s.node().get(), c,
                  hw] {
                   if (px->requires_grad) {
                     auto& g = px->ensure_grad();
                     for (int ci = 0; ci < c; ++ci)
                       for (long long i = 0; i < hw; ++i)
                         g[ci * hw + i] += o->grad[ci * hw + i] * ps->data[ci];
                   }
                   if (ps->requires_grad) {
                     auto& g = ps->ensure_grad();
                     for (int ci = 0; ci < c; ++ci)
                       for (long long i = 0; i < hw; ++i)
                         g[ci] += o->grad[ci * hw + i] * px->data[ci * hw + i];
                   }
                 });
  return Tensor(out);
}

// Bilinear upsampling by an integer factor, align-corners-false, edges
// clamped.
inline Tensor upsample_bilinear(const Tensor& x, int factor) {
  require(x.rank() == 3, "upsample_bilinear: expects {C,H,W}");
  require(factor >= 1, "upsample_bilinear: factor must be >= 1");
  const int c = x.dim(0), h = x.dim(1), w = x.dim(2);
  const int oh = h * factor, ow = w * factor;
  auto out = detail::new_node({c, oh, ow});
  // taps[o] = (i0, i1, t): out row o reads rows i0,i1 with weight (1-t, t)
  struct Tap {
    int i0, i1;
    double t;
  };
  auto make_taps = [factor](int in_n, int out_n) {
    std::vector<Tap> taps(static_cast<size_t>(out_n));
    for (int o = 0; o < out_n; ++o) {
      double src = (o + 0.5) / factor - 0.5;
      double fl = std::floor(src);
      int i0 = static_cast<int>(fl);
      double t = src - fl;
      int c0 = std::clamp(i0, 0, in_n - 1);
      int c1 = std::clamp(i0 + 1, 0, in_n - 1);
      taps[static_cast<size_t>(o)] = {c0, c1, t};
    }
    return taps;
  };
  auto ty = make_taps(h, oh);
  auto tx = make_taps(w, ow);
  const auto& xv = x.values();
  for (int ci = 0; ci < c; ++ci)
    for (int oy = 0; oy < oh; ++oy)
      for (int ox = 0; ox < ow; ++ox) {
        const Tap& a = ty[static_cast<size_t>(oy)];
        const Tap& b = tx[static_cast<size_t>(ox)];
        auto at = [&](int yy, int xx) {
          return xv[(static_cast<size_t>(ci) * h + yy) * w + xx];
        };
        double v0 = (1 - b.t) * at(a.i0, b.i0) + b.t * at(a.i0, b.i1);
        double v1 = (1 - b.t) * at(a.i1, b.i0) + b.t * at(a.i1, b.i1);
        out->data[(static_cast<size_t>(ci) * oh + oy) * ow + ox] =
            (1 - a.t) * v0 + a.t * v1;
      }
  detail::attach(out, {x.node()},
                 [o = out.get(), px = x.node().get(), c, h, w, oh, ow, ty,
                  tx] {
                   auto& g = px->ensure_grad();
                   for (int ci = 0; ci < c; ++ci)
                     for (int oy = 0; oy < oh; ++oy)
                       for (int ox = 0; ox < ow; ++ox) {
                         const auto& a = ty[static_cast<size_t>(oy)];
                         const auto& b = tx[static_cast<size_t>(ox)];
                         double go =
                             o->grad[(static_cast<size_t>(ci) * oh + oy) * ow +
                                     ox];
                         auto acc = [&](int yy, int xx, double wgt) {
                           g[(static_cast<size_t>(ci) * h + yy) * w + xx] +=
                               wgt * go;
                         };
                         acc(a.i0, b.i0, (1 - a.t) * (1 - b.t));
                         acc(a.i0, b.i1, (1 - a.t) * b.t);
                         acc(a.i1, b.i0, a.t * (1 - b.t));
                         acc(a.i1, b.i1, a.t * b.t);
                       }
                 });
  return Tensor(out);
}

// Samples per-point features from a feature map at image-space coordinates.
// fmap {C,fh,fw}, coords {P,2} with (x,y) in [0, image_size). Image coords
// map to feature space by f = (x + 0.5) * (fsize / image_size) - 0.5
// (align-corners-false); the four surrounding cells are read edge-clamped.
// Differentiable w.r.t. both the feature map and the coordinates.
inline Tensor bilinear_sample(const Tensor& fmap, const Tensor& coords,
                              int image_size) {
  require(fmap.rank() == 3, "bilinear_sample: fmap must be {C,h,w}");
  require(coords.rank() == 2 && coords.dim(1) == 2,
          "bilinear_sample: coords must be {P,2}, got " +
              dims_str(coords.shape()));
  require(image_size > 0, "bilinear_sample: image_size must be positive");
  const int c = fmap.dim(0), fh = fmap.dim(1), fw = fmap.dim(2);
  const int p = coords.dim(0);
  const double sx = static_cast<double>(fw) / image_size;
  const double sy = static_cast<double>(fh) / image_size;
  const auto& cv = coords.values();
  for (int i = 0; i < p; ++i) {
    double x = cv[static_cast<size_t>(i) * 2], y = cv[static_cast<size_t>(i) * 2 + 1];
    if (!(x >= 0 && x < image_size && y >= 0 && y < image_size))
      fail("bilinear_sample: coordinate (" + std::to_string(x) + ", " +
           std::to_string(y) + ") outside [0, " + std::to_string(image_size) +
           ")");
  }
  auto out = detail::new_node({p, c});
  struct Cell {
    int x0, x1, y0, y1;
    double tx, ty;
  };
  std::vector<Cell> cells(static_cast<size_t>(p));
  const auto& fv = fmap.values();
  for (int i = 0; i < p; ++i) {
    double fx = (cv[static_cast<size_t>(i) * 2] + 0.5) * sx - 0.5;
    double fy = (cv[static_cast<size_t>(i) * 2 + 1] + 0.5) * sy - 0.5;
    double flx = std::floor(fx), fly = std::floor(fy);
    Cell cell;
    cell.tx = fx - flx;
    cell.ty = fy - fly;
    cell.x0 = std::clamp(static_cast<int>(flx), 0, fw - 1);
    cell.x1 = std::clamp(static_cast<int>(flx) + 1, 0, fw - 1);
    cell.y0 = std::clamp(static_cast<int>(fly), 0, fh - 1);
    cell.y1 = std::clamp(static_cast<int>(fly) + 1, 0, fh - 1);
    cells[static_cast<size_t>(i)] = cell;
    for (int ch = 0; ch < c; ++ch) {
      auto at = [&](int yy, int xx) {
        return fv[(static_cast<size_t>(ch) * fh + yy) * fw + xx];
      };
      double v0 = (1 - cell.tx) * at(cell.y0, cell.x0) +
                  cell.tx * at(cell.y0, cell.x1);
      double v1 = (1 - cell.tx) * at(cell.y1, cell.x0) +
                  cell.tx * at(cell.y1, cell.x1);
      out->data[static_cast<size_t>(i) * c + ch] =
          (1 - cell.ty) * v0 + cell.ty * v1;
    }
  }
  detail::attach(
      out, {fmap.node(), coords.node()},
      [o = out.get(), pf = fmap.node().get(), pc = coords.node().get(), c, fh,
       fw, p, sx, sy, cells] {
        const bool gf = pf->requires_grad, gc = pc->requires_grad;
        auto* gfd = gf ? pf->ensure_grad().data() : nullptr;
        auto* gcd = gc ? pc->ensure_grad().data() : nullptr;
        const double* F = pf->data.data();
        for (int i = 0; i < p; ++i) {
          const auto& cell = cells[static_cast<size_t>(i)];
          for (int ch = 0; ch < c; ++ch) {
            double go = o->grad[static_cast<size_t>(i) * c + ch];
            if (go == 0.0) continue;
            auto idx = [&](int yy, int xx) {
              return (static_cast<size_t>(ch) * fh + yy) * fw + xx;
            };
            if (gf) {
              gfd[idx(cell.y0, cell.x0)] += go * (1 - cell.ty) * (1 - cell.tx);
              gfd[idx(cell.y0, cell.x1)] += go * (1 - cell.ty) * cell.tx;
              gfd[idx(cell.y1, cell.x0)] += go * cell.ty * (1 - cell.tx);
              gfd[idx(cell.y1, cell.x1)] += go * cell.ty * cell.tx;
            }
            if (gc) {
              double dvdtx =
                  (1 - cell.ty) * (F[idx(cell.y0, cell.x1)] -
                                   F[idx(cell.y0, cell.x0)]) +
                  cell.ty * (F[idx(cell.y1, cell.x1)] -
                             F[idx(cell.y1, cell.x0)]);
              double dvdty =
                  (1 - cell.tx) * (F[idx(cell.y1, cell.x0)] -
                                   F[idx(cell.y0, cell.x0)]) +
                  cell.tx * (F[idx(cell.y1, cell.x1)] -
                             F[idx(cell.y0, cell.x1)]);
              gcd[static_cast<size_t>(i) * 2] += go * dvdtx * sx;
              gcd[static_cast<size_t>(i) * 2 + 1] += go * dvdty * sy;
            }
          }
        }
      });
  return Tensor(out);
}

// ---------------------------------------------------------------------------
// Backward pass

// Reverse-mode sweep from a scalar root. Gradients accumulate additively into
// every requires_grad leaf; the graph is released afterwards so tensors decay
// to plain values.
inline void backward(const Tensor& root) {
  require(root.numel() == 1,
          "backward: root must be scalar, got " + dims_str(root.shape()));
  using detail::Node;
  std::vector<Node*> order;
  std::unordered_set<Node*> seen;
  std::vector<std::pair<Node*, size_t>> stack;
  stack.push_back({root.node().get(), 0});
  seen.insert(root.node().get());
  while (!stack.empty()) {
    auto& [node, next] = stack.back();
    if (next < node->parents.size()) {
      Node* parent = node->parents[next++].get();
      if (seen.insert(parent).second) stack.push_back({parent, 0});
    } else {
      order.push_back(node);
      stack.pop_back();
    }
  }
  root.node()->ensure_grad();
  root.node()->grad[0] += 1.0;
  for (auto it = order.rbegin(); it != order.rend(); ++it) {
    Node* n = *it;
    if (n->backprop) {
      n->ensure_grad();
      n->backprop();
    }
  }
  // Free the graph; leaves keep their accumulated gradients.
  for (Node* n : order) {
    n->backprop = nullptr;
    n->parents.clear();
  }
}

// ---------------------------------------------------------------------------
// Gradient checking

using TensorFn = std::function<Tensor(const std::vector<Tensor>&)>;

// Compares reverse-mode gradients of the scalar function f against central
// finite differences. Returns the max over all input elements of
// |ad - fd| / max(1e-8, |ad| + |fd|).
inline double grad_check(const TensorFn& f, std::vector<Tensor> inputs,
                         double h = 1e-5) {
  for (auto& t : inputs) {
    t.set_requires_grad(true);
    t.zero_grad();
  }
  Tensor out = f(inputs);
  require(out.numel() == 1, "grad_check: f must be scalar-valued");
  backward(out);
  std::vector<std::vector<double>> analytic;
  analytic.reserve(inputs.size());
  for (auto& t : inputs) analytic.push_back(t.grad());
  double max_err = 0.0;
  for (size_t ti = 0; ti < inputs.size(); ++ti) {
    auto& data = inputs[ti].raw_data();
    for (size_t i = 0; i < data.size(); ++i) {
      double keep = data[i];
      data[i] = keep + h;
      double fp = f(inputs).item();
      data[i] = keep - h;
      double fm = f(inputs).item();
      data[i] = keep;
      double fd = (fp - fm) / (2.0 * h);
      double ad = analytic[ti][i];
      double err =
          std::abs(ad - fd) / std::max(1e-8, std::abs(ad) + std::abs(fd));
      max_err = std::max(max_err, err);
    }
  }
  return max_err;
}

}  // namespace shapereg
