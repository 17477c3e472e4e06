// Copyright 2026 The emofuse Authors.
//
// Licensed under the Apache License, Version 2.0 (the "License");
// you may not use this file except in compliance with the License.
// You may obtain a copy of the License at
//
//     http://www.apache.org/licenses/LICENSE-2.0
//
// Unless required by applicable law or agreed to in writing, software
// distributed under the License is distributed on an "AS IS" BASIS,
// WITHOUT WARRANTIES OR CONDITIONS OF ANY KIND, either express or implied.
// See the License for the specific language governing permissions and
// limitations under the License.

#include "emofuse/autodiff.hpp"

#include <algorithm>
#include <cmath>
#include <numbers>
#include <numeric>
#include <sstream>

#include "emofuse/error.hpp"
#include "emofuse/rng.hpp"

namespace emofuse::ad {

namespace {

thread_local Graph* g_current = nullptr;

using NodePtr = std::shared_ptr<Node>;

Tensor make(Shape shape, std::vector<double> values) {
  return Tensor(std::move(shape), std::move(values), false);
}

bool any_requires_grad(std::initializer_list<const Tensor*> ts) {
  for (const Tensor* t : ts) {
    if (t->defined() && t->requires_grad()) return true;
  }
  return false;
}

// Records `fn` for `out` if a graph is live and some input needs a gradient.
template <typename Fn>
Tensor finish(Tensor out, std::initializer_list<const Tensor*> inputs, Fn&& fn) {
  Graph* g = Graph::current();
  if (g == nullptr || !any_requires_grad(inputs)) return out;
  out.set_requires_grad(true);
  g->record(out, std::forward<Fn>(fn));
  return out;
}

// Returns the gradient buffer of `n` if it participates, else nullptr.
std::vector<double>* grad_of(const NodePtr& n) {
  if (!n->requires_grad) return nullptr;
  n->ensure_grad();
  return &n->grad;
}

struct Axis {
  std::size_t outer = 1, len = 1, inner = 1;
};

Axis split_axis(const Shape& s, std::size_t dim) {
  if (dim >= s.size()) {
    throw ShapeError("axis " + std::to_string(dim) + " out of range for shape " +
                     shape_str(s));
  }
  Axis a;
  for (std::size_t i = 0; i < dim; ++i) a.outer *= s[i];
  a.len = s[dim];
  for (std::size_t i = dim + 1; i < s.size(); ++i) a.inner *= s[i];
  return a;
}

Shape strip_leading_ones(const Shape& s) {
  std::size_t i = 0;
  while (i < s.size() && s[i] == 1) ++i;
  return Shape(s.begin() + static_cast<std::ptrdiff_t>(i), s.end());
}

bool is_suffix(const Shape& small, const Shape& large) {
  if (small.size() > large.size()) return false;
  return std::equal(small.rbegin(), small.rend(), large.rbegin());
}

// Binary op plumbing: out shape and the modulus used to index each side.
struct Broadcast {
  Shape shape;
  std::size_t n = 0;
  std::size_t mod_a = 0;
  std::size_t mod_b = 0;
};

Broadcast broadcast(const Tensor& a, const Tensor& b, const char* op) {
  Broadcast r;
  if (a.shape() == b.shape()) {
    r.shape = a.shape();
  } else if (a.size() >= b.size() &&
             is_suffix(strip_leading_ones(b.shape()), a.shape())) {
    r.shape = a.shape();
  } else if (b.size() > a.size() &&
             is_suffix(strip_leading_ones(a.shape()), b.shape())) {
    r.shape = b.shape();
  } else {
    throw ShapeError(std::string(op) + ": incompatible shapes " +
                     shape_str(a.shape()) + " and " + shape_str(b.shape()));
  }
  r.n = shape_size(r.shape);
  r.mod_a = a.size();
  r.mod_b = b.size();
  return r;
}

template <typename Fwd, typename Bwd>
Tensor unary(const Tensor& a, Fwd fwd, Bwd dfdx) {
  std::vector<double> v(a.size());
  const auto& x = a.values();
  for (std::size_t i = 0; i < v.size(); ++i) v[i] = fwd(x[i]);
  Tensor out = make(a.shape(), std::move(v));
  auto an = a.node();
  return finish(out, {&a}, [an, dfdx](const Node& o) {
    auto* ga = grad_of(an);
    if (!ga) return;
    for (std::size_t i = 0; i < o.grad.size(); ++i) {
      (*ga)[i] += o.grad[i] * dfdx(an->value[i], o.value[i]);
    }
  });
}

void require_rank(const Tensor& t, std::size_t r, const char* op) {
  if (t.rank() != r) {
    throw ShapeError(std::string(op) + ": expected rank " + std::to_string(r) +
                     ", got shape " + shape_str(t.shape()));
  }
}

}  // namespace

std::size_t shape_size(const Shape& s) {
  return std::accumulate(s.begin(), s.end(), std::size_t{1},
                         std::multiplies<>());
}

std::string shape_str(const Shape& s) {
  std::ostringstream os;
  os << '(';
  for (std::size_t i = 0; i < s.size(); ++i) {
    if (i) os << ", ";
    os << s[i];
  }
  os << ')';
  return os.str();
}

// ---- Tensor ---------------------------------------------------------------

Tensor::Tensor(Shape shape, std::vector<double> values, bool requires_grad)
    : node_(std::make_shared<Node>()) {
  if (shape_size(shape) != values.size()) {
    throw ShapeError("tensor data length " + std::to_string(values.size()) +
                     " does not match shape " + shape_str(shape));
  }
  node_->shape = std::move(shape);
  node_->value = std::move(values);
  node_->requires_grad = requires_grad;
}

Tensor Tensor::zeros(Shape shape, bool requires_grad) {
  return full(std::move(shape), 0.0, requires_grad);
}

Tensor Tensor::full(Shape shape, double v, bool requires_grad) {
  const auto n = shape_size(shape);
  return Tensor(std::move(shape), std::vector<double>(n, v), requires_grad);
}

Tensor Tensor::scalar(double v) { return Tensor(Shape{}, {v}); }

Tensor Tensor::matrix(std::size_t rows, std::size_t cols,
                      std::vector<double> values, bool requires_grad) {
  return Tensor(Shape{rows, cols}, std::move(values), requires_grad);
}

double Tensor::item() const {
  if (size() != 1) {
    throw ContractError("item() on tensor of shape " + shape_str(shape()));
  }
  return node_->value[0];
}

Tensor Tensor::detach() const { return make(shape(), values()); }

// ---- Graph ----------------------------------------------------------------

Graph::Graph() : previous_(g_current) { g_current = this; }

Graph::~Graph() { g_current = previous_; }

Graph* Graph::current() { return g_current; }

void Graph::record(const Tensor& out, BackwardFn fn) {
  records_.push_back({out.node(), std::move(fn)});
}

void Graph::backward(const Tensor& loss) {
  if (!loss.defined() || loss.size() != 1) {
    throw ContractError("backward() needs a scalar loss, got shape " +
                        (loss.defined() ? shape_str(loss.shape()) : "(null)"));
  }
  if (!loss.requires_grad()) return;
  loss.node()->ensure_grad();
  loss.node()->grad[0] += 1.0;
  for (auto it = records_.rbegin(); it != records_.rend(); ++it) {
    if (it->out->grad.empty()) continue;
    it->fn(*it->out);
  }
}

void backward(const Tensor& loss) {
  Graph* g = Graph::current();
  if (g == nullptr) throw StateError("backward() without a live Graph");
  g->backward(loss);
}

// ---- elementwise ----------------------------------------------------------

Tensor add(const Tensor& a, const Tensor& b) {
  const auto bc = broadcast(a, b, "add");
  std::vector<double> v(bc.n);
  const auto& x = a.values();
  const auto& y = b.values();
  for (std::size_t i = 0; i < bc.n; ++i) v[i] = x[i % bc.mod_a] + y[i % bc.mod_b];
  auto an = a.node(), bn = b.node();
  return finish(make(bc.shape, std::move(v)), {&a, &b}, [an, bn, bc](const Node& o) {
    if (auto* ga = grad_of(an)) {
      for (std::size_t i = 0; i < bc.n; ++i) (*ga)[i % bc.mod_a] += o.grad[i];
    }
    if (auto* gb = grad_of(bn)) {
      for (std::size_t i = 0; i < bc.n; ++i) (*gb)[i % bc.mod_b] += o.grad[i];
    }
  });
}

Tensor sub(const Tensor& a, const Tensor& b) {
  const auto bc = broadcast(a, b, "sub");
  std::vector<double> v(bc.n);
  const auto& x = a.values();
  const auto& y = b.values();
  for (std::size_t i = 0; i < bc.n; ++i) v[i] = x[i % bc.mod_a] - y[i % bc.mod_b];
  auto an = a.node(), bn = b.node();
  return finish(make(bc.shape, std::move(v)), {&a, &b}, [an, bn, bc](const Node& o) {
    if (auto* ga = grad_of(an)) {
      for (std::size_t i = 0; i < bc.n; ++i) (*ga)[i % bc.mod_a] += o.grad[i];
    }
    if (auto* gb = grad_of(bn)) {
      for (std::size_t i = 0; i < bc.n; ++i) (*gb)[i % bc.mod_b] -= o.grad[i];
    }
  });
}

Tensor mul(const Tensor& a, const Tensor& b) {
  const auto bc = broadcast(a, b, "mul");
  std::vector<double> v(bc.n);
  const auto& x = a.values();
  const auto& y = b.values();
  for (std::size_t i = 0; i < bc.n; ++i) v[i] = x[i % bc.mod_a] * y[i % bc.mod_b];
  auto an = a.node(), bn = b.node();
  return finish(make(bc.shape, std::move(v)), {&a, &b}, [an, bn, bc](const Node& o) {
    if (auto* ga = grad_of(an)) {
      for (std::size_t i = 0; i < bc.n; ++i) {
        (*ga)[i % bc.mod_a] += o.grad[i] * bn->value[i % bc.mod_b];
      }
    }
    if (auto* gb = grad_of(bn)) {
      for (std::size_t i = 0; i < bc.n; ++i) {
        (*gb)[i % bc.mod_b] += o.grad[i] * an->value[i % bc.mod_a];
      }
    }
  });
}

Tensor scale(const Tensor& a, double s) {
  return unary(
      a, [s](double x) { return s * x; }, [s](double, double) { return s; });
}

Tensor add_scalar(const Tensor& a, double s) {
  return unary(
      a, [s](double x) { return x + s; }, [](double, double) { return 1.0; });
}

Tensor neg(const Tensor& a) { return scale(a, -1.0); }

Tensor square(const Tensor& a) {
  return unary(
      a, [](double x) { return x * x; }, [](double x, double) { return 2.0 * x; });
}

Tensor exp(const Tensor& a) {
  return unary(
      a, [](double x) { return std::exp(x); }, [](double, double y) { return y; });
}

Tensor log(const Tensor& a) {
  return unary(
      a, [](double x) { return std::log(x); },
      [](double x, double) { return 1.0 / x; });
}

Tensor tanh(const Tensor& a) {
  return unary(
      a, [](double x) { return std::tanh(x); },
      [](double, double y) { return 1.0 - y * y; });
}

Tensor sigmoid(const Tensor& a) {
  return unary(
      a, [](double x) { return 1.0 / (1.0 + std::exp(-x)); },
      [](double, double y) { return y * (1.0 - y); });
}

Tensor relu(const Tensor& a) {
  return unary(
      a, [](double x) { return x > 0.0 ? x : 0.0; },
      [](double x, double) { return x > 0.0 ? 1.0 : 0.0; });
}

Tensor gelu(const Tensor& a) {
  constexpr double c = 0.7978845608028654;  // sqrt(2/pi)
  return unary(
      a,
      [](double x) {
        return 0.5 * x * (1.0 + std::tanh(c * (x + 0.044715 * x * x * x)));
      },
      [](double x, double) {
        const double u = c * (x + 0.044715 * x * x * x);
        const double t = std::tanh(u);
        const double du = c * (1.0 + 3.0 * 0.044715 * x * x);
        return 0.5 * (1.0 + t) + 0.5 * x * (1.0 - t * t) * du;
      });
}

// ---- shape ----------------------------------------------------------------

Tensor matmul(const Tensor& a, const Tensor& b) {
  require_rank(a, 2, "matmul");
  require_rank(b, 2, "matmul");
  const std::size_t m = a.dim(0), k = a.dim(1), n = b.dim(1);
  if (b.dim(0) != k) {
    throw ShapeError("matmul: shapes " + shape_str(a.shape()) + " and " +
                     shape_str(b.shape()) + " do not align");
  }
  std::vector<double> v(m * n, 0.0);
  const double* x = a.values().data();
  const double* y = b.values().data();
  for (std::size_t i = 0; i < m; ++i) {
    double* out = v.data() + i * n;
    for (std::size_t p = 0; p < k; ++p) {
      const double s = x[i * k + p];
      if (s == 0.0) continue;
      const double* row = y + p * n;
      for (std::size_t j = 0; j < n; ++j) out[j] += s * row[j];
    }
  }
  auto an = a.node(), bn = b.node();
  return finish(make({m, n}, std::move(v)), {&a, &b}, [an, bn, m, k, n](const Node& o) {
    const double* g = o.grad.data();
    if (auto* ga = grad_of(an)) {
      // dA = dC * B^T
      const double* y = bn->value.data();
      for (std::size_t i = 0; i < m; ++i) {
        for (std::size_t p = 0; p < k; ++p) {
          const double* brow = y + p * n;
          const double* grow = g + i * n;
          double acc = 0.0;
          for (std::size_t j = 0; j < n; ++j) acc += grow[j] * brow[j];
          (*ga)[i * k + p] += acc;
        }
      }
    }
    if (auto* gb = grad_of(bn)) {
      // dB = A^T * dC
      const double* x = an->value.data();
      for (std::size_t i = 0; i < m; ++i) {
        const double* grow = g + i * n;
        for (std::size_t p = 0; p < k; ++p) {
          const double s = x[i * k + p];
          if (s == 0.0) continue;
          double* out = gb->data() + p * n;
          for (std::size_t j = 0; j < n; ++j) out[j] += s * grow[j];
        }
      }
    }
  });
}

Tensor transpose(const Tensor& a) {
  require_rank(a, 2, "transpose");
  const std::size_t r = a.dim(0), c = a.dim(1);
  std::vector<double> v(r * c);
  const auto& x = a.values();
  for (std::size_t i = 0; i < r; ++i)
    for (std::size_t j = 0; j < c; ++j) v[j * r + i] = x[i * c + j];
  auto an = a.node();
  return finish(make({c, r}, std::move(v)), {&a}, [an, r, c](const Node& o) {
    auto* ga = grad_of(an);
    if (!ga) return;
    for (std::size_t i = 0; i < r; ++i)
      for (std::size_t j = 0; j < c; ++j) (*ga)[i * c + j] += o.grad[j * r + i];
  });
}

Tensor reshape(const Tensor& a, Shape shape) {
  if (shape_size(shape) != a.size()) {
    throw ShapeError("reshape: cannot view " + shape_str(a.shape()) + " as " +
                     shape_str(shape));
  }
  auto an = a.node();
  return finish(make(std::move(shape), a.values()), {&a}, [an](const Node& o) {
    auto* ga = grad_of(an);
    if (!ga) return;
    for (std::size_t i = 0; i < o.grad.size(); ++i) (*ga)[i] += o.grad[i];
  });
}

Tensor concat(const std::vector<Tensor>& parts, std::size_t dim) {
  if (parts.empty()) throw ContractError("concat of zero tensors");
  const Shape& s0 = parts[0].shape();
  Shape out_shape = s0;
  std::size_t total = 0;
  for (const auto& p : parts) {
    const Shape& s = p.shape();
    bool ok = s.size() == s0.size() && dim < s.size();
    for (std::size_t i = 0; ok && i < s.size(); ++i) {
      if (i != dim && s[i] != s0[i]) ok = false;
    }
    if (!ok) {
      throw ShapeError("concat: shapes " + shape_str(s0) + " and " +
                       shape_str(s) + " differ off axis " + std::to_string(dim));
    }
    total += s[dim];
  }
  out_shape[dim] = total;
  const Axis ax = split_axis(out_shape, dim);
  std::vector<double> v(shape_size(out_shape));
  std::vector<std::size_t> offsets;
  std::size_t off = 0;
  for (const auto& p : parts) {
    offsets.push_back(off);
    const std::size_t len = p.dim(dim);
    const auto& x = p.values();
    for (std::size_t o = 0; o < ax.outer; ++o)
      for (std::size_t l = 0; l < len; ++l)
        for (std::size_t in = 0; in < ax.inner; ++in)
          v[(o * ax.len + off + l) * ax.inner + in] = x[(o * len + l) * ax.inner + in];
    off += len;
  }
  std::vector<NodePtr> nodes;
  bool need = false;
  for (const auto& p : parts) {
    nodes.push_back(p.node());
    need = need || p.requires_grad();
  }
  Tensor out = make(std::move(out_shape), std::move(v));
  Graph* g = Graph::current();
  if (g == nullptr || !need) return out;
  out.set_requires_grad(true);
  g->record(out, [nodes, offsets, ax, dim](const Node& o) {
    for (std::size_t pi = 0; pi < nodes.size(); ++pi) {
      auto* gp = grad_of(nodes[pi]);
      if (!gp) continue;
      const std::size_t len = nodes[pi]->shape[dim];
      for (std::size_t oo = 0; oo < ax.outer; ++oo)
        for (std::size_t l = 0; l < len; ++l)
          for (std::size_t in = 0; in < ax.inner; ++in)
            (*gp)[(oo * len + l) * ax.inner + in] +=
                o.grad[(oo * ax.len + offsets[pi] + l) * ax.inner + in];
    }
  });
  return out;
}

Tensor slice(const Tensor& a, std::size_t dim, std::size_t begin,
             std::size_t end) {
  const Axis ax = split_axis(a.shape(), dim);
  if (begin > end || end > ax.len) {
    throw ShapeError("slice [" + std::to_string(begin) + ", " +
                     std::to_string(end) + ") out of range for shape " +
                     shape_str(a.shape()));
  }
  const std::size_t len = end - begin;
  Shape s = a.shape();
  s[dim] = len;
  std::vector<double> v(shape_size(s));
  const auto& x = a.values();
  for (std::size_t o = 0; o < ax.outer; ++o)
    for (std::size_t l = 0; l < len; ++l)
      for (std::size_t in = 0; in < ax.inner; ++in)
        v[(o * len + l) * ax.inner + in] = x[(o * ax.len + begin + l) * ax.inner + in];
  auto an = a.node();
  return finish(make(std::move(s), std::move(v)), {&a}, [an, ax, begin, len](const Node& o) {
    auto* ga = grad_of(an);
    if (!ga) return;
    for (std::size_t oo = 0; oo < ax.outer; ++oo)
      for (std::size_t l = 0; l < len; ++l)
        for (std::size_t in = 0; in < ax.inner; ++in)
          (*ga)[(oo * ax.len + begin + l) * ax.inner + in] +=
              o.grad[(oo * len + l) * ax.inner + in];
  });
}

Tensor gather_rows(const Tensor& a, std::span<const std::size_t> rows) {
  require_rank(a, 2, "gather_rows");
  const std::size_t n = a.dim(0), d = a.dim(1);
  std::vector<std::size_t> idx(rows.begin(), rows.end());
  std::vector<double> v(idx.size() * d);
  for (std::size_t r = 0; r < idx.size(); ++r) {
    if (idx[r] >= n) throw ShapeError("gather_rows: row index out of range");
    std::copy_n(a.values().begin() + static_cast<std::ptrdiff_t>(idx[r] * d), d,
                v.begin() + static_cast<std::ptrdiff_t>(r * d));
  }
  auto an = a.node();
  return finish(make({idx.size(), d}, std::move(v)), {&a}, [an, idx, d](const Node& o) {
    auto* ga = grad_of(an);
    if (!ga) return;
    for (std::size_t r = 0; r < idx.size(); ++r)
      for (std::size_t j = 0; j < d; ++j) (*ga)[idx[r] * d + j] += o.grad[r * d + j];
  });
}

Tensor repeat_rows(const Tensor& row, std::size_t times) {
  const std::size_t d = row.size();
  if (!(row.rank() == 1 || (row.rank() == 2 && row.dim(0) == 1))) {
    throw ShapeError("repeat_rows: expected (d) or (1,d), got " +
                     shape_str(row.shape()));
  }
  std::vector<double> v(times * d);
  for (std::size_t t = 0; t < times; ++t)
    std::copy(row.values().begin(), row.values().end(),
              v.begin() + static_cast<std::ptrdiff_t>(t * d));
  auto rn = row.node();
  return finish(make({times, d}, std::move(v)), {&row}, [rn, times, d](const Node& o) {
    auto* gr = grad_of(rn);
    if (!gr) return;
    for (std::size_t t = 0; t < times; ++t)
      for (std::size_t j = 0; j < d; ++j) (*gr)[j] += o.grad[t * d + j];
  });
}

Tensor where_rows(const Tensor& a, const std::vector<bool>& mask,
                  const Tensor& row) {
  require_rank(a, 2, "where_rows");
  const std::size_t n = a.dim(0), d = a.dim(1);
  if (mask.size() != n || row.size() != d) {
    throw ShapeError("where_rows: mask/row do not match " + shape_str(a.shape()));
  }
  std::vector<double> v = a.values();
  for (std::size_t t = 0; t < n; ++t) {
    if (!mask[t]) continue;
    std::copy(row.values().begin(), row.values().end(),
              v.begin() + static_cast<std::ptrdiff_t>(t * d));
  }
  auto an = a.node(), rn = row.node();
  return finish(make(a.shape(), std::move(v)), {&a, &row}, [an, rn, mask, n, d](const Node& o) {
    auto* ga = grad_of(an);
    auto* gr = grad_of(rn);
    for (std::size_t t = 0; t < n; ++t) {
      for (std::size_t j = 0; j < d; ++j) {
        const double g = o.grad[t * d + j];
        if (mask[t]) {
          if (gr) (*gr)[j] += g;
        } else if (ga) {
          (*ga)[t * d + j] += g;
        }
      }
    }
  });
}

// ---- reductions -----------------------------------------------------------

Tensor sum(const Tensor& a) {
  double s = 0.0;
  for (double x : a.values()) s += x;
  auto an = a.node();
  return finish(make({}, {s}), {&a}, [an](const Node& o) {
    auto* ga = grad_of(an);
    if (!ga) return;
    for (auto& g : *ga) g += o.grad[0];
  });
}

Tensor sum(const Tensor& a, std::size_t dim) {
  const Axis ax = split_axis(a.shape(), dim);
  Shape s = a.shape();
  s[dim] = 1;
  std::vector<double> v(ax.outer * ax.inner, 0.0);
  const auto& x = a.values();
  for (std::size_t o = 0; o < ax.outer; ++o)
    for (std::size_t l = 0; l < ax.len; ++l)
      for (std::size_t in = 0; in < ax.inner; ++in)
        v[o * ax.inner + in] += x[(o * ax.len + l) * ax.inner + in];
  auto an = a.node();
  return finish(make(std::move(s), std::move(v)), {&a}, [an, ax](const Node& o) {
    auto* ga = grad_of(an);
    if (!ga) return;
    for (std::size_t oo = 0; oo < ax.outer; ++oo)
      for (std::size_t l = 0; l < ax.len; ++l)
        for (std::size_t in = 0; in < ax.inner; ++in)
          (*ga)[(oo * ax.len + l) * ax.inner + in] += o.grad[oo * ax.inner + in];
  });
}

Tensor mean(const Tensor& a) {
  if (a.size() == 0) throw ContractError("mean of empty tensor");
  return scale(sum(a), 1.0 / static_cast<double>(a.size()));
}

Tensor mean(const Tensor& a, std::size_t dim) {
  const Axis ax = split_axis(a.shape(), dim);
  if (ax.len == 0) throw ContractError("mean over empty axis");
  return scale(sum(a, dim), 1.0 / static_cast<double>(ax.len));
}

Tensor variance(const Tensor& a, std::size_t dim) {
  const Axis ax = split_axis(a.shape(), dim);
  if (ax.len == 0) throw ContractError("variance over empty axis");
  Shape s = a.shape();
  s[dim] = 1;
  const double inv_n = 1.0 / static_cast<double>(ax.len);
  const auto& x = a.values();
  std::vector<double> mu(ax.outer * ax.inner, 0.0), v(ax.outer * ax.inner, 0.0);
  for (std::size_t o = 0; o < ax.outer; ++o)
    for (std::size_t l = 0; l < ax.len; ++l)
      for (std::size_t in = 0; in < ax.inner; ++in)
        mu[o * ax.inner + in] += x[(o * ax.len + l) * ax.inner + in] * inv_n;
  for (std::size_t o = 0; o < ax.outer; ++o)
    for (std::size_t l = 0; l < ax.len; ++l)
      for (std::size_t in = 0; in < ax.inner; ++in) {
        const double dlt = x[(o * ax.len + l) * ax.inner + in] - mu[o * ax.inner + in];
        v[o * ax.inner + in] += dlt * dlt * inv_n;
      }
  auto an = a.node();
  return finish(make(std::move(s), std::move(v)), {&a}, [an, ax, mu, inv_n](const Node& o) {
    auto* ga = grad_of(an);
    if (!ga) return;
    for (std::size_t oo = 0; oo < ax.outer; ++oo)
      for (std::size_t l = 0; l < ax.len; ++l)
        for (std::size_t in = 0; in < ax.inner; ++in) {
          const std::size_t i = (oo * ax.len + l) * ax.inner + in;
          (*ga)[i] += o.grad[oo * ax.inner + in] * 2.0 * inv_n *
                      (an->value[i] - mu[oo * ax.inner + in]);
        }
  });
}

Tensor weighted_sum(const Tensor& a, std::span<const double> weights) {
  if (weights.size() != a.size()) {
    throw ShapeError("weighted_sum: " + std::to_string(weights.size()) +
                     " weights for shape " + shape_str(a.shape()));
  }
  std::vector<double> w(weights.begin(), weights.end());
  double s = 0.0;
  for (std::size_t i = 0; i < w.size(); ++i) s += w[i] * a.values()[i];
  auto an = a.node();
  return finish(make({}, {s}), {&a}, [an, w](const Node& o) {
    auto* ga = grad_of(an);
    if (!ga) return;
    for (std::size_t i = 0; i < w.size(); ++i) (*ga)[i] += o.grad[0] * w[i];
  });
}

// ---- normalization / probability -----------------------------------------

Tensor softmax(const Tensor& a, std::size_t dim) {
  const Axis ax = split_axis(a.shape(), dim);
  const auto& x = a.values();
  std::vector<double> v(x.size());
  for (std::size_t o = 0; o < ax.outer; ++o)
    for (std::size_t in = 0; in < ax.inner; ++in) {
      auto idx = [&](std::size_t l) { return (o * ax.len + l) * ax.inner + in; };
      double mx = -INFINITY;
      for (std::size_t l = 0; l < ax.len; ++l) mx = std::max(mx, x[idx(l)]);
      double z = 0.0;
      for (std::size_t l = 0; l < ax.len; ++l) {
        v[idx(l)] = std::exp(x[idx(l)] - mx);
        z += v[idx(l)];
      }
      for (std::size_t l = 0; l < ax.len; ++l) v[idx(l)] /= z;
    }
  auto an = a.node();
  return finish(make(a.shape(), std::move(v)), {&a}, [an, ax](const Node& o) {
    auto* ga = grad_of(an);
    if (!ga) return;
    for (std::size_t oo = 0; oo < ax.outer; ++oo)
      for (std::size_t in = 0; in < ax.inner; ++in) {
        auto idx = [&](std::size_t l) { return (oo * ax.len + l) * ax.inner + in; };
        double dot = 0.0;
        for (std::size_t l = 0; l < ax.len; ++l) dot += o.grad[idx(l)] * o.value[idx(l)];
        for (std::size_t l = 0; l < ax.len; ++l)
          (*ga)[idx(l)] += o.value[idx(l)] * (o.grad[idx(l)] - dot);
      }
  });
}

Tensor log_softmax(const Tensor& a, std::size_t dim) {
  const Axis ax = split_axis(a.shape(), dim);
  const auto& x = a.values();
  std::vector<double> v(x.size());
  for (std::size_t o = 0; o < ax.outer; ++o)
    for (std::size_t in = 0; in < ax.inner; ++in) {
      auto idx = [&](std::size_t l) { return (o * ax.len + l) * ax.inner + in; };
      double mx = -INFINITY;
      for (std::size_t l = 0; l < ax.len; ++l) mx = std::max(mx, x[idx(l)]);
      double z = 0.0;
      for (std::size_t l = 0; l < ax.len; ++l) z += std::exp(x[idx(l)] - mx);
      const double lz = mx + std::log(z);
      for (std::size_t l = 0; l < ax.len; ++l) v[idx(l)] = x[idx(l)] - lz;
    }
  auto an = a.node();
  return finish(make(a.shape(), std::move(v)), {&a}, [an, ax](const Node& o) {
    auto* ga = grad_of(an);
    if (!ga) return;
    for (std::size_t oo = 0; oo < ax.outer; ++oo)
      for (std::size_t in = 0; in < ax.inner; ++in) {
        auto idx = [&](std::size_t l) { return (oo * ax.len + l) * ax.inner + in; };
        double gs = 0.0;
        for (std::size_t l = 0; l < ax.len; ++l) gs += o.grad[idx(l)];
        for (std::size_t l = 0; l < ax.len; ++l)
          (*ga)[idx(l)] += o.grad[idx(l)] - std::exp(o.value[idx(l)]) * gs;
      }
  });
}

Tensor layer_norm(const Tensor& x, const Tensor& gamma, const Tensor& beta,
                  double eps) {
  if (x.rank() == 0) throw ShapeError("layer_norm on a scalar");
  const std::size_t d = x.shape().back();
  if (gamma.size() != d || beta.size() != d) {
    throw ShapeError("layer_norm: gamma/beta " + shape_str(gamma.shape()) +
                     " do not match features of " + shape_str(x.shape()));
  }
  const std::size_t rows = x.size() / d;
  std::vector<double> v(x.size()), xhat(x.size()), inv_std(rows);
  const auto& xv = x.values();
  for (std::size_t r = 0; r < rows; ++r) {
    const double* row = xv.data() + r * d;
    double mu = 0.0;
    for (std::size_t j = 0; j < d; ++j) mu += row[j];
    mu /= static_cast<double>(d);
    double var = 0.0;
    for (std::size_t j = 0; j < d; ++j) var += (row[j] - mu) * (row[j] - mu);
    var /= static_cast<double>(d);
    inv_std[r] = 1.0 / std::sqrt(var + eps);
    for (std::size_t j = 0; j < d; ++j) {
      xhat[r * d + j] = (row[j] - mu) * inv_std[r];
      v[r * d + j] = xhat[r * d + j] * gamma.values()[j] + beta.values()[j];
    }
  }
  auto xn = x.node(), gn = gamma.node(), bn = beta.node();
  return finish(make(x.shape(), std::move(v)), {&x, &gamma, &beta},
                [xn, gn, bn, xhat, inv_std, rows, d](const Node& o) {
    auto* gx = grad_of(xn);
    auto* gg = grad_of(gn);
    auto* gb = grad_of(bn);
    const double inv_d = 1.0 / static_cast<double>(d);
    for (std::size_t r = 0; r < rows; ++r) {
      const double* g = o.grad.data() + r * d;
      const double* xh = xhat.data() + r * d;
      if (gg || gb) {
        for (std::size_t j = 0; j < d; ++j) {
          if (gg) (*gg)[j] += g[j] * xh[j];
          if (gb) (*gb)[j] += g[j];
        }
      }
      if (gx) {
        double mean_dy = 0.0, mean_dyx = 0.0;
        for (std::size_t j = 0; j < d; ++j) {
          const double dy = g[j] * gn->value[j];
          mean_dy += dy;
          mean_dyx += dy * xh[j];
        }
        mean_dy *= inv_d;
        mean_dyx *= inv_d;
        for (std::size_t j = 0; j < d; ++j) {
          const double dy = g[j] * gn->value[j];
          (*gx)[r * d + j] += inv_std[r] * (dy - mean_dy - xh[j] * mean_dyx);
        }
      }
    }
  });
}

Tensor l2_normalize(const Tensor& a, double floor) {
  if (a.rank() == 0) throw ShapeError("l2_normalize on a scalar");
  const std::size_t d = a.shape().back();
  const std::size_t rows = a.size() / d;
  std::vector<double> v(a.size()), norms(rows);
  const auto& x = a.values();
  for (std::size_t r = 0; r < rows; ++r) {
    double s = 0.0;
    for (std::size_t j = 0; j < d; ++j) s += x[r * d + j] * x[r * d + j];
    norms[r] = std::max(std::sqrt(s), floor);
    for (std::size_t j = 0; j < d; ++j) v[r * d + j] = x[r * d + j] / norms[r];
  }
  auto an = a.node();
  return finish(make(a.shape(), std::move(v)), {&a}, [an, norms, rows, d, floor](const Node& o) {
    auto* ga = grad_of(an);
    if (!ga) return;
    for (std::size_t r = 0; r < rows; ++r) {
      const double* g = o.grad.data() + r * d;
      const double* y = o.value.data() + r * d;
      if (norms[r] <= floor) {
        for (std::size_t j = 0; j < d; ++j) (*ga)[r * d + j] += g[j] / norms[r];
        continue;
      }
      double gy = 0.0;
      for (std::size_t j = 0; j < d; ++j) gy += g[j] * y[j];
      for (std::size_t j = 0; j < d; ++j)
        (*ga)[r * d + j] += (g[j] - y[j] * gy) / norms[r];
    }
  });
}

Tensor pick(const Tensor& a, std::span<const std::size_t> index) {
  require_rank(a, 2, "pick");
  const std::size_t n = a.dim(0), k = a.dim(1);
  if (index.size() != n) throw ShapeError("pick: index count does not match rows");
  std::vector<std::size_t> idx(index.begin(), index.end());
  std::vector<double> v(n);
  for (std::size_t t = 0; t < n; ++t) {
    if (idx[t] >= k) throw ShapeError("pick: column index out of range");
    v[t] = a.values()[t * k + idx[t]];
  }
  auto an = a.node();
  return finish(make({n}, std::move(v)), {&a}, [an, idx, k](const Node& o) {
    auto* ga = grad_of(an);
    if (!ga) return;
    for (std::size_t t = 0; t < idx.size(); ++t) (*ga)[t * k + idx[t]] += o.grad[t];
  });
}

Tensor cross_entropy(const Tensor& logits, std::span<const std::size_t> labels) {
  require_rank(logits, 2, "cross_entropy");
  if (labels.size() != logits.dim(0)) {
    throw ShapeError("cross_entropy: label count does not match batch");
  }
  const Tensor lp = log_softmax(logits, 1);
  return neg(mean(pick(lp, labels)));
}

// ---- layers ---------------------------------------------------------------

Tensor conv2d(const Tensor& x, const Tensor& kernel, const Tensor& bias,
              std::size_t stride_t, std::size_t stride_f) {
  require_rank(x, 2, "conv2d");
  require_rank(kernel, 3, "conv2d kernel");
  const std::size_t T = x.dim(0), F = x.dim(1);
  const std::size_t C = kernel.dim(0), kh = kernel.dim(1), kw = kernel.dim(2);
  if (bias.size() != C) throw ShapeError("conv2d: bias does not match channels");
  if (stride_t == 0 || stride_f == 0) throw ParameterError("conv2d: zero stride");
  if (T < kh || F < kw) {
    throw ShapeError("conv2d: input " + shape_str(x.shape()) +
                     " smaller than kernel " + shape_str(kernel.shape()));
  }
  const std::size_t To = (T - kh) / stride_t + 1;
  const std::size_t Fo = (F - kw) / stride_f + 1;
  std::vector<double> v(To * Fo * C);
  const double* xv = x.values().data();
  const double* kv = kernel.values().data();
  for (std::size_t t = 0; t < To; ++t)
    for (std::size_t f = 0; f < Fo; ++f)
      for (std::size_t c = 0; c < C; ++c) {
        double acc = bias.values()[c];
        const double* kc = kv + c * kh * kw;
        for (std::size_t i = 0; i < kh; ++i) {
          const double* xr = xv + (t * stride_t + i) * F + f * stride_f;
          const double* kr = kc + i * kw;
          for (std::size_t j = 0; j < kw; ++j) acc += xr[j] * kr[j];
        }
        v[(t * Fo + f) * C + c] = acc;
      }
  auto xn = x.node(), kn = kernel.node(), bn = bias.node();
  return finish(make({To, Fo * C}, std::move(v)), {&x, &kernel, &bias},
                [=](const Node& o) {
    auto* gx = grad_of(xn);
    auto* gk = grad_of(kn);
    auto* gb = grad_of(bn);
    for (std::size_t t = 0; t < To; ++t)
      for (std::size_t f = 0; f < Fo; ++f)
        for (std::size_t c = 0; c < C; ++c) {
          const double g = o.grad[(t * Fo + f) * C + c];
          if (g == 0.0) continue;
          if (gb) (*gb)[c] += g;
          for (std::size_t i = 0; i < kh; ++i) {
            const std::size_t xo = (t * stride_t + i) * F + f * stride_f;
            const std::size_t ko = (c * kh + i) * kw;
            if (gk) {
              for (std::size_t j = 0; j < kw; ++j) (*gk)[ko + j] += g * xn->value[xo + j];
            }
            if (gx) {
              for (std::size_t j = 0; j < kw; ++j) (*gx)[xo + j] += g * kn->value[ko + j];
            }
          }
        }
  });
}

Tensor dropout(const Tensor& a, double p, Rng& rng) {
  if (p <= 0.0) return a;
  if (p >= 1.0) throw ParameterError("dropout probability must be < 1");
  const double keep = 1.0 / (1.0 - p);
  std::vector<double> mask(a.size());
  for (auto& m : mask) m = rng.bernoulli(p) ? 0.0 : keep;
  return mul(a, Tensor(a.shape(), std::move(mask)));
}

}  // namespace emofuse::ad
