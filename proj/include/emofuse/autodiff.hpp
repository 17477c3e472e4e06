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

#pragma once

// Minimal reverse-mode automatic differentiation over dense row-major
// float64 tensors.
//
// Operations executed while a Graph is alive on the current thread are
// recorded on it when at least one input requires a gradient. Creation order
// is a topological order, so backward() simply replays the records in
// reverse. Without a live Graph every op is a plain forward computation,
// which is how inference runs.

#include <cstddef>
#include <functional>
#include <memory>
#include <span>
#include <string>
#include <vector>

namespace emofuse {
class Rng;
}

namespace emofuse::ad {

using Shape = std::vector<std::size_t>;

std::size_t shape_size(const Shape& s);
std::string shape_str(const Shape& s);

struct Node {
  Shape shape;
  std::vector<double> value;
  std::vector<double> grad;  // empty until a gradient flows in
  bool requires_grad = false;

  void ensure_grad() {
    if (grad.empty()) grad.assign(value.size(), 0.0);
  }
};

class Tensor {
 public:
  Tensor() = default;
  Tensor(Shape shape, std::vector<double> values, bool requires_grad = false);

  static Tensor zeros(Shape shape, bool requires_grad = false);
  static Tensor full(Shape shape, double v, bool requires_grad = false);
  static Tensor scalar(double v);
  // (rows x cols) matrix from row-major data.
  static Tensor matrix(std::size_t rows, std::size_t cols,
                       std::vector<double> values, bool requires_grad = false);

  bool defined() const { return static_cast<bool>(node_); }
  const Shape& shape() const { return node_->shape; }
  std::size_t rank() const { return node_->shape.size(); }
  std::size_t dim(std::size_t i) const { return node_->shape.at(i); }
  std::size_t size() const { return node_->value.size(); }

  std::span<double> data() { return node_->value; }
  std::span<const double> data() const { return node_->value; }
  const std::vector<double>& values() const { return node_->value; }

  bool has_grad() const { return !node_->grad.empty(); }
  std::span<const double> grad() const { return node_->grad; }
  std::span<double> grad_mut() { return node_->grad; }
  void zero_grad() { node_->grad.clear(); }

  bool requires_grad() const { return node_->requires_grad; }
  void set_requires_grad(bool on) { node_->requires_grad = on; }

  double item() const;
  double at(std::size_t i) const { return node_->value[i]; }
  double at(std::size_t r, std::size_t c) const {
    return node_->value[r * node_->shape.back() + c];
  }

  // Value copy without gradient tracking.
  Tensor detach() const;

  const std::shared_ptr<Node>& node() const { return node_; }

 private:
  std::shared_ptr<Node> node_;
};

// Recording context. Construction makes the graph current for this thread;
// destruction restores the previously current one.
class Graph {
 public:
  using BackwardFn = std::function<void(const Node& out)>;

  Graph();
  ~Graph();
  Graph(const Graph&) = delete;
  Graph& operator=(const Graph&) = delete;

  static Graph* current();

  std::size_t size() const { return records_.size(); }

  // Populates grads of every requires_grad tensor reachable from loss.
  // loss must hold exactly one element.
  void backward(const Tensor& loss);

  // Drops all records (and the activations they keep alive).
  void reset() { records_.clear(); }

  void record(const Tensor& out, BackwardFn fn);

 private:
  struct Record {
    std::shared_ptr<Node> out;
    BackwardFn fn;
  };
  std::vector<Record> records_;
  Graph* previous_;
};

// Shorthand for Graph::current()->backward(loss).
void backward(const Tensor& loss);

// ---- elementwise / broadcasting ------------------------------------------
// add/sub/mul broadcast the smaller operand over leading dims: its shape,
// with leading 1s stripped, must be a suffix of the larger one's shape.
Tensor add(const Tensor& a, const Tensor& b);
Tensor sub(const Tensor& a, const Tensor& b);
Tensor mul(const Tensor& a, const Tensor& b);
Tensor scale(const Tensor& a, double s);
Tensor add_scalar(const Tensor& a, double s);
Tensor neg(const Tensor& a);
Tensor square(const Tensor& a);
Tensor exp(const Tensor& a);
Tensor log(const Tensor& a);
Tensor tanh(const Tensor& a);
Tensor sigmoid(const Tensor& a);
Tensor relu(const Tensor& a);
Tensor gelu(const Tensor& a);

// ---- shape ----------------------------------------------------------------
Tensor matmul(const Tensor& a, const Tensor& b);  // (m,k) x (k,n)
Tensor transpose(const Tensor& a);                // 2-D only
Tensor reshape(const Tensor& a, Shape shape);
Tensor concat(const std::vector<Tensor>& parts, std::size_t dim);
Tensor slice(const Tensor& a, std::size_t dim, std::size_t begin,
             std::size_t end);
Tensor gather_rows(const Tensor& a, std::span<const std::size_t> rows);
Tensor repeat_rows(const Tensor& row, std::size_t times);
// Rows where mask[t] is set are replaced by `row` (shape (d) or (1,d)).
Tensor where_rows(const Tensor& a, const std::vector<bool>& mask,
                  const Tensor& row);

// ---- reductions (dim reductions keep the reduced axis with size 1) -------
Tensor sum(const Tensor& a);
Tensor sum(const Tensor& a, std::size_t dim);
Tensor mean(const Tensor& a);
Tensor mean(const Tensor& a, std::size_t dim);
Tensor variance(const Tensor& a, std::size_t dim);  // population variance
// Σ_i w_i a_i with constant weights.
Tensor weighted_sum(const Tensor& a, std::span<const double> weights);

// ---- normalization / probability -----------------------------------------
Tensor softmax(const Tensor& a, std::size_t dim);
Tensor log_softmax(const Tensor& a, std::size_t dim);
Tensor layer_norm(const Tensor& x, const Tensor& gamma, const Tensor& beta,
                  double eps = 1e-5);
// Rows (last axis) scaled to unit L2 norm, norm floored at `floor`.
Tensor l2_normalize(const Tensor& a, double floor = 1e-12);
// out[t] = a[t, index[t]] for a 2-D tensor.
Tensor pick(const Tensor& a, std::span<const std::size_t> index);
// Mean negative log-likelihood of softmax(logits) rows at the labels.
Tensor cross_entropy(const Tensor& logits, std::span<const std::size_t> labels);

// ---- layers ---------------------------------------------------------------
// Valid 2-D convolution of a single-channel (T,F) input with C kernels
// (C,kh,kw) plus bias (C). Output (T', F'*C), element [t', f'*C + c].
Tensor conv2d(const Tensor& x, const Tensor& kernel, const Tensor& bias,
              std::size_t stride_t, std::size_t stride_f);
// Inverted dropout; identity when p == 0.
Tensor dropout(const Tensor& a, double p, Rng& rng);

}  // namespace emofuse::ad
