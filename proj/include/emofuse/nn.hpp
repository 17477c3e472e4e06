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

// Trainable building blocks on top of the autodiff core. Every block owns
// shared tensor handles; collect() registers them in a ParameterSet under
// "<prefix>/<tensor>".

#include <cstddef>
#include <memory>
#include <optional>
#include <span>
#include <string>
#include <utility>
#include <vector>

#include "emofuse/autodiff.hpp"
#include "emofuse/checkpoint.hpp"
#include "json.hpp"

namespace emofuse {
class Rng;
}

namespace emofuse::nn {

using ad::Tensor;

// Dropout is active only when training and an rng is supplied.
struct RunMode {
  bool training = false;
  Rng* rng = nullptr;
  double dropout = 0.0;

  Tensor drop(const Tensor& x) const;
};

Tensor xavier_uniform(std::size_t in, std::size_t out, Rng& rng);
Tensor sinusoidal_positions(std::size_t length, std::size_t dim);

class Linear {
 public:
  Linear() = default;
  Linear(std::size_t in, std::size_t out, Rng& rng);

  // (n, in) -> (n, out)
  Tensor operator()(const Tensor& x) const;
  void collect(ParameterSet& ps, const std::string& prefix) const;
  void zero();

  std::size_t in_dim() const { return weight.dim(0); }
  std::size_t out_dim() const { return weight.dim(1); }

  Tensor weight;  // (in, out)
  Tensor bias;    // (out)
};

class LayerNorm {
 public:
  LayerNorm() = default;
  explicit LayerNorm(std::size_t dim);

  Tensor operator()(const Tensor& x) const { return ad::layer_norm(x, gamma, beta); }
  void collect(ParameterSet& ps, const std::string& prefix) const;

  Tensor gamma;
  Tensor beta;
};

struct CatConfig {
  std::size_t model_dim = 64;
  std::size_t n_heads = 4;
  std::size_t ff_dim = 128;
  double dropout = 0.1;
  bool positional_encoding = false;

  void validate() const;
  nlohmann::json to_json() const;
  static CatConfig from_json(const nlohmann::json& j);
};

class MultiHeadAttention {
 public:
  // Intermediate values of one call, for inspection in tests.
  struct Trace {
    std::vector<Tensor> weights;   // per head (Tq, Tk)
    std::vector<Tensor> values;    // per head projected V (Tk, d/h)
    std::vector<Tensor> contexts;  // per head (Tq, d/h), before output projection
  };

  MultiHeadAttention() = default;
  MultiHeadAttention(std::size_t dim, std::size_t n_heads, Rng& rng);

  // Queries from q_in (Tq, d); keys and values from kv_in (Tk, d).
  Tensor operator()(const Tensor& q_in, const Tensor& kv_in, Trace* trace = nullptr) const;
  void collect(ParameterSet& ps, const std::string& prefix) const;
  void zero();

  std::size_t n_heads() const { return n_heads_; }

  Linear query, key, value, output;

 private:
  std::size_t n_heads_ = 1;
};

class FeedForward {
 public:
  FeedForward() = default;
  FeedForward(std::size_t dim, std::size_t hidden, Rng& rng);

  Tensor operator()(const Tensor& x) const;
  void collect(ParameterSet& ps, const std::string& prefix) const;
  void zero();

  Linear up, down;
};

// One direction of the cross-attention transformer (pre-norm):
//   x = q + Attn(LN(q), LN(ctx));  out = x + FF(LN(x)).
class CrossAttentionLayer {
 public:
  CrossAttentionLayer(const CatConfig& cfg, Rng& rng);

  Tensor operator()(const Tensor& query_seq, const Tensor& context_seq,
                    const RunMode& mode = {}) const;
  void collect(ParameterSet& ps, const std::string& prefix) const;
  void zero();

  LayerNorm norm_query, norm_context, norm_ff;
  MultiHeadAttention attention;
  FeedForward ff;
};

// Bidirectional cross attention: A2B takes queries from A and keys/values
// from B, B2A the reverse. With `tied`, both directions share parameters.
class CatBlock {
 public:
  CatBlock(const CatConfig& cfg, Rng& rng, bool tied = false);

  // Returns (A2B: (T_A, d), B2A: (T_B, d)).
  std::pair<Tensor, Tensor> operator()(const Tensor& a, const Tensor& b,
                                       const RunMode& mode = {}) const;
  void collect(ParameterSet& ps, const std::string& prefix) const;
  void zero();

  const CatConfig& config() const { return cfg_; }

 private:
  CatConfig cfg_;
  std::shared_ptr<CrossAttentionLayer> a2b_;
  std::shared_ptr<CrossAttentionLayer> b2a_;
};

// CAT followed by a second attention stage over the two directional outputs.
// A2B attends over B2A (length T_A); B2A attends over A2B (length T_B) and is
// mean-pooled over time and broadcast onto A's timeline. The two are
// concatenated on the feature axis and projected back to d: output (T_A, d).
class CatFuse {
 public:
  CatFuse(const CatConfig& cfg, Rng& rng);

  Tensor operator()(const Tensor& a, const Tensor& b, const RunMode& mode = {}) const;
  void collect(ParameterSet& ps, const std::string& prefix) const;
  // Zeroes every weight and bias; layer-norm gains are kept.
  void zero();

  CatBlock block;
  MultiHeadAttention stage_a, stage_b;
  Linear merge;
};

class BiLstm {
 public:
  struct Direction {
    Linear input;      // (in, 4H), gate order i, f, g, o
    Tensor recurrent;  // (H, 4H)
  };

  BiLstm() = default;
  BiLstm(std::size_t in, std::size_t hidden, Rng& rng);

  // (T, in) -> (T, 2H): forward states then backward states per step.
  Tensor operator()(const Tensor& x) const;
  void collect(ParameterSet& ps, const std::string& prefix) const;

  static Tensor run(const Direction& dir, const Tensor& x, bool reverse);

  std::size_t hidden() const { return hidden_; }

  Direction forward_dir, backward_dir;

 private:
  std::size_t hidden_ = 0;
};

struct ConvBlockConfig {
  std::size_t kernel_t = 10;
  std::size_t kernel_f = 18;
  std::size_t stride_t = 4;
  std::size_t stride_f = 3;
  std::size_t channels = 8;

  void validate() const;
  std::size_t out_rows(std::size_t t) const { return (t - kernel_t) / stride_t + 1; }
  std::size_t out_cols(std::size_t f) const { return (f - kernel_f) / stride_f + 1; }
  nlohmann::json to_json() const;
  static ConvBlockConfig from_json(const nlohmann::json& j);
};

// Valid 2-D convolution + bias + relu over a single-channel (T, F) input,
// flattened per time step to (T', F'*C) and projected to out_dim.
class ConvBlock {
 public:
  ConvBlock(const ConvBlockConfig& cfg, std::size_t in_features, std::size_t out_dim, Rng& rng);

  Tensor operator()(const Tensor& x) const;
  // Post-relu feature map, (T', F'*C).
  Tensor feature_map(const Tensor& x) const;
  void collect(ParameterSet& ps, const std::string& prefix) const;

  const ConvBlockConfig& config() const { return cfg_; }

  Tensor kernel;  // (C, kernel_t, kernel_f)
  Tensor bias;    // (C)
  Linear project;

 private:
  ConvBlockConfig cfg_;
  std::size_t in_features_;
};

class FcStack {
 public:
  FcStack() = default;
  FcStack(std::size_t in, std::vector<std::size_t> dims, Rng& rng);

  // Affine + tanh per layer.
  Tensor operator()(const Tensor& x) const;
  void collect(ParameterSet& ps, const std::string& prefix) const;

  std::vector<Linear> layers;
};

struct AmSoftmaxConfig {
  double scale = 30.0;
  double margin = 0.35;
  std::size_t n_classes = 4;
  std::size_t embed_dim = 64;

  void validate() const;
  nlohmann::json to_json() const;
  static AmSoftmaxConfig from_json(const nlohmann::json& j);
};

// Additive-margin softmax over cosine similarities between L2-normalized
// embeddings and L2-normalized class weight columns.
class AmSoftmax {
 public:
  struct Output {
    Tensor loss;    // scalar
    Tensor logits;  // (B, C) = s * (cos - m * onehot)
  };

  AmSoftmax(const AmSoftmaxConfig& cfg, Rng& rng);

  Tensor cosine(const Tensor& embeddings) const;
  Output operator()(const Tensor& embeddings, std::span<const std::size_t> labels,
                    std::optional<double> margin = std::nullopt) const;
  // Inference logits s * cos (no margin).
  Tensor logits(const Tensor& embeddings) const;
  void collect(ParameterSet& ps, const std::string& prefix) const;

  const AmSoftmaxConfig& config() const { return cfg_; }
  AmSoftmaxConfig& config() { return cfg_; }

  Tensor weight;  // (embed_dim, n_classes)

 private:
  AmSoftmaxConfig cfg_;
};

}  // namespace emofuse::nn
