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

#include "emofuse/nn.hpp"

#include <cmath>
#include <string>

#include "emofuse/error.hpp"
#include "emofuse/rng.hpp"

namespace emofuse::nn {

namespace {

Tensor uniform_tensor(ad::Shape shape, double bound, Rng& rng) {
  Tensor t = Tensor::zeros(std::move(shape), true);
  for (double& v : t.data()) v = rng.uniform(-bound, bound);
  return t;
}

void zero_fill(Tensor& t) {
  for (double& v : t.data()) v = 0.0;
}

void require_rows(const Tensor& x, std::size_t cols, const char* what) {
  if (x.rank() != 2) throw ShapeError(std::string(what) + ": expected a 2-D sequence");
  if (x.dim(0) == 0) throw ContractError(std::string(what) + ": empty sequence");
  if (x.dim(1) != cols) {
    throw ShapeError(std::string(what) + ": feature dim " + std::to_string(x.dim(1)) +
                     ", expected " + std::to_string(cols));
  }
}

}  // namespace

Tensor RunMode::drop(const Tensor& x) const {
  if (!training || rng == nullptr || dropout <= 0.0) return x;
  return ad::dropout(x, dropout, *rng);
}

Tensor xavier_uniform(std::size_t in, std::size_t out, Rng& rng) {
  const double bound = std::sqrt(6.0 / static_cast<double>(in + out));
  return uniform_tensor({in, out}, bound, rng);
}

Tensor sinusoidal_positions(std::size_t length, std::size_t dim) {
  Tensor pe = Tensor::zeros({length, dim});
  auto v = pe.data();
  for (std::size_t t = 0; t < length; ++t) {
    for (std::size_t i = 0; i < dim; ++i) {
      const double k = static_cast<double>(i / 2 * 2) / static_cast<double>(dim);
      const double angle = static_cast<double>(t) / std::pow(10000.0, k);
      v[t * dim + i] = (i % 2 == 0) ? std::sin(angle) : std::cos(angle);
    }
  }
  return pe;
}

// ---- Linear ---------------------------------------------------------------

Linear::Linear(std::size_t in, std::size_t out, Rng& rng)
    : weight(xavier_uniform(in, out, rng)), bias(Tensor::zeros({out}, true)) {
  if (in == 0 || out == 0) throw ParameterError("Linear: zero-sized layer");
}

Tensor Linear::operator()(const Tensor& x) const {
  if (x.rank() != 2 || x.dim(1) != in_dim()) {
    throw ShapeError("Linear: input feature dim mismatch, expected " + std::to_string(in_dim()));
  }
  return ad::add(ad::matmul(x, weight), bias);
}

void Linear::collect(ParameterSet& ps, const std::string& prefix) const {
  ps.add(prefix + "/weight", weight);
  ps.add(prefix + "/bias", bias);
}

void Linear::zero() {
  zero_fill(weight);
  zero_fill(bias);
}

LayerNorm::LayerNorm(std::size_t dim)
    : gamma(Tensor::full({dim}, 1.0, true)), beta(Tensor::zeros({dim}, true)) {}

void LayerNorm::collect(ParameterSet& ps, const std::string& prefix) const {
  ps.add(prefix + "/gamma", gamma);
  ps.add(prefix + "/beta", beta);
}

// ---- configs --------------------------------------------------------------

void CatConfig::validate() const {
  if (model_dim == 0 || n_heads == 0) throw ParameterError("CatConfig: zero model_dim or n_heads");
  if (model_dim % n_heads != 0) {
    throw ParameterError("CatConfig: model_dim " + std::to_string(model_dim) +
                         " not divisible by n_heads " + std::to_string(n_heads));
  }
  if (ff_dim == 0) throw ParameterError("CatConfig: zero ff_dim");
  if (!(dropout >= 0.0 && dropout < 1.0)) throw ParameterError("CatConfig: dropout outside [0,1)");
}

nlohmann::json CatConfig::to_json() const {
  return {{"model_dim", model_dim},
          {"n_heads", n_heads},
          {"ff_dim", ff_dim},
          {"dropout", dropout},
          {"positional_encoding", positional_encoding}};
}

CatConfig CatConfig::from_json(const nlohmann::json& j) {
  CatConfig c;
  c.model_dim = j.value("model_dim", c.model_dim);
  c.n_heads = j.value("n_heads", c.n_heads);
  c.ff_dim = j.value("ff_dim", c.ff_dim);
  c.dropout = j.value("dropout", c.dropout);
  c.positional_encoding = j.value("positional_encoding", c.positional_encoding);
  c.validate();
  return c;
}

void ConvBlockConfig::validate() const {
  if (kernel_t == 0 || kernel_f == 0 || stride_t == 0 || stride_f == 0 || channels == 0) {
    throw ParameterError("ConvBlockConfig: kernel, stride and channels must be positive");
  }
}

nlohmann::json ConvBlockConfig::to_json() const {
  return {{"kernel", {kernel_t, kernel_f}},
          {"stride", {stride_t, stride_f}},
          {"channels", channels}};
}

ConvBlockConfig ConvBlockConfig::from_json(const nlohmann::json& j) {
  ConvBlockConfig c;
  if (j.contains("kernel")) {
    c.kernel_t = j.at("kernel").at(0).get<std::size_t>();
    c.kernel_f = j.at("kernel").at(1).get<std::size_t>();
  }
  if (j.contains("stride")) {
    c.stride_t = j.at("stride").at(0).get<std::size_t>();
    c.stride_f = j.at("stride").at(1).get<std::size_t>();
  }
  c.channels = j.value("channels", c.channels);
  c.validate();
  return c;
}

void AmSoftmaxConfig::validate() const {
  if (!(scale > 0.0)) throw ParameterError("AmSoftmaxConfig: scale must be positive");
  if (!(margin >= 0.0)) throw ParameterError("AmSoftmaxConfig: margin must be non-negative");
  if (n_classes < 2) throw ParameterError("AmSoftmaxConfig: need at least two classes");
  if (embed_dim == 0) throw ParameterError("AmSoftmaxConfig: zero embed_dim");
}

nlohmann::json AmSoftmaxConfig::to_json() const {
  return {{"scale", scale}, {"margin", margin}, {"n_classes", n_classes}, {"embed_dim", embed_dim}};
}

AmSoftmaxConfig AmSoftmaxConfig::from_json(const nlohmann::json& j) {
  AmSoftmaxConfig c;
  c.scale = j.value("scale", c.scale);
  c.margin = j.value("margin", c.margin);
  c.n_classes = j.value("n_classes", c.n_classes);
  c.embed_dim = j.value("embed_dim", c.embed_dim);
  c.validate();
  return c;
}

// ---- attention ------------------------------------------------------------

MultiHeadAttention::MultiHeadAttention(std::size_t dim, std::size_t n_heads, Rng& rng)
    : query(dim, dim, rng), key(dim, dim, rng), value(dim, dim, rng), output(dim, dim, rng),
      n_heads_(n_heads) {
  if (n_heads == 0 || dim % n_heads != 0) {
    throw ParameterError("MultiHeadAttention: dim not divisible by n_heads");
  }
}

Tensor MultiHeadAttention::operator()(const Tensor& q_in, const Tensor& kv_in,
                                      Trace* trace) const {
  const std::size_t d = query.in_dim();
  require_rows(q_in, d, "attention query");
  require_rows(kv_in, d, "attention key/value");
  const Tensor q = query(q_in);
  const Tensor k = key(kv_in);
  const Tensor v = value(kv_in);
  const std::size_t dh = d / n_heads_;
  const double inv = 1.0 / std::sqrt(static_cast<double>(dh));
  std::vector<Tensor> heads;
  heads.reserve(n_heads_);
  for (std::size_t h = 0; h < n_heads_; ++h) {
    const Tensor qh = n_heads_ == 1 ? q : ad::slice(q, 1, h * dh, (h + 1) * dh);
    const Tensor kh = n_heads_ == 1 ? k : ad::slice(k, 1, h * dh, (h + 1) * dh);
    const Tensor vh = n_heads_ == 1 ? v : ad::slice(v, 1, h * dh, (h + 1) * dh);
    const Tensor w = ad::softmax(ad::scale(ad::matmul(qh, ad::transpose(kh)), inv), 1);
    Tensor ctx = ad::matmul(w, vh);
    if (trace) {
      trace->weights.push_back(w);
      trace->values.push_back(vh);
      trace->contexts.push_back(ctx);
    }
    heads.push_back(std::move(ctx));
  }
  const Tensor joined = n_heads_ == 1 ? heads.front() : ad::concat(heads, 1);
  return output(joined);
}

void MultiHeadAttention::collect(ParameterSet& ps, const std::string& prefix) const {
  query.collect(ps, prefix + "/query");
  key.collect(ps, prefix + "/key");
  value.collect(ps, prefix + "/value");
  output.collect(ps, prefix + "/output");
}

void MultiHeadAttention::zero() {
  query.zero();
  key.zero();
  value.zero();
  output.zero();
}

FeedForward::FeedForward(std::size_t dim, std::size_t hidden, Rng& rng)
    : up(dim, hidden, rng), down(hidden, dim, rng) {}

Tensor FeedForward::operator()(const Tensor& x) const { return down(ad::gelu(up(x))); }

void FeedForward::collect(ParameterSet& ps, const std::string& prefix) const {
  up.collect(ps, prefix + "/up");
  down.collect(ps, prefix + "/down");
}

void FeedForward::zero() {
  up.zero();
  down.zero();
}

// ---- CAT ------------------------------------------------------------------

CrossAttentionLayer::CrossAttentionLayer(const CatConfig& cfg, Rng& rng)
    : norm_query(cfg.model_dim),
      norm_context(cfg.model_dim),
      norm_ff(cfg.model_dim),
      attention(cfg.model_dim, cfg.n_heads, rng),
      ff(cfg.model_dim, cfg.ff_dim, rng) {}

Tensor CrossAttentionLayer::operator()(const Tensor& query_seq, const Tensor& context_seq,
                                       const RunMode& mode) const {
  Tensor x = ad::add(query_seq,
                     mode.drop(attention(norm_query(query_seq), norm_context(context_seq))));
  return ad::add(x, mode.drop(ff(norm_ff(x))));
}

void CrossAttentionLayer::collect(ParameterSet& ps, const std::string& prefix) const {
  norm_query.collect(ps, prefix + "/norm_query");
  norm_context.collect(ps, prefix + "/norm_context");
  norm_ff.collect(ps, prefix + "/norm_ff");
  attention.collect(ps, prefix + "/attention");
  ff.collect(ps, prefix + "/ff");
}

void CrossAttentionLayer::zero() {
  attention.zero();
  ff.zero();
}

CatBlock::CatBlock(const CatConfig& cfg, Rng& rng, bool tied) : cfg_(cfg) {
  cfg_.validate();
  a2b_ = std::make_shared<CrossAttentionLayer>(cfg_, rng);
  b2a_ = tied ? a2b_ : std::make_shared<CrossAttentionLayer>(cfg_, rng);
}

std::pair<Tensor, Tensor> CatBlock::operator()(const Tensor& a, const Tensor& b,
                                               const RunMode& mode) const {
  require_rows(a, cfg_.model_dim, "cat_block A");
  require_rows(b, cfg_.model_dim, "cat_block B");
  Tensor pa = a, pb = b;
  if (cfg_.positional_encoding) {
    pa = ad::add(a, sinusoidal_positions(a.dim(0), cfg_.model_dim));
    pb = ad::add(b, sinusoidal_positions(b.dim(0), cfg_.model_dim));
  }
  RunMode m = mode;
  m.dropout = cfg_.dropout;
  return {(*a2b_)(pa, pb, m), (*b2a_)(pb, pa, m)};
}

void CatBlock::collect(ParameterSet& ps, const std::string& prefix) const {
  if (a2b_ == b2a_) {
    a2b_->collect(ps, prefix + "/shared");
    return;
  }
  a2b_->collect(ps, prefix + "/a2b");
  b2a_->collect(ps, prefix + "/b2a");
}

void CatBlock::zero() {
  a2b_->zero();
  if (b2a_ != a2b_) b2a_->zero();
}

CatFuse::CatFuse(const CatConfig& cfg, Rng& rng)
    : block(cfg, rng),
      stage_a(cfg.model_dim, cfg.n_heads, rng),
      stage_b(cfg.model_dim, cfg.n_heads, rng),
      merge(2 * cfg.model_dim, cfg.model_dim, rng) {}

Tensor CatFuse::operator()(const Tensor& a, const Tensor& b, const RunMode& mode) const {
  const auto [a2b, b2a] = block(a, b, mode);
  const Tensor s1 = stage_a(a2b, b2a);                      // (T_A, d)
  const Tensor s2 = ad::mean(stage_b(b2a, a2b), 0);         // (1, d)
  const Tensor joined = ad::concat({s1, ad::repeat_rows(s2, a.dim(0))}, 1);
  return merge(joined);
}

void CatFuse::collect(ParameterSet& ps, const std::string& prefix) const {
  block.collect(ps, prefix + "/cat");
  stage_a.collect(ps, prefix + "/stage_a");
  stage_b.collect(ps, prefix + "/stage_b");
  merge.collect(ps, prefix + "/merge");
}

void CatFuse::zero() {
  block.zero();
  stage_a.zero();
  stage_b.zero();
  merge.zero();
}

// ---- Bi-LSTM --------------------------------------------------------------

BiLstm::BiLstm(std::size_t in, std::size_t hidden, Rng& rng) : hidden_(hidden) {
  if (in == 0 || hidden == 0) throw ParameterError("BiLstm: zero-sized layer");
  const double bound = 1.0 / std::sqrt(static_cast<double>(hidden));
  for (Direction* dir : {&forward_dir, &backward_dir}) {
    dir->input.weight = uniform_tensor({in, 4 * hidden}, bound, rng);
    dir->input.bias = Tensor::zeros({4 * hidden}, true);
    // Forget-gate bias starts at 1.
    for (std::size_t j = hidden; j < 2 * hidden; ++j) dir->input.bias.data()[j] = 1.0;
    dir->recurrent = uniform_tensor({hidden, 4 * hidden}, bound, rng);
  }
}

Tensor BiLstm::run(const Direction& dir, const Tensor& x, bool reverse) {
  const std::size_t h_dim = dir.recurrent.dim(0);
  const std::size_t steps = x.dim(0);
  const Tensor xw = dir.input(x);
  Tensor h = Tensor::zeros({1, h_dim});
  Tensor c = Tensor::zeros({1, h_dim});
  std::vector<Tensor> outs(steps);
  for (std::size_t s = 0; s < steps; ++s) {
    const std::size_t t = reverse ? steps - 1 - s : s;
    const Tensor z = ad::add(ad::slice(xw, 0, t, t + 1), ad::matmul(h, dir.recurrent));
    const Tensor i = ad::sigmoid(ad::slice(z, 1, 0, h_dim));
    const Tensor f = ad::sigmoid(ad::slice(z, 1, h_dim, 2 * h_dim));
    const Tensor g = ad::tanh(ad::slice(z, 1, 2 * h_dim, 3 * h_dim));
    const Tensor o = ad::sigmoid(ad::slice(z, 1, 3 * h_dim, 4 * h_dim));
    c = ad::add(ad::mul(f, c), ad::mul(i, g));
    h = ad::mul(o, ad::tanh(c));
    outs[t] = h;
  }
  return ad::concat(outs, 0);
}

Tensor BiLstm::operator()(const Tensor& x) const {
  require_rows(x, forward_dir.input.in_dim(), "bilstm");
  return ad::concat({run(forward_dir, x, false), run(backward_dir, x, true)}, 1);
}

void BiLstm::collect(ParameterSet& ps, const std::string& prefix) const {
  forward_dir.input.collect(ps, prefix + "/fwd/input");
  ps.add(prefix + "/fwd/recurrent", forward_dir.recurrent);
  backward_dir.input.collect(ps, prefix + "/bwd/input");
  ps.add(prefix + "/bwd/recurrent", backward_dir.recurrent);
}

// ---- conv -----------------------------------------------------------------

ConvBlock::ConvBlock(const ConvBlockConfig& cfg, std::size_t in_features, std::size_t out_dim,
                     Rng& rng)
    : cfg_(cfg), in_features_(in_features) {
  cfg_.validate();
  if (in_features < cfg_.kernel_f) {
    throw ShapeError("ConvBlock: feature dim " + std::to_string(in_features) +
                     " smaller than kernel width " + std::to_string(cfg_.kernel_f));
  }
  const double fan_in = static_cast<double>(cfg_.kernel_t * cfg_.kernel_f);
  kernel = uniform_tensor({cfg_.channels, cfg_.kernel_t, cfg_.kernel_f}, std::sqrt(6.0 / fan_in),
                          rng);
  bias = Tensor::zeros({cfg_.channels}, true);
  project = Linear(cfg_.out_cols(in_features) * cfg_.channels, out_dim, rng);
}

Tensor ConvBlock::feature_map(const Tensor& x) const {
  if (x.rank() != 2 || x.dim(1) != in_features_) {
    throw ShapeError("ConvBlock: expected (T, " + std::to_string(in_features_) + ") input");
  }
  if (x.dim(0) < cfg_.kernel_t) {
    throw ShapeError("ConvBlock: " + std::to_string(x.dim(0)) + " frames, need at least " +
                     std::to_string(cfg_.kernel_t));
  }
  return ad::relu(ad::conv2d(x, kernel, bias, cfg_.stride_t, cfg_.stride_f));
}

Tensor ConvBlock::operator()(const Tensor& x) const { return project(feature_map(x)); }

void ConvBlock::collect(ParameterSet& ps, const std::string& prefix) const {
  ps.add(prefix + "/kernel", kernel);
  ps.add(prefix + "/bias", bias);
  project.collect(ps, prefix + "/project");
}

// ---- fc stack -------------------------------------------------------------

FcStack::FcStack(std::size_t in, std::vector<std::size_t> dims, Rng& rng) {
  if (dims.empty()) throw ParameterError("FcStack: no layers");
  std::size_t prev = in;
  for (std::size_t d : dims) {
    layers.emplace_back(prev, d, rng);
    prev = d;
  }
}

Tensor FcStack::operator()(const Tensor& x) const {
  Tensor h = x;
  for (const Linear& layer : layers) h = ad::tanh(layer(h));
  return h;
}

void FcStack::collect(ParameterSet& ps, const std::string& prefix) const {
  for (std::size_t i = 0; i < layers.size(); ++i) {
    layers[i].collect(ps, prefix + "/fc" + std::to_string(i));
  }
}

// ---- AM-Softmax -----------------------------------------------------------

AmSoftmax::AmSoftmax(const AmSoftmaxConfig& cfg, Rng& rng) : cfg_(cfg) {
  cfg_.validate();
  weight = xavier_uniform(cfg_.embed_dim, cfg_.n_classes, rng);
}

Tensor AmSoftmax::cosine(const Tensor& embeddings) const {
  if (embeddings.rank() != 2 || embeddings.dim(1) != cfg_.embed_dim) {
    throw ShapeError("am_softmax: embeddings must be (B, " + std::to_string(cfg_.embed_dim) + ")");
  }
  const auto& x = embeddings.values();
  const std::size_t e = cfg_.embed_dim;
  for (std::size_t r = 0; r < embeddings.dim(0); ++r) {
    double s = 0.0;
    for (std::size_t j = 0; j < e; ++j) {
      const double v = x[r * e + j];
      if (!std::isfinite(v)) throw NumericError("am_softmax: non-finite embedding");
      s += v * v;
    }
    if (std::sqrt(s) < 1e-12) {
      throw NumericError("am_softmax: zero-norm embedding at row " + std::to_string(r));
    }
  }
  const Tensor en = ad::l2_normalize(embeddings);
  const Tensor wn = ad::transpose(ad::l2_normalize(ad::transpose(weight)));
  return ad::matmul(en, wn);
}

AmSoftmax::Output AmSoftmax::operator()(const Tensor& embeddings,
                                        std::span<const std::size_t> labels,
                                        std::optional<double> margin) const {
  const double m = margin.value_or(cfg_.margin);
  if (m < 0.0) throw ParameterError("am_softmax: negative margin");
  if (labels.size() != embeddings.dim(0)) {
    throw ShapeError("am_softmax: label count does not match batch size");
  }
  const std::size_t c = cfg_.n_classes;
  Tensor offsets = Tensor::zeros({labels.size(), c});
  for (std::size_t b = 0; b < labels.size(); ++b) {
    if (labels[b] >= c) throw ParameterError("am_softmax: label out of range");
    offsets.data()[b * c + labels[b]] = m;
  }
  Output out;
  out.logits = ad::scale(ad::sub(cosine(embeddings), offsets), cfg_.scale);
  out.loss = ad::cross_entropy(out.logits, labels);
  return out;
}

Tensor AmSoftmax::logits(const Tensor& embeddings) const {
  return ad::scale(cosine(embeddings), cfg_.scale);
}

void AmSoftmax::collect(ParameterSet& ps, const std::string& prefix) const {
  ps.add(prefix + "/weight", weight);
}

}  // namespace emofuse::nn
