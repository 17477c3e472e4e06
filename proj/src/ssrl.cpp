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

#include "emofuse/ssrl.hpp"

#include <algorithm>
#include <cmath>
#include <limits>
#include <numeric>
#include <string>

#include "emofuse/error.hpp"
#include "emofuse/log.hpp"
#include "emofuse/optim.hpp"
#include "emofuse/rng.hpp"

namespace emofuse {

namespace {

constexpr std::size_t kRawFrame = 640;
constexpr std::size_t kRawHop = 320;

double sq_dist(const double* a, const double* b, std::size_t dim) {
  double s = 0.0;
  for (std::size_t j = 0; j < dim; ++j) {
    const double d = a[j] - b[j];
    s += d * d;
  }
  return s;
}

}  // namespace

// ---- config ---------------------------------------------------------------

SsrlConfig SsrlConfig::toy() {
  SsrlConfig c;
  c.n_layers = 4;
  c.embed_dim = 64;
  c.n_heads = 4;
  c.ff_dim = 128;
  c.n_clusters = 50;
  c.selected_layers = {1, 3};
  return c;
}

std::size_t SsrlConfig::frontend_dim() const { return conv_frontend ? kRawFrame : input_dim; }

void SsrlConfig::validate() const {
  if (n_layers == 0 || embed_dim == 0 || n_clusters < 2 || input_dim == 0 || ff_dim == 0) {
    throw ParameterError("SsrlConfig: sizes must be positive and n_clusters >= 2");
  }
  if (n_heads == 0 || embed_dim % n_heads != 0) {
    throw ParameterError("SsrlConfig: embed_dim not divisible by n_heads");
  }
  if (!(lambda >= 0.0 && lambda <= 1.0)) throw ParameterError("SsrlConfig: lambda outside [0,1]");
  if (!(mask_start_prob >= 0.0 && mask_start_prob <= 1.0)) {
    throw ParameterError("SsrlConfig: mask_start_prob outside [0,1]");
  }
  if (mask_span == 0) throw ParameterError("SsrlConfig: mask_span must be positive");
  if (selected_layers.empty()) throw ParameterError("SsrlConfig: no selected layers");
  for (std::size_t l : selected_layers) {
    if (l > n_layers) {
      throw ParameterError("SsrlConfig: selected layer " + std::to_string(l) + " exceeds n_layers " +
                           std::to_string(n_layers));
    }
  }
  if (!(dropout >= 0.0 && dropout < 1.0)) throw ParameterError("SsrlConfig: dropout outside [0,1)");
}

nlohmann::json SsrlConfig::to_json() const {
  return {{"n_layers", n_layers},
          {"embed_dim", embed_dim},
          {"n_heads", n_heads},
          {"ff_dim", ff_dim},
          {"n_clusters", n_clusters},
          {"input_dim", input_dim},
          {"mask_start_prob", mask_start_prob},
          {"mask_span", mask_span},
          {"lambda", lambda},
          {"selected_layers", selected_layers},
          {"dropout", dropout},
          {"conv_frontend", conv_frontend}};
}

SsrlConfig SsrlConfig::from_json(const nlohmann::json& j) {
  SsrlConfig c = j.value("toy", false) ? toy() : SsrlConfig{};
  c.n_layers = j.value("n_layers", c.n_layers);
  c.embed_dim = j.value("embed_dim", c.embed_dim);
  c.n_heads = j.value("n_heads", c.n_heads);
  c.ff_dim = j.value("ff_dim", c.ff_dim);
  c.n_clusters = j.value("n_clusters", c.n_clusters);
  c.input_dim = j.value("input_dim", c.input_dim);
  c.mask_start_prob = j.value("mask_start_prob", c.mask_start_prob);
  c.mask_span = j.value("mask_span", c.mask_span);
  c.lambda = j.value("lambda", c.lambda);
  c.selected_layers = j.value("selected_layers", c.selected_layers);
  c.dropout = j.value("dropout", c.dropout);
  c.conv_frontend = j.value("conv_frontend", c.conv_frontend);
  c.validate();
  return c;
}

// ---- k-means --------------------------------------------------------------

std::size_t PseudoLabelSet::nearest(std::span<const double> row) const {
  if (row.size() != dim) throw ShapeError("PseudoLabelSet: row width mismatch");
  std::size_t best = 0;
  double best_d = std::numeric_limits<double>::infinity();
  for (std::size_t c = 0; c < n_clusters(); ++c) {
    const double d = sq_dist(row.data(), centroids.data() + c * dim, dim);
    if (d < best_d) {
      best_d = d;
      best = c;
    }
  }
  return best;
}

std::vector<std::size_t> PseudoLabelSet::assign(const FeatureMatrix& m) const {
  std::vector<std::size_t> out(m.rows);
  for (std::size_t r = 0; r < m.rows; ++r) out[r] = nearest(m.row(r));
  return out;
}

FeatureMatrix PseudoLabelSet::labels_matrix() const {
  FeatureMatrix m(labels.size(), 1);
  for (std::size_t i = 0; i < labels.size(); ++i) m.data[i] = static_cast<double>(labels[i]);
  m.dim_labels = {"cluster"};
  m.meta["kind"] = "pseudo_labels";
  m.meta["n_clusters"] = n_clusters();
  return m;
}

FeatureMatrix PseudoLabelSet::centroid_matrix() const {
  FeatureMatrix m(n_clusters(), dim);
  m.data = centroids;
  m.meta["kind"] = "centroids";
  return m;
}

PseudoLabelSet kmeans_fit(std::span<const double> data, std::size_t rows, std::size_t dim,
                          std::size_t k, std::size_t max_iter, std::uint64_t seed) {
  if (dim == 0 || data.size() != rows * dim) throw ShapeError("kmeans_fit: data size mismatch");
  if (k == 0) throw ParameterError("kmeans_fit: k must be positive");
  if (rows < k) {
    throw ParameterError("kmeans_fit: " + std::to_string(rows) + " points for " +
                         std::to_string(k) + " clusters");
  }
  for (double v : data) {
    if (!std::isfinite(v)) throw NumericError("kmeans_fit: non-finite feature");
  }
  Rng rng(seed);
  const double* x = data.data();
  PseudoLabelSet out;
  out.dim = dim;
  out.centroids.assign(k * dim, 0.0);
  auto centroid = [&](std::size_t c) { return out.centroids.data() + c * dim; };

  // k-means++ seeding.
  std::vector<double> d2(rows, std::numeric_limits<double>::infinity());
  std::size_t pick = static_cast<std::size_t>(rng.below(rows));
  for (std::size_t c = 0; c < k; ++c) {
    std::copy_n(x + pick * dim, dim, centroid(c));
    double total = 0.0;
    for (std::size_t i = 0; i < rows; ++i) {
      d2[i] = std::min(d2[i], sq_dist(x + i * dim, centroid(c), dim));
      total += d2[i];
    }
    if (c + 1 == k) break;
    if (total <= 0.0) {
      pick = static_cast<std::size_t>(rng.below(rows));
      continue;
    }
    double target = rng.uniform() * total;
    pick = rows - 1;
    for (std::size_t i = 0; i < rows; ++i) {
      target -= d2[i];
      if (target < 0.0 && d2[i] > 0.0) {
        pick = i;
        break;
      }
    }
  }

  out.labels.assign(rows, k);
  std::vector<double> dist(rows);
  std::vector<std::size_t> counts(k);
  const std::size_t iters = std::max<std::size_t>(max_iter, 1);
  for (std::size_t it = 0; it < iters; ++it) {
    bool changed = false;
    double inertia = 0.0;
    for (std::size_t i = 0; i < rows; ++i) {
      std::size_t best = 0;
      double best_d = std::numeric_limits<double>::infinity();
      for (std::size_t c = 0; c < k; ++c) {
        const double d = sq_dist(x + i * dim, centroid(c), dim);
        if (d < best_d) {
          best_d = d;
          best = c;
        }
      }
      if (out.labels[i] != best) changed = true;
      out.labels[i] = best;
      dist[i] = best_d;
      inertia += best_d;
    }
    out.inertia_history.push_back(inertia);
    if (!changed) break;

    std::fill(out.centroids.begin(), out.centroids.end(), 0.0);
    std::fill(counts.begin(), counts.end(), 0);
    for (std::size_t i = 0; i < rows; ++i) {
      const std::size_t c = out.labels[i];
      ++counts[c];
      for (std::size_t j = 0; j < dim; ++j) centroid(c)[j] += x[i * dim + j];
    }
    for (std::size_t c = 0; c < k; ++c) {
      if (counts[c] == 0) continue;
      for (std::size_t j = 0; j < dim; ++j) centroid(c)[j] /= static_cast<double>(counts[c]);
    }
    for (std::size_t c = 0; c < k; ++c) {
      if (counts[c] != 0) continue;
      const auto far = static_cast<std::size_t>(
          std::max_element(dist.begin(), dist.end()) - dist.begin());
      std::copy_n(x + far * dim, dim, centroid(c));
      dist[far] = 0.0;
    }
    if (it + 1 == iters) {
      // Final centroids moved after the last assignment: relabel once more.
      for (std::size_t i = 0; i < rows; ++i) {
        std::size_t best = 0;
        double best_d = std::numeric_limits<double>::infinity();
        for (std::size_t c = 0; c < k; ++c) {
          const double d = sq_dist(x + i * dim, centroid(c), dim);
          if (d < best_d) {
            best_d = d;
            best = c;
          }
        }
        out.labels[i] = best;
        dist[i] = best_d;
      }
      out.inertia_history.push_back(std::accumulate(dist.begin(), dist.end(), 0.0));
    }
  }
  return out;
}

PseudoLabelSet kmeans_fit(const FeatureMatrix& features, std::size_t k, std::size_t max_iter,
                          std::uint64_t seed) {
  return kmeans_fit(features.data, features.rows, features.cols, k, max_iter, seed);
}

// ---- masking and loss -----------------------------------------------------

std::vector<bool> mask_spans(std::size_t frames, double start_prob, std::size_t span, Rng& rng) {
  if (span == 0) throw ParameterError("mask_spans: span must be positive");
  if (frames <= span) {
    throw ContractError("mask_spans: " + std::to_string(frames) + " frames, need more than span " +
                        std::to_string(span));
  }
  std::vector<bool> masked(frames, false);
  for (std::size_t t = 0; t < frames; ++t) {
    if (!rng.bernoulli(start_prob)) continue;
    for (std::size_t u = t; u < std::min(frames, t + span); ++u) masked[u] = true;
  }
  return masked;
}

std::vector<bool> mask_spans(std::size_t frames, const SsrlConfig& cfg, std::uint64_t seed) {
  Rng rng(seed);
  return mask_spans(frames, cfg.mask_start_prob, cfg.mask_span, rng);
}

ad::Tensor masked_pretrain_loss(const ad::Tensor& logits, std::span<const std::size_t> labels,
                                const std::vector<bool>& masked, double lambda) {
  if (logits.rank() != 2) throw ShapeError("masked_pretrain_loss: logits must be (T, K)");
  const std::size_t t_len = logits.dim(0);
  if (labels.size() != t_len || masked.size() != t_len) {
    throw ShapeError("masked_pretrain_loss: labels/mask length must equal frame count");
  }
  if (!(lambda >= 0.0 && lambda <= 1.0)) {
    throw ParameterError("masked_pretrain_loss: lambda outside [0,1]");
  }
  for (std::size_t z : labels) {
    if (z >= logits.dim(1)) throw ParameterError("masked_pretrain_loss: label out of range");
  }
  const auto n_masked = static_cast<std::size_t>(std::count(masked.begin(), masked.end(), true));
  const std::size_t n_unmasked = t_len - n_masked;
  if (n_masked == 0 && lambda > 0.0) {
    log_warning("masked_pretrain_loss: no masked frames, masked term set to 0");
  }
  if (n_unmasked == 0 && lambda < 1.0) {
    log_warning("masked_pretrain_loss: no unmasked frames, unmasked term set to 0");
  }
  std::vector<double> w(t_len, 0.0);
  for (std::size_t t = 0; t < t_len; ++t) {
    if (masked[t]) {
      w[t] = n_masked ? -lambda / static_cast<double>(n_masked) : 0.0;
    } else {
      w[t] = n_unmasked ? -(1.0 - lambda) / static_cast<double>(n_unmasked) : 0.0;
    }
  }
  return ad::weighted_sum(ad::pick(ad::log_softmax(logits, 1), labels), w);
}

// ---- layer fusion ---------------------------------------------------------

LayerFusion::LayerFusion(std::vector<std::size_t> selected, std::size_t available)
    : logits(ad::Tensor::zeros({selected.size()}, true)), selected_(std::move(selected)) {
  if (selected_.empty()) throw ParameterError("LayerFusion: no layers selected");
  for (std::size_t l : selected_) {
    if (l >= available) {
      throw ParameterError("LayerFusion: layer " + std::to_string(l) + " not available (have " +
                           std::to_string(available) + ")");
    }
  }
}

ad::Tensor LayerFusion::fuse_selected(const std::vector<ad::Tensor>& seqs) const {
  if (seqs.size() != selected_.size()) {
    throw ShapeError("LayerFusion: expected " + std::to_string(selected_.size()) + " sequences");
  }
  const ad::Tensor w = ad::softmax(ad::reshape(logits, {1, selected_.size()}), 1);
  ad::Tensor fused;
  for (std::size_t i = 0; i < seqs.size(); ++i) {
    if (seqs[i].shape() != seqs[0].shape()) throw ShapeError("LayerFusion: sequence shape mismatch");
    const ad::Tensor term = ad::mul(seqs[i], ad::reshape(ad::slice(w, 1, i, i + 1), {}));
    fused = fused.defined() ? ad::add(fused, term) : term;
  }
  return fused;
}

ad::Tensor LayerFusion::operator()(const std::vector<ad::Tensor>& hiddens) const {
  std::vector<ad::Tensor> seqs;
  for (std::size_t l : selected_) {
    if (l >= hiddens.size()) throw ParameterError("LayerFusion: missing hidden layer");
    seqs.push_back(hiddens[l]);
  }
  return fuse_selected(seqs);
}

std::vector<double> LayerFusion::weights() const {
  return ad::softmax(ad::reshape(logits.detach(), {1, selected_.size()}), 1).values();
}

void LayerFusion::collect(ParameterSet& ps, const std::string& prefix) const {
  ps.add(prefix + "/logits", logits);
}

// ---- encoder --------------------------------------------------------------

SsrlEncoder::SsrlEncoder(const SsrlConfig& cfg, std::uint64_t seed) : cfg_(cfg), seed_(seed) {
  cfg_.validate();
  Rng rng(seed);
  const std::size_t d = cfg_.embed_dim;
  frontend_ = nn::Linear(cfg_.frontend_dim(), d, rng);
  mask_embedding_ = ad::Tensor::zeros({d}, true);
  for (double& v : mask_embedding_.data()) v = rng.uniform(-0.5, 0.5);
  for (std::size_t l = 0; l < cfg_.n_layers; ++l) {
    layers_.push_back(Layer{nn::LayerNorm(d), nn::LayerNorm(d),
                            nn::MultiHeadAttention(d, cfg_.n_heads, rng),
                            nn::FeedForward(d, cfg_.ff_dim, rng)});
  }
  final_norm_ = nn::LayerNorm(d);
  head_ = nn::Linear(d, cfg_.n_clusters, rng);
  feature_mean_ = ad::Tensor::zeros({cfg_.frontend_dim()});
  feature_std_ = ad::Tensor::full({cfg_.frontend_dim()}, 1.0);
}

SsrlEncoder::Output SsrlEncoder::forward(const ad::Tensor& x, const std::vector<bool>* masked,
                                         const nn::RunMode& mode) const {
  if (x.rank() != 2 || x.dim(1) != cfg_.frontend_dim()) {
    throw ShapeError("SsrlEncoder: expected (T, " + std::to_string(cfg_.frontend_dim()) + ") input");
  }
  if (x.dim(0) == 0) throw ContractError("SsrlEncoder: empty input");
  nn::RunMode m = mode;
  m.dropout = cfg_.dropout;
  Output out;
  ad::Tensor h = frontend_(x);
  if (cfg_.conv_frontend) h = ad::relu(h);
  if (masked) {
    if (masked->size() != x.dim(0)) throw ShapeError("SsrlEncoder: mask length mismatch");
    h = ad::where_rows(h, *masked, mask_embedding_);
  }
  out.embedded = h;
  h = ad::add(h, nn::sinusoidal_positions(x.dim(0), cfg_.embed_dim));
  out.hiddens.push_back(h);
  for (const Layer& layer : layers_) {
    const ad::Tensor a = layer.norm_attn(h);
    h = ad::add(h, m.drop(layer.attention(a, a)));
    h = ad::add(h, m.drop(layer.ff(layer.norm_ff(h))));
    out.hiddens.push_back(h);
  }
  out.logits = head_(final_norm_(h));
  return out;
}

void SsrlEncoder::fit_normalization(const std::vector<FeatureMatrix>& frames) {
  const std::size_t dim = cfg_.frontend_dim();
  std::vector<double> sum(dim, 0.0), sq(dim, 0.0);
  std::size_t n = 0;
  for (const FeatureMatrix& m : frames) {
    if (m.cols != dim) throw ShapeError("fit_normalization: width mismatch");
    for (std::size_t r = 0; r < m.rows; ++r) {
      for (std::size_t j = 0; j < dim; ++j) {
        sum[j] += m.at(r, j);
        sq[j] += m.at(r, j) * m.at(r, j);
      }
    }
    n += m.rows;
  }
  if (n == 0) throw ParameterError("fit_normalization: no frames");
  for (std::size_t j = 0; j < dim; ++j) {
    const double mu = sum[j] / static_cast<double>(n);
    const double var = std::max(sq[j] / static_cast<double>(n) - mu * mu, 0.0);
    feature_mean_.data()[j] = mu;
    feature_std_.data()[j] = std::max(std::sqrt(var), 1e-6);
  }
}

ad::Tensor SsrlEncoder::prepare(const FeatureMatrix& m) const {
  const std::size_t dim = cfg_.frontend_dim();
  if (m.cols != dim) {
    throw ShapeError("SsrlEncoder: input has " + std::to_string(m.cols) + " columns, expected " +
                     std::to_string(dim));
  }
  ad::Tensor t = ad::Tensor::zeros({m.rows, dim});
  auto v = t.data();
  const auto& mu = feature_mean_.values();
  const auto& sd = feature_std_.values();
  for (std::size_t r = 0; r < m.rows; ++r) {
    for (std::size_t j = 0; j < dim; ++j) v[r * dim + j] = (m.at(r, j) - mu[j]) / sd[j];
  }
  return t;
}

std::vector<FeatureMatrix> SsrlEncoder::selected_hiddens(const FeatureMatrix& m) const {
  const Output out = forward(prepare(m));
  std::vector<FeatureMatrix> result;
  for (std::size_t l : cfg_.selected_layers) {
    FeatureMatrix h(m.rows, cfg_.embed_dim);
    h.data = out.hiddens[l].values();
    h.meta["kind"] = "ssrl_hidden";
    h.meta["layer"] = l;
    result.push_back(std::move(h));
  }
  return result;
}

ParameterSet SsrlEncoder::parameters() const {
  ParameterSet ps;
  frontend_.collect(ps, "ssrl/frontend");
  ps.add("ssrl/mask_embedding", mask_embedding_);
  for (std::size_t l = 0; l < layers_.size(); ++l) {
    const std::string p = "ssrl/layer" + std::to_string(l);
    layers_[l].norm_attn.collect(ps, p + "/norm_attn");
    layers_[l].norm_ff.collect(ps, p + "/norm_ff");
    layers_[l].attention.collect(ps, p + "/attention");
    layers_[l].ff.collect(ps, p + "/ff");
  }
  final_norm_.collect(ps, "ssrl/final_norm");
  head_.collect(ps, "ssrl/head");
  return ps;
}

ParameterSet SsrlEncoder::state() const {
  ParameterSet ps = parameters();
  ps.add("ssrl/norm/mean", feature_mean_);
  ps.add("ssrl/norm/std", feature_std_);
  return ps;
}

Checkpoint SsrlEncoder::save() const {
  return state().snapshot({{"kind", "ssrl_encoder"}, {"ssrl", cfg_.to_json()}, {"seed", seed_}});
}

SsrlEncoder SsrlEncoder::load(const Checkpoint& ckpt) {
  if (ckpt.config.value("kind", "") != "ssrl_encoder") {
    throw ConfigError("checkpoint is not an SSRL encoder checkpoint");
  }
  SsrlEncoder enc(SsrlConfig::from_json(ckpt.config.at("ssrl")),
                  ckpt.config.value("seed", std::uint64_t{0}));
  enc.state().load(ckpt);
  return enc;
}

FeatureMatrix frame_waveform(std::span<const double> samples) {
  if (samples.size() < kRawFrame) throw ShapeError("frame_waveform: signal shorter than one frame");
  const std::size_t n = (samples.size() - kRawFrame) / kRawHop + 1;
  FeatureMatrix m(n, kRawFrame);
  for (std::size_t r = 0; r < n; ++r) {
    std::copy_n(samples.begin() + static_cast<std::ptrdiff_t>(r * kRawHop), kRawFrame,
                m.row(r).begin());
  }
  m.meta["kind"] = "raw_frames";
  return m;
}

// ---- pretraining ----------------------------------------------------------

nlohmann::json PretrainConfig::to_json() const {
  return {{"epochs", epochs},     {"batch_size", batch_size},     {"lr", lr},
          {"crop_frames", crop_frames}, {"kmeans_iters", kmeans_iters}, {"seed", seed}};
}

PretrainConfig PretrainConfig::from_json(const nlohmann::json& j) {
  PretrainConfig c;
  c.epochs = j.value("epochs", c.epochs);
  c.batch_size = j.value("batch_size", c.batch_size);
  c.lr = j.value("lr", c.lr);
  c.crop_frames = j.value("crop_frames", c.crop_frames);
  c.kmeans_iters = j.value("kmeans_iters", c.kmeans_iters);
  c.seed = j.value("seed", c.seed);
  if (c.batch_size == 0) throw ParameterError("PretrainConfig: batch_size must be positive");
  return c;
}

namespace {

struct Crop {
  std::size_t begin;
  std::size_t end;
};

ad::Tensor crop_rows(const ad::Tensor& x, const Crop& c) {
  if (c.begin == 0 && c.end == x.dim(0)) return x;
  return ad::slice(x, 0, c.begin, c.end);
}

}  // namespace

PretrainResult pretrain(SsrlEncoder& encoder, const std::vector<FeatureMatrix>& features,
                        const PretrainConfig& cfg, const std::vector<FeatureMatrix>& inputs) {
  const SsrlConfig& sc = encoder.config();
  if (features.empty()) throw ParameterError("pretrain: empty corpus");
  if (!inputs.empty() && inputs.size() != features.size()) {
    throw ShapeError("pretrain: inputs and features differ in utterance count");
  }
  if (inputs.empty() && sc.conv_frontend) {
    throw ParameterError("pretrain: conv front-end needs raw-frame inputs");
  }
  const std::vector<FeatureMatrix>& enc_in = inputs.empty() ? features : inputs;
  for (std::size_t i = 0; i < features.size(); ++i) {
    if (enc_in[i].rows != features[i].rows) {
      throw ShapeError("pretrain: input/feature frame counts differ for utterance " +
                       std::to_string(i));
    }
  }

  // Pseudo-labels: k-means over standardized MFCC frames.
  std::vector<double> mu(features[0].cols, 0.0), sd(features[0].cols, 0.0);
  std::size_t total = 0;
  for (const auto& m : features) {
    for (std::size_t r = 0; r < m.rows; ++r) {
      for (std::size_t j = 0; j < m.cols; ++j) mu[j] += m.at(r, j);
    }
    total += m.rows;
  }
  for (double& v : mu) v /= static_cast<double>(total);
  for (const auto& m : features) {
    for (std::size_t r = 0; r < m.rows; ++r) {
      for (std::size_t j = 0; j < m.cols; ++j) sd[j] += (m.at(r, j) - mu[j]) * (m.at(r, j) - mu[j]);
    }
  }
  for (double& v : sd) v = std::max(std::sqrt(v / static_cast<double>(total)), 1e-6);
  std::vector<double> pooled;
  pooled.reserve(total * mu.size());
  for (const auto& m : features) {
    for (std::size_t r = 0; r < m.rows; ++r) {
      for (std::size_t j = 0; j < m.cols; ++j) pooled.push_back((m.at(r, j) - mu[j]) / sd[j]);
    }
  }
  PretrainResult result;
  result.clusters = kmeans_fit(pooled, total, mu.size(), sc.n_clusters, cfg.kmeans_iters, cfg.seed);
  result.history.kmeans_inertia = result.clusters.inertia_history;
  std::vector<std::vector<std::size_t>> labels(features.size());
  for (std::size_t i = 0, off = 0; i < features.size(); ++i) {
    labels[i].assign(result.clusters.labels.begin() + static_cast<std::ptrdiff_t>(off),
                     result.clusters.labels.begin() +
                         static_cast<std::ptrdiff_t>(off + features[i].rows));
    off += features[i].rows;
  }

  if (!sc.conv_frontend) encoder.fit_normalization(enc_in);
  std::vector<ad::Tensor> prepared;
  prepared.reserve(enc_in.size());
  for (const auto& m : enc_in) prepared.push_back(encoder.prepare(m));

  Rng rng(cfg.seed ^ 0x5eed5eedULL);
  auto crop_for = [&](std::size_t frames) {
    if (cfg.crop_frames == 0 || frames <= cfg.crop_frames) return Crop{0, frames};
    const auto b = static_cast<std::size_t>(rng.below(frames - cfg.crop_frames + 1));
    return Crop{b, b + cfg.crop_frames};
  };

  // Fixed evaluation crops and masks so the per-epoch loss is comparable.
  std::vector<Crop> eval_crop(prepared.size());
  std::vector<std::vector<bool>> eval_mask(prepared.size());
  for (std::size_t i = 0; i < prepared.size(); ++i) {
    eval_crop[i] = crop_for(prepared[i].dim(0));
    eval_mask[i] = mask_spans(eval_crop[i].end - eval_crop[i].begin, sc.mask_start_prob,
                              sc.mask_span, rng);
  }
  auto label_span = [&](std::size_t i, const Crop& c) {
    return std::span<const std::size_t>(labels[i]).subspan(c.begin, c.end - c.begin);
  };
  auto evaluate = [&]() {
    double sum = 0.0;
    for (std::size_t i = 0; i < prepared.size(); ++i) {
      const auto out = encoder.forward(crop_rows(prepared[i], eval_crop[i]), &eval_mask[i]);
      sum += masked_pretrain_loss(out.logits, label_span(i, eval_crop[i]), eval_mask[i], sc.lambda)
                 .item();
    }
    return sum / static_cast<double>(prepared.size());
  };

  const ParameterSet params = encoder.parameters();
  Adam adam(params.tensors(), AdamConfig{cfg.lr});
  result.history.eval_loss.push_back(evaluate());
  std::vector<std::size_t> order(prepared.size());
  std::iota(order.begin(), order.end(), 0);
  nn::RunMode mode{true, &rng};
  for (std::size_t epoch = 0; epoch < cfg.epochs; ++epoch) {
    rng.shuffle(order.begin(), order.end());
    double epoch_loss = 0.0;
    std::size_t steps = 0;
    for (std::size_t start = 0; start < order.size(); start += cfg.batch_size) {
      const std::size_t stop = std::min(order.size(), start + cfg.batch_size);
      ad::Graph graph;
      adam.zero_grad();
      ad::Tensor loss;
      for (std::size_t b = start; b < stop; ++b) {
        const std::size_t i = order[b];
        const Crop c = crop_for(prepared[i].dim(0));
        const auto mask = mask_spans(c.end - c.begin, sc.mask_start_prob, sc.mask_span, rng);
        const auto out = encoder.forward(crop_rows(prepared[i], c), &mask, mode);
        const ad::Tensor l = masked_pretrain_loss(out.logits, label_span(i, c), mask, sc.lambda);
        loss = loss.defined() ? ad::add(loss, l) : l;
      }
      loss = ad::scale(loss, 1.0 / static_cast<double>(stop - start));
      if (!std::isfinite(loss.item())) {
        throw NumericError("pretrain: non-finite loss at epoch " + std::to_string(epoch) +
                           ", step " + std::to_string(steps));
      }
      graph.backward(loss);
      adam.step();
      epoch_loss += loss.item();
      ++steps;
    }
    result.history.train_loss.push_back(epoch_loss / static_cast<double>(steps));
    result.history.eval_loss.push_back(evaluate());
    log_info("pretrain epoch " + std::to_string(epoch + 1) + " eval loss " +
             std::to_string(result.history.eval_loss.back()));
  }
  return result;
}

PseudoLabelSet refine_labels(const SsrlEncoder& encoder, const std::vector<FeatureMatrix>& features,
                             std::size_t layer, std::size_t k, std::size_t max_iter,
                             std::uint64_t seed) {
  if (layer > encoder.config().n_layers) throw ParameterError("refine_labels: bad layer index");
  std::vector<double> pooled;
  std::size_t rows = 0;
  for (const auto& m : features) {
    const auto out = encoder.forward(encoder.prepare(m));
    const auto& v = out.hiddens[layer].values();
    pooled.insert(pooled.end(), v.begin(), v.end());
    rows += m.rows;
  }
  return kmeans_fit(pooled, rows, encoder.config().embed_dim, k, max_iter, seed);
}

FeatureMatrix import_embeddings(const std::filesystem::path& path, std::size_t expected_dim) {
  FeatureMatrix m = read_fmx(path);
  if (m.cols != expected_dim) {
    throw FormatError(path.string() + ": embedding width " + std::to_string(m.cols) +
                      ", expected " + std::to_string(expected_dim));
  }
  return m;
}

}  // namespace emofuse
