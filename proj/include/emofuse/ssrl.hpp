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

// Toy masked-prediction speech encoder: k-means pseudo-labels over MFCC-39
// frames, span masking, a pre-norm transformer stack, and the weighted
// masked/unmasked prediction loss.

#include <cstddef>
#include <cstdint>
#include <filesystem>
#include <span>
#include <vector>

#include "emofuse/autodiff.hpp"
#include "emofuse/checkpoint.hpp"
#include "emofuse/feature_matrix.hpp"
#include "emofuse/nn.hpp"
#include "json.hpp"

namespace emofuse {

class Rng;

struct SsrlConfig {
  std::size_t n_layers = 12;
  std::size_t embed_dim = 768;
  std::size_t n_heads = 12;
  std::size_t ff_dim = 3072;
  std::size_t n_clusters = 100;
  std::size_t input_dim = 39;
  double mask_start_prob = 0.08;
  std::size_t mask_span = 10;
  double lambda = 0.5;
  std::vector<std::size_t> selected_layers{1, 9};
  double dropout = 0.1;
  // Raw-waveform front-end (640-sample frames, 320 hop) instead of MFCC input.
  bool conv_frontend = false;

  // 4 layers, d = 64, 4 heads, K = 50, layers {1, 3}.
  static SsrlConfig toy();

  std::size_t frontend_dim() const;
  void validate() const;
  nlohmann::json to_json() const;
  static SsrlConfig from_json(const nlohmann::json& j);
};

struct PseudoLabelSet {
  std::size_t dim = 0;
  std::vector<std::size_t> labels;  // one per input row
  std::vector<double> centroids;    // K x dim, row-major
  std::vector<double> inertia_history;

  std::size_t n_clusters() const { return dim == 0 ? 0 : centroids.size() / dim; }
  double inertia() const { return inertia_history.empty() ? 0.0 : inertia_history.back(); }
  std::size_t nearest(std::span<const double> row) const;
  std::vector<std::size_t> assign(const FeatureMatrix& m) const;
  // Labels as a cols = 1 matrix, centroids as a K x dim matrix.
  FeatureMatrix labels_matrix() const;
  FeatureMatrix centroid_matrix() const;
};

// k-means++ seeding then Lloyd iterations until the assignment stops changing
// or max_iter. Empty clusters are re-seeded at the point farthest from its
// centroid. Throws ParameterError when rows < k.
PseudoLabelSet kmeans_fit(std::span<const double> data, std::size_t rows, std::size_t dim,
                          std::size_t k, std::size_t max_iter, std::uint64_t seed);
PseudoLabelSet kmeans_fit(const FeatureMatrix& features, std::size_t k, std::size_t max_iter,
                          std::uint64_t seed);

// Span starts drawn independently per frame; spans may overlap.
std::vector<bool> mask_spans(std::size_t frames, double start_prob, std::size_t span, Rng& rng);
std::vector<bool> mask_spans(std::size_t frames, const SsrlConfig& cfg, std::uint64_t seed);

// lambda * mean masked NLL + (1 - lambda) * mean unmasked NLL. An empty frame
// set contributes zero (with a warning when its weight is nonzero).
ad::Tensor masked_pretrain_loss(const ad::Tensor& logits, std::span<const std::size_t> labels,
                                const std::vector<bool>& masked, double lambda);

// Softmax-weighted sum of selected hidden layers with learnable logits.
class LayerFusion {
 public:
  LayerFusion() = default;
  // available = number of hidden sequences (n_layers + 1).
  LayerFusion(std::vector<std::size_t> selected, std::size_t available);

  // hiddens indexed by layer.
  ad::Tensor operator()(const std::vector<ad::Tensor>& hiddens) const;
  // Already-selected sequences in `selected` order.
  ad::Tensor fuse_selected(const std::vector<ad::Tensor>& selected) const;
  std::vector<double> weights() const;
  void collect(ParameterSet& ps, const std::string& prefix) const;

  const std::vector<std::size_t>& selected() const { return selected_; }

  ad::Tensor logits;  // (L)

 private:
  std::vector<std::size_t> selected_;
};

class SsrlEncoder {
 public:
  struct Output {
    ad::Tensor embedded;              // front-end output after masking, before positions
    std::vector<ad::Tensor> hiddens;  // n_layers + 1, each (T, d)
    ad::Tensor logits;                // (T, K)
  };

  SsrlEncoder(const SsrlConfig& cfg, std::uint64_t seed);

  // x: (T, 39) MFCC frames, or (T, 640) raw frames with the conv front-end.
  Output forward(const ad::Tensor& x, const std::vector<bool>* masked = nullptr,
                 const nn::RunMode& mode = {}) const;

  // Standardizes MFCC input using per-dimension statistics of `frames`.
  void fit_normalization(const std::vector<FeatureMatrix>& frames);
  ad::Tensor prepare(const FeatureMatrix& m) const;

  // Eval-mode hidden sequences for the configured layers, as FMX matrices.
  std::vector<FeatureMatrix> selected_hiddens(const FeatureMatrix& m) const;

  const SsrlConfig& config() const { return cfg_; }
  ParameterSet parameters() const;
  // Trainable parameters plus normalization statistics.
  ParameterSet state() const;
  Checkpoint save() const;
  static SsrlEncoder load(const Checkpoint& ckpt);

 private:
  struct Layer {
    nn::LayerNorm norm_attn, norm_ff;
    nn::MultiHeadAttention attention;
    nn::FeedForward ff;
  };

  SsrlConfig cfg_;
  std::uint64_t seed_;
  nn::Linear frontend_;
  ad::Tensor mask_embedding_;  // (d)
  std::vector<Layer> layers_;
  nn::LayerNorm final_norm_;
  nn::Linear head_;
  ad::Tensor feature_mean_;  // (input_dim), not trained
  ad::Tensor feature_std_;
};

// Raw samples -> (T, 640) frames on the 20 ms grid used by the MFCC path.
FeatureMatrix frame_waveform(std::span<const double> samples);

struct PretrainConfig {
  std::size_t epochs = 10;
  std::size_t batch_size = 4;
  double lr = 1e-3;
  // Random crop length per utterance and step; 0 keeps full sequences.
  std::size_t crop_frames = 128;
  std::size_t kmeans_iters = 50;
  std::uint64_t seed = 0;

  nlohmann::json to_json() const;
  static PretrainConfig from_json(const nlohmann::json& j);
};

struct PretrainHistory {
  // Loss on a fixed evaluation mask (no dropout) after each epoch; entry 0 is
  // before any update.
  std::vector<double> eval_loss;
  std::vector<double> train_loss;  // mean step loss per epoch
  std::vector<double> kmeans_inertia;
};

struct PretrainResult {
  PretrainHistory history;
  PseudoLabelSet clusters;
};

// Fits normalization and k-means on `features` (MFCC-39 per utterance), then
// trains the encoder. `inputs` overrides the encoder input per utterance
// (raw frames for the conv front-end); leave empty for MFCC input.
PretrainResult pretrain(SsrlEncoder& encoder, const std::vector<FeatureMatrix>& features,
                        const PretrainConfig& cfg,
                        const std::vector<FeatureMatrix>& inputs = {});

// Second clustering pass over hidden states of `layer` (0 = embedding layer).
PseudoLabelSet refine_labels(const SsrlEncoder& encoder, const std::vector<FeatureMatrix>& features,
                             std::size_t layer, std::size_t k, std::size_t max_iter,
                             std::uint64_t seed);

// Reads an FMX1 embedding file and checks its width.
FeatureMatrix import_embeddings(const std::filesystem::path& path, std::size_t expected_dim);

}  // namespace emofuse
