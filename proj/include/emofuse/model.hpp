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

// Three-branch fusion classifier: prosody vector, pooled MFCC sequence and
// SSRL hidden states, fused by two CAT stages, pooled to mean||variance and
// scored with AM-Softmax.

#include <cstddef>
#include <cstdint>
#include <filesystem>
#include <string>
#include <vector>

#include "emofuse/autodiff.hpp"
#include "emofuse/checkpoint.hpp"
#include "emofuse/feature_matrix.hpp"
#include "emofuse/nn.hpp"
#include "emofuse/rng.hpp"
#include "emofuse/ssrl.hpp"
#include "json.hpp"

namespace emofuse {

struct HumpCatConfig {
  nn::CatConfig cat;
  nn::ConvBlockConfig conv;
  std::size_t bilstm_hidden = 32;
  std::size_t pool_proj_dim = 32;  // embedding is 2x this
  std::size_t n_classes = 4;
  std::size_t mfcc_pool_window = 4;
  std::size_t prosody_dim = 103;
  std::size_t mfcc_dim = 39;
  std::size_t ssrl_dim = 768;
  std::vector<std::size_t> prosody_fc{128, 64};
  // Hidden layers handed over by the encoder, fused with learned weights.
  std::vector<std::size_t> ssrl_layers{1, 9};
  double am_scale = 30.0;
  double am_margin = 0.35;
  bool use_prosody = true;
  bool use_mfcc = true;
  bool use_ssrl = true;
  std::uint64_t seed = 0;

  // d = 16, 2 heads, ff 32, Bi-LSTM 8, 4 conv channels, 64-dim SSRL input
  // from layers {1, 3}.
  static HumpCatConfig tiny();

  std::size_t embedding_dim() const { return 2 * pool_proj_dim; }
  void validate() const;
  nlohmann::json to_json() const;
  static HumpCatConfig from_json(const nlohmann::json& j);
};

// Features of one segment. Branches that are disabled may be left empty.
struct ModelFeatures {
  FeatureMatrix prosody;            // 1 x 103
  FeatureMatrix mfcc;               // T x 39
  std::vector<FeatureMatrix> ssrl;  // one T x ssrl_dim per configured layer
};

struct Prediction {
  std::size_t label = 0;
  std::vector<double> probabilities;
};

class HumpCat {
 public:
  struct Inputs {
    ad::Tensor prosody;                // (1, 103)
    ad::Tensor mfcc;                   // (T, 39)
    std::vector<ad::Tensor> ssrl;      // (T, ssrl_dim) each
  };
  struct Forward {
    ad::Tensor prosody_seq;  // R^(p)
    ad::Tensor mfcc_seq;     // R^(m)
    ad::Tensor ssrl_seq;     // R^(h)
    ad::Tensor pm;           // R^(pm)
    ad::Tensor fused;        // R
    ad::Tensor embedding;    // (1, 2 * pool_proj_dim)
  };

  explicit HumpCat(const HumpCatConfig& cfg);

  // Standardized tensors (normalization statistics applied).
  Inputs prepare(const ModelFeatures& f) const;

  ad::Tensor branch_prosody(const ad::Tensor& v) const;
  ad::Tensor branch_mfcc(const ad::Tensor& m) const;
  ad::Tensor branch_ssrl(const std::vector<ad::Tensor>& layers) const;
  ad::Tensor fuse(const ad::Tensor& rp, const ad::Tensor& rm, const ad::Tensor& rh,
                  const nn::RunMode& mode = {}) const;
  ad::Tensor pool(const ad::Tensor& r) const;
  Forward forward(const Inputs& in, const nn::RunMode& mode = {}) const;

  // Scaled-cosine logits without margin, (B, C).
  ad::Tensor logits(const ad::Tensor& embeddings) const { return classifier_.logits(embeddings); }
  nn::AmSoftmax::Output loss(const ad::Tensor& embeddings,
                             std::span<const std::size_t> labels) const {
    return classifier_(embeddings, labels);
  }
  Prediction predict(const ModelFeatures& f) const;
  Prediction predict(const Inputs& in) const;

  // Per-dimension mean/std over the training features.
  void fit_normalization(const std::vector<const ModelFeatures*>& features);

  const HumpCatConfig& config() const { return cfg_; }
  // Trainable tensors only.
  ParameterSet parameters() const;
  // Trainable tensors plus normalization statistics.
  ParameterSet state() const;
  Checkpoint save() const;
  static HumpCat load(const Checkpoint& ckpt);
  static HumpCat load(const std::filesystem::path& path);

  // Prefixes of branch (feature-encoder) parameters, for freezing.
  static const std::vector<std::string>& branch_prefixes();

  // Exposed for tests.
  nn::FcStack prosody_fc;
  nn::Linear prosody_proj;
  nn::BiLstm mfcc_lstm;
  nn::Linear mfcc_proj;
  LayerFusion ssrl_fusion;
  nn::ConvBlock ssrl_conv;
  nn::CatFuse cat_pm;
  nn::CatFuse cat_h;
  nn::Linear pool_proj;

 private:
  struct NormStats {
    ad::Tensor mean;
    ad::Tensor std;
  };

  HumpCat(const HumpCatConfig& cfg, Rng rng);

  HumpCatConfig cfg_;
  nn::AmSoftmax classifier_;
  ad::Tensor token_p_, token_m_, token_h_;  // stand-ins for disabled branches
  NormStats norm_prosody_, norm_mfcc_, norm_ssrl_;
};

// Window mean-pooling with a partial last window: (T, F) -> (ceil(T/w), F).
ad::Tensor window_mean_pool(const ad::Tensor& x, std::size_t window);

}  // namespace emofuse
