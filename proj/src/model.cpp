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

#include "emofuse/model.hpp"

#include <algorithm>
#include <cmath>
#include <string>

#include "emofuse/error.hpp"

namespace emofuse {

namespace {

constexpr double kStdFloor = 1e-3;
constexpr double kClip = 10.0;

void require_matrix(const FeatureMatrix& m, std::size_t cols, const char* what) {
  if (m.cols != cols || m.rows == 0) {
    throw ShapeError(std::string(what) + ": expected (n, " + std::to_string(cols) + "), got (" +
                     std::to_string(m.rows) + ", " + std::to_string(m.cols) + ")");
  }
}

ad::Tensor standardize(const FeatureMatrix& m, const ad::Tensor& mean, const ad::Tensor& sd) {
  ad::Tensor t = ad::Tensor::zeros({m.rows, m.cols});
  auto v = t.data();
  const auto& mu = mean.values();
  const auto& s = sd.values();
  for (std::size_t r = 0; r < m.rows; ++r) {
    for (std::size_t j = 0; j < m.cols; ++j) {
      v[r * m.cols + j] = std::clamp((m.at(r, j) - mu[j]) / s[j], -kClip, kClip);
    }
  }
  return t;
}

void fit_stats(const std::vector<const FeatureMatrix*>& mats, ad::Tensor& mean, ad::Tensor& sd) {
  const std::size_t dim = mean.size();
  std::vector<double> sum(dim, 0.0), sq(dim, 0.0);
  std::size_t n = 0;
  for (const FeatureMatrix* m : mats) {
    require_matrix(*m, dim, "fit_normalization");
    for (std::size_t r = 0; r < m->rows; ++r) {
      for (std::size_t j = 0; j < dim; ++j) sum[j] += m->at(r, j);
    }
    n += m->rows;
  }
  if (n == 0) return;
  for (std::size_t j = 0; j < dim; ++j) sum[j] /= static_cast<double>(n);
  for (const FeatureMatrix* m : mats) {
    for (std::size_t r = 0; r < m->rows; ++r) {
      for (std::size_t j = 0; j < dim; ++j) {
        const double d = m->at(r, j) - sum[j];
        sq[j] += d * d;
      }
    }
  }
  for (std::size_t j = 0; j < dim; ++j) {
    mean.data()[j] = sum[j];
    sd.data()[j] = std::max(std::sqrt(sq[j] / static_cast<double>(n)), kStdFloor);
  }
}

ad::Tensor learned_token(std::size_t d, Rng& rng) {
  ad::Tensor t = ad::Tensor::zeros({1, d}, true);
  for (double& v : t.data()) v = rng.uniform(-0.5, 0.5);
  return t;
}

}  // namespace

// ---- config ---------------------------------------------------------------

HumpCatConfig HumpCatConfig::tiny() {
  HumpCatConfig c;
  c.cat.model_dim = 16;
  c.cat.n_heads = 2;
  c.cat.ff_dim = 32;
  c.cat.dropout = 0.1;
  c.conv.channels = 4;
  c.bilstm_hidden = 8;
  c.ssrl_dim = 64;
  c.ssrl_layers = {1, 3};
  return c;
}

void HumpCatConfig::validate() const {
  cat.validate();
  conv.validate();
  if (bilstm_hidden == 0 || pool_proj_dim == 0 || mfcc_pool_window == 0 || prosody_dim == 0 ||
      mfcc_dim == 0 || ssrl_dim == 0) {
    throw ParameterError("HumpCatConfig: dimensions must be positive");
  }
  if (n_classes < 2) throw ParameterError("HumpCatConfig: need at least two classes");
  if (prosody_fc.empty()) throw ParameterError("HumpCatConfig: prosody_fc is empty");
  if (ssrl_layers.empty()) throw ParameterError("HumpCatConfig: no SSRL layers");
  if (ssrl_dim < conv.kernel_f) {
    throw ParameterError("HumpCatConfig: ssrl_dim smaller than the conv kernel width");
  }
  if (!(am_scale > 0.0) || !(am_margin >= 0.0)) {
    throw ParameterError("HumpCatConfig: AM-Softmax needs scale > 0 and margin >= 0");
  }
}

nlohmann::json HumpCatConfig::to_json() const {
  return {{"cat", cat.to_json()},
          {"conv", conv.to_json()},
          {"bilstm_hidden", bilstm_hidden},
          {"pool_proj_dim", pool_proj_dim},
          {"n_classes", n_classes},
          {"mfcc_pool_window", mfcc_pool_window},
          {"prosody_dim", prosody_dim},
          {"mfcc_dim", mfcc_dim},
          {"ssrl_dim", ssrl_dim},
          {"prosody_fc", prosody_fc},
          {"ssrl_layers", ssrl_layers},
          {"am_scale", am_scale},
          {"am_margin", am_margin},
          {"use_prosody", use_prosody},
          {"use_mfcc", use_mfcc},
          {"use_ssrl", use_ssrl},
          {"seed", seed}};
}

HumpCatConfig HumpCatConfig::from_json(const nlohmann::json& j) {
  HumpCatConfig c = j.value("tiny", false) ? tiny() : HumpCatConfig{};
  if (j.contains("cat")) {
    nlohmann::json merged = c.cat.to_json();
    merged.update(j.at("cat"));
    c.cat = nn::CatConfig::from_json(merged);
  }
  if (j.contains("conv")) {
    nlohmann::json merged = c.conv.to_json();
    merged.update(j.at("conv"));
    c.conv = nn::ConvBlockConfig::from_json(merged);
  }
  c.bilstm_hidden = j.value("bilstm_hidden", c.bilstm_hidden);
  c.pool_proj_dim = j.value("pool_proj_dim", c.pool_proj_dim);
  c.n_classes = j.value("n_classes", c.n_classes);
  c.mfcc_pool_window = j.value("mfcc_pool_window", c.mfcc_pool_window);
  c.prosody_dim = j.value("prosody_dim", c.prosody_dim);
  c.mfcc_dim = j.value("mfcc_dim", c.mfcc_dim);
  c.ssrl_dim = j.value("ssrl_dim", c.ssrl_dim);
  c.prosody_fc = j.value("prosody_fc", c.prosody_fc);
  c.ssrl_layers = j.value("ssrl_layers", c.ssrl_layers);
  c.am_scale = j.value("am_scale", c.am_scale);
  c.am_margin = j.value("am_margin", c.am_margin);
  c.use_prosody = j.value("use_prosody", c.use_prosody);
  c.use_mfcc = j.value("use_mfcc", c.use_mfcc);
  c.use_ssrl = j.value("use_ssrl", c.use_ssrl);
  c.seed = j.value("seed", c.seed);
  c.validate();
  return c;
}

// ---- model ----------------------------------------------------------------

ad::Tensor window_mean_pool(const ad::Tensor& x, std::size_t window) {
  if (x.rank() != 2) throw ShapeError("window_mean_pool: expected a 2-D sequence");
  if (window == 0) throw ParameterError("window_mean_pool: zero window");
  const std::size_t t_len = x.dim(0);
  if (t_len < window) {
    throw ShapeError("window_mean_pool: " + std::to_string(t_len) + " frames, need at least " +
                     std::to_string(window));
  }
  const std::size_t steps = (t_len + window - 1) / window;
  ad::Tensor pool = ad::Tensor::zeros({steps, t_len});
  auto p = pool.data();
  for (std::size_t s = 0; s < steps; ++s) {
    const std::size_t b = s * window;
    const std::size_t e = std::min(t_len, b + window);
    for (std::size_t t = b; t < e; ++t) p[s * t_len + t] = 1.0 / static_cast<double>(e - b);
  }
  return ad::matmul(pool, x);
}

HumpCat::HumpCat(const HumpCatConfig& cfg) : HumpCat(cfg, Rng(cfg.seed)) {}

HumpCat::HumpCat(const HumpCatConfig& cfg, Rng rng)
    : prosody_fc((cfg.validate(), cfg.prosody_dim), cfg.prosody_fc, rng),
      prosody_proj(cfg.prosody_fc.back(), cfg.cat.model_dim, rng),
      mfcc_lstm(cfg.mfcc_dim, cfg.bilstm_hidden, rng),
      mfcc_proj(2 * cfg.bilstm_hidden, cfg.cat.model_dim, rng),
      ssrl_fusion(cfg.ssrl_layers,
                  *std::max_element(cfg.ssrl_layers.begin(), cfg.ssrl_layers.end()) + 1),
      ssrl_conv(cfg.conv, cfg.ssrl_dim, cfg.cat.model_dim, rng),
      cat_pm(cfg.cat, rng),
      cat_h(cfg.cat, rng),
      pool_proj(cfg.cat.model_dim, cfg.pool_proj_dim, rng),
      cfg_(cfg),
      classifier_(nn::AmSoftmaxConfig{cfg.am_scale, cfg.am_margin, cfg.n_classes,
                                      cfg.embedding_dim()},
                  rng) {
  const std::size_t d = cfg_.cat.model_dim;
  token_p_ = learned_token(d, rng);
  token_m_ = learned_token(d, rng);
  token_h_ = learned_token(d, rng);
  norm_prosody_ = {ad::Tensor::zeros({cfg_.prosody_dim}), ad::Tensor::full({cfg_.prosody_dim}, 1.0)};
  norm_mfcc_ = {ad::Tensor::zeros({cfg_.mfcc_dim}), ad::Tensor::full({cfg_.mfcc_dim}, 1.0)};
  norm_ssrl_ = {ad::Tensor::zeros({cfg_.ssrl_dim}), ad::Tensor::full({cfg_.ssrl_dim}, 1.0)};
}

HumpCat::Inputs HumpCat::prepare(const ModelFeatures& f) const {
  Inputs in;
  if (cfg_.use_prosody) {
    require_matrix(f.prosody, cfg_.prosody_dim, "prosody features");
    in.prosody = standardize(f.prosody, norm_prosody_.mean, norm_prosody_.std);
  }
  if (cfg_.use_mfcc) {
    require_matrix(f.mfcc, cfg_.mfcc_dim, "MFCC features");
    in.mfcc = standardize(f.mfcc, norm_mfcc_.mean, norm_mfcc_.std);
  }
  if (cfg_.use_ssrl) {
    if (f.ssrl.size() != cfg_.ssrl_layers.size()) {
      throw ShapeError("SSRL features: expected " + std::to_string(cfg_.ssrl_layers.size()) +
                       " layers, got " + std::to_string(f.ssrl.size()));
    }
    for (const FeatureMatrix& m : f.ssrl) {
      require_matrix(m, cfg_.ssrl_dim, "SSRL features");
      in.ssrl.push_back(standardize(m, norm_ssrl_.mean, norm_ssrl_.std));
    }
  }
  return in;
}

ad::Tensor HumpCat::branch_prosody(const ad::Tensor& v) const {
  if (v.rank() != 2 || v.dim(0) != 1 || v.dim(1) != cfg_.prosody_dim) {
    throw ShapeError("branch_prosody: expected (1, " + std::to_string(cfg_.prosody_dim) + ")");
  }
  return prosody_proj(prosody_fc(v));
}

ad::Tensor HumpCat::branch_mfcc(const ad::Tensor& m) const {
  if (m.rank() != 2 || m.dim(1) != cfg_.mfcc_dim) {
    throw ShapeError("branch_mfcc: expected (T, " + std::to_string(cfg_.mfcc_dim) + ")");
  }
  return mfcc_proj(mfcc_lstm(window_mean_pool(m, cfg_.mfcc_pool_window)));
}

ad::Tensor HumpCat::branch_ssrl(const std::vector<ad::Tensor>& layers) const {
  return ssrl_conv(ssrl_fusion.fuse_selected(layers));
}

ad::Tensor HumpCat::fuse(const ad::Tensor& rp, const ad::Tensor& rm, const ad::Tensor& rh,
                         const nn::RunMode& mode) const {
  const ad::Tensor pm = cat_pm(rp, rm, mode);
  return cat_h(rh, pm, mode);
}

ad::Tensor HumpCat::pool(const ad::Tensor& r) const {
  if (r.rank() != 2 || r.dim(0) == 0) throw ContractError("pool: empty sequence");
  const ad::Tensor p = pool_proj(r);
  return ad::concat({ad::mean(p, 0), ad::variance(p, 0)}, 1);
}

HumpCat::Forward HumpCat::forward(const Inputs& in, const nn::RunMode& mode) const {
  Forward f;
  f.prosody_seq = cfg_.use_prosody ? branch_prosody(in.prosody) : token_p_;
  f.mfcc_seq = cfg_.use_mfcc ? branch_mfcc(in.mfcc) : token_m_;
  f.ssrl_seq = cfg_.use_ssrl ? branch_ssrl(in.ssrl) : token_h_;
  f.pm = cat_pm(f.prosody_seq, f.mfcc_seq, mode);
  f.fused = cat_h(f.ssrl_seq, f.pm, mode);
  f.embedding = pool(f.fused);
  return f;
}

Prediction HumpCat::predict(const Inputs& in) const {
  const ad::Tensor probs = ad::softmax(logits(forward(in).embedding), 1);
  Prediction p;
  p.probabilities = probs.values();
  p.label = static_cast<std::size_t>(
      std::max_element(p.probabilities.begin(), p.probabilities.end()) -
      p.probabilities.begin());
  return p;
}

Prediction HumpCat::predict(const ModelFeatures& f) const { return predict(prepare(f)); }

void HumpCat::fit_normalization(const std::vector<const ModelFeatures*>& features) {
  std::vector<const FeatureMatrix*> pros, mfcc, ssrl;
  for (const ModelFeatures* f : features) {
    if (cfg_.use_prosody) pros.push_back(&f->prosody);
    if (cfg_.use_mfcc) mfcc.push_back(&f->mfcc);
    if (cfg_.use_ssrl) {
      for (const FeatureMatrix& m : f->ssrl) ssrl.push_back(&m);
    }
  }
  fit_stats(pros, norm_prosody_.mean, norm_prosody_.std);
  fit_stats(mfcc, norm_mfcc_.mean, norm_mfcc_.std);
  fit_stats(ssrl, norm_ssrl_.mean, norm_ssrl_.std);
}

const std::vector<std::string>& HumpCat::branch_prefixes() {
  static const std::vector<std::string> prefixes{
      "blocks/prosody_fc/", "blocks/prosody_proj/", "blocks/mfcc_lstm/",
      "blocks/mfcc_proj/",  "blocks/ssrl_fusion/",  "blocks/ssrl_conv/"};
  return prefixes;
}

ParameterSet HumpCat::parameters() const {
  ParameterSet ps;
  if (cfg_.use_prosody) {
    prosody_fc.collect(ps, "blocks/prosody_fc");
    prosody_proj.collect(ps, "blocks/prosody_proj");
  } else {
    ps.add("blocks/tokens/prosody", token_p_);
  }
  if (cfg_.use_mfcc) {
    mfcc_lstm.collect(ps, "blocks/mfcc_lstm");
    mfcc_proj.collect(ps, "blocks/mfcc_proj");
  } else {
    ps.add("blocks/tokens/mfcc", token_m_);
  }
  if (cfg_.use_ssrl) {
    ssrl_fusion.collect(ps, "blocks/ssrl_fusion");
    ssrl_conv.collect(ps, "blocks/ssrl_conv");
  } else {
    ps.add("blocks/tokens/ssrl", token_h_);
  }
  cat_pm.collect(ps, "blocks/cat_pm");
  cat_h.collect(ps, "blocks/cat_h");
  pool_proj.collect(ps, "blocks/pool_proj");
  classifier_.collect(ps, "blocks/am_softmax");
  return ps;
}

ParameterSet HumpCat::state() const {
  ParameterSet ps = parameters();
  ps.add("norm/prosody/mean", norm_prosody_.mean);
  ps.add("norm/prosody/std", norm_prosody_.std);
  ps.add("norm/mfcc/mean", norm_mfcc_.mean);
  ps.add("norm/mfcc/std", norm_mfcc_.std);
  ps.add("norm/ssrl/mean", norm_ssrl_.mean);
  ps.add("norm/ssrl/std", norm_ssrl_.std);
  return ps;
}

Checkpoint HumpCat::save() const {
  return state().snapshot({{"kind", "humpcat"}, {"model", cfg_.to_json()}});
}

HumpCat HumpCat::load(const Checkpoint& ckpt) {
  if (ckpt.config.value("kind", "") != "humpcat") {
    throw ConfigError("checkpoint is not a fusion-model checkpoint");
  }
  HumpCat model(HumpCatConfig::from_json(ckpt.config.at("model")));
  model.state().load(ckpt);
  return model;
}

HumpCat HumpCat::load(const std::filesystem::path& path) { return load(load_checkpoint(path)); }

}  // namespace emofuse
