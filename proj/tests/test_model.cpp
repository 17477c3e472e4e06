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

#define DOCTEST_CONFIG_IMPLEMENT_WITH_MAIN
#include "doctest.h"

#include <cmath>
#include <filesystem>
#include <string_view>
#include <vector>

#include "emofuse/error.hpp"
#include "emofuse/model.hpp"
#include "emofuse/rng.hpp"
#include "support/gradcheck.hpp"

using namespace emofuse;
using ad::Tensor;
using testing::random_tensor;

namespace {

FeatureMatrix random_matrix(std::size_t rows, std::size_t cols, Rng& rng, double scale = 1.0) {
  FeatureMatrix m(rows, cols);
  for (double& v : m.data) v = scale * rng.normal();
  return m;
}

ModelFeatures random_features(const HumpCatConfig& cfg, std::size_t frames, Rng& rng) {
  ModelFeatures f;
  f.prosody = random_matrix(1, cfg.prosody_dim, rng);
  f.mfcc = random_matrix(frames, cfg.mfcc_dim, rng);
  for (std::size_t i = 0; i < cfg.ssrl_layers.size(); ++i) f.ssrl.push_back(random_matrix(frames, cfg.ssrl_dim, rng));
  return f;
}

HumpCatConfig gradcheck_config() {
  HumpCatConfig c;
  c.cat.model_dim = 8;
  c.cat.n_heads = 2;
  c.cat.ff_dim = 12;
  c.cat.dropout = 0.0;
  c.conv = nn::ConvBlockConfig{3, 4, 2, 2, 2};
  c.bilstm_hidden = 3;
  c.pool_proj_dim = 4;
  c.prosody_dim = 6;
  c.prosody_fc = {5, 4};
  c.mfcc_dim = 5;
  c.ssrl_dim = 7;
  c.ssrl_layers = {0, 2};
  return c;
}

}  // namespace

TEST_CASE("window mean pooling") {
  Rng rng(1);
  const Tensor x = random_tensor({349, 3}, rng, false);
  const Tensor p = window_mean_pool(x, 4);
  REQUIRE(p.shape() == ad::Shape{88, 3});
  for (std::size_t j = 0; j < 3; ++j) {
    CHECK(p.at(0, j) == doctest::Approx((x.at(0, j) + x.at(1, j) + x.at(2, j) + x.at(3, j)) / 4).epsilon(1e-14));
    CHECK(p.at(87, j) == doctest::Approx(x.at(348, j)).epsilon(1e-14));
  }
  const Tensor c = window_mean_pool(Tensor::full({10, 2}, 2.5), 4);
  for (double v : c.values()) CHECK(v == doctest::Approx(2.5).epsilon(1e-15));
  CHECK_THROWS_AS(window_mean_pool(Tensor::zeros({3, 2}), 4), ShapeError);
}

TEST_CASE("branch shapes at full size") {
  HumpCatConfig cfg;
  HumpCat model(cfg);
  Rng rng(2);
  const ModelFeatures f = random_features(cfg, 349, rng);
  const auto in = model.prepare(f);
  CHECK(model.branch_prosody(in.prosody).shape() == ad::Shape{1, 64});
  CHECK(model.branch_mfcc(in.mfcc).shape() == ad::Shape{88, 64});
  const Tensor rh = model.branch_ssrl(in.ssrl);
  CHECK(rh.shape() == ad::Shape{85, 64});
  const auto fw = model.forward(in);
  CHECK(fw.pm.shape() == ad::Shape{1, 64});
  CHECK(fw.fused.shape() == ad::Shape{85, 64});
  CHECK(fw.embedding.shape() == ad::Shape{1, 64});
  const Prediction p = model.predict(f);
  CHECK(p.probabilities.size() == 4);
}

TEST_CASE("tiny model properties") {
  const HumpCatConfig cfg = HumpCatConfig::tiny();
  HumpCat model(cfg);
  Rng rng(3);
  const ModelFeatures f = random_features(cfg, 60, rng);
  const auto in = model.prepare(f);

  SUBCASE("zeroed prosody stack maps any vector to the projection bias") {
    for (auto& l : model.prosody_fc.layers) l.zero();
    model.prosody_proj.zero();
    const Tensor out = model.branch_prosody(in.prosody);
    for (double v : out.values()) CHECK(v == 0.0);
  }
  SUBCASE("pooling ignores row order and has zero variance on constant rows") {
    const Tensor r = random_tensor({9, 16}, rng, false);
    const Tensor a = model.pool(r);
    const std::vector<std::size_t> perm{4, 8, 0, 2, 6, 1, 3, 7, 5};
    const Tensor b = model.pool(ad::gather_rows(r, perm));
    for (std::size_t i = 0; i < a.size(); ++i) CHECK(std::abs(a.at(i) - b.at(i)) < 1e-12);
    const Tensor c = model.pool(ad::repeat_rows(random_tensor({1, 16}, rng, false), 5));
    for (std::size_t j = 32; j < 64; ++j) CHECK(std::abs(c.at(0, j)) < 1e-12);
  }
  SUBCASE("fused sequence follows the SSRL length") {
    const auto fw = model.forward(in);
    CHECK(fw.fused.dim(0) == fw.ssrl_seq.dim(0));
    CHECK(fw.fused.dim(0) == cfg.conv.out_rows(60));
    CHECK(fw.mfcc_seq.dim(0) == 15);
  }
  SUBCASE("probabilities form a distribution; argmax ignores embedding scale") {
    const Prediction p = model.predict(in);
    double s = 0.0;
    for (double v : p.probabilities) s += v;
    CHECK(s == doctest::Approx(1.0).epsilon(1e-12));
    const Tensor e = model.forward(in).embedding;
    const Tensor l1 = model.logits(e);
    const Tensor l2 = model.logits(ad::scale(e, 37.0));
    for (std::size_t i = 0; i < l1.size(); ++i) CHECK(l1.at(i) == doctest::Approx(l2.at(i)).epsilon(1e-12));
  }
  SUBCASE("same seed, same predictions") {
    HumpCat twin(cfg);
    CHECK(twin.predict(f).probabilities == model.predict(f).probabilities);
    HumpCatConfig other = cfg;
    other.seed = 1;
    CHECK(HumpCat(other).predict(f).probabilities != model.predict(f).probabilities);
  }
  SUBCASE("shape errors") {
    ModelFeatures bad = f;
    bad.mfcc = random_matrix(60, 38, rng);
    CHECK_THROWS_AS(model.prepare(bad), ShapeError);
    bad = f;
    bad.ssrl.pop_back();
    CHECK_THROWS_AS(model.prepare(bad), ShapeError);
    bad = f;
    bad.ssrl = {random_matrix(8, 64, rng), random_matrix(8, 64, rng)};
    bad.mfcc = random_matrix(8, 39, rng);
    CHECK_THROWS_AS(model.forward(model.prepare(bad)), ShapeError);
  }
}

TEST_CASE("normalization") {
  const HumpCatConfig cfg = HumpCatConfig::tiny();
  HumpCat model(cfg);
  Rng rng(4);
  std::vector<ModelFeatures> train;
  for (int i = 0; i < 6; ++i) {
    ModelFeatures f = random_features(cfg, 40, rng);
    for (double& v : f.prosody.data) v = 5.0 + 3.0 * v;
    f.prosody.data[7] = 2.0;  // constant column
    train.push_back(f);
  }
  std::vector<const ModelFeatures*> ptrs;
  for (const auto& f : train) ptrs.push_back(&f);
  model.fit_normalization(ptrs);
  for (std::size_t j = 0; j < cfg.prosody_dim; ++j) {
    double mean = 0.0, sq = 0.0;
    for (const auto& f : train) mean += model.prepare(f).prosody.at(0, j);
    mean /= 6.0;
    for (const auto& f : train) sq += std::pow(model.prepare(f).prosody.at(0, j) - mean, 2);
    CHECK(std::abs(mean) < 1e-9);
    if (j != 7) CHECK(std::sqrt(sq / 6.0) == doctest::Approx(1.0).epsilon(1e-9));
    if (j == 7) CHECK(sq == 0.0);
  }
  ModelFeatures outlier = train[0];
  outlier.prosody.data[0] = 1e9;
  CHECK(model.prepare(outlier).prosody.at(0, 0) == 10.0);
}

TEST_CASE("ablations build and run") {
  Rng rng(5);
  for (int mask = 1; mask < 8; ++mask) {
    HumpCatConfig cfg = HumpCatConfig::tiny();
    cfg.use_prosody = mask & 1;
    cfg.use_mfcc = mask & 2;
    cfg.use_ssrl = mask & 4;
    HumpCat model(cfg);
    ModelFeatures f = random_features(cfg, 48, rng);
    if (!cfg.use_prosody) f.prosody = {};
    if (!cfg.use_mfcc) f.mfcc = {};
    if (!cfg.use_ssrl) f.ssrl.clear();
    INFO("mask " << mask);
    const Prediction p = model.predict(f);
    CHECK(p.probabilities.size() == 4);
    const ParameterSet ps = model.parameters();
    CHECK((ps.find("blocks/tokens/prosody") != nullptr) == !cfg.use_prosody);
    CHECK((ps.find("blocks/tokens/mfcc") != nullptr) == !cfg.use_mfcc);
    CHECK((ps.find("blocks/tokens/ssrl") != nullptr) == !cfg.use_ssrl);
    CHECK((ps.find("blocks/ssrl_fusion/logits") != nullptr) == cfg.use_ssrl);
  }
}

TEST_CASE("end-to-end gradient check on a small model") {
  const HumpCatConfig cfg = gradcheck_config();
  for (int point = 0; point < 3; ++point) {
    HumpCatConfig c = cfg;
    c.seed = static_cast<std::uint64_t>(point);
    HumpCat model(c);
    Rng rng(50 + static_cast<std::uint64_t>(point));
    const auto a = model.prepare(random_features(c, 12, rng));
    const auto b = model.prepare(random_features(c, 12, rng));
    const std::vector<std::size_t> labels{1, 3};
    const auto loss = [&] {
      return model.loss(ad::concat({model.forward(a).embedding, model.forward(b).embedding}, 0), labels).loss;
    };
    const ParameterSet ps = model.parameters().filter(
        [](std::string_view n) { return !n.ends_with("/key/bias"); });
    const auto r = testing::gradcheck(loss, ps.tensors());
    INFO("point " << point << " worst " << ps.items()[std::stoul(r.worst)].first);
    CHECK(r.max_rel_error < 1e-4);
  }
}

TEST_CASE("checkpoints") {
  const auto dir = std::filesystem::temp_directory_path() / "emofuse_test_model";
  std::filesystem::create_directories(dir);
  const HumpCatConfig cfg = HumpCatConfig::tiny();
  HumpCat model(cfg);
  Rng rng(6);
  std::vector<ModelFeatures> train;
  for (int i = 0; i < 6; ++i) train.push_back(random_features(cfg, 40, rng));
  std::vector<const ModelFeatures*> ptrs;
  for (const auto& t : train) ptrs.push_back(&t);
  model.fit_normalization(ptrs);
  const ModelFeatures& f = train[0];
  save_checkpoint(dir / "m.ckpt", model.save());
  const HumpCat back = HumpCat::load(dir / "m.ckpt");
  const auto reloaded = back.predict(f).probabilities;
  const auto original = model.predict(f).probabilities;
  for (std::size_t c = 0; c < 4; ++c) CHECK(reloaded[c] == doctest::Approx(original[c]).epsilon(1e-5));
  // Tensors are stored as float32: a model rounded the same way matches exactly.
  for (const auto& [name, t] : model.state().items()) {
    for (double& v : ad::Tensor(t).data()) v = static_cast<double>(static_cast<float>(v));
  }
  CHECK(back.predict(f).probabilities == model.predict(f).probabilities);
  CHECK(back.config().to_json() == cfg.to_json());
  CHECK_THROWS_AS(HumpCat::load(dir / "missing.ckpt"), StateError);
  std::filesystem::remove_all(dir);
}

TEST_CASE("config json") {
  HumpCatConfig c = HumpCatConfig::tiny();
  c.use_mfcc = false;
  c.am_margin = 0.2;
  CHECK(HumpCatConfig::from_json(c.to_json()).to_json() == c.to_json());
  CHECK(HumpCatConfig::from_json({{"tiny", true}, {"cat", {{"n_heads", 4}}}}).cat.model_dim == 16);
  CHECK_THROWS_AS(HumpCatConfig::from_json({{"cat", {{"n_heads", 5}}}}), ParameterError);
  CHECK_THROWS_AS(HumpCatConfig::from_json({{"ssrl_dim", 10}}), ParameterError);
}
