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
#include <functional>
#include <string_view>
#include <utility>
#include <vector>

#include "emofuse/error.hpp"
#include "emofuse/nn.hpp"
#include "emofuse/rng.hpp"
#include "support/gradcheck.hpp"

using namespace emofuse;
using ad::Tensor;
using testing::gradcheck;
using testing::project;
using testing::random_tensor;

namespace {

bool is_key_bias(std::string_view name) { return name.ends_with("/key/bias"); }

// Key biases shift every score of a query row equally, so softmax makes
// their gradient identically zero. They are checked separately in absolute
// terms; everything else goes through the relative check.
template <class Block>
std::vector<Tensor> collect_all(const Block& b) {
  ParameterSet ps;
  b.collect(ps, "blocks/x");
  return ps.filter([](std::string_view n) { return !is_key_bias(n); }).tensors();
}

template <class Block>
std::vector<Tensor> key_biases(const Block& b) {
  ParameterSet ps;
  b.collect(ps, "blocks/x");
  return ps.filter(is_key_bias).tensors();
}

// Largest analytic and central-difference gradient magnitude over `wrt`.
std::pair<double, double> max_abs_gradient(const std::function<Tensor()>& f, std::vector<Tensor> wrt) {
  double analytic = 0.0, numeric = 0.0;
  {
    ad::Graph g;
    g.backward(f());
    for (auto& t : wrt) {
      if (!t.has_grad()) continue;
      for (double v : t.grad()) analytic = std::max(analytic, std::abs(v));
    }
  }
  for (auto& t : wrt) {
    auto data = t.data();
    for (std::size_t i = 0; i < data.size(); ++i) {
      const double x0 = data[i];
      data[i] = x0 + 1e-4;
      const double up = f().item();
      data[i] = x0 - 1e-4;
      const double down = f().item();
      data[i] = x0;
      numeric = std::max(numeric, std::abs(up - down) / 2e-4);
    }
  }
  return {analytic, numeric};
}

std::vector<Tensor> with(std::vector<Tensor> a, std::initializer_list<Tensor> more) {
  a.insert(a.end(), more.begin(), more.end());
  return a;
}

// Plain-loop linear layer: x (n, in) * W (in, out) + b.
std::vector<double> lin(const std::vector<double>& x, std::size_t n, const nn::Linear& l) {
  const std::size_t in = l.in_dim(), out = l.out_dim();
  std::vector<double> y(n * out);
  for (std::size_t r = 0; r < n; ++r) {
    for (std::size_t j = 0; j < out; ++j) {
      double s = l.bias.at(j);
      for (std::size_t k = 0; k < in; ++k) s += x[r * in + k] * l.weight.at(k * out + j);
      y[r * out + j] = s;
    }
  }
  return y;
}

double sigm(double x) { return 1.0 / (1.0 + std::exp(-x)); }

constexpr int kPoints = 10;

}  // namespace

TEST_CASE("attention matches a per-head loop") {
  Rng rng(1);
  const std::size_t d = 8, heads = 2, dh = 4, tq = 3, tk = 5;
  nn::MultiHeadAttention mha(d, heads, rng);
  const Tensor q = random_tensor({tq, d}, rng, false);
  const Tensor kv = random_tensor({tk, d}, rng, false);
  const auto Q = lin(q.values(), tq, mha.query);
  const auto K = lin(kv.values(), tk, mha.key);
  const auto V = lin(kv.values(), tk, mha.value);
  std::vector<double> ctx(tq * d, 0.0);
  for (std::size_t h = 0; h < heads; ++h) {
    for (std::size_t i = 0; i < tq; ++i) {
      std::vector<double> s(tk);
      double mx = -1e300;
      for (std::size_t j = 0; j < tk; ++j) {
        double dot = 0.0;
        for (std::size_t c = 0; c < dh; ++c) dot += Q[i * d + h * dh + c] * K[j * d + h * dh + c];
        s[j] = dot / std::sqrt(static_cast<double>(dh));
        mx = std::max(mx, s[j]);
      }
      double z = 0.0;
      for (double& v : s) z += (v = std::exp(v - mx));
      for (std::size_t j = 0; j < tk; ++j) {
        for (std::size_t c = 0; c < dh; ++c) ctx[i * d + h * dh + c] += s[j] / z * V[j * d + h * dh + c];
      }
    }
  }
  const auto ref = lin(ctx, tq, mha.output);
  const auto got = mha(q, kv).values();
  for (std::size_t i = 0; i < ref.size(); ++i) CHECK(std::abs(got[i] - ref[i]) < 1e-10);
}

TEST_CASE("attention edge cases") {
  Rng rng(2);
  nn::MultiHeadAttention mha(8, 2, rng);
  SUBCASE("one key: every row is the projected value") {
    const Tensor q = random_tensor({4, 8}, rng, false);
    const Tensor kv = random_tensor({1, 8}, rng, false);
    const auto ref = lin(lin(kv.values(), 1, mha.value), 1, mha.output);
    const Tensor out = mha(q, kv);
    for (std::size_t r = 0; r < 4; ++r) {
      for (std::size_t j = 0; j < 8; ++j) CHECK(std::abs(out.at(r, j) - ref[j]) < 1e-12);
    }
  }
  SUBCASE("identical keys: output independent of the query") {
    const Tensor row = random_tensor({1, 8}, rng, false);
    const Tensor kv = ad::repeat_rows(row, 5);
    const Tensor a = mha(random_tensor({2, 8}, rng, false), kv);
    const Tensor b = mha(random_tensor({2, 8}, rng, false), kv);
    for (std::size_t i = 0; i < a.size(); ++i) CHECK(std::abs(a.at(i) - b.at(i)) < 1e-12);
  }
  SUBCASE("contexts lie in the convex hull of the projected values") {
    nn::MultiHeadAttention::Trace trace;
    mha(random_tensor({6, 8}, rng, false), random_tensor({5, 8}, rng, false), &trace);
    REQUIRE(trace.contexts.size() == 2);
    for (std::size_t h = 0; h < 2; ++h) {
      const Tensor& w = trace.weights[h];
      for (std::size_t i = 0; i < w.dim(0); ++i) {
        double s = 0.0;
        for (std::size_t j = 0; j < w.dim(1); ++j) {
          CHECK(w.at(i, j) >= 0.0);
          s += w.at(i, j);
        }
        CHECK(s == doctest::Approx(1.0).epsilon(1e-12));
        // Each coordinate is bounded by the value rows' extremes.
        for (std::size_t c = 0; c < trace.values[h].dim(1); ++c) {
          double lo = 1e300, hi = -1e300;
          for (std::size_t j = 0; j < trace.values[h].dim(0); ++j) {
            lo = std::min(lo, trace.values[h].at(j, c));
            hi = std::max(hi, trace.values[h].at(j, c));
          }
          CHECK(trace.contexts[h].at(i, c) >= lo - 1e-12);
          CHECK(trace.contexts[h].at(i, c) <= hi + 1e-12);
        }
      }
    }
  }
  SUBCASE("shape errors") {
    CHECK_THROWS_AS(mha(random_tensor({2, 6}, rng, false), random_tensor({2, 8}, rng, false)), ShapeError);
    CHECK_THROWS_AS(mha(Tensor::zeros({0, 8}), random_tensor({2, 8}, rng, false)), ContractError);
    CHECK_THROWS_AS(nn::MultiHeadAttention(10, 4, rng), ParameterError);
  }
}

TEST_CASE("cat_block") {
  Rng rng(3);
  nn::CatConfig cfg;
  cfg.model_dim = 8;
  cfg.n_heads = 2;
  cfg.ff_dim = 16;
  SUBCASE("shapes") {
    nn::CatBlock cat(cfg, rng);
    const auto [a2b, b2a] = cat(random_tensor({3, 8}, rng, false), random_tensor({7, 8}, rng, false));
    CHECK(a2b.shape() == ad::Shape{3, 8});
    CHECK(b2a.shape() == ad::Shape{7, 8});
    CHECK_THROWS_AS(cat(Tensor::zeros({0, 8}), random_tensor({2, 8}, rng, false)), ContractError);
  }
  SUBCASE("A = B with tied directions gives identical outputs") {
    nn::CatBlock cat(cfg, rng, true);
    const Tensor a = random_tensor({4, 8}, rng, false);
    const auto [x, y] = cat(a, a);
    CHECK(x.values() == y.values());
  }
  SUBCASE("permuting B leaves A2B unchanged") {
    nn::CatBlock cat(cfg, rng);
    const Tensor a = random_tensor({3, 8}, rng, false);
    const Tensor b = random_tensor({5, 8}, rng, false);
    const std::vector<std::size_t> perm{3, 0, 4, 2, 1};
    const auto x = cat(a, b).first;
    const auto y = cat(a, ad::gather_rows(b, perm)).first;
    for (std::size_t i = 0; i < x.size(); ++i) CHECK(std::abs(x.at(i) - y.at(i)) < 1e-12);
  }
  SUBCASE("positional encoding breaks that invariance") {
    cfg.positional_encoding = true;
    nn::CatBlock cat(cfg, rng);
    const Tensor a = random_tensor({3, 8}, rng, false);
    const Tensor b = random_tensor({5, 8}, rng, false);
    const std::vector<std::size_t> perm{3, 0, 4, 2, 1};
    CHECK(cat(a, b).first.values() != cat(a, ad::gather_rows(b, perm)).first.values());
  }
  SUBCASE("dropout only in training mode") {
    nn::CatBlock cat(cfg, rng);
    const Tensor a = random_tensor({3, 8}, rng, false);
    const Tensor b = random_tensor({5, 8}, rng, false);
    CHECK(cat(a, b).first.values() == cat(a, b).first.values());
    Rng drop(1);
    const nn::RunMode train{true, &drop};
    CHECK(cat(a, b, train).first.values() != cat(a, b).first.values());
  }
}

TEST_CASE("cat_fuse") {
  Rng rng(4);
  nn::CatConfig cfg;
  cfg.model_dim = 8;
  cfg.n_heads = 2;
  cfg.ff_dim = 16;
  nn::CatFuse fuse(cfg, rng);
  const Tensor a = random_tensor({3, 8}, rng, false);
  const Tensor b = random_tensor({6, 8}, rng, false);
  CHECK(fuse(a, b).shape() == ad::Shape{3, 8});
  CHECK(fuse(b, a).shape() == ad::Shape{6, 8});
  SUBCASE("zero inputs and zero projections give zeros") {
    fuse.zero();
    const Tensor out = fuse(Tensor::zeros({3, 8}), Tensor::zeros({4, 8}));
    for (double v : out.values()) CHECK(v == 0.0);
  }
  SUBCASE("output depends on both inputs") {
    Tensor ga = random_tensor({3, 8}, rng);
    Tensor gb = random_tensor({6, 8}, rng);
    ad::Graph g;
    g.backward(project(fuse(ga, gb)));
    double na = 0.0, nb = 0.0;
    for (double v : ga.grad()) na += v * v;
    for (double v : gb.grad()) nb += v * v;
    CHECK(na > 1e-8);
    CHECK(nb > 1e-8);
  }
}

TEST_CASE("bilstm") {
  Rng rng(5);
  const std::size_t in = 3, h = 4;
  nn::BiLstm lstm(in, h, rng);
  const Tensor x = random_tensor({3, in}, rng, false);
  const Tensor y = lstm(x);
  REQUIRE(y.shape() == ad::Shape{3, 2 * h});

  SUBCASE("hand-stepped cell recurrence") {
    auto run = [&](const nn::BiLstm::Direction& dir, bool reverse) {
      std::vector<double> hs(h, 0.0), cs(h, 0.0), out(3 * h);
      const auto xw = lin(x.values(), 3, dir.input);
      for (std::size_t s = 0; s < 3; ++s) {
        const std::size_t t = reverse ? 2 - s : s;
        std::vector<double> z(4 * h);
        for (std::size_t j = 0; j < 4 * h; ++j) {
          z[j] = xw[t * 4 * h + j];
          for (std::size_t k = 0; k < h; ++k) z[j] += hs[k] * dir.recurrent.at(k * 4 * h + j);
        }
        for (std::size_t j = 0; j < h; ++j) {
          const double ig = sigm(z[j]), fg = sigm(z[h + j]), gg = std::tanh(z[2 * h + j]), og = sigm(z[3 * h + j]);
          cs[j] = fg * cs[j] + ig * gg;
          hs[j] = og * std::tanh(cs[j]);
          out[t * h + j] = hs[j];
        }
      }
      return out;
    };
    const auto f = run(lstm.forward_dir, false);
    const auto b = run(lstm.backward_dir, true);
    for (std::size_t t = 0; t < 3; ++t) {
      for (std::size_t j = 0; j < h; ++j) {
        CHECK(std::abs(y.at(t, j) - f[t * h + j]) < 1e-10);
        CHECK(std::abs(y.at(t, h + j) - b[t * h + j]) < 1e-10);
      }
    }
  }
  SUBCASE("reversal symmetry with exchanged directions") {
    nn::BiLstm swapped = lstm;
    std::swap(swapped.forward_dir, swapped.backward_dir);
    const std::vector<std::size_t> rev{2, 1, 0};
    const Tensor yr = swapped(ad::gather_rows(x, rev));
    for (std::size_t t = 0; t < 3; ++t) {
      for (std::size_t j = 0; j < h; ++j) {
        CHECK(std::abs(yr.at(t, j) - y.at(2 - t, h + j)) < 1e-14);
        CHECK(std::abs(yr.at(t, h + j) - y.at(2 - t, j)) < 1e-14);
      }
    }
  }
}

TEST_CASE("conv block") {
  Rng rng(6);
  nn::ConvBlockConfig cfg;
  SUBCASE("stride arithmetic on a (349, 768) input") {
    nn::ConvBlock conv(cfg, 768, 16, rng);
    const Tensor x = random_tensor({349, 768}, rng, false);
    const Tensor fm = conv.feature_map(x);
    CHECK(cfg.out_rows(349) == 85);
    CHECK(cfg.out_cols(768) == 251);
    CHECK(fm.shape() == ad::Shape{85, 251 * 8});
    CHECK(conv(x).shape() == ad::Shape{85, 16});
  }
  SUBCASE("all-ones input and kernel count the taps") {
    nn::ConvBlock conv(cfg, 18, 4, rng);
    for (double& v : conv.kernel.data()) v = 1.0;
    const Tensor fm = conv.feature_map(Tensor::full({10, 18}, 1.0));
    for (double v : fm.values()) CHECK(v == 180.0);
  }
  SUBCASE("naive four-loop convolution") {
    nn::ConvBlockConfig small{4, 5, 2, 3, 3};
    nn::ConvBlock conv(small, 17, 4, rng);
    for (double& v : conv.bias.data()) v = rng.uniform(-0.5, 0.5);
    const Tensor x = random_tensor({11, 17}, rng, false);
    const Tensor got = ad::conv2d(x, conv.kernel, conv.bias, 2, 3);
    const std::size_t to = small.out_rows(11), fo = small.out_cols(17);
    for (std::size_t t = 0; t < to; ++t) {
      for (std::size_t f = 0; f < fo; ++f) {
        for (std::size_t c = 0; c < 3; ++c) {
          double s = conv.bias.at(c);
          for (std::size_t i = 0; i < 4; ++i) {
            for (std::size_t j = 0; j < 5; ++j) s += x.at(t * 2 + i, f * 3 + j) * conv.kernel.at((c * 4 + i) * 5 + j);
          }
          CHECK(std::abs(got.at(t, f * 3 + c) - s) < 1e-10);
        }
      }
    }
  }
  SUBCASE("undersized input") {
    nn::ConvBlock conv(cfg, 20, 4, rng);
    CHECK_THROWS_AS(conv(random_tensor({9, 20}, rng, false)), ShapeError);
    CHECK_THROWS_AS(nn::ConvBlock(cfg, 17, 4, rng), ShapeError);
  }
}

TEST_CASE("fc stack") {
  Rng rng(7);
  nn::FcStack fc(103, {128, 64}, rng);
  CHECK(fc(random_tensor({1, 103}, rng, false)).shape() == ad::Shape{1, 64});
  for (auto& l : fc.layers) l.zero();
  const Tensor out = fc(random_tensor({1, 103}, rng, false));
  for (double v : out.values()) CHECK(v == 0.0);
  CHECK_THROWS_AS(fc(random_tensor({1, 100}, rng, false)), ShapeError);
}

TEST_CASE("am-softmax") {
  Rng rng(8);
  nn::AmSoftmaxConfig cfg;
  cfg.embed_dim = 6;
  nn::AmSoftmax am(cfg, rng);
  const Tensor e = random_tensor({5, 6}, rng, false);
  const std::vector<std::size_t> y{0, 3, 1, 2, 3};

  auto cosines = [&] {
    std::vector<double> cs(5 * 4);
    for (std::size_t b = 0; b < 5; ++b) {
      double en = 0.0;
      for (std::size_t k = 0; k < 6; ++k) en += e.at(b, k) * e.at(b, k);
      for (std::size_t c = 0; c < 4; ++c) {
        double wn = 0.0, dot = 0.0;
        for (std::size_t k = 0; k < 6; ++k) {
          wn += am.weight.at(k, c) * am.weight.at(k, c);
          dot += e.at(b, k) * am.weight.at(k, c);
        }
        cs[b * 4 + c] = dot / std::sqrt(en * wn);
      }
    }
    return cs;
  };
  auto direct = [&](double s, double m) {
    const auto cs = cosines();
    double loss = 0.0;
    for (std::size_t b = 0; b < 5; ++b) {
      const double target = std::exp(s * (cs[b * 4 + y[b]] - m));
      double rest = 0.0;
      for (std::size_t c = 0; c < 4; ++c) {
        if (c != y[b]) rest += std::exp(s * cs[b * 4 + c]);
      }
      loss += -std::log(target / (target + rest));
    }
    return loss / 5.0;
  };

  CHECK(std::abs(am(e, y).loss.item() - direct(30.0, 0.35)) < 1e-12);
  SUBCASE("m = 0, s = 1 is plain cross-entropy over cosines") {
    am.config().scale = 1.0;
    const auto cs = cosines();
    double ce = 0.0;
    for (std::size_t b = 0; b < 5; ++b) {
      double z = 0.0;
      for (std::size_t c = 0; c < 4; ++c) z += std::exp(cs[b * 4 + c]);
      ce += std::log(z) - cs[b * 4 + y[b]];
    }
    CHECK(std::abs(am(e, y, 0.0).loss.item() - ce / 5.0) < 1e-12);
  }
  SUBCASE("loss grows with the margin") {
    double prev = am(e, y, 0.0).loss.item();
    for (double m : {0.05, 0.1, 0.2, 0.35}) {
      const double l = am(e, y, m).loss.item();
      CHECK(l > prev);
      prev = l;
    }
  }
  SUBCASE("errors") {
    const std::vector<std::size_t> bad{0, 4, 1, 2, 3};
    CHECK_THROWS_AS(am(e, bad), ParameterError);
    Tensor z = e.detach();
    for (std::size_t k = 0; k < 6; ++k) z.data()[k] = 0.0;
    CHECK_THROWS_AS(am(z, y), NumericError);
  }
}

TEST_CASE("gradient checks for every block at 10 random points") {
  nn::CatConfig cfg;
  cfg.model_dim = 8;
  cfg.n_heads = 2;
  cfg.ff_dim = 12;
  for (int p = 0; p < kPoints; ++p) {
    Rng rng(100 + static_cast<std::uint64_t>(p));
    INFO("point " << p);
    {
      nn::MultiHeadAttention mha(8, 2, rng);
      Tensor q = random_tensor({3, 8}, rng), kv = random_tensor({4, 8}, rng);
      const auto f = [&] { return project(mha(q, kv)); };
      const auto r = gradcheck(f, with(collect_all(mha), {q, kv}));
      INFO("attention " << r.worst);
      CHECK(r.max_rel_error < 1e-4);
      const auto [an, nu] = max_abs_gradient(f, key_biases(mha));
      CHECK(an < 1e-12);
      CHECK(nu < 1e-9);
    }
    {
      nn::CatBlock cat(cfg, rng);
      Tensor a = random_tensor({3, 8}, rng), b = random_tensor({4, 8}, rng);
      const auto f = [&] {
        const auto [x, y] = cat(a, b);
        return ad::add(project(x, 1), project(y, 2));
      };
      const auto r = gradcheck(f, with(collect_all(cat), {a, b}));
      INFO("cat_block " << r.worst);
      CHECK(r.max_rel_error < 1e-4);
      const auto [an, nu] = max_abs_gradient(f, key_biases(cat));
      CHECK(an < 1e-12);
      CHECK(nu < 1e-9);
    }
    {
      nn::CatFuse fuse(cfg, rng);
      Tensor a = random_tensor({2, 8}, rng), b = random_tensor({3, 8}, rng);
      const auto r = gradcheck([&] { return project(fuse(a, b)); }, with(collect_all(fuse), {a, b}));
      INFO("cat_fuse " << r.worst);
      CHECK(r.max_rel_error < 1e-4);
    }
    {
      nn::BiLstm lstm(3, 4, rng);
      Tensor x = random_tensor({4, 3}, rng);
      const auto r = gradcheck([&] { return project(lstm(x)); }, with(collect_all(lstm), {x}));
      INFO("bilstm " << r.worst);
      CHECK(r.max_rel_error < 1e-4);
    }
    {
      nn::ConvBlock conv(nn::ConvBlockConfig{3, 4, 2, 2, 2}, 9, 5, rng);
      for (double& v : conv.bias.data()) v = 0.5;
      Tensor x = random_tensor({7, 9}, rng);
      const auto r = gradcheck([&] { return project(conv(x)); }, with(collect_all(conv), {x}));
      INFO("conv_block " << r.worst);
      CHECK(r.max_rel_error < 1e-4);
    }
    {
      nn::FcStack fc(10, {6, 4}, rng);
      Tensor x = random_tensor({1, 10}, rng);
      const auto r = gradcheck([&] { return project(fc(x)); }, with(collect_all(fc), {x}));
      INFO("fc_stack " << r.worst);
      CHECK(r.max_rel_error < 1e-4);
    }
    {
      nn::AmSoftmax am(nn::AmSoftmaxConfig{30.0, 0.35, 4, 6}, rng);
      Tensor e = random_tensor({5, 6}, rng);
      const std::vector<std::size_t> y{0, 1, 2, 3, 1};
      const auto r = gradcheck([&] { return am(e, y).loss; }, with(collect_all(am), {e}));
      INFO("am_softmax " << r.worst);
      CHECK(r.max_rel_error < 1e-4);
    }
  }
}
