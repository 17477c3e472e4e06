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
#include <functional>
#include <string>
#include <vector>

#include "emofuse/autodiff.hpp"
#include "emofuse/checkpoint.hpp"
#include "emofuse/error.hpp"
#include "emofuse/optim.hpp"
#include "emofuse/rng.hpp"
#include "support/gradcheck.hpp"

using namespace emofuse;
using ad::Tensor;
using testing::gradcheck;
using testing::project;
using testing::random_tensor;

namespace {

struct OpCase {
  const char* name;
  std::vector<ad::Shape> shapes;
  std::function<Tensor(const std::vector<Tensor>&)> op;
  double lo = -1.0;
  double hi = 1.0;
};

std::vector<OpCase> op_cases() {
  using V = std::vector<Tensor>;
  const std::vector<std::size_t> labels{2, 0, 3};
  return {
      {"add", {{3, 4}, {3, 4}}, [](const V& t) { return ad::add(t[0], t[1]); }},
      {"add broadcast", {{3, 4}, {4}}, [](const V& t) { return ad::add(t[0], t[1]); }},
      {"sub", {{3, 4}, {1, 4}}, [](const V& t) { return ad::sub(t[0], t[1]); }},
      {"mul", {{2, 3, 4}, {3, 4}}, [](const V& t) { return ad::mul(t[0], t[1]); }},
      {"mul scalar", {{3, 4}, {}}, [](const V& t) { return ad::mul(t[0], t[1]); }},
      {"scale", {{5}}, [](const V& t) { return ad::scale(ad::add_scalar(t[0], 0.5), -1.7); }},
      {"neg square", {{5}}, [](const V& t) { return ad::neg(ad::square(t[0])); }},
      {"exp", {{2, 3}}, [](const V& t) { return ad::exp(t[0]); }},
      {"log", {{2, 3}}, [](const V& t) { return ad::log(t[0]); }, 0.2, 2.0},
      {"tanh", {{2, 3}}, [](const V& t) { return ad::tanh(t[0]); }},
      {"sigmoid", {{2, 3}}, [](const V& t) { return ad::sigmoid(t[0]); }},
      {"relu", {{2, 3}}, [](const V& t) { return ad::relu(t[0]); }, 0.05, 1.0},
      {"gelu", {{2, 3}}, [](const V& t) { return ad::gelu(t[0]); }},
      {"matmul", {{3, 4}, {4, 2}}, [](const V& t) { return ad::matmul(t[0], t[1]); }},
      {"transpose", {{3, 4}}, [](const V& t) { return ad::transpose(t[0]); }},
      {"reshape", {{3, 4}}, [](const V& t) { return ad::reshape(t[0], {2, 6}); }},
      {"concat rows", {{2, 3}, {1, 3}}, [](const V& t) { return ad::concat(t, 0); }},
      {"concat cols", {{2, 3}, {2, 2}}, [](const V& t) { return ad::concat(t, 1); }},
      {"slice", {{4, 5}}, [](const V& t) { return ad::slice(t[0], 1, 1, 4); }},
      {"gather_rows", {{4, 3}}, [](const V& t) {
         const std::vector<std::size_t> idx{3, 0, 3};
         return ad::gather_rows(t[0], idx);
       }},
      {"repeat_rows", {{1, 3}}, [](const V& t) { return ad::repeat_rows(t[0], 4); }},
      {"where_rows", {{4, 3}, {3}}, [](const V& t) {
         return ad::where_rows(t[0], {true, false, false, true}, t[1]);
       }},
      {"sum", {{3, 4}}, [](const V& t) { return ad::sum(t[0]); }},
      {"sum dim", {{3, 4}}, [](const V& t) { return ad::sum(t[0], 0); }},
      {"mean", {{3, 4}}, [](const V& t) { return ad::mean(t[0]); }},
      {"mean dim", {{3, 4}}, [](const V& t) { return ad::mean(t[0], 1); }},
      {"variance", {{5, 3}}, [](const V& t) { return ad::variance(t[0], 0); }},
      {"weighted_sum", {{4}}, [](const V& t) {
         const std::vector<double> w{0.5, -1.0, 0.0, 2.0};
         return ad::weighted_sum(t[0], w);
       }},
      {"softmax", {{3, 4}}, [](const V& t) { return ad::softmax(t[0], 1); }},
      {"softmax dim0", {{3, 4}}, [](const V& t) { return ad::softmax(t[0], 0); }},
      {"log_softmax", {{3, 4}}, [](const V& t) { return ad::log_softmax(t[0], 1); }},
      {"layer_norm", {{3, 5}, {5}, {5}}, [](const V& t) { return ad::layer_norm(t[0], t[1], t[2]); }},
      {"l2_normalize", {{3, 4}}, [](const V& t) { return ad::l2_normalize(t[0]); }},
      {"pick", {{3, 4}}, [labels](const V& t) { return ad::pick(t[0], labels); }},
      {"cross_entropy", {{3, 4}}, [labels](const V& t) { return ad::cross_entropy(t[0], labels); }},
      {"conv2d", {{7, 9}, {2, 3, 4}, {2}}, [](const V& t) { return ad::conv2d(t[0], t[1], t[2], 2, 3); }},
  };
}

}  // namespace

TEST_CASE("every primitive passes the gradient check at 10 random points") {
  for (const auto& c : op_cases()) {
    for (std::uint64_t point = 0; point < 10; ++point) {
      Rng rng(1000 + point);
      std::vector<Tensor> inputs;
      for (const auto& s : c.shapes) inputs.push_back(random_tensor(s, rng, true, c.lo, c.hi));
      const auto res = gradcheck([&] { return project(c.op(inputs), point); }, inputs);
      INFO(c.name << " point " << point << " worst " << res.worst);
      CHECK(res.max_rel_error < 1e-4);
    }
  }
}

TEST_CASE("forward values") {
  const Tensor s = ad::softmax(Tensor::matrix(1, 3, {0.0, 0.0, 0.0}), 1);
  for (double v : s.values()) CHECK(v == doctest::Approx(1.0 / 3.0).epsilon(1e-15));
  // Large logits are stable because the row max is subtracted.
  const Tensor big = ad::softmax(Tensor::matrix(1, 2, {1000.0, 1000.0}), 1);
  CHECK(big.at(0) == 0.5);

  Rng rng(2);
  const Tensor a = random_tensor({3, 3}, rng, false);
  const Tensor eye = Tensor::matrix(3, 3, {1, 0, 0, 0, 1, 0, 0, 0, 1});
  CHECK(ad::matmul(eye, a).values() == a.values());

  const Tensor constant = Tensor::matrix(1, 4, {2.0, 2.0, 2.0, 2.0});
  CHECK(ad::variance(constant, 1).item() == 0.0);
  CHECK(ad::sum(constant, 1).shape() == ad::Shape{1, 1});
}

TEST_CASE("backward closed forms") {
  Tensor x = Tensor::scalar(3.0);
  x.set_requires_grad(true);
  {
    ad::Graph g;
    g.backward(ad::mul(x, x));
  }
  CHECK(x.grad()[0] == 6.0);

  Rng rng(5);
  Tensor a = random_tensor({2, 3}, rng);
  {
    ad::Graph g;
    g.backward(ad::sum(a));
  }
  for (double v : a.grad()) CHECK(v == 1.0);
}

TEST_CASE("errors") {
  Rng rng(1);
  const Tensor a = random_tensor({2, 3}, rng);
  const Tensor b = random_tensor({3, 2}, rng);
  CHECK_THROWS_AS(ad::add(a, b), ShapeError);
  CHECK_THROWS_AS(ad::matmul(a, a), ShapeError);
  try {
    ad::mul(a, b);
  } catch (const ShapeError& e) {
    const std::string msg = e.what();
    CHECK(msg.find("(2, 3)") != std::string::npos);
    CHECK(msg.find("(3, 2)") != std::string::npos);
  }
  {
    ad::Graph g;
    CHECK_THROWS_AS(g.backward(ad::add(a, a)), ContractError);
  }
  CHECK_THROWS_AS(ad::backward(ad::sum(a)), StateError);
  CHECK_THROWS_AS(ad::slice(a, 1, 2, 5), ShapeError);
}

TEST_CASE("graph records only with a live graph and resets to zero") {
  Rng rng(3);
  Tensor w = random_tensor({4, 4}, rng);
  const Tensor x = random_tensor({2, 4}, rng, false);
  CHECK(ad::Graph::current() == nullptr);
  ad::Graph g;
  const Tensor loss = ad::sum(ad::tanh(ad::matmul(x, w)));
  CHECK(g.size() == 3);
  g.backward(loss);
  g.reset();
  CHECK(g.size() == 0);
  // Constant-only expressions are not recorded.
  ad::sum(ad::tanh(x));
  CHECK(g.size() == 0);
}

TEST_CASE("forward and backward are bitwise deterministic") {
  auto run = [] {
    Rng rng(77);
    Tensor w = random_tensor({6, 5}, rng);
    const Tensor x = random_tensor({4, 6}, rng, false);
    ad::Graph g;
    const Tensor y = ad::softmax(ad::matmul(x, w), 1);
    g.backward(project(ad::layer_norm(y, Tensor::full({5}, 1.0), Tensor::zeros({5}))));
    std::vector<double> out = y.values();
    out.insert(out.end(), w.grad().begin(), w.grad().end());
    return out;
  };
  CHECK(run() == run());
}

TEST_CASE("dropout") {
  Rng rng(4);
  const Tensor a = Tensor::full({1000}, 1.0);
  Rng r0(9);
  CHECK(ad::dropout(a, 0.0, r0).values() == a.values());
  const Tensor d = ad::dropout(a, 0.25, rng);
  std::size_t zeros = 0;
  for (double v : d.values()) {
    if (v == 0.0) {
      ++zeros;
    } else {
      CHECK(v == doctest::Approx(1.0 / 0.75));
    }
  }
  CHECK(zeros > 180);
  CHECK(zeros < 320);
  CHECK_THROWS_AS(ad::dropout(a, 1.0, rng), ParameterError);
}

TEST_CASE("adam") {
  SUBCASE("zero gradient leaves parameters unchanged") {
    std::vector<double> p{1.0, -2.0};
    const std::vector<double> g{0.0, 0.0};
    AdamState st;
    adam_step(p, g, st, {});
    CHECK(p == std::vector<double>{1.0, -2.0});
  }
  SUBCASE("first step by hand") {
    std::vector<double> p{0.5};
    const std::vector<double> g{0.2};
    AdamState st;
    const AdamConfig cfg{0.01, 0.9, 0.999, 1e-8};
    adam_step(p, g, st, cfg);
    // m_hat = g, v_hat = g^2, update = lr * g / (|g| + eps).
    const double expected = 0.5 - 0.01 * 0.2 / (0.2 + 1e-8);
    CHECK(p[0] == doctest::Approx(expected).epsilon(1e-15));
    CHECK(st.step == 1);
  }
  SUBCASE("steps reduce a quadratic") {
    Tensor x = Tensor::full({2}, 3.0, true);
    Adam opt({x}, AdamConfig{0.1});
    auto loss = [&] { return ad::sum(ad::square(x)); };
    const double before = loss().item();
    for (int i = 0; i < 2; ++i) {
      ad::Graph g;
      opt.zero_grad();
      g.backward(loss());
      opt.step();
    }
    CHECK(loss().item() < before);
  }
  SUBCASE("non-finite gradients abort") {
    std::vector<double> p{1.0};
    const std::vector<double> g{std::nan("")};
    AdamState st;
    CHECK_THROWS_AS(adam_step(p, g, st, {}), NumericError);
  }
}

TEST_CASE("checkpoints") {
  Rng rng(6);
  ParameterSet ps;
  ps.add("blocks/a/weight", random_tensor({3, 2}, rng));
  ps.add("blocks/a/bias", random_tensor({2}, rng));
  CHECK_THROWS_AS(ps.add("blocks/a/bias", random_tensor({2}, rng)), ParameterError);
  const Checkpoint ck = ps.snapshot({{"model", "x"}, {"seed", 3}});
  const std::string bytes = encode_checkpoint(ck);
  CHECK(bytes.substr(0, 4) == "CKP1");
  const Checkpoint back = decode_checkpoint(bytes);
  REQUIRE(back.tensors.size() == 2);
  CHECK(back.tensors[0].name == "blocks/a/weight");
  CHECK(back.tensors[0].shape == ad::Shape{3, 2});
  CHECK(back.config.at("seed") == 3);

  ParameterSet other;
  Tensor w = Tensor::zeros({3, 2}, true);
  Tensor bias = Tensor::zeros({2}, true);
  other.add("blocks/a/weight", w);
  other.add("blocks/a/bias", bias);
  other.load(back);
  for (std::size_t i = 0; i < w.size(); ++i) {
    CHECK(w.at(i) == static_cast<double>(static_cast<float>(ps.items()[0].second.at(i))));
  }

  ParameterSet wrong;
  wrong.add("blocks/a/weight", Tensor::zeros({2, 3}, true));
  wrong.add("blocks/b/bias", Tensor::zeros({2}, true));
  try {
    wrong.load(back);
    FAIL("expected ConfigError");
  } catch (const ConfigError& e) {
    const std::string msg = e.what();
    CHECK(msg.find("blocks/a/weight") != std::string::npos);
    CHECK(msg.find("blocks/b/bias") != std::string::npos);
  }
  CHECK_THROWS_AS(decode_checkpoint("CKP2"), FormatError);
  CHECK_THROWS_AS(load_checkpoint(std::filesystem::temp_directory_path() / "emofuse_missing.ckp"),
                  StateError);
}
