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

#include <algorithm>
#include <cmath>
#include <map>
#include <set>
#include <sstream>
#include <string>
#include <vector>

#include "emofuse/error.hpp"
#include "emofuse/rng.hpp"
#include "emofuse/train.hpp"

using namespace emofuse;

namespace {

FeatureMatrix random_matrix(std::size_t rows, std::size_t cols, Rng& rng) {
  FeatureMatrix m(rows, cols);
  for (double& v : m.data) v = rng.normal();
  return m;
}

// Random features with a class-dependent offset so the task is learnable.
std::vector<Sample> fake_samples(const HumpCatConfig& cfg, std::size_t n_speakers,
                                 std::size_t per_class, std::uint64_t seed) {
  Rng rng(seed);
  std::vector<Sample> out;
  for (std::size_t s = 0; s < n_speakers; ++s) {
    for (std::size_t c = 0; c < 4; ++c) {
      for (std::size_t i = 0; i < per_class; ++i) {
        Sample smp;
        smp.label = c;
        smp.speaker_id = "spk" + std::to_string(s);
        smp.utterance_id = smp.speaker_id + "/" + std::to_string(c) + "_" + std::to_string(i);
        smp.features.prosody = random_matrix(1, cfg.prosody_dim, rng);
        for (std::size_t j = 0; j < 8; ++j) smp.features.prosody.data[c * 8 + j] += 3.0;
        smp.features.mfcc = random_matrix(24, cfg.mfcc_dim, rng);
        for (std::size_t l = 0; l < cfg.ssrl_layers.size(); ++l) {
          smp.features.ssrl.push_back(random_matrix(24, cfg.ssrl_dim, rng));
        }
        out.push_back(std::move(smp));
      }
    }
  }
  return out;
}

HumpCatConfig small_model() {
  HumpCatConfig c = HumpCatConfig::tiny();
  c.conv = nn::ConvBlockConfig{4, 6, 2, 3, 2};
  c.ssrl_dim = 12;
  c.prosody_fc = {16, 8};
  return c;
}

std::map<std::string, std::vector<double>> snapshot(const ParameterSet& ps) {
  std::map<std::string, std::vector<double>> out;
  for (const auto& [name, t] : ps.items()) out[name] = t.values();
  return out;
}

// Independent WA/UA straight from the label lists.
std::pair<double, double> brute_force(const std::vector<std::size_t>& truth,
                                      const std::vector<std::size_t>& pred, std::size_t n) {
  std::size_t hit = 0;
  std::vector<double> per_class;
  for (std::size_t c = 0; c < n; ++c) {
    std::size_t total = 0, ok = 0;
    for (std::size_t i = 0; i < truth.size(); ++i) {
      if (truth[i] != c) continue;
      ++total;
      if (pred[i] == c) ++ok;
    }
    if (total) per_class.push_back(static_cast<double>(ok) / static_cast<double>(total));
  }
  for (std::size_t i = 0; i < truth.size(); ++i) hit += truth[i] == pred[i];
  double ua = 0.0;
  for (double r : per_class) ua += r;
  return {static_cast<double>(hit) / static_cast<double>(truth.size()), ua / static_cast<double>(per_class.size())};
}

}  // namespace

TEST_CASE("metrics") {
  SUBCASE("hand-counted two-class example") {
    std::vector<std::size_t> truth, pred;
    for (int i = 0; i < 10; ++i) {
      truth.push_back(0);
      pred.push_back(i < 9 ? 0 : 1);
    }
    for (int i = 0; i < 40; ++i) {
      truth.push_back(1);
      pred.push_back(i < 20 ? 1 : 0);
    }
    const Metrics m = compute_metrics(truth, pred, 2);
    CHECK(m.wa == 29.0 / 50.0);
    CHECK(m.ua == doctest::Approx(0.70).epsilon(1e-15));
    CHECK(m.confusion.at(0, 0) == 9);
    CHECK(m.confusion.at(1, 0) == 20);
  }
  SUBCASE("perfect and all-one-class predictors") {
    const std::vector<std::size_t> truth{0, 1, 2, 3, 0, 1, 2, 3};
    const Metrics p = compute_metrics(truth, truth, 4);
    CHECK(p.wa == 1.0);
    CHECK(p.ua == 1.0);
    const std::vector<std::size_t> ones(8, 2);
    const Metrics o = compute_metrics(truth, ones, 4);
    CHECK(o.wa == 0.25);
    CHECK(o.ua == 0.25);
  }
  SUBCASE("absent classes leave UA") {
    const std::vector<std::size_t> truth{0, 0, 1, 1}, pred{0, 1, 1, 1};
    const Metrics m = compute_metrics(truth, pred, 4);
    CHECK(m.absent_classes == std::vector<std::size_t>{2, 3});
    CHECK(m.ua == doctest::Approx(0.75).epsilon(1e-15));
  }
  SUBCASE("brute-force oracle on random label lists") {
    Rng rng(1);
    for (int trial = 0; trial < 200; ++trial) {
      const std::size_t n = 1 + rng.below(60);
      std::vector<std::size_t> truth(n), pred(n);
      for (auto& t : truth) t = rng.below(4);
      for (auto& p : pred) p = rng.below(4);
      const Metrics m = compute_metrics(truth, pred, 4);
      const auto [wa, ua] = brute_force(truth, pred, 4);
      CHECK(m.wa == doctest::Approx(wa).epsilon(1e-15));
      CHECK(m.ua == doctest::Approx(ua).epsilon(1e-15));
      for (std::size_t c = 0; c < 4; ++c) {
        CHECK(m.confusion.row_sum(c) == static_cast<std::size_t>(std::count(truth.begin(), truth.end(), c)));
      }
    }
  }
  SUBCASE("errors") {
    CHECK_THROWS_AS(compute_metrics(std::vector<std::size_t>{}, std::vector<std::size_t>{}, 4), ParameterError);
    CHECK_THROWS_AS(compute_metrics(std::vector<std::size_t>{0}, std::vector<std::size_t>{0, 1}, 4), ShapeError);
  }
}

TEST_CASE("evaluate aggregates segments per utterance") {
  const HumpCatConfig cfg = small_model();
  HumpCat model(cfg);
  std::vector<Sample> set = fake_samples(cfg, 2, 2, 3);
  // Split every utterance into two segments.
  std::vector<Sample> segmented;
  Rng rng(4);
  for (const Sample& s : set) {
    segmented.push_back(s);
    Sample other = s;
    other.features.mfcc = random_matrix(24, cfg.mfcc_dim, rng);
    segmented.push_back(other);
  }
  const Evaluation ev = evaluate(model, segmented);
  REQUIRE(ev.truth.size() == set.size());
  for (std::size_t u = 0; u < set.size(); ++u) {
    const auto a = model.predict(segmented[2 * u].features).probabilities;
    const auto b = model.predict(segmented[2 * u + 1].features).probabilities;
    std::vector<double> mean(4);
    for (std::size_t c = 0; c < 4; ++c) mean[c] = a[c] + b[c];
    CHECK(ev.predicted[u] == static_cast<std::size_t>(std::max_element(mean.begin(), mean.end()) - mean.begin()));
    CHECK(ev.utterance_ids[u] == set[u].utterance_id);
  }
  const auto [wa, ua] = brute_force(ev.truth, ev.predicted, 4);
  CHECK(ev.metrics.wa == doctest::Approx(wa).epsilon(1e-15));
  CHECK(ev.metrics.ua == doctest::Approx(ua).epsilon(1e-15));
  segmented[1].label = (segmented[1].label + 1) % 4;
  CHECK_THROWS_AS(evaluate(model, segmented), LabelError);
  CHECK_THROWS_AS(evaluate(model, {}), ParameterError);
}

TEST_CASE("speaker-disjoint folds") {
  std::vector<std::string> speakers;
  for (int i = 0; i < 10; ++i) speakers.push_back("s" + std::to_string(i));
  const SplitPlan plan = kfold_split(speakers, 10, 42);
  REQUIRE(plan.folds.size() == 10);
  std::multiset<std::string> tested;
  for (const Fold& f : plan.folds) {
    CHECK(f.train_speakers.size() == 8);
    CHECK(f.val_speakers.size() == 1);
    CHECK(f.test_speakers.size() == 1);
    std::set<std::string> all;
    for (const auto* part : {&f.train_speakers, &f.val_speakers, &f.test_speakers}) {
      for (const auto& s : *part) CHECK(all.insert(s).second);
    }
    CHECK(all == std::set<std::string>(speakers.begin(), speakers.end()));
    tested.insert(f.test_speakers.begin(), f.test_speakers.end());
  }
  CHECK(tested == std::multiset<std::string>(speakers.begin(), speakers.end()));

  SUBCASE("uneven group sizes stay disjoint") {
    std::vector<std::string> more = speakers;
    for (int i = 10; i < 23; ++i) more.push_back("s" + std::to_string(i));
    for (const Fold& f : kfold_split(more, 5, 1).folds) {
      std::set<std::string> all;
      for (const auto* part : {&f.train_speakers, &f.val_speakers, &f.test_speakers}) {
        for (const auto& s : *part) CHECK(all.insert(s).second);
      }
      CHECK(all.size() == 23);
    }
  }
  SUBCASE("seeded and order independent") {
    std::vector<std::string> shuffled = speakers;
    std::reverse(shuffled.begin(), shuffled.end());
    CHECK(kfold_split(shuffled, 10, 42).folds[3].test_speakers == plan.folds[3].test_speakers);
    bool differs = false;
    const SplitPlan other = kfold_split(speakers, 10, 43);
    for (std::size_t f = 0; f < 10; ++f) differs |= other.folds[f].test_speakers != plan.folds[f].test_speakers;
    CHECK(differs);
  }
  SUBCASE("errors") {
    CHECK_THROWS_AS(kfold_split(speakers, 11, 0), ParameterError);
    CHECK_THROWS_AS(kfold_split(speakers, 2, 0), ParameterError);
  }
  SUBCASE("no utterance of a test speaker leaks into training") {
    const std::vector<Sample> samples = fake_samples(small_model(), 5, 1, 9);
    for (const Fold& f : kfold_split(samples, 5, 3).folds) {
      const auto train = select_speakers(samples, f.train_speakers);
      const std::set<std::string> test(f.test_speakers.begin(), f.test_speakers.end());
      for (const Sample& s : train) CHECK(test.count(s.speaker_id) == 0);
      CHECK(select_speakers(samples, f.test_speakers).size() == 4);
    }
  }
}

TEST_CASE("subset policies") {
  const HumpCatConfig cfg = small_model();
  SUBCASE("parsing") {
    CHECK(SubsetPolicy::parse("all").kind == SubsetPolicy::Kind::kAll);
    const auto third = SubsetPolicy::parse("speakers:1/3");
    CHECK(third.kind == SubsetPolicy::Kind::kSpeakers);
    CHECK(third.fraction == doctest::Approx(1.0 / 3.0));
    CHECK(SubsetPolicy::parse("utterances:0.1").kind == SubsetPolicy::Kind::kUtterances);
    CHECK(SubsetPolicy::parse(SubsetPolicy::parse("speakers:0.2").to_string()).fraction == 0.2);
    for (const char* bad : {"speakers", "speakers:0", "speakers:1.5", "frames:0.2", "speakers:1/0", "speakers:x"}) {
      CHECK_THROWS_AS(SubsetPolicy::parse(bad), ParameterError);
    }
  }
  SUBCASE("0.2 of 10 speakers is 2 speakers") {
    const auto samples = fake_samples(cfg, 10, 1, 5);
    const auto sel = select_subset(samples, SubsetPolicy::parse("speakers:0.2"), 7);
    CHECK(sel.speakers.size() == 2);
    CHECK(sel.samples.size() == 8);
    for (const Sample& s : sel.samples) {
      CHECK(std::find(sel.speakers.begin(), sel.speakers.end(), s.speaker_id) != sel.speakers.end());
    }
    CHECK(select_subset(samples, SubsetPolicy::parse("speakers:0.2"), 7).speakers == sel.speakers);
  }
  SUBCASE("1/3 of 6 speakers is 2 speakers") {
    const auto sel = select_subset(fake_samples(cfg, 6, 1, 5), SubsetPolicy::parse("speakers:1/3"), 1);
    CHECK(sel.speakers.size() == 2);
  }
  SUBCASE("utterance fraction keeps segments together") {
    auto samples = fake_samples(cfg, 5, 2, 5);  // 40 utterances
    const std::size_t n = samples.size();
    for (std::size_t i = 0; i < n; ++i) samples.push_back(samples[i]);  // second segment each
    const auto sel = select_subset(samples, SubsetPolicy::parse("utterances:0.1"), 3);
    CHECK(sel.utterances.size() == 4);
    CHECK(sel.samples.size() == 8);
  }
  SUBCASE("tiny fractions still select one") {
    const auto sel = select_subset(fake_samples(cfg, 3, 1, 5), SubsetPolicy::parse("speakers:0.01"), 3);
    CHECK(sel.speakers.size() == 1);
  }
}

TEST_CASE("training") {
  const HumpCatConfig cfg = small_model();
  const auto samples = fake_samples(cfg, 2, 2, 11);
  TrainConfig tc;
  tc.batch_size = 4;
  tc.max_epochs = 2;
  tc.seed = 5;

  SUBCASE("lr = 0 leaves every parameter unchanged") {
    HumpCat model(cfg);
    const auto before = snapshot(model.parameters());
    TrainConfig zero = tc;
    zero.lr = 0.0;
    const auto res = train(model, samples, {}, zero);
    CHECK(res.history.epochs.size() == 2);
    CHECK(snapshot(model.parameters()) == before);
  }
  SUBCASE("identical seeds give identical histories and weights") {
    HumpCat a(cfg), b(cfg);
    const auto ra = train(a, samples, samples, tc);
    const auto rb = train(b, samples, samples, tc);
    REQUIRE(ra.history.epochs.size() == rb.history.epochs.size());
    for (std::size_t e = 0; e < ra.history.epochs.size(); ++e) {
      CHECK(ra.history.epochs[e].train_loss == rb.history.epochs[e].train_loss);
      CHECK(ra.history.epochs[e].val_ua == rb.history.epochs[e].val_ua);
    }
    CHECK(snapshot(a.parameters()) == snapshot(b.parameters()));
  }
  SUBCASE("the best epoch is restored") {
    HumpCat model(cfg);
    TrainConfig longer = tc;
    longer.max_epochs = 6;
    const auto res = train(model, samples, samples, longer);
    double best = -1.0;
    for (const auto& e : res.history.epochs) best = std::max(best, e.val_ua);
    CHECK(res.history.best_val_ua == best);
    CHECK(evaluate(model, samples).metrics.ua == best);
  }
  SUBCASE("early stopping") {
    HumpCat model(cfg);
    TrainConfig stop = tc;
    stop.lr = 0.0;
    stop.max_epochs = 20;
    stop.early_stop_patience = 3;
    const auto res = train(model, samples, samples, stop);
    CHECK(res.history.stopped_early);
    CHECK(res.history.epochs.size() == 4);
    CHECK(res.history.best_epoch == 1);
  }
  SUBCASE("non-finite input aborts") {
    HumpCat model(cfg);
    auto bad = samples;
    bad[1].features.prosody.data[0] = std::nan("");
    TrainOptions keep;
    keep.fit_normalization = false;
    CHECK_THROWS_AS(train(model, bad, {}, tc, keep), NumericError);
  }
  SUBCASE("config validation and json") {
    TrainConfig c;
    c.batch_size = 0;
    CHECK_THROWS_AS(train(*std::make_unique<HumpCat>(cfg), samples, {}, c), ParameterError);
    CHECK(TrainConfig::from_json(tc.to_json()).to_json() == tc.to_json());
    CHECK_THROWS_AS(train(*std::make_unique<HumpCat>(cfg), {}, {}, tc), ParameterError);
  }
}

TEST_CASE("fine-tuning") {
  const HumpCatConfig cfg = small_model();
  const auto source_data = fake_samples(cfg, 2, 2, 21);
  const auto target = fake_samples(cfg, 5, 1, 22);
  TrainConfig tc;
  tc.batch_size = 4;
  tc.max_epochs = 2;
  HumpCat source(cfg);
  train(source, source_data, {}, tc);
  const Checkpoint ckpt = source.save();

  SUBCASE("frozen branches stay bitwise identical") {
    HumpCat model(cfg);
    FineTuneConfig fc;
    fc.train = tc;
    fc.subset = SubsetPolicy::parse("speakers:0.4");
    fc.freeze_branches = true;
    const auto before = snapshot(source.parameters());
    const auto res = fine_tune(model, ckpt, target, {}, fc);
    CHECK(res.subset.speakers.size() == 2);
    std::size_t frozen = 0, moved = 0;
    for (const auto& [name, values] : snapshot(model.parameters())) {
      const bool is_branch = std::any_of(HumpCat::branch_prefixes().begin(), HumpCat::branch_prefixes().end(),
                                         [&](const std::string& p) { return name.starts_with(p); });
      if (is_branch) {
        CHECK(values == before.at(name));
        ++frozen;
      } else if (values != before.at(name)) {
        ++moved;
      }
    }
    CHECK(frozen > 0);
    CHECK(moved > 0);
  }
  SUBCASE("source normalization is kept") {
    HumpCat model(cfg);
    FineTuneConfig fc;
    fc.train = tc;
    fc.train.lr = 0.0;
    fine_tune(model, ckpt, target, {}, fc);
    CHECK(model.predict(target[0].features).probabilities == source.predict(target[0].features).probabilities);
  }
  SUBCASE("incompatible checkpoint lists mismatched tensors") {
    HumpCatConfig other = cfg;
    other.cat.model_dim = 8;
    HumpCat model(other);
    FineTuneConfig fc;
    fc.train = tc;
    try {
      fine_tune(model, ckpt, target, {}, fc);
      FAIL("expected ConfigError");
    } catch (const ConfigError& e) {
      CHECK(std::string(e.what()).find("blocks/prosody_proj/weight") != std::string::npos);
    }
  }
}

TEST_CASE("reports") {
  ResultsReport r;
  r.command = "kfold";
  r.config_hash = "0123456789abcdef";
  r.seed = 3;
  Rng rng(8);
  for (std::size_t f = 0; f < 4; ++f) {
    FoldSummary s;
    s.fold = f;
    std::vector<std::size_t> truth(20), pred(20);
    for (auto& t : truth) t = rng.below(4);
    for (auto& p : pred) p = rng.below(4);
    const Metrics m = compute_metrics(truth, pred, 4);
    s.wa = m.wa;
    s.ua = m.ua;
    s.n_test = 20;
    s.test_speakers = {"spk" + std::to_string(f)};
    s.confusion = m.confusion;
    r.folds.push_back(s);
  }
  const nlohmann::json j = r.to_json();
  CHECK(ResultsReport::from_json(j).to_json() == j);
  double ua = 0.0;
  for (const auto& f : r.folds) ua += f.ua;
  CHECK(std::abs(r.ua_mean() - ua / 4.0) < 1e-12);
  CHECK(j.at("aggregate").at("ua_mean").get<double>() == r.ua_mean());
  CHECK_THROWS_AS(ResultsReport::from_json({{"schema_version", 99}}), FormatError);

  std::istringstream csv(confusion_csv(r.folds[0].confusion));
  std::string line;
  std::getline(csv, line);
  CHECK(line == "true\\pred,angry,happy,neutral,sad");
  std::size_t row = 0, total = 0;
  while (std::getline(csv, line)) {
    std::istringstream cells(line);
    std::string cell;
    std::getline(cells, cell, ',');
    std::size_t sum = 0;
    while (std::getline(cells, cell, ',')) sum += std::stoul(cell);
    CHECK(sum == r.folds[0].confusion.row_sum(row++));
    total += sum;
  }
  CHECK(total == 20);

  TrainHistory h;
  h.epochs.push_back({1, 1.5, 0.5, 0.25});
  CHECK(history_csv(h) == "epoch,train_loss,val_UA\n1,1.5,0.25\n");
  CHECK(confusion_heatmap_csv(r.folds[0].confusion).rfind("true,predicted,count,row_fraction\n", 0) == 0);
}

TEST_CASE("k-fold runner is deterministic") {
  const HumpCatConfig cfg = small_model();
  const auto samples = fake_samples(cfg, 3, 1, 31);
  KfoldOptions opt;
  opt.model = cfg;
  opt.train.max_epochs = 1;
  opt.train.batch_size = 4;
  opt.n_folds = 3;
  opt.seed = 4;
  opt.config_hash = "abc";
  const auto a = run_kfold(samples, opt);
  const auto b = run_kfold(samples, opt);
  CHECK(a.report.folds.size() == 3);
  CHECK(a.report.to_json().dump() == b.report.to_json().dump());
}

TEST_CASE("samples from the synthetic corpus") {
  const auto corpus = synth_corpus(2, 1, 3);
  const auto samples = samples_from_corpus(corpus);
  REQUIRE(samples.size() == 8);
  for (std::size_t i = 0; i < 8; ++i) {
    CHECK(samples[i].label == static_cast<std::size_t>(corpus[i].record.label));
    CHECK(samples[i].features.mfcc.rows == 349);
    CHECK(samples[i].features.mfcc.cols == 39);
    CHECK(samples[i].features.prosody.cols == 103);
    CHECK(samples[i].features.ssrl.empty());
  }
}
