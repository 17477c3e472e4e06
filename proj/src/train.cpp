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

#include "emofuse/train.hpp"

#include <algorithm>
#include <cmath>
#include <iomanip>
#include <map>
#include <numeric>
#include <set>
#include <sstream>

#include "byte_io.hpp"
#include "emofuse/error.hpp"
#include "emofuse/log.hpp"
#include "emofuse/mfcc.hpp"
#include "emofuse/optim.hpp"
#include "emofuse/prosody.hpp"
#include "emofuse/rng.hpp"

namespace emofuse {

// ---- features -------------------------------------------------------------

ModelFeatures extract_features(const AudioSegment& seg, const SsrlEncoder* encoder) {
  ModelFeatures f;
  f.mfcc = extract_mfcc39(seg);
  f.prosody = extract_prosody(seg).to_matrix();
  if (encoder) {
    f.ssrl = encoder->config().conv_frontend ? encoder->selected_hiddens(frame_waveform(seg.samples))
                                             : encoder->selected_hiddens(f.mfcc);
  }
  return f;
}

std::vector<Sample> samples_from_audio(const AudioSegment& audio, const UtteranceRecord& record,
                                       const SsrlEncoder* encoder) {
  const AudioSegment at16 = audio.sample_rate == kTargetRate ? audio : resample_16k(audio);
  std::vector<Sample> out;
  for (const AudioSegment& seg : clip_pad_7s(at16)) {
    Sample s;
    s.features = extract_features(seg, encoder);
    s.label = static_cast<std::size_t>(record.label);
    s.speaker_id = record.speaker_id;
    s.utterance_id = record.path.string();
    out.push_back(std::move(s));
  }
  return out;
}

std::vector<Sample> samples_from_corpus(const std::vector<SynthUtterance>& corpus,
                                        const SsrlEncoder* encoder) {
  std::vector<Sample> out;
  for (const SynthUtterance& u : corpus) {
    auto s = samples_from_audio(u.audio, u.record, encoder);
    std::move(s.begin(), s.end(), std::back_inserter(out));
  }
  return out;
}

// ---- config ---------------------------------------------------------------

void TrainConfig::validate() const {
  if (!(lr >= 0.0)) throw ParameterError("TrainConfig: lr must be non-negative");
  if (batch_size == 0 || max_epochs == 0 || early_stop_patience == 0) {
    throw ParameterError("TrainConfig: batch_size, max_epochs and patience must be positive");
  }
}

nlohmann::json TrainConfig::to_json() const {
  return {{"lr", lr},
          {"batch_size", batch_size},
          {"max_epochs", max_epochs},
          {"seed", seed},
          {"early_stop_patience", early_stop_patience}};
}

TrainConfig TrainConfig::from_json(const nlohmann::json& j) {
  TrainConfig c;
  c.lr = j.value("lr", c.lr);
  c.batch_size = j.value("batch_size", c.batch_size);
  c.max_epochs = j.value("max_epochs", c.max_epochs);
  c.seed = j.value("seed", c.seed);
  c.early_stop_patience = j.value("early_stop_patience", c.early_stop_patience);
  c.validate();
  return c;
}

// ---- training -------------------------------------------------------------

TrainResult train(HumpCat& model, const std::vector<Sample>& train_set,
                  const std::vector<Sample>& val_set, const TrainConfig& cfg,
                  const TrainOptions& options) {
  cfg.validate();
  if (train_set.empty()) throw ParameterError("train: empty training set");
  if (options.fit_normalization) {
    std::vector<const ModelFeatures*> feats;
    for (const Sample& s : train_set) feats.push_back(&s.features);
    model.fit_normalization(feats);
  }
  std::vector<HumpCat::Inputs> inputs;
  inputs.reserve(train_set.size());
  for (const Sample& s : train_set) {
    if (s.label >= model.config().n_classes) throw LabelError("train: label out of range");
    inputs.push_back(model.prepare(s.features));
  }

  const ParameterSet trainable = model.parameters().filter([&](std::string_view name) {
    return std::none_of(options.frozen_prefixes.begin(), options.frozen_prefixes.end(),
                        [&](const std::string& p) { return name.starts_with(p); });
  });
  Adam adam(trainable.tensors(), AdamConfig{cfg.lr});
  Rng rng(cfg.seed);
  const nn::RunMode mode{true, &rng};
  const std::vector<Sample>& select_on = val_set.empty() ? train_set : val_set;

  TrainResult result;
  std::vector<std::size_t> order(train_set.size());
  std::iota(order.begin(), order.end(), 0);
  std::size_t since_best = 0;
  for (std::size_t epoch = 1; epoch <= cfg.max_epochs; ++epoch) {
    rng.shuffle(order.begin(), order.end());
    double loss_sum = 0.0;
    std::size_t correct = 0;
    std::size_t batch_index = 0;
    for (std::size_t start = 0; start < order.size(); start += cfg.batch_size, ++batch_index) {
      const std::size_t stop = std::min(order.size(), start + cfg.batch_size);
      ad::Graph graph;
      adam.zero_grad();
      std::vector<ad::Tensor> rows;
      std::vector<std::size_t> labels;
      for (std::size_t b = start; b < stop; ++b) {
        rows.push_back(model.forward(inputs[order[b]], mode).embedding);
        labels.push_back(train_set[order[b]].label);
      }
      const auto out = model.loss(ad::concat(rows, 0), labels);
      const double loss = out.loss.item();
      if (!std::isfinite(loss)) {
        throw NumericError("train: non-finite loss at epoch " + std::to_string(epoch) + ", batch " +
                           std::to_string(batch_index));
      }
      graph.backward(out.loss);
      adam.step();
      loss_sum += loss * static_cast<double>(stop - start);
      const std::size_t c = model.config().n_classes;
      const auto& lg = out.logits.values();
      for (std::size_t r = 0; r < labels.size(); ++r) {
        const auto row = lg.begin() + static_cast<std::ptrdiff_t>(r * c);
        // Add the margin back so the prediction ignores it.
        std::vector<double> z(row, row + static_cast<std::ptrdiff_t>(c));
        z[labels[r]] += model.config().am_scale * model.config().am_margin;
        if (static_cast<std::size_t>(std::max_element(z.begin(), z.end()) - z.begin()) == labels[r])
          ++correct;
      }
    }
    EpochRecord rec;
    rec.epoch = epoch;
    rec.train_loss = loss_sum / static_cast<double>(order.size());
    rec.train_accuracy = static_cast<double>(correct) / static_cast<double>(order.size());
    rec.val_ua = evaluate(model, select_on).metrics.ua;
    result.history.epochs.push_back(rec);
    log_info("epoch " + std::to_string(epoch) + " loss " + std::to_string(rec.train_loss) +
             " val UA " + std::to_string(rec.val_ua));
    if (rec.val_ua > result.history.best_val_ua) {
      result.history.best_val_ua = rec.val_ua;
      result.history.best_epoch = epoch;
      result.best = model.save();
      since_best = 0;
    } else if (++since_best >= cfg.early_stop_patience) {
      result.history.stopped_early = true;
      break;
    }
  }
  model.state().load(result.best);
  return result;
}

// ---- metrics --------------------------------------------------------------

void ConfusionMatrix::add(std::size_t truth, std::size_t predicted) {
  if (truth >= n_ || predicted >= n_) throw LabelError("ConfusionMatrix: class index out of range");
  ++counts_[truth * n_ + predicted];
}

std::size_t ConfusionMatrix::row_sum(std::size_t truth) const {
  std::size_t s = 0;
  for (std::size_t p = 0; p < n_; ++p) s += at(truth, p);
  return s;
}

std::size_t ConfusionMatrix::total() const {
  return std::accumulate(counts_.begin(), counts_.end(), std::size_t{0});
}

std::size_t ConfusionMatrix::correct() const {
  std::size_t s = 0;
  for (std::size_t c = 0; c < n_; ++c) s += at(c, c);
  return s;
}

nlohmann::json ConfusionMatrix::to_json() const {
  nlohmann::json rows = nlohmann::json::array();
  for (std::size_t t = 0; t < n_; ++t) {
    nlohmann::json row = nlohmann::json::array();
    for (std::size_t p = 0; p < n_; ++p) row.push_back(at(t, p));
    rows.push_back(std::move(row));
  }
  return rows;
}

ConfusionMatrix ConfusionMatrix::from_json(const nlohmann::json& j) {
  ConfusionMatrix cm(j.size());
  for (std::size_t t = 0; t < j.size(); ++t) {
    if (j[t].size() != j.size()) throw FormatError("confusion matrix is not square");
    for (std::size_t p = 0; p < j.size(); ++p) cm.counts_[t * cm.n_ + p] = j[t][p].get<std::size_t>();
  }
  return cm;
}

Metrics compute_metrics(std::span<const std::size_t> truth, std::span<const std::size_t> predicted,
                        std::size_t n_classes) {
  if (truth.size() != predicted.size()) throw ShapeError("compute_metrics: length mismatch");
  if (truth.empty()) throw ParameterError("compute_metrics: empty test set");
  Metrics m;
  m.confusion = ConfusionMatrix(n_classes);
  for (std::size_t i = 0; i < truth.size(); ++i) m.confusion.add(truth[i], predicted[i]);
  m.wa = static_cast<double>(m.confusion.correct()) / static_cast<double>(truth.size());
  double recall_sum = 0.0;
  std::size_t present = 0;
  for (std::size_t c = 0; c < n_classes; ++c) {
    const std::size_t n = m.confusion.row_sum(c);
    if (n == 0) {
      m.absent_classes.push_back(c);
      continue;
    }
    recall_sum += static_cast<double>(m.confusion.at(c, c)) / static_cast<double>(n);
    ++present;
  }
  if (!m.absent_classes.empty()) {
    log_warning("compute_metrics: " + std::to_string(m.absent_classes.size()) +
                " class(es) absent from the test set, excluded from UA");
  }
  m.ua = recall_sum / static_cast<double>(present);
  return m;
}

Evaluation evaluate(const HumpCat& model, const std::vector<Sample>& test_set) {
  if (test_set.empty()) throw ParameterError("evaluate: empty test set");
  const std::size_t c = model.config().n_classes;
  std::vector<std::string> ids;
  std::map<std::string, std::size_t> index;
  std::vector<std::vector<double>> prob_sum;
  std::vector<std::size_t> counts, labels;
  for (const Sample& s : test_set) {
    const Prediction p = model.predict(s.features);
    auto [it, inserted] = index.emplace(s.utterance_id, ids.size());
    if (inserted) {
      ids.push_back(s.utterance_id);
      prob_sum.emplace_back(c, 0.0);
      counts.push_back(0);
      labels.push_back(s.label);
    } else if (labels[it->second] != s.label) {
      throw LabelError("evaluate: segments of " + s.utterance_id + " disagree on the label");
    }
    for (std::size_t k = 0; k < c; ++k) prob_sum[it->second][k] += p.probabilities[k];
    ++counts[it->second];
  }
  Evaluation ev;
  ev.utterance_ids = ids;
  ev.truth = labels;
  for (const auto& ps : prob_sum) {
    ev.predicted.push_back(static_cast<std::size_t>(std::max_element(ps.begin(), ps.end()) - ps.begin()));
  }
  ev.metrics = compute_metrics(ev.truth, ev.predicted, c);
  return ev;
}

// ---- splits ---------------------------------------------------------------

SplitPlan kfold_split(const std::vector<std::string>& speaker_ids, std::size_t n_folds,
                      std::uint64_t seed) {
  if (n_folds < 3) throw ParameterError("kfold_split: need at least 3 folds");
  std::vector<std::string> speakers;
  std::set<std::string> seen;
  for (const auto& s : speaker_ids) {
    if (seen.insert(s).second) speakers.push_back(s);
  }
  std::sort(speakers.begin(), speakers.end());
  if (speakers.size() < n_folds) {
    throw ParameterError("kfold_split: " + std::to_string(speakers.size()) + " speakers for " +
                         std::to_string(n_folds) + " folds");
  }
  Rng rng(seed);
  rng.shuffle(speakers.begin(), speakers.end());
  std::vector<std::vector<std::string>> groups(n_folds);
  for (std::size_t i = 0; i < speakers.size(); ++i) groups[i % n_folds].push_back(speakers[i]);
  SplitPlan plan;
  plan.seed = seed;
  for (std::size_t f = 0; f < n_folds; ++f) {
    Fold fold;
    const std::size_t val = (f + 1) % n_folds;
    for (std::size_t g = 0; g < n_folds; ++g) {
      auto& dst = g == f ? fold.test_speakers : g == val ? fold.val_speakers : fold.train_speakers;
      dst.insert(dst.end(), groups[g].begin(), groups[g].end());
    }
    plan.folds.push_back(std::move(fold));
  }
  return plan;
}

SplitPlan kfold_split(const std::vector<Sample>& samples, std::size_t n_folds, std::uint64_t seed) {
  std::vector<std::string> ids;
  for (const Sample& s : samples) ids.push_back(s.speaker_id);
  return kfold_split(ids, n_folds, seed);
}

std::vector<Sample> select_speakers(const std::vector<Sample>& samples,
                                    const std::vector<std::string>& speakers) {
  const std::set<std::string> keep(speakers.begin(), speakers.end());
  std::vector<Sample> out;
  for (const Sample& s : samples) {
    if (keep.count(s.speaker_id)) out.push_back(s);
  }
  return out;
}

// ---- subsets --------------------------------------------------------------

SubsetPolicy SubsetPolicy::parse(std::string_view text) {
  if (text == "all") return {};
  const auto colon = text.find(':');
  if (colon == std::string_view::npos) {
    throw ParameterError("subset policy '" + std::string(text) + "': expected kind:fraction");
  }
  const std::string kind(text.substr(0, colon));
  const std::string frac(text.substr(colon + 1));
  SubsetPolicy p;
  if (kind == "speakers") {
    p.kind = Kind::kSpeakers;
  } else if (kind == "utterances") {
    p.kind = Kind::kUtterances;
  } else {
    throw ParameterError("subset policy: unknown kind '" + kind + "'");
  }
  try {
    const auto slash = frac.find('/');
    std::size_t used = 0;
    if (slash == std::string::npos) {
      p.fraction = std::stod(frac, &used);
      if (used != frac.size()) throw std::invalid_argument(frac);
    } else {
      const std::string num = frac.substr(0, slash), den = frac.substr(slash + 1);
      const double a = std::stod(num, &used);
      if (used != num.size()) throw std::invalid_argument(frac);
      const double b = std::stod(den, &used);
      if (used != den.size()) throw std::invalid_argument(frac);
      p.fraction = a / b;
    }
  } catch (const std::logic_error&) {
    throw ParameterError("subset policy: bad fraction '" + frac + "'");
  }
  if (!(p.fraction > 0.0 && p.fraction <= 1.0)) {
    throw ParameterError("subset policy: fraction must be in (0, 1]");
  }
  return p;
}

std::string SubsetPolicy::to_string() const {
  if (kind == Kind::kAll) return "all";
  std::ostringstream os;
  os << (kind == Kind::kSpeakers ? "speakers:" : "utterances:") << std::setprecision(6) << fraction;
  return os.str();
}

SubsetSelection select_subset(const std::vector<Sample>& samples, const SubsetPolicy& policy,
                              std::uint64_t seed) {
  SubsetSelection sel;
  if (samples.empty()) throw ParameterError("select_subset: no samples");
  std::vector<std::string> units;
  std::set<std::string> seen;
  for (const Sample& s : samples) {
    const std::string& key = policy.kind == SubsetPolicy::Kind::kUtterances ? s.utterance_id
                                                                            : s.speaker_id;
    if (seen.insert(key).second) units.push_back(key);
  }
  std::set<std::string> chosen;
  if (policy.kind == SubsetPolicy::Kind::kAll) {
    chosen.insert(units.begin(), units.end());
  } else {
    std::sort(units.begin(), units.end());
    Rng rng(seed);
    rng.shuffle(units.begin(), units.end());
    const auto n = std::max<std::size_t>(
        1, static_cast<std::size_t>(std::llround(policy.fraction * static_cast<double>(units.size()))));
    chosen.insert(units.begin(), units.begin() + static_cast<std::ptrdiff_t>(std::min(n, units.size())));
  }
  std::set<std::string> speakers, utterances;
  for (const Sample& s : samples) {
    const std::string& key = policy.kind == SubsetPolicy::Kind::kUtterances ? s.utterance_id
                                                                            : s.speaker_id;
    if (!chosen.count(key)) continue;
    sel.samples.push_back(s);
    speakers.insert(s.speaker_id);
    utterances.insert(s.utterance_id);
  }
  sel.speakers.assign(speakers.begin(), speakers.end());
  sel.utterances.assign(utterances.begin(), utterances.end());
  return sel;
}

FineTuneResult fine_tune(HumpCat& model, const Checkpoint& source,
                         const std::vector<Sample>& target_train,
                         const std::vector<Sample>& val_set, const FineTuneConfig& cfg) {
  model.state().load(source);
  FineTuneResult result;
  result.subset = select_subset(target_train, cfg.subset, cfg.train.seed);
  TrainOptions options;
  options.fit_normalization = false;
  if (cfg.freeze_branches) options.frozen_prefixes = HumpCat::branch_prefixes();
  result.train = train(model, result.subset.samples, val_set, cfg.train, options);
  return result;
}

// ---- reports --------------------------------------------------------------

namespace {

double mean_of(const std::vector<FoldSummary>& folds, double FoldSummary::*field) {
  if (folds.empty()) return 0.0;
  double s = 0.0;
  for (const auto& f : folds) s += f.*field;
  return s / static_cast<double>(folds.size());
}

double std_of(const std::vector<FoldSummary>& folds, double FoldSummary::*field) {
  if (folds.empty()) return 0.0;
  const double mu = mean_of(folds, field);
  double s = 0.0;
  for (const auto& f : folds) s += (f.*field - mu) * (f.*field - mu);
  return std::sqrt(s / static_cast<double>(folds.size()));
}

std::string class_name(std::size_t c, std::size_t n) {
  if (n == 4) return std::string(to_string(static_cast<Emotion>(c)));
  return "class_" + std::to_string(c);
}

}  // namespace

double ResultsReport::wa_mean() const { return mean_of(folds, &FoldSummary::wa); }
double ResultsReport::wa_std() const { return std_of(folds, &FoldSummary::wa); }
double ResultsReport::ua_mean() const { return mean_of(folds, &FoldSummary::ua); }
double ResultsReport::ua_std() const { return std_of(folds, &FoldSummary::ua); }

nlohmann::json ResultsReport::to_json() const {
  nlohmann::json jf = nlohmann::json::array();
  for (const FoldSummary& f : folds) {
    jf.push_back({{"fold", f.fold},
                  {"wa", f.wa},
                  {"ua", f.ua},
                  {"n_test", f.n_test},
                  {"test_speakers", f.test_speakers},
                  {"confusion", f.confusion.to_json()},
                  {"best_epoch", f.best_epoch}});
  }
  return {{"schema_version", kSchemaVersion},
          {"command", command},
          {"config_hash", config_hash},
          {"seed", seed},
          {"folds", jf},
          {"aggregate",
           {{"wa_mean", wa_mean()}, {"wa_std", wa_std()}, {"ua_mean", ua_mean()}, {"ua_std", ua_std()}}}};
}

ResultsReport ResultsReport::from_json(const nlohmann::json& j) {
  if (j.value("schema_version", 0) != kSchemaVersion) {
    throw FormatError("results JSON: unsupported schema_version");
  }
  ResultsReport r;
  r.command = j.value("command", "");
  r.config_hash = j.at("config_hash").get<std::string>();
  r.seed = j.at("seed").get<std::uint64_t>();
  for (const auto& f : j.at("folds")) {
    FoldSummary s;
    s.fold = f.at("fold").get<std::size_t>();
    s.wa = f.at("wa").get<double>();
    s.ua = f.at("ua").get<double>();
    s.n_test = f.at("n_test").get<std::size_t>();
    s.test_speakers = f.at("test_speakers").get<std::vector<std::string>>();
    s.confusion = ConfusionMatrix::from_json(f.at("confusion"));
    s.best_epoch = f.value("best_epoch", std::size_t{0});
    r.folds.push_back(std::move(s));
  }
  return r;
}

KfoldResult run_kfold(const std::vector<Sample>& samples, const KfoldOptions& options) {
  const SplitPlan plan = kfold_split(samples, options.n_folds, options.seed);
  KfoldResult result;
  result.report.command = options.command;
  result.report.config_hash = options.config_hash;
  result.report.seed = options.seed;
  for (std::size_t f = 0; f < plan.folds.size(); ++f) {
    const Fold& fold = plan.folds[f];
    HumpCatConfig mc = options.model;
    mc.seed = options.seed + f;
    TrainConfig tc = options.train;
    tc.seed = options.seed + f;
    HumpCat model(mc);
    const TrainResult tr = train(model, select_speakers(samples, fold.train_speakers),
                                 select_speakers(samples, fold.val_speakers), tc);
    const std::vector<Sample> test = select_speakers(samples, fold.test_speakers);
    const Evaluation ev = evaluate(model, test);
    FoldSummary s;
    s.fold = f;
    s.wa = ev.metrics.wa;
    s.ua = ev.metrics.ua;
    s.n_test = ev.truth.size();
    s.test_speakers = fold.test_speakers;
    s.confusion = ev.metrics.confusion;
    s.best_epoch = tr.history.best_epoch;
    log_info("fold " + std::to_string(f) + " UA " + std::to_string(s.ua));
    result.report.folds.push_back(std::move(s));
    result.histories.push_back(tr.history);
  }
  return result;
}

std::string confusion_csv(const ConfusionMatrix& cm) {
  const std::size_t n = cm.n_classes();
  std::ostringstream os;
  os << "true\\pred";
  for (std::size_t p = 0; p < n; ++p) os << ',' << class_name(p, n);
  os << '\n';
  for (std::size_t t = 0; t < n; ++t) {
    os << class_name(t, n);
    for (std::size_t p = 0; p < n; ++p) os << ',' << cm.at(t, p);
    os << '\n';
  }
  return os.str();
}

std::string confusion_heatmap_csv(const ConfusionMatrix& cm) {
  const std::size_t n = cm.n_classes();
  std::ostringstream os;
  os << "true,predicted,count,row_fraction\n" << std::setprecision(10);
  for (std::size_t t = 0; t < n; ++t) {
    const std::size_t row = cm.row_sum(t);
    for (std::size_t p = 0; p < n; ++p) {
      const double frac = row ? static_cast<double>(cm.at(t, p)) / static_cast<double>(row) : 0.0;
      os << class_name(t, n) << ',' << class_name(p, n) << ',' << cm.at(t, p) << ',' << frac << '\n';
    }
  }
  return os.str();
}

std::string history_csv(const TrainHistory& history) {
  std::ostringstream os;
  os << "epoch,train_loss,val_UA\n" << std::setprecision(10);
  for (const EpochRecord& e : history.epochs) {
    os << e.epoch << ',' << e.train_loss << ',' << e.val_ua << '\n';
  }
  return os.str();
}

void write_text(const std::filesystem::path& path, std::string_view text) {
  detail::write_file(path, text);
}

}  // namespace emofuse
