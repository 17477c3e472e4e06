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

// Training, evaluation, speaker-disjoint folds, fine-tuning and reports.

#include <cstddef>
#include <cstdint>
#include <filesystem>
#include <optional>
#include <span>
#include <string>
#include <string_view>
#include <vector>

#include "emofuse/audio.hpp"
#include "emofuse/checkpoint.hpp"
#include "emofuse/model.hpp"
#include "emofuse/ssrl.hpp"
#include "json.hpp"

namespace emofuse {

struct Sample {
  ModelFeatures features;
  std::size_t label = 0;
  std::string speaker_id;
  // Segments cut from the same utterance share this id.
  std::string utterance_id;
};

// MFCC-39, prosody and (when an encoder is given) SSRL hidden states of one
// 16 kHz segment.
ModelFeatures extract_features(const AudioSegment& seg, const SsrlEncoder* encoder = nullptr);

// Resamples, cuts into 7 s segments and extracts features per segment.
std::vector<Sample> samples_from_audio(const AudioSegment& audio, const UtteranceRecord& record,
                                       const SsrlEncoder* encoder = nullptr);
std::vector<Sample> samples_from_corpus(const std::vector<SynthUtterance>& corpus,
                                        const SsrlEncoder* encoder = nullptr);

struct TrainConfig {
  double lr = 1e-3;
  std::size_t batch_size = 32;
  std::size_t max_epochs = 50;
  std::uint64_t seed = 0;
  std::size_t early_stop_patience = 10;

  void validate() const;
  nlohmann::json to_json() const;
  static TrainConfig from_json(const nlohmann::json& j);
};

struct EpochRecord {
  std::size_t epoch = 0;  // 1-based
  double train_loss = 0.0;
  double train_accuracy = 0.0;  // on training batches, dropout active
  double val_ua = 0.0;
};

struct TrainHistory {
  std::vector<EpochRecord> epochs;
  std::size_t best_epoch = 0;
  double best_val_ua = -1.0;
  bool stopped_early = false;
};

struct TrainOptions {
  // Parameters whose names start with any of these are not updated.
  std::vector<std::string> frozen_prefixes;
  // Refit input normalization on the training set before training.
  bool fit_normalization = true;
};

struct TrainResult {
  Checkpoint best;
  TrainHistory history;
};

// Trains in place and leaves the model at the best-validation-UA state. An
// empty validation set selects on training-set UA instead.
TrainResult train(HumpCat& model, const std::vector<Sample>& train_set,
                  const std::vector<Sample>& val_set, const TrainConfig& cfg,
                  const TrainOptions& options = {});

class ConfusionMatrix {
 public:
  explicit ConfusionMatrix(std::size_t n_classes = 4)
      : n_(n_classes), counts_(n_classes * n_classes, 0) {}

  void add(std::size_t truth, std::size_t predicted);
  std::size_t at(std::size_t truth, std::size_t predicted) const {
    return counts_[truth * n_ + predicted];
  }
  std::size_t n_classes() const { return n_; }
  std::size_t row_sum(std::size_t truth) const;
  std::size_t total() const;
  std::size_t correct() const;

  nlohmann::json to_json() const;
  static ConfusionMatrix from_json(const nlohmann::json& j);
  bool operator==(const ConfusionMatrix&) const = default;

 private:
  std::size_t n_;
  std::vector<std::size_t> counts_;
};

struct Metrics {
  double wa = 0.0;  // fractions in [0, 1]
  double ua = 0.0;
  ConfusionMatrix confusion;
  std::vector<std::size_t> absent_classes;  // excluded from UA
};

// Classes with no true samples are left out of UA (with a warning).
Metrics compute_metrics(std::span<const std::size_t> truth, std::span<const std::size_t> predicted,
                        std::size_t n_classes);

struct Evaluation {
  Metrics metrics;
  std::vector<std::string> utterance_ids;
  std::vector<std::size_t> truth;
  std::vector<std::size_t> predicted;
};

// Per-utterance evaluation: segment probabilities are averaged before argmax.
Evaluation evaluate(const HumpCat& model, const std::vector<Sample>& test_set);

struct Fold {
  std::vector<std::string> train_speakers;
  std::vector<std::string> val_speakers;
  std::vector<std::string> test_speakers;
};

struct SplitPlan {
  std::uint64_t seed = 0;
  std::vector<Fold> folds;
};

// Speakers are shuffled by seed and dealt round-robin into n_folds groups.
// Fold f tests group f, validates on group (f + 1) mod n_folds and trains on
// the rest.
SplitPlan kfold_split(const std::vector<std::string>& speaker_ids, std::size_t n_folds,
                      std::uint64_t seed);
SplitPlan kfold_split(const std::vector<Sample>& samples, std::size_t n_folds, std::uint64_t seed);

std::vector<Sample> select_speakers(const std::vector<Sample>& samples,
                                    const std::vector<std::string>& speakers);

struct SubsetPolicy {
  enum class Kind { kAll, kSpeakers, kUtterances };
  Kind kind = Kind::kAll;
  double fraction = 1.0;

  // "all", "speakers:0.2", "speakers:1/3", "utterances:0.1".
  static SubsetPolicy parse(std::string_view text);
  std::string to_string() const;
};

struct SubsetSelection {
  std::vector<Sample> samples;
  std::vector<std::string> speakers;    // speakers with at least one selected sample
  std::vector<std::string> utterances;  // selected utterance ids
};

// Picks max(1, round(fraction * count)) speakers or utterances by seed.
SubsetSelection select_subset(const std::vector<Sample>& samples, const SubsetPolicy& policy,
                              std::uint64_t seed);

struct FineTuneConfig {
  TrainConfig train;
  SubsetPolicy subset{SubsetPolicy::Kind::kSpeakers, 0.2};
  // Keep the branch encoders fixed and adapt only fusion and classifier.
  bool freeze_branches = false;
};

struct FineTuneResult {
  TrainResult train;
  SubsetSelection subset;
};

// Loads every tensor of `source` into `model` (ConfigError listing each
// mismatch otherwise), keeps the source normalization and trains on the
// selected subset of `target_train`.
FineTuneResult fine_tune(HumpCat& model, const Checkpoint& source,
                         const std::vector<Sample>& target_train,
                         const std::vector<Sample>& val_set, const FineTuneConfig& cfg);

struct FoldSummary {
  std::size_t fold = 0;
  double wa = 0.0;
  double ua = 0.0;
  std::size_t n_test = 0;
  std::vector<std::string> test_speakers;
  ConfusionMatrix confusion;
  std::size_t best_epoch = 0;
};

struct ResultsReport {
  static constexpr int kSchemaVersion = 1;

  std::string command;
  std::string config_hash;
  std::uint64_t seed = 0;
  std::vector<FoldSummary> folds;

  double wa_mean() const;
  double wa_std() const;
  double ua_mean() const;
  double ua_std() const;

  nlohmann::json to_json() const;
  static ResultsReport from_json(const nlohmann::json& j);
};

struct KfoldOptions {
  HumpCatConfig model;
  TrainConfig train;
  std::size_t n_folds = 10;
  std::uint64_t seed = 0;
  std::string command = "kfold";
  std::string config_hash;
};

struct KfoldResult {
  ResultsReport report;
  std::vector<TrainHistory> histories;
};

// Trains a fresh model per fold (seeded by seed + fold), selects on the
// validation speakers and evaluates on the test speakers.
KfoldResult run_kfold(const std::vector<Sample>& samples, const KfoldOptions& options);

std::string confusion_csv(const ConfusionMatrix& cm);
// Long-form rows (true, predicted, count, row fraction) for heatmap plotting.
std::string confusion_heatmap_csv(const ConfusionMatrix& cm);
std::string history_csv(const TrainHistory& history);

void write_text(const std::filesystem::path& path, std::string_view text);

}  // namespace emofuse
