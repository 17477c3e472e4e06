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

#include <array>
#include <cstddef>
#include <cstdint>
#include <filesystem>
#include <map>
#include <optional>
#include <string>
#include <string_view>
#include <vector>

#include "json.hpp"

namespace emofuse {

inline constexpr int kTargetRate = 16000;
inline constexpr std::size_t kSegmentSeconds = 7;
inline constexpr std::size_t kSegmentSamples = kSegmentSeconds * kTargetRate;
// Remainders shorter than this are dropped instead of repeat-padded.
inline constexpr std::size_t kMinRemainderSamples = kTargetRate;

enum class Emotion : std::uint8_t { kAngry = 0, kHappy = 1, kNeutral = 2, kSad = 3 };
inline constexpr std::size_t kNumEmotions = 4;
inline constexpr std::array<Emotion, kNumEmotions> kAllEmotions = {
    Emotion::kAngry, Emotion::kHappy, Emotion::kNeutral, Emotion::kSad};

std::string_view to_string(Emotion e);
// Canonical names only ("angry", "happy", "neutral", "sad").
std::optional<Emotion> parse_emotion(std::string_view name);

struct AudioSegment {
  std::vector<double> samples;  // amplitudes in [-1, 1]
  int sample_rate = kTargetRate;
  std::string source_id;

  double duration_s() const {
    return static_cast<double>(samples.size()) / static_cast<double>(sample_rate);
  }
};

struct UtteranceRecord {
  std::filesystem::path path;
  std::string speaker_id;
  Emotion label = Emotion::kNeutral;
  std::string dataset_id;
  double duration_s = 0.0;
};

// Raw corpus label -> 4-class emotion. Matching is case-insensitive; anything
// outside the table is rejected.
class LabelMap {
 public:
  static LabelMap defaults();
  static LabelMap from_json(const nlohmann::json& j);
  static LabelMap from_file(const std::filesystem::path& path);

  std::optional<Emotion> map(std::string_view raw) const;
  int version() const { return version_; }
  nlohmann::json to_json() const;

 private:
  int version_ = 1;
  std::map<std::string, Emotion> table_;
};

// RIFF/WAVE PCM16 only. `channel` selects one channel of interleaved data.
AudioSegment decode_wav(std::string_view bytes, std::string source_id = {},
                        std::size_t channel = 0);
AudioSegment read_wav(const std::filesystem::path& path, std::size_t channel = 0);
std::string encode_wav(const AudioSegment& seg);
void write_wav(const std::filesystem::path& path, const AudioSegment& seg);

// Band-limited conversion to 16 kHz: Hann-windowed sinc, 32 taps per side,
// weights renormalized per output sample (exact DC gain).
AudioSegment resample_16k(const AudioSegment& seg);

// Consecutive 7 s segments; a trailing remainder of at least 1 s is filled
// to 7 s by cyclic repetition of itself, shorter remainders are dropped.
std::vector<AudioSegment> clip_pad_7s(const AudioSegment& seg);

// CSV with header `path,speaker_id,raw_label,dataset_id` and an optional
// trailing `duration_s` column. Relative paths resolve against the manifest
// directory. In strict mode all rows with unmapped labels are reported in a
// single LabelError; otherwise they are skipped and listed in `rejected`.
struct ManifestLoad {
  std::vector<UtteranceRecord> records;
  std::vector<std::string> rejected;
};
ManifestLoad parse_manifest(std::string_view csv, const LabelMap& labels,
                            bool strict = true,
                            const std::filesystem::path& base_dir = {});
std::vector<UtteranceRecord> load_manifest(const std::filesystem::path& path,
                                           const LabelMap& labels = LabelMap::defaults(),
                                           bool strict = true);
void write_manifest(const std::filesystem::path& path,
                    const std::vector<UtteranceRecord>& records);

// ---- synthetic corpus ------------------------------------------------------

enum class SynthRecipe {
  // F0 band, energy, contour and rhythm all differ by class.
  kStandard,
  // Same structure with shifted F0 bands, energies and rhythm: a stand-in for
  // a second language.
  kShifted,
  // Class = (F0 high/low) x (spectral tilt bright/dark) at equal energy, so
  // pitch alone or spectrum alone only separates class pairs.
  kPitchTiltSplit,
};

std::string_view to_string(SynthRecipe r);
std::optional<SynthRecipe> parse_synth_recipe(std::string_view name);

struct SynthUtterance {
  AudioSegment audio;
  UtteranceRecord record;
};

// Deterministic given the seed: n_speakers x 4 classes x n_per_class
// utterances of exactly 7 s. Utterances are ordered speaker-major, then
// class, then index. Speaker ids are "<prefix>NN".
std::vector<SynthUtterance> synth_corpus(std::size_t n_speakers,
                                         std::size_t n_per_class,
                                         std::uint64_t seed,
                                         SynthRecipe recipe = SynthRecipe::kStandard,
                                         std::string_view speaker_prefix = "spk");

}  // namespace emofuse
