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
#include <span>
#include <string>
#include <vector>

#include "emofuse/audio.hpp"
#include "emofuse/feature_matrix.hpp"
#include "emofuse/mfcc.hpp"

namespace emofuse {

inline constexpr std::size_t kProsodyDim = 103;

struct VoicingConfig {
  double min_f0_hz = 50.0;
  double max_f0_hz = 500.0;
  double min_peak = 0.45;  // normalized autocorrelation
  double min_rms = 0.01;
};

struct VoicingTrack {
  std::vector<bool> voiced;
  std::vector<double> f0_hz;  // 0 where unvoiced
  std::vector<double> rms;
  double hop_s = 0.02;

  std::size_t size() const { return voiced.size(); }
};

// Frame-level normalized autocorrelation pitch tracker on the FrameConfig
// grid (raw, mean-removed frames).
VoicingTrack estimate_f0(const AudioSegment& seg, const FrameConfig& cfg = {},
                         const VoicingConfig& vcfg = {});

struct RunDurations {
  std::vector<double> voiced_s;
  std::vector<double> unvoiced_s;
};

// Maximal runs of equal flags, converted to seconds.
RunDurations voiced_runs(const VoicingTrack& track);

// mean, std, max, min, skewness, excess kurtosis (population moments).
// std/skewness/kurtosis are 0 for n < 2 or variance < 1e-12.
struct Stats {
  double mean = 0, std = 0, max = 0, min = 0, skewness = 0, kurtosis = 0;
  std::array<double, 6> as_array() const { return {mean, std, max, min, skewness, kurtosis}; }
};
Stats summarize_stats(std::span<const double> samples);

struct ProsodyVector {
  std::array<double, kProsodyDim> values{};
  static const std::vector<std::string>& dim_labels();

  FeatureMatrix to_matrix() const;
};

// Indices (into ProsodyVector::values) of dims derived only from pitch and
// voicing timing, i.e. unaffected by waveform gain when voicing is unchanged.
const std::vector<std::size_t>& prosody_pitch_and_timing_dims();

ProsodyVector prosody_vector(const VoicingTrack& track);

inline ProsodyVector extract_prosody(const AudioSegment& seg, const FrameConfig& cfg = {},
                                     const VoicingConfig& vcfg = {}) {
  return prosody_vector(estimate_f0(seg, cfg, vcfg));
}

}  // namespace emofuse
