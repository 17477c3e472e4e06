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

#include <complex>
#include <cstddef>
#include <span>
#include <vector>

#include "emofuse/audio.hpp"
#include "emofuse/feature_matrix.hpp"
#include "json.hpp"

namespace emofuse {

struct FrameConfig {
  double frame_ms = 40.0;
  double hop_ms = 20.0;
  int sample_rate = kTargetRate;
  std::size_t n_mels = 26;
  std::size_t n_ceps = 12;
  bool include_energy = true;
  double low_hz = 0.0;
  double high_hz = 8000.0;

  std::size_t frame_len() const;
  std::size_t hop_len() const;
  // Zero-padded transform length (next power of two >= frame_len).
  std::size_t fft_len() const;
  // n_ceps (+1 with energy), times 3 for deltas.
  std::size_t feature_dim() const;
  void validate() const;

  nlohmann::json to_json() const;
  static FrameConfig from_json(const nlohmann::json& j);
};

std::size_t frame_count(std::size_t n_samples, const FrameConfig& cfg);

// w[k] = 0.54 - 0.46 cos(2 pi k / (N - 1)).
std::vector<double> hamming(std::size_t n);

// (n_frames x frame_len), each frame multiplied by the Hamming window.
FeatureMatrix frame_signal(std::span<const double> samples, const FrameConfig& cfg);

// In-place radix-2 FFT; size must be a power of two.
void fft(std::vector<std::complex<double>>& data);

// Y_k = |DFT(frame zero-padded to fft_len)|^2 / fft_len for k in [0, fft_len/2].
// fft_len = 0 selects the next power of two >= frame.size().
std::vector<double> power_spectrum(std::span<const double> frame,
                                   std::size_t fft_len = 0);

// Hz <-> mel, mel(f) = 2595 log10(1 + f/700).
double hz_to_mel(double hz);
double mel_to_hz(double mel);

// M triangular filters, row-major (M x (fft_len/2 + 1)). Filter centres are
// equally spaced in mel between low_hz and high_hz; filter m rises from the
// centre of m-1 to its own centre and falls to the centre of m+1.
struct MelFilterbank {
  std::size_t n_filters = 0;
  std::size_t n_bins = 0;
  std::vector<double> weights;
  std::vector<double> centers_hz;  // n_filters + 2 edge points

  std::span<const double> filter(std::size_t m) const {
    return {weights.data() + m * n_bins, n_bins};
  }
  std::vector<double> apply(std::span<const double> power) const;
};

MelFilterbank mel_filterbank(const FrameConfig& cfg);

// Floor applied to filterbank outputs and frame energy before log10.
inline constexpr double kLogFloor = 1e-10;

// MFCC_i = sum_m log10(max(MT_m, floor)) cos((m + 0.5) i pi / M) for
// i = 1..L with m = 0..M-1.
std::vector<double> cepstra_from_filterbank(std::span<const double> mel_energies,
                                            std::size_t n_ceps);
std::vector<double> mfcc_frame(std::span<const double> power,
                               const MelFilterbank& bank, const FrameConfig& cfg);

// Regression delta with window 2 and clamped edges; order 2 applies it twice.
FeatureMatrix delta(const FeatureMatrix& features, int order = 1);

// Per frame: [MFCC_1..L, log-energy, deltas of those, delta-deltas of those].
FeatureMatrix extract_mfcc39(const AudioSegment& seg, const FrameConfig& cfg = {});
std::vector<std::string> mfcc_dim_labels(const FrameConfig& cfg);

}  // namespace emofuse
