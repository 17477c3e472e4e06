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

#include "emofuse/mfcc.hpp"

#include <bit>
#include <cmath>
#include <numbers>

#include "emofuse/error.hpp"

namespace emofuse {

std::size_t FrameConfig::frame_len() const {
  return static_cast<std::size_t>(std::lround(frame_ms * sample_rate / 1000.0));
}

std::size_t FrameConfig::hop_len() const {
  return static_cast<std::size_t>(std::lround(hop_ms * sample_rate / 1000.0));
}

std::size_t FrameConfig::fft_len() const { return std::bit_ceil(frame_len()); }

std::size_t FrameConfig::feature_dim() const {
  return 3 * (n_ceps + (include_energy ? 1 : 0));
}

void FrameConfig::validate() const {
  if (!(frame_ms > hop_ms && hop_ms > 0.0)) {
    throw ParameterError("FrameConfig: need frame_ms > hop_ms > 0");
  }
  if (n_mels < 2) throw ParameterError("FrameConfig: n_mels must be >= 2");
  if (n_ceps == 0 || n_ceps >= n_mels) {
    throw ParameterError("FrameConfig: need 0 < n_ceps < n_mels");
  }
  if (!(high_hz > low_hz && low_hz >= 0.0 && high_hz <= sample_rate / 2.0)) {
    throw ParameterError("FrameConfig: bad filterbank frequency range");
  }
}

nlohmann::json FrameConfig::to_json() const {
  return {{"frame_ms", frame_ms}, {"hop_ms", hop_ms},     {"sample_rate", sample_rate},
          {"n_mels", n_mels},     {"n_ceps", n_ceps},     {"include_energy", include_energy},
          {"low_hz", low_hz},     {"high_hz", high_hz}};
}

FrameConfig FrameConfig::from_json(const nlohmann::json& j) {
  FrameConfig c;
  c.frame_ms = j.value("frame_ms", c.frame_ms);
  c.hop_ms = j.value("hop_ms", c.hop_ms);
  c.sample_rate = j.value("sample_rate", c.sample_rate);
  c.n_mels = j.value("n_mels", c.n_mels);
  c.n_ceps = j.value("n_ceps", c.n_ceps);
  c.include_energy = j.value("include_energy", c.include_energy);
  c.low_hz = j.value("low_hz", c.low_hz);
  c.high_hz = j.value("high_hz", c.high_hz);
  c.validate();
  return c;
}

std::size_t frame_count(std::size_t n_samples, const FrameConfig& cfg) {
  const std::size_t len = cfg.frame_len();
  if (n_samples < len) return 0;
  return (n_samples - len) / cfg.hop_len() + 1;
}

std::vector<double> hamming(std::size_t n) {
  if (n < 2) throw ParameterError("hamming: window length must be >= 2");
  std::vector<double> w(n);
  const double denom = static_cast<double>(n - 1);
  for (std::size_t k = 0; k < n; ++k) {
    w[k] = 0.54 - 0.46 * std::cos(2.0 * std::numbers::pi * static_cast<double>(k) / denom);
  }
  return w;
}

FeatureMatrix frame_signal(std::span<const double> samples, const FrameConfig& cfg) {
  cfg.validate();
  const std::size_t len = cfg.frame_len(), hop = cfg.hop_len();
  const std::size_t n = frame_count(samples.size(), cfg);
  if (n == 0) {
    throw ParameterError("frame_signal: " + std::to_string(samples.size()) +
                         " samples is shorter than one frame (" + std::to_string(len) + ")");
  }
  const auto w = hamming(len);
  FeatureMatrix frames(n, len);
  for (std::size_t f = 0; f < n; ++f) {
    auto row = frames.row(f);
    for (std::size_t k = 0; k < len; ++k) row[k] = samples[f * hop + k] * w[k];
  }
  return frames;
}

void fft(std::vector<std::complex<double>>& a) {
  const std::size_t n = a.size();
  if (!std::has_single_bit(n)) throw ParameterError("fft: size must be a power of two");
  for (std::size_t i = 1, j = 0; i < n; ++i) {
    std::size_t bit = n >> 1;
    for (; j & bit; bit >>= 1) j ^= bit;
    j ^= bit;
    if (i < j) std::swap(a[i], a[j]);
  }
  for (std::size_t len = 2; len <= n; len <<= 1) {
    const double ang = -2.0 * std::numbers::pi / static_cast<double>(len);
    for (std::size_t i = 0; i < n; i += len) {
      for (std::size_t k = 0; k < len / 2; ++k) {
        const std::complex<double> w = std::polar(1.0, ang * static_cast<double>(k));
        const auto u = a[i + k];
        const auto v = a[i + k + len / 2] * w;
        a[i + k] = u + v;
        a[i + k + len / 2] = u - v;
      }
    }
  }
}

std::vector<double> power_spectrum(std::span<const double> frame, std::size_t fft_len) {
  if (fft_len == 0) fft_len = std::bit_ceil(std::max<std::size_t>(frame.size(), 1));
  if (fft_len < frame.size()) throw ParameterError("power_spectrum: fft_len < frame length");
  std::vector<std::complex<double>> buf(fft_len);
  for (std::size_t t = 0; t < frame.size(); ++t) buf[t] = frame[t];
  fft(buf);
  std::vector<double> p(fft_len / 2 + 1);
  const double inv_n = 1.0 / static_cast<double>(fft_len);
  for (std::size_t k = 0; k < p.size(); ++k) p[k] = std::norm(buf[k]) * inv_n;
  return p;
}

double hz_to_mel(double hz) { return 2595.0 * std::log10(1.0 + hz / 700.0); }

double mel_to_hz(double mel) { return 700.0 * (std::pow(10.0, mel / 2595.0) - 1.0); }

std::vector<double> MelFilterbank::apply(std::span<const double> power) const {
  if (power.size() != n_bins) {
    throw ShapeError("filterbank expects " + std::to_string(n_bins) + " bins, got " +
                     std::to_string(power.size()));
  }
  std::vector<double> out(n_filters, 0.0);
  for (std::size_t m = 0; m < n_filters; ++m) {
    const auto w = filter(m);
    double acc = 0.0;
    for (std::size_t k = 0; k < n_bins; ++k) acc += w[k] * power[k];
    out[m] = acc;
  }
  return out;
}

MelFilterbank mel_filterbank(const FrameConfig& cfg) {
  cfg.validate();
  MelFilterbank fb;
  fb.n_filters = cfg.n_mels;
  const std::size_t nfft = cfg.fft_len();
  fb.n_bins = nfft / 2 + 1;
  fb.weights.assign(fb.n_filters * fb.n_bins, 0.0);
  const double mel_lo = hz_to_mel(cfg.low_hz), mel_hi = hz_to_mel(cfg.high_hz);
  fb.centers_hz.resize(fb.n_filters + 2);
  for (std::size_t i = 0; i < fb.centers_hz.size(); ++i) {
    const double mel = mel_lo + (mel_hi - mel_lo) * static_cast<double>(i) /
                                    static_cast<double>(fb.n_filters + 1);
    fb.centers_hz[i] = mel_to_hz(mel);
  }
  const double bin_hz = static_cast<double>(cfg.sample_rate) / static_cast<double>(nfft);
  for (std::size_t m = 0; m < fb.n_filters; ++m) {
    const double left = fb.centers_hz[m], center = fb.centers_hz[m + 1],
                 right = fb.centers_hz[m + 2];
    for (std::size_t k = 0; k < fb.n_bins; ++k) {
      const double f = static_cast<double>(k) * bin_hz;
      double w = 0.0;
      if (f > left && f <= center) {
        w = (f - left) / (center - left);
      } else if (f > center && f < right) {
        w = (right - f) / (right - center);
      }
      fb.weights[m * fb.n_bins + k] = w;
    }
  }
  return fb;
}

std::vector<double> cepstra_from_filterbank(std::span<const double> mel_energies,
                                            std::size_t n_ceps) {
  const std::size_t M = mel_energies.size();
  std::vector<double> logs(M);
  for (std::size_t m = 0; m < M; ++m) logs[m] = std::log10(std::max(mel_energies[m], kLogFloor));
  std::vector<double> c(n_ceps, 0.0);
  for (std::size_t i = 1; i <= n_ceps; ++i) {
    double acc = 0.0;
    for (std::size_t m = 0; m < M; ++m) {
      acc += logs[m] * std::cos((static_cast<double>(m) + 0.5) * static_cast<double>(i) *
                                std::numbers::pi / static_cast<double>(M));
    }
    c[i - 1] = acc;
  }
  return c;
}

std::vector<double> mfcc_frame(std::span<const double> power, const MelFilterbank& bank,
                               const FrameConfig& cfg) {
  return cepstra_from_filterbank(bank.apply(power), cfg.n_ceps);
}

FeatureMatrix delta(const FeatureMatrix& x, int order) {
  if (order != 1 && order != 2) throw ParameterError("delta: order must be 1 or 2");
  if (x.rows < 5) {
    throw ParameterError("delta: need at least 5 frames, got " + std::to_string(x.rows));
  }
  constexpr int kWindow = 2;
  constexpr double kNorm = 2.0 * (1 * 1 + 2 * 2);
  const auto T = static_cast<std::ptrdiff_t>(x.rows);
  FeatureMatrix d(x.rows, x.cols);
  for (std::ptrdiff_t t = 0; t < T; ++t) {
    for (std::size_t c = 0; c < x.cols; ++c) {
      double acc = 0.0;
      for (int n = 1; n <= kWindow; ++n) {
        const auto ahead = static_cast<std::size_t>(std::min(t + n, T - 1));
        const auto behind = static_cast<std::size_t>(std::max<std::ptrdiff_t>(t - n, 0));
        acc += n * (x.at(ahead, c) - x.at(behind, c));
      }
      d.at(static_cast<std::size_t>(t), c) = acc / kNorm;
    }
  }
  if (order == 2) return delta(d, 1);
  return d;
}

std::vector<std::string> mfcc_dim_labels(const FrameConfig& cfg) {
  std::vector<std::string> base;
  for (std::size_t i = 1; i <= cfg.n_ceps; ++i) base.push_back("mfcc_" + std::to_string(i));
  if (cfg.include_energy) base.push_back("log_energy");
  std::vector<std::string> out = base;
  for (const auto& b : base) out.push_back("d_" + b);
  for (const auto& b : base) out.push_back("dd_" + b);
  return out;
}

FeatureMatrix extract_mfcc39(const AudioSegment& seg, const FrameConfig& cfg) {
  const FeatureMatrix frames = frame_signal(seg.samples, cfg);
  const MelFilterbank bank = mel_filterbank(cfg);
  const std::size_t base_dim = cfg.n_ceps + (cfg.include_energy ? 1 : 0);
  FeatureMatrix base(frames.rows, base_dim);
  for (std::size_t f = 0; f < frames.rows; ++f) {
    const auto frame = frames.row(f);
    const auto ceps = mfcc_frame(power_spectrum(frame, cfg.fft_len()), bank, cfg);
    auto row = base.row(f);
    std::copy(ceps.begin(), ceps.end(), row.begin());
    if (cfg.include_energy) {
      double e = 0.0;
      for (double v : frame) e += v * v;
      row[cfg.n_ceps] = std::log10(e + kLogFloor);
    }
  }
  const FeatureMatrix d1 = delta(base, 1);
  const FeatureMatrix d2 = delta(d1, 1);
  FeatureMatrix out(frames.rows, 3 * base_dim);
  for (std::size_t f = 0; f < frames.rows; ++f) {
    auto row = out.row(f);
    for (std::size_t c = 0; c < base_dim; ++c) {
      row[c] = base.at(f, c);
      row[base_dim + c] = d1.at(f, c);
      row[2 * base_dim + c] = d2.at(f, c);
    }
  }
  out.dim_labels = mfcc_dim_labels(cfg);
  out.meta["kind"] = "mfcc";
  out.meta["fft_len"] = cfg.fft_len();
  out.meta["frame_config"] = cfg.to_json();
  return out;
}

}  // namespace emofuse
