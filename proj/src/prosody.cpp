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

#include "emofuse/prosody.hpp"

#include <algorithm>
#include <cmath>

#include "emofuse/error.hpp"

namespace emofuse {

namespace {

constexpr double kEnergyFloor = 1e-10;

double log_energy(double rms) { return std::log10(rms * rms + kEnergyFloor); }

// Least-squares polynomial fit of degree 1 or 2; returns coefficients from the
// highest power down plus residual RMS. Zeros when underdetermined.
struct PolyFit {
  std::vector<double> coef;
  double residual = 0.0;
};

PolyFit fit_poly(std::span<const double> x, std::span<const double> y, int degree) {
  const std::size_t k = static_cast<std::size_t>(degree) + 1;
  PolyFit fit;
  fit.coef.assign(k, 0.0);
  if (x.size() < k) return fit;
  // Normal equations A c = b with A[i][j] = sum x^(i+j), powers ascending.
  std::vector<double> A(k * k, 0.0), b(k, 0.0);
  for (std::size_t n = 0; n < x.size(); ++n) {
    double pi = 1.0;
    for (std::size_t i = 0; i < k; ++i) {
      double pj = 1.0;
      for (std::size_t j = 0; j < k; ++j) {
        A[i * k + j] += pi * pj;
        pj *= x[n];
      }
      b[i] += pi * y[n];
      pi *= x[n];
    }
  }
  // Gaussian elimination with partial pivoting.
  std::vector<std::size_t> perm(k);
  for (std::size_t i = 0; i < k; ++i) perm[i] = i;
  for (std::size_t col = 0; col < k; ++col) {
    std::size_t piv = col;
    for (std::size_t r = col + 1; r < k; ++r)
      if (std::abs(A[r * k + col]) > std::abs(A[piv * k + col])) piv = r;
    if (std::abs(A[piv * k + col]) < 1e-12) return fit;
    if (piv != col) {
      for (std::size_t j = 0; j < k; ++j) std::swap(A[col * k + j], A[piv * k + j]);
      std::swap(b[col], b[piv]);
    }
    for (std::size_t r = col + 1; r < k; ++r) {
      const double f = A[r * k + col] / A[col * k + col];
      for (std::size_t j = col; j < k; ++j) A[r * k + j] -= f * A[col * k + j];
      b[r] -= f * b[col];
    }
  }
  std::vector<double> c(k, 0.0);
  for (std::size_t i = k; i-- > 0;) {
    double s = b[i];
    for (std::size_t j = i + 1; j < k; ++j) s -= A[i * k + j] * c[j];
    c[i] = s / A[i * k + i];
  }
  double sse = 0.0;
  for (std::size_t n = 0; n < x.size(); ++n) {
    double pred = 0.0, p = 1.0;
    for (std::size_t i = 0; i < k; ++i) {
      pred += c[i] * p;
      p *= x[n];
    }
    sse += (y[n] - pred) * (y[n] - pred);
  }
  for (std::size_t i = 0; i < k; ++i) fit.coef[i] = c[k - 1 - i];
  fit.residual = std::sqrt(sse / static_cast<double>(x.size()));
  return fit;
}

double regression_slope(std::span<const double> x, std::span<const double> y) {
  return fit_poly(x, y, 1).coef[0];
}

void put(std::vector<double>& out, const Stats& s) {
  for (double v : s.as_array()) out.push_back(v);
}

Stats stats_or_zero(std::span<const double> v) {
  return v.empty() ? Stats{} : summarize_stats(v);
}

std::vector<std::string> build_labels() {
  std::vector<std::string> l;
  const char* stat[] = {"mean", "std", "max", "min", "skew", "kurt"};
  auto group = [&](const std::string& g) {
    for (const char* s : stat) l.push_back(g + "_" + s);
  };
  group("f0");
  group("f0_delta");
  group("log_energy");
  group("log_energy_delta");
  group("voiced_dur");
  group("unvoiced_dur");
  l.push_back("voiced_ratio");
  l.push_back("voiced_runs_per_s");
  l.push_back("mean_run_gap_s");
  group("f0_run_slope");
  group("energy_run_slope");
  const char* regions[] = {"first", "middle", "last", "whole"};
  for (const char* sig : {"f0", "log_energy"}) {
    for (const char* r : regions) {
      const std::string p = std::string(sig) + "_" + r + "_";
      for (const char* c : {"lin_slope", "lin_intercept", "quad_a2", "quad_a1", "quad_a0",
                            "quad_resid"}) {
        l.push_back(p + c);
      }
    }
    l.push_back(std::string(sig) + "_whole_lin_resid");
    l.push_back(std::string(sig) + "_fit_coverage");
  }
  return l;
}

}  // namespace

VoicingTrack estimate_f0(const AudioSegment& seg, const FrameConfig& cfg,
                         const VoicingConfig& vcfg) {
  cfg.validate();
  const std::size_t len = cfg.frame_len(), hop = cfg.hop_len();
  const std::size_t n_frames = frame_count(seg.samples.size(), cfg);
  VoicingTrack track;
  track.hop_s = cfg.hop_ms / 1000.0;
  track.voiced.assign(n_frames, false);
  track.f0_hz.assign(n_frames, 0.0);
  track.rms.assign(n_frames, 0.0);

  const double rate = seg.sample_rate;
  const auto lag_min = static_cast<std::size_t>(std::floor(rate / vcfg.max_f0_hz));
  const auto lag_max = std::min<std::size_t>(
      static_cast<std::size_t>(std::ceil(rate / vcfg.min_f0_hz)), len - 2);
  if (lag_min < 2 || lag_min >= lag_max) {
    throw ParameterError("estimate_f0: frame too short for the pitch range");
  }

  std::vector<double> x(len), cum(len + 1), r(lag_max + 2, 0.0);
  for (std::size_t f = 0; f < n_frames; ++f) {
    const double* src = seg.samples.data() + f * hop;
    double mu = 0.0;
    for (std::size_t t = 0; t < len; ++t) mu += src[t];
    mu /= static_cast<double>(len);
    cum[0] = 0.0;
    for (std::size_t t = 0; t < len; ++t) {
      x[t] = src[t] - mu;
      cum[t + 1] = cum[t] + x[t] * x[t];
    }
    const double rms = std::sqrt(cum[len] / static_cast<double>(len));
    track.rms[f] = rms;
    if (rms < vcfg.min_rms) continue;

    for (std::size_t lag = lag_min - 1; lag <= lag_max + 1; ++lag) {
      double num = 0.0;
      const std::size_t n = len - lag;
      for (std::size_t t = 0; t < n; ++t) num += x[t] * x[t + lag];
      const double e1 = cum[n];
      const double e2 = cum[len] - cum[lag];
      const double den = std::sqrt(e1 * e2);
      r[lag] = den > 0.0 ? num / den : 0.0;
    }
    double best = -1.0;
    for (std::size_t lag = lag_min; lag <= lag_max; ++lag) best = std::max(best, r[lag]);
    if (best < vcfg.min_peak) continue;
    // Smallest-lag local maximum close to the global one avoids octave errors.
    std::size_t pick = 0;
    for (std::size_t lag = lag_min; lag <= lag_max; ++lag) {
      if (r[lag] >= 0.9 * best && r[lag] >= r[lag - 1] && r[lag] >= r[lag + 1]) {
        pick = lag;
        break;
      }
    }
    if (pick == 0 || r[pick] < vcfg.min_peak) continue;
    const double a = r[pick - 1], b = r[pick], c = r[pick + 1];
    const double denom = a - 2.0 * b + c;
    double shift = std::abs(denom) > 1e-12 ? 0.5 * (a - c) / denom : 0.0;
    shift = std::clamp(shift, -0.5, 0.5);
    const double f0 = rate / (static_cast<double>(pick) + shift);
    if (f0 < vcfg.min_f0_hz || f0 > vcfg.max_f0_hz) continue;
    track.voiced[f] = true;
    track.f0_hz[f] = f0;
  }
  return track;
}

RunDurations voiced_runs(const VoicingTrack& track) {
  RunDurations d;
  const std::size_t n = track.size();
  std::size_t i = 0;
  while (i < n) {
    std::size_t j = i;
    while (j < n && track.voiced[j] == track.voiced[i]) ++j;
    const double dur = static_cast<double>(j - i) * track.hop_s;
    (track.voiced[i] ? d.voiced_s : d.unvoiced_s).push_back(dur);
    i = j;
  }
  return d;
}

Stats summarize_stats(std::span<const double> v) {
  if (v.empty()) throw ParameterError("summarize_stats: empty input");
  const double n = static_cast<double>(v.size());
  Stats s;
  s.max = *std::max_element(v.begin(), v.end());
  s.min = *std::min_element(v.begin(), v.end());
  for (double x : v) s.mean += x;
  s.mean /= n;
  double m2 = 0.0, m3 = 0.0, m4 = 0.0;
  for (double x : v) {
    const double d = x - s.mean;
    m2 += d * d;
    m3 += d * d * d;
    m4 += d * d * d * d;
  }
  m2 /= n;
  m3 /= n;
  m4 /= n;
  if (v.size() < 2 || m2 < 1e-12) return s;
  s.std = std::sqrt(m2);
  s.skewness = m3 / std::pow(m2, 1.5);
  s.kurtosis = m4 / (m2 * m2) - 3.0;
  return s;
}

const std::vector<std::string>& ProsodyVector::dim_labels() {
  static const std::vector<std::string> labels = build_labels();
  return labels;
}

FeatureMatrix ProsodyVector::to_matrix() const {
  FeatureMatrix m(1, kProsodyDim);
  std::copy(values.begin(), values.end(), m.data.begin());
  m.dim_labels = dim_labels();
  m.meta["kind"] = "prosody";
  return m;
}

const std::vector<std::size_t>& prosody_pitch_and_timing_dims() {
  static const std::vector<std::size_t> dims = [] {
    std::vector<std::size_t> d;
    for (std::size_t i = 0; i < 12; ++i) d.push_back(i);    // f0, f0 delta
    for (std::size_t i = 24; i < 45; ++i) d.push_back(i);   // durations, rates, f0 slopes
    for (std::size_t i = 51; i < 77; ++i) d.push_back(i);   // f0 contour fits
    return d;
  }();
  return dims;
}

ProsodyVector prosody_vector(const VoicingTrack& track) {
  const std::size_t n = track.size();
  std::vector<double> f0, df0, le, dle;
  std::vector<double> f0_slopes, e_slopes;
  for (std::size_t t = 0; t < n; ++t) {
    if (!track.voiced[t]) continue;
    f0.push_back(track.f0_hz[t]);
    le.push_back(log_energy(track.rms[t]));
    if (t > 0 && track.voiced[t - 1]) {
      df0.push_back(track.f0_hz[t] - track.f0_hz[t - 1]);
      dle.push_back(log_energy(track.rms[t]) - log_energy(track.rms[t - 1]));
    }
  }
  // Per voiced run slopes over time in seconds.
  for (std::size_t i = 0; i < n;) {
    std::size_t j = i;
    while (j < n && track.voiced[j] == track.voiced[i]) ++j;
    if (track.voiced[i] && j - i >= 2) {
      std::vector<double> ts, fs, es;
      for (std::size_t t = i; t < j; ++t) {
        ts.push_back(static_cast<double>(t - i) * track.hop_s);
        fs.push_back(track.f0_hz[t]);
        es.push_back(log_energy(track.rms[t]));
      }
      f0_slopes.push_back(regression_slope(ts, fs));
      e_slopes.push_back(regression_slope(ts, es));
    }
    i = j;
  }
  const RunDurations runs = voiced_runs(track);

  std::vector<double> out;
  out.reserve(kProsodyDim);
  put(out, stats_or_zero(f0));
  put(out, stats_or_zero(df0));
  put(out, stats_or_zero(le));
  put(out, stats_or_zero(dle));
  put(out, stats_or_zero(runs.voiced_s));
  put(out, stats_or_zero(runs.unvoiced_s));

  const double total_s = static_cast<double>(n) * track.hop_s;
  out.push_back(n ? static_cast<double>(f0.size()) / static_cast<double>(n) : 0.0);
  out.push_back(total_s > 0 ? static_cast<double>(runs.voiced_s.size()) / total_s : 0.0);
  {
    // Unvoiced runs bounded by voiced frames on both sides.
    double gap_sum = 0.0;
    std::size_t gaps = 0;
    for (std::size_t i = 0; i < n;) {
      std::size_t j = i;
      while (j < n && track.voiced[j] == track.voiced[i]) ++j;
      if (!track.voiced[i] && i > 0 && j < n) {
        gap_sum += static_cast<double>(j - i) * track.hop_s;
        ++gaps;
      }
      i = j;
    }
    out.push_back(gaps ? gap_sum / static_cast<double>(gaps) : 0.0);
  }
  put(out, stats_or_zero(f0_slopes));
  put(out, stats_or_zero(e_slopes));

  const std::size_t bounds[4][2] = {{0, n / 3}, {n / 3, 2 * n / 3}, {2 * n / 3, n}, {0, n}};
  for (int sig = 0; sig < 2; ++sig) {
    std::size_t whole_used = 0;
    double whole_lin_resid = 0.0;
    for (int region = 0; region < 4; ++region) {
      const auto [b, e] = bounds[region];
      std::vector<double> xs, ys;
      const double span = std::max<std::size_t>(e - b, 1);
      for (std::size_t t = b; t < e; ++t) {
        if (!track.voiced[t]) continue;
        xs.push_back(static_cast<double>(t - b) / span);
        ys.push_back(sig == 0 ? track.f0_hz[t] : log_energy(track.rms[t]));
      }
      const PolyFit lin = fit_poly(xs, ys, 1);
      const PolyFit quad = fit_poly(xs, ys, 2);
      out.push_back(lin.coef[0]);
      out.push_back(lin.coef[1]);
      out.push_back(quad.coef[0]);
      out.push_back(quad.coef[1]);
      out.push_back(quad.coef[2]);
      out.push_back(quad.residual);
      if (region == 3) {
        whole_used = xs.size();
        whole_lin_resid = lin.residual;
      }
    }
    out.push_back(whole_lin_resid);
    out.push_back(n ? static_cast<double>(whole_used) / static_cast<double>(n) : 0.0);
  }
  if (out.size() != kProsodyDim) {
    throw StateError("prosody_vector: internal dimension mismatch");
  }
  ProsodyVector pv;
  for (std::size_t i = 0; i < kProsodyDim; ++i) {
    pv.values[i] = std::isfinite(out[i]) ? out[i] : 0.0;
  }
  return pv;
}

}  // namespace emofuse
