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

#include "emofuse/audio.hpp"

#include <algorithm>
#include <cctype>
#include <cmath>
#include <fstream>
#include <numbers>
#include <sstream>

#include "byte_io.hpp"
#include "emofuse/error.hpp"
#include "emofuse/rng.hpp"

namespace emofuse {

namespace {

std::string lower(std::string_view s) {
  std::string out(s);
  for (auto& c : out) c = static_cast<char>(std::tolower(static_cast<unsigned char>(c)));
  return out;
}

std::string trim(std::string_view s) {
  const auto b = s.find_first_not_of(" \t\r\n");
  if (b == std::string_view::npos) return {};
  const auto e = s.find_last_not_of(" \t\r\n");
  return std::string(s.substr(b, e - b + 1));
}

// Splits one CSV line; double-quoted fields may contain commas and "".
std::vector<std::string> split_csv_line(std::string_view line) {
  std::vector<std::string> fields;
  std::string cur;
  bool quoted = false;
  for (std::size_t i = 0; i < line.size(); ++i) {
    const char c = line[i];
    if (quoted) {
      if (c == '"') {
        if (i + 1 < line.size() && line[i + 1] == '"') {
          cur += '"';
          ++i;
        } else {
          quoted = false;
        }
      } else {
        cur += c;
      }
    } else if (c == '"') {
      quoted = true;
    } else if (c == ',') {
      fields.push_back(trim(cur));
      cur.clear();
    } else {
      cur += c;
    }
  }
  fields.push_back(trim(cur));
  return fields;
}

std::string csv_field(const std::string& s) {
  if (s.find_first_of(",\"\n") == std::string::npos) return s;
  std::string out = "\"";
  for (char c : s) {
    if (c == '"') out += '"';
    out += c;
  }
  return out + '"';
}

double sinc(double x) {
  if (std::abs(x) < 1e-12) return 1.0;
  const double px = std::numbers::pi * x;
  return std::sin(px) / px;
}

}  // namespace

// ---- labels -----------------------------------------------------------------

std::string_view to_string(Emotion e) {
  switch (e) {
    case Emotion::kAngry: return "angry";
    case Emotion::kHappy: return "happy";
    case Emotion::kNeutral: return "neutral";
    case Emotion::kSad: return "sad";
  }
  return "?";
}

std::optional<Emotion> parse_emotion(std::string_view name) {
  for (Emotion e : kAllEmotions) {
    if (to_string(e) == name) return e;
  }
  return std::nullopt;
}

LabelMap LabelMap::defaults() {
  LabelMap m;
  m.table_ = {
      {"angry", Emotion::kAngry},     {"anger", Emotion::kAngry},
      {"ang", Emotion::kAngry},       {"happy", Emotion::kHappy},
      {"happiness", Emotion::kHappy}, {"hap", Emotion::kHappy},
      {"excitement", Emotion::kHappy}, {"excited", Emotion::kHappy},
      {"exc", Emotion::kHappy},       {"neutral", Emotion::kNeutral},
      {"neu", Emotion::kNeutral},     {"sad", Emotion::kSad},
      {"sadness", Emotion::kSad},
  };
  return m;
}

LabelMap LabelMap::from_json(const nlohmann::json& j) {
  LabelMap m;
  try {
    m.version_ = j.at("version").get<int>();
    for (const auto& [raw, target] : j.at("map").items()) {
      const auto e = parse_emotion(target.get<std::string>());
      if (!e) {
        throw ConfigError("label map: target '" + target.get<std::string>() +
                          "' is not one of angry/happy/neutral/sad");
      }
      m.table_[lower(raw)] = *e;
    }
  } catch (const nlohmann::json::exception& e) {
    throw ConfigError(std::string("label map: ") + e.what());
  }
  return m;
}

LabelMap LabelMap::from_file(const std::filesystem::path& path) {
  try {
    return from_json(nlohmann::json::parse(detail::read_file(path)));
  } catch (const nlohmann::json::parse_error& e) {
    throw ConfigError(path.string() + ": " + e.what());
  }
}

std::optional<Emotion> LabelMap::map(std::string_view raw) const {
  const auto it = table_.find(lower(trim(raw)));
  if (it == table_.end()) return std::nullopt;
  return it->second;
}

nlohmann::json LabelMap::to_json() const {
  nlohmann::json j;
  j["version"] = version_;
  j["map"] = nlohmann::json::object();
  for (const auto& [raw, e] : table_) j["map"][raw] = to_string(e);
  return j;
}

// ---- WAV --------------------------------------------------------------------

AudioSegment decode_wav(std::string_view bytes, std::string source_id,
                        std::size_t channel) {
  detail::ByteReader r(bytes, "WAV");
  if (bytes.size() < 12 || r.bytes(4) != "RIFF") throw FormatError("WAV: missing RIFF header");
  r.u32();
  if (r.bytes(4) != "WAVE") throw FormatError("WAV: missing WAVE tag");

  bool have_fmt = false;
  std::uint16_t format = 0, channels = 0, bits = 0;
  std::uint32_t rate = 0;
  std::string_view data;
  bool have_data = false;
  while (r.remaining() >= 8) {
    const auto id = r.bytes(4);
    const std::uint32_t size = r.u32();
    if (size > r.remaining()) throw FormatError("WAV: chunk exceeds file size");
    const auto body = r.bytes(size);
    if (size % 2 == 1 && r.remaining() > 0) r.bytes(1);
    if (id == "fmt ") {
      if (size < 16) throw FormatError("WAV: fmt chunk too short");
      detail::ByteReader f(body, "WAV fmt");
      format = f.u16();
      channels = f.u16();
      rate = f.u32();
      f.u32();
      f.u16();
      bits = f.u16();
      if (format == 0xFFFE && size >= 40) {
        f.u16();
        f.u16();
        f.u32();
        format = f.u16();  // first two bytes of the sub-format GUID
      }
      have_fmt = true;
    } else if (id == "data") {
      data = body;
      have_data = true;
    }
  }
  if (!have_fmt || !have_data) throw FormatError("WAV: missing fmt or data chunk");
  if (format != 1 || bits != 16) {
    throw UnsupportedError("WAV: only 16-bit PCM is supported (format " +
                           std::to_string(format) + ", " + std::to_string(bits) +
                           " bits)");
  }
  if (channels == 0 || rate == 0) throw FormatError("WAV: zero channels or rate");
  if (channel >= channels) {
    throw UnsupportedError("WAV: channel " + std::to_string(channel) +
                           " requested from " + std::to_string(channels) +
                           "-channel file");
  }
  AudioSegment seg;
  seg.sample_rate = static_cast<int>(rate);
  seg.source_id = std::move(source_id);
  const std::size_t frame_bytes = 2u * channels;
  const std::size_t n = data.size() / frame_bytes;
  seg.samples.resize(n);
  for (std::size_t i = 0; i < n; ++i) {
    std::int16_t s;
    std::memcpy(&s, data.data() + i * frame_bytes + 2 * channel, 2);
    seg.samples[i] = static_cast<double>(s) / 32768.0;
  }
  return seg;
}

AudioSegment read_wav(const std::filesystem::path& path, std::size_t channel) {
  try {
    return decode_wav(detail::read_file(path), path.stem().string(), channel);
  } catch (const FormatError& e) {
    throw FormatError(path.string() + ": " + e.what());
  } catch (const UnsupportedError& e) {
    throw UnsupportedError(path.string() + ": " + e.what());
  }
}

std::string encode_wav(const AudioSegment& seg) {
  const std::uint32_t data_bytes = static_cast<std::uint32_t>(seg.samples.size() * 2);
  detail::ByteWriter w;
  w.bytes("RIFF");
  w.u32(36 + data_bytes);
  w.bytes("WAVE");
  w.bytes("fmt ");
  w.u32(16);
  w.u16(1);
  w.u16(1);
  w.u32(static_cast<std::uint32_t>(seg.sample_rate));
  w.u32(static_cast<std::uint32_t>(seg.sample_rate) * 2);
  w.u16(2);
  w.u16(16);
  w.bytes("data");
  w.u32(data_bytes);
  for (double x : seg.samples) {
    const double scaled = std::round(std::clamp(x, -1.0, 1.0) * 32768.0);
    const auto s = static_cast<std::int16_t>(std::clamp(scaled, -32768.0, 32767.0));
    w.u16(static_cast<std::uint16_t>(s));
  }
  return w.take();
}

void write_wav(const std::filesystem::path& path, const AudioSegment& seg) {
  detail::write_file(path, encode_wav(seg));
}

// ---- resampling / segmentation ---------------------------------------------

AudioSegment resample_16k(const AudioSegment& seg) {
  static constexpr int kRates[] = {8000, 16000, 22050, 44100, 48000};
  if (std::find(std::begin(kRates), std::end(kRates), seg.sample_rate) == std::end(kRates)) {
    throw UnsupportedError("resample: unsupported input rate " +
                           std::to_string(seg.sample_rate));
  }
  if (seg.sample_rate == kTargetRate) return seg;

  constexpr int kHalf = 32;
  const auto rate_in = static_cast<std::uint64_t>(seg.sample_rate);
  const double cutoff = std::min(1.0, static_cast<double>(kTargetRate) / seg.sample_rate);
  const std::size_t n_in = seg.samples.size();
  const std::size_t n_out = n_in * kTargetRate / rate_in;

  AudioSegment out;
  out.sample_rate = kTargetRate;
  out.source_id = seg.source_id;
  out.samples.resize(n_out);
  for (std::size_t n = 0; n < n_out; ++n) {
    const double x = static_cast<double>(n * rate_in) / kTargetRate;
    const auto k0 = static_cast<std::int64_t>(std::floor(x));
    double acc = 0.0, wsum = 0.0;
    for (std::int64_t k = k0 - kHalf + 1; k <= k0 + kHalf; ++k) {
      if (k < 0 || k >= static_cast<std::int64_t>(n_in)) continue;
      const double d = x - static_cast<double>(k);
      if (std::abs(d) >= kHalf) continue;
      const double window = 0.5 * (1.0 + std::cos(std::numbers::pi * d / kHalf));
      const double h = cutoff * sinc(cutoff * d) * window;
      acc += seg.samples[static_cast<std::size_t>(k)] * h;
      wsum += h;
    }
    out.samples[n] = wsum != 0.0 ? acc / wsum : 0.0;
  }
  return out;
}

std::vector<AudioSegment> clip_pad_7s(const AudioSegment& seg) {
  if (seg.samples.empty()) throw ParameterError("clip_pad_7s: empty input");
  if (seg.sample_rate != kTargetRate) {
    throw ParameterError("clip_pad_7s: input must be at 16 kHz, got " +
                         std::to_string(seg.sample_rate));
  }
  std::vector<AudioSegment> out;
  const std::size_t n = seg.samples.size();
  std::size_t start = 0;
  for (; start + kSegmentSamples <= n; start += kSegmentSamples) {
    AudioSegment s;
    s.source_id = seg.source_id;
    s.samples.assign(seg.samples.begin() + static_cast<std::ptrdiff_t>(start),
                     seg.samples.begin() + static_cast<std::ptrdiff_t>(start + kSegmentSamples));
    out.push_back(std::move(s));
  }
  const std::size_t rem = n - start;
  if (rem >= kMinRemainderSamples) {
    AudioSegment s;
    s.source_id = seg.source_id;
    s.samples.resize(kSegmentSamples);
    for (std::size_t i = 0; i < kSegmentSamples; ++i) {
      s.samples[i] = seg.samples[start + i % rem];
    }
    out.push_back(std::move(s));
  }
  return out;
}

// ---- manifest ----------------------------------------------------------------

ManifestLoad parse_manifest(std::string_view csv, const LabelMap& labels,
                            bool strict, const std::filesystem::path& base_dir) {
  ManifestLoad result;
  std::istringstream in{std::string(csv)};
  std::string line;
  std::size_t line_no = 0;
  bool header_seen = false;
  bool has_duration = false;
  std::vector<std::string> bad;
  while (std::getline(in, line)) {
    ++line_no;
    if (trim(line).empty()) continue;
    auto fields = split_csv_line(line);
    if (!header_seen) {
      if (line_no == 1 && !fields.empty() && fields[0].rfind("\xEF\xBB\xBF", 0) == 0) {
        fields[0].erase(0, 3);
      }
      if (fields.size() < 4 || fields[0] != "path" || fields[1] != "speaker_id" ||
          fields[2] != "raw_label" || fields[3] != "dataset_id") {
        throw FormatError("manifest: header must be path,speaker_id,raw_label,dataset_id");
      }
      has_duration = fields.size() >= 5 && fields[4] == "duration_s";
      header_seen = true;
      continue;
    }
    if (fields.size() < 4) {
      throw FormatError("manifest: line " + std::to_string(line_no) +
                        " has fewer than 4 fields");
    }
    if (fields[1].empty()) {
      throw FormatError("manifest: line " + std::to_string(line_no) +
                        " has an empty speaker_id");
    }
    const auto label = labels.map(fields[2]);
    if (!label) {
      bad.push_back("line " + std::to_string(line_no) + ": unknown label '" +
                    fields[2] + "'");
      continue;
    }
    UtteranceRecord rec;
    rec.path = fields[0];
    if (rec.path.is_relative() && !base_dir.empty()) rec.path = base_dir / rec.path;
    rec.speaker_id = fields[1];
    rec.label = *label;
    rec.dataset_id = fields[3];
    if (has_duration && fields.size() >= 5 && !fields[4].empty()) {
      try {
        rec.duration_s = std::stod(fields[4]);
      } catch (const std::exception&) {
        throw FormatError("manifest: line " + std::to_string(line_no) +
                          " has a bad duration_s");
      }
    }
    result.records.push_back(std::move(rec));
  }
  if (!bad.empty() && strict) {
    std::string msg = "manifest: " + std::to_string(bad.size()) + " row(s) with unmapped labels";
    for (const auto& b : bad) msg += "\n  " + b;
    throw LabelError(msg);
  }
  result.rejected = std::move(bad);
  return result;
}

std::vector<UtteranceRecord> load_manifest(const std::filesystem::path& path,
                                           const LabelMap& labels, bool strict) {
  return parse_manifest(detail::read_file(path), labels, strict, path.parent_path()).records;
}

void write_manifest(const std::filesystem::path& path,
                    const std::vector<UtteranceRecord>& records) {
  std::ostringstream os;
  os << "path,speaker_id,raw_label,dataset_id,duration_s\n";
  for (const auto& r : records) {
    os << csv_field(r.path.generic_string()) << ',' << csv_field(r.speaker_id) << ','
       << to_string(r.label) << ',' << csv_field(r.dataset_id) << ',' << r.duration_s
       << '\n';
  }
  detail::write_file(path, os.str());
}

// ---- synthetic corpus ----------------------------------------------------------

std::string_view to_string(SynthRecipe r) {
  switch (r) {
    case SynthRecipe::kStandard: return "standard";
    case SynthRecipe::kShifted: return "shifted";
    case SynthRecipe::kPitchTiltSplit: return "pitch-tilt";
  }
  return "?";
}

std::optional<SynthRecipe> parse_synth_recipe(std::string_view name) {
  for (auto r : {SynthRecipe::kStandard, SynthRecipe::kShifted, SynthRecipe::kPitchTiltSplit}) {
    if (to_string(r) == name) return r;
  }
  return std::nullopt;
}

namespace {

struct ClassVoice {
  double f0;           // Hz, centre of the class band
  double f0_slope;     // Hz/s within a voiced run
  double amplitude;    // peak of the harmonic sum
  double rate;         // syllables per second
  double voiced_frac;  // voiced share of each syllable period
  double tilt;         // harmonic k has relative amplitude tilt^(k-1)
};

ClassVoice class_voice(SynthRecipe recipe, Emotion e) {
  switch (recipe) {
    case SynthRecipe::kStandard:
      switch (e) {
        case Emotion::kAngry: return {235, -80, 0.50, 5.0, 0.70, 0.85};
        case Emotion::kHappy: return {190, 60, 0.32, 4.5, 0.65, 0.80};
        case Emotion::kNeutral: return {140, 0, 0.20, 3.5, 0.60, 0.70};
        case Emotion::kSad: return {100, -20, 0.10, 2.5, 0.50, 0.60};
      }
      break;
    case SynthRecipe::kShifted:
      switch (e) {
        case Emotion::kAngry: return {265, -40, 0.42, 4.2, 0.60, 0.80};
        case Emotion::kHappy: return {215, 90, 0.28, 5.2, 0.70, 0.75};
        case Emotion::kNeutral: return {160, 10, 0.17, 3.0, 0.55, 0.65};
        case Emotion::kSad: return {118, -35, 0.08, 2.2, 0.45, 0.55};
      }
      break;
    case SynthRecipe::kPitchTiltSplit:
      switch (e) {
        case Emotion::kAngry: return {220, 0, 0.25, 4.0, 0.60, 0.90};
        case Emotion::kHappy: return {220, 0, 0.25, 4.0, 0.60, 0.45};
        case Emotion::kNeutral: return {120, 0, 0.25, 4.0, 0.60, 0.90};
        case Emotion::kSad: return {120, 0, 0.25, 4.0, 0.60, 0.45};
      }
      break;
  }
  return {150, 0, 0.2, 4.0, 0.6, 0.7};
}

struct SpeakerVoice {
  double f0_offset;
  double amp_scale;
  double noise;
  double tilt_offset;
};

std::vector<double> render_utterance(const ClassVoice& cv, const SpeakerVoice& sv,
                                     Rng& rng) {
  constexpr double fs = kTargetRate;
  std::vector<double> x(kSegmentSamples, 0.0);
  for (auto& v : x) v = sv.noise * (2.0 * rng.uniform() - 1.0);

  const double f0_base = cv.f0 + sv.f0_offset + rng.uniform(-4.0, 4.0);
  const double rate = cv.rate * rng.uniform(0.92, 1.08);
  const double tilt = std::clamp(cv.tilt + sv.tilt_offset, 0.2, 0.98);
  const double amp = cv.amplitude * sv.amp_scale;

  double t0 = 0.1 + rng.uniform(0.0, 0.1);
  const double total = static_cast<double>(kSegmentSamples) / fs;
  while (t0 < total - 0.05) {
    const double period = rng.uniform(0.85, 1.15) / rate;
    const double voiced = std::min(cv.voiced_frac * period, total - t0 - 0.02);
    if (voiced > 0.04) {
      const auto s0 = static_cast<std::size_t>(t0 * fs);
      const auto len = static_cast<std::size_t>(voiced * fs);
      const double vib_phase = rng.uniform(0.0, 2.0 * std::numbers::pi);
      double phase = rng.uniform(0.0, 2.0 * std::numbers::pi);
      for (std::size_t i = 0; i < len && s0 + i < x.size(); ++i) {
        const double tau = static_cast<double>(i) / fs;
        const double f0 = f0_base + cv.f0_slope * (tau - voiced / 2) +
                          3.0 * std::sin(2.0 * std::numbers::pi * 5.0 * tau + vib_phase);
        phase += 2.0 * std::numbers::pi * f0 / fs;
        const double env = std::sqrt(std::sin(std::numbers::pi * tau / voiced));
        double acc = 0.0, norm = 0.0, a = 1.0;
        for (int k = 1; k * f0 < 3800.0; ++k) {
          acc += a * std::sin(k * phase);
          norm += a * a;
          a *= tilt;
        }
        x[s0 + i] += amp * env * acc / std::sqrt(norm);
      }
    }
    t0 += period;
  }
  for (auto& v : x) v = std::clamp(v, -1.0, 1.0);
  return x;
}

}  // namespace

std::vector<SynthUtterance> synth_corpus(std::size_t n_speakers,
                                         std::size_t n_per_class,
                                         std::uint64_t seed, SynthRecipe recipe,
                                         std::string_view speaker_prefix) {
  if (n_speakers < 2) throw ParameterError("synth_corpus: n_speakers must be >= 2");
  if (n_per_class < 1) throw ParameterError("synth_corpus: n_per_class must be >= 1");
  Rng rng(seed);
  std::vector<SynthUtterance> out;
  out.reserve(n_speakers * n_per_class * kNumEmotions);
  for (std::size_t s = 0; s < n_speakers; ++s) {
    SpeakerVoice sv;
    sv.f0_offset = rng.uniform(-8.0, 8.0);
    sv.amp_scale = rng.uniform(0.9, 1.1);
    sv.noise = rng.uniform(0.002, 0.004);
    sv.tilt_offset = rng.uniform(-0.03, 0.03);
    char spk[64];
    std::snprintf(spk, sizeof spk, "%.*s%02zu", static_cast<int>(speaker_prefix.size()),
                  speaker_prefix.data(), s);
    for (Emotion e : kAllEmotions) {
      const ClassVoice cv = class_voice(recipe, e);
      for (std::size_t i = 0; i < n_per_class; ++i) {
        SynthUtterance u;
        const std::string stem =
            std::string(spk) + "_" + std::string(to_string(e)) + "_" + std::to_string(i);
        u.audio.samples = render_utterance(cv, sv, rng);
        u.audio.sample_rate = kTargetRate;
        u.audio.source_id = stem;
        u.record.path = stem + ".wav";
        u.record.speaker_id = spk;
        u.record.label = e;
        u.record.dataset_id = "synth-" + std::string(to_string(recipe));
        u.record.duration_s = static_cast<double>(kSegmentSeconds);
        out.push_back(std::move(u));
      }
    }
  }
  return out;
}

}  // namespace emofuse
