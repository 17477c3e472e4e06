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

#include "emofuse/feature_matrix.hpp"

#include <cmath>
#include <limits>

#include "byte_io.hpp"
#include "emofuse/error.hpp"

namespace emofuse {

namespace {
constexpr std::string_view kMagic = "FMX1";
}

std::string encode_fmx(const FeatureMatrix& m) {
  if (m.data.size() != m.rows * m.cols) {
    throw ShapeError("FeatureMatrix data size does not match rows*cols");
  }
  if (m.rows > std::numeric_limits<std::uint32_t>::max() ||
      m.cols > std::numeric_limits<std::uint32_t>::max()) {
    throw FormatError("FeatureMatrix too large for FMX1");
  }
  detail::ByteWriter w;
  w.bytes(kMagic);
  w.u32(static_cast<std::uint32_t>(m.rows));
  w.u32(static_cast<std::uint32_t>(m.cols));
  for (double v : m.data) w.f32(static_cast<float>(v));

  nlohmann::json meta = m.meta;
  meta["dim_labels"] = m.dim_labels;
  const std::string blob = meta.dump();
  if (blob.size() > std::numeric_limits<std::uint16_t>::max()) {
    throw FormatError("FMX1 metadata exceeds 65535 bytes");
  }
  w.u16(static_cast<std::uint16_t>(blob.size()));
  w.bytes(blob);
  return w.take();
}

FeatureMatrix decode_fmx(std::string_view bytes) {
  detail::ByteReader r(bytes, "FMX1");
  if (bytes.size() < 4 || r.bytes(4) != kMagic) {
    throw FormatError("not an FMX1 feature file (bad magic)");
  }
  FeatureMatrix m;
  m.rows = r.u32();
  m.cols = r.u32();
  const std::size_t n = m.rows * m.cols;
  if (r.remaining() < n * 4) throw FormatError("FMX1: payload truncated");
  m.data.resize(n);
  for (auto& v : m.data) v = r.f32();
  const std::size_t len = r.u16();
  const auto blob = r.bytes(len);
  try {
    m.meta = nlohmann::json::parse(blob);
  } catch (const nlohmann::json::parse_error& e) {
    throw FormatError(std::string("FMX1: bad metadata JSON: ") + e.what());
  }
  if (m.meta.contains("dim_labels")) {
    m.dim_labels = m.meta["dim_labels"].get<std::vector<std::string>>();
    m.meta.erase("dim_labels");
  }
  return m;
}

void write_fmx(const std::filesystem::path& path, const FeatureMatrix& m) {
  detail::write_file(path, encode_fmx(m));
}

FeatureMatrix read_fmx(const std::filesystem::path& path) {
  try {
    return decode_fmx(detail::read_file(path));
  } catch (const FormatError& e) {
    throw FormatError(path.string() + ": " + e.what());
  }
}

nlohmann::json read_fmx_meta(const std::filesystem::path& path) {
  return read_fmx(path).meta;
}

void round_to_float32(FeatureMatrix& m) {
  for (auto& v : m.data) v = static_cast<double>(static_cast<float>(v));
}

}  // namespace emofuse
