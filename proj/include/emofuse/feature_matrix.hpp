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

#include <cstddef>
#include <filesystem>
#include <span>
#include <string>
#include <string_view>
#include <vector>

#include "json.hpp"

namespace emofuse {

// Row-major (frames x dims) real matrix shared by every feature kind.
struct FeatureMatrix {
  std::size_t rows = 0;
  std::size_t cols = 0;
  std::vector<double> data;
  std::vector<std::string> dim_labels;
  // Extra metadata carried through the FMX1 JSON blob (config hash, padded
  // DFT length, ...). dim_labels are stored alongside, not in here.
  nlohmann::json meta = nlohmann::json::object();

  FeatureMatrix() = default;
  FeatureMatrix(std::size_t r, std::size_t c, double fill = 0.0)
      : rows(r), cols(c), data(r * c, fill) {}

  double& at(std::size_t r, std::size_t c) { return data[r * cols + c]; }
  double at(std::size_t r, std::size_t c) const { return data[r * cols + c]; }

  std::span<double> row(std::size_t r) { return {data.data() + r * cols, cols}; }
  std::span<const double> row(std::size_t r) const {
    return {data.data() + r * cols, cols};
  }
};

// FMX1 layout: "FMX1", u32 rows, u32 cols, rows*cols float32 (all
// little-endian, row-major), u16 length + UTF-8 JSON metadata.
std::string encode_fmx(const FeatureMatrix& m);
FeatureMatrix decode_fmx(std::string_view bytes);

void write_fmx(const std::filesystem::path& path, const FeatureMatrix& m);
FeatureMatrix read_fmx(const std::filesystem::path& path);

// Reads only the JSON metadata blob; used for skip-if-unchanged checks.
nlohmann::json read_fmx_meta(const std::filesystem::path& path);

// Rounds every entry through float32, matching what a write/read cycle does.
void round_to_float32(FeatureMatrix& m);

}  // namespace emofuse
