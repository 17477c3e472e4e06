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

#include <filesystem>
#include <functional>
#include <string>
#include <string_view>
#include <utility>
#include <vector>

#include "emofuse/autodiff.hpp"
#include "json.hpp"

namespace emofuse {

struct NamedTensor {
  std::string name;
  ad::Shape shape;
  std::vector<double> data;
};

// Named tensors plus the JSON config that produced them.
//
// CKP1 layout (little-endian): "CKP1", u32 tensor count, then per tensor
// u16 name length, name bytes, u8 rank, rank x u32 dims, float32 data;
// then u32 length + UTF-8 JSON config.
struct Checkpoint {
  std::vector<NamedTensor> tensors;
  nlohmann::json config = nlohmann::json::object();

  const NamedTensor* find(std::string_view name) const;
};

std::string encode_checkpoint(const Checkpoint& ckpt);
Checkpoint decode_checkpoint(std::string_view bytes);
void save_checkpoint(const std::filesystem::path& path, const Checkpoint& ckpt);
Checkpoint load_checkpoint(const std::filesystem::path& path);

// Ordered registry of named parameter tensors. Tensors are shared handles,
// so loading into a ParameterSet updates the owning blocks in place.
class ParameterSet {
 public:
  using Item = std::pair<std::string, ad::Tensor>;

  void add(std::string name, ad::Tensor t);
  void append(const ParameterSet& other);

  const std::vector<Item>& items() const { return items_; }
  std::vector<ad::Tensor> tensors() const;
  const ad::Tensor* find(std::string_view name) const;
  std::size_t size() const { return items_.size(); }
  std::size_t scalar_count() const;

  ParameterSet filter(const std::function<bool(std::string_view)>& keep) const;

  void zero_grad();

  Checkpoint snapshot(nlohmann::json config) const;

  // Copies values from ckpt. Every parameter must be present with the same
  // shape; otherwise throws ConfigError listing each mismatch. Tensors in the
  // checkpoint that are not registered here are ignored.
  void load(const Checkpoint& ckpt);

 private:
  std::vector<Item> items_;
};

}  // namespace emofuse
