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

#include "emofuse/checkpoint.hpp"

#include <limits>
#include <set>

#include "byte_io.hpp"
#include "emofuse/error.hpp"

namespace emofuse {

namespace {
constexpr std::string_view kMagic = "CKP1";
}

const NamedTensor* Checkpoint::find(std::string_view name) const {
  for (const auto& t : tensors) {
    if (t.name == name) return &t;
  }
  return nullptr;
}

std::string encode_checkpoint(const Checkpoint& ckpt) {
  detail::ByteWriter w;
  w.bytes(kMagic);
  w.u32(static_cast<std::uint32_t>(ckpt.tensors.size()));
  for (const auto& t : ckpt.tensors) {
    if (t.name.size() > std::numeric_limits<std::uint16_t>::max()) {
      throw FormatError("CKP1: tensor name too long");
    }
    if (t.shape.size() > std::numeric_limits<std::uint8_t>::max()) {
      throw FormatError("CKP1: tensor rank too large");
    }
    if (ad::shape_size(t.shape) != t.data.size()) {
      throw ShapeError("CKP1: tensor " + t.name + " data does not match shape");
    }
    w.u16(static_cast<std::uint16_t>(t.name.size()));
    w.bytes(t.name);
    w.u8(static_cast<std::uint8_t>(t.shape.size()));
    for (auto d : t.shape) w.u32(static_cast<std::uint32_t>(d));
    for (double v : t.data) w.f32(static_cast<float>(v));
  }
  const std::string blob = ckpt.config.dump();
  w.u32(static_cast<std::uint32_t>(blob.size()));
  w.bytes(blob);
  return w.take();
}

Checkpoint decode_checkpoint(std::string_view bytes) {
  detail::ByteReader r(bytes, "CKP1");
  if (bytes.size() < 4 || r.bytes(4) != kMagic) {
    throw FormatError("not a CKP1 checkpoint (bad magic)");
  }
  Checkpoint ckpt;
  const std::uint32_t count = r.u32();
  for (std::uint32_t i = 0; i < count; ++i) {
    NamedTensor t;
    t.name = std::string(r.bytes(r.u16()));
    const std::uint8_t rank = r.u8();
    for (std::uint8_t k = 0; k < rank; ++k) t.shape.push_back(r.u32());
    const std::size_t n = ad::shape_size(t.shape);
    if (r.remaining() < n * 4) throw FormatError("CKP1: tensor data truncated");
    t.data.resize(n);
    for (auto& v : t.data) v = r.f32();
    ckpt.tensors.push_back(std::move(t));
  }
  const std::uint32_t len = r.u32();
  try {
    ckpt.config = nlohmann::json::parse(r.bytes(len));
  } catch (const nlohmann::json::parse_error& e) {
    throw FormatError(std::string("CKP1: bad config JSON: ") + e.what());
  }
  return ckpt;
}

void save_checkpoint(const std::filesystem::path& path, const Checkpoint& ckpt) {
  detail::write_file(path, encode_checkpoint(ckpt));
}

Checkpoint load_checkpoint(const std::filesystem::path& path) {
  if (!std::filesystem::exists(path)) {
    throw StateError("checkpoint not found: " + path.string());
  }
  return decode_checkpoint(detail::read_file(path));
}

// ---- ParameterSet ---------------------------------------------------------

void ParameterSet::add(std::string name, ad::Tensor t) {
  if (find(name) != nullptr) throw ParameterError("duplicate parameter " + name);
  items_.emplace_back(std::move(name), std::move(t));
}

void ParameterSet::append(const ParameterSet& other) {
  for (const auto& [n, t] : other.items_) add(n, t);
}

std::vector<ad::Tensor> ParameterSet::tensors() const {
  std::vector<ad::Tensor> out;
  out.reserve(items_.size());
  for (const auto& it : items_) out.push_back(it.second);
  return out;
}

const ad::Tensor* ParameterSet::find(std::string_view name) const {
  for (const auto& it : items_) {
    if (it.first == name) return &it.second;
  }
  return nullptr;
}

std::size_t ParameterSet::scalar_count() const {
  std::size_t n = 0;
  for (const auto& it : items_) n += it.second.size();
  return n;
}

ParameterSet ParameterSet::filter(
    const std::function<bool(std::string_view)>& keep) const {
  ParameterSet out;
  for (const auto& it : items_) {
    if (keep(it.first)) out.items_.push_back(it);
  }
  return out;
}

void ParameterSet::zero_grad() {
  for (auto& it : items_) it.second.zero_grad();
}

Checkpoint ParameterSet::snapshot(nlohmann::json config) const {
  Checkpoint c;
  c.config = std::move(config);
  for (const auto& [name, t] : items_) c.tensors.push_back({name, t.shape(), t.values()});
  return c;
}

void ParameterSet::load(const Checkpoint& ckpt) {
  std::vector<std::string> problems;
  for (const auto& [name, t] : items_) {
    const NamedTensor* src = ckpt.find(name);
    if (src == nullptr) {
      problems.push_back(name + " (missing)");
    } else if (src->shape != t.shape()) {
      problems.push_back(name + " (shape " + ad::shape_str(src->shape) +
                         " vs " + ad::shape_str(t.shape()) + ")");
    }
  }
  if (!problems.empty()) {
    std::string msg = "checkpoint incompatible with model:";
    for (const auto& p : problems) msg += "\n  " + p;
    throw ConfigError(msg);
  }
  for (auto& [name, t] : items_) {
    const NamedTensor* src = ckpt.find(name);
    std::copy(src->data.begin(), src->data.end(), t.data().begin());
  }
}

}  // namespace emofuse
