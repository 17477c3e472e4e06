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

#include <cstdint>
#include <span>
#include <vector>

#include "emofuse/autodiff.hpp"

namespace emofuse {

struct AdamConfig {
  double lr = 1e-3;
  double beta1 = 0.9;
  double beta2 = 0.999;
  double eps = 1e-8;
};

struct AdamState {
  std::vector<double> m;
  std::vector<double> v;
  std::uint64_t step = 0;
};

// One bias-corrected Adam update in place. Throws NumericError when a
// gradient is not finite.
void adam_step(std::span<double> params, std::span<const double> grads,
               AdamState& state, const AdamConfig& cfg);

class Adam {
 public:
  Adam(std::vector<ad::Tensor> params, AdamConfig cfg);

  // Parameters that received no gradient are stepped with a zero gradient.
  void step();
  void zero_grad();

  AdamConfig& config() { return cfg_; }
  std::uint64_t steps() const { return states_.empty() ? 0 : states_[0].step; }

 private:
  std::vector<ad::Tensor> params_;
  std::vector<AdamState> states_;
  AdamConfig cfg_;
};

}  // namespace emofuse
