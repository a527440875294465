// SPDX-License-Identifier: Apache-2.0
#pragma once

#include <vector>

#include "instatune/graph.hpp"

namespace instatune {

struct AdamConfig {
  double lr = 1e-3;
  double beta1 = 0.9;
  double beta2 = 0.999;
  double eps = 1e-8;

  friend bool operator==(const AdamConfig&, const AdamConfig&) = default;
};

/// Bias-corrected Adam. Moment buffers are tied to the position of each
/// parameter in the list passed to step(), which must not change.
class Adam {
 public:
  explicit Adam(AdamConfig config = {}) : config_(config) {}

  void step(const std::vector<Parameter*>& params);
  long long steps() const { return t_; }

 private:
  AdamConfig config_;
  long long t_ = 0;
  std::vector<std::vector<double>> m_, v_;
};

}  // namespace instatune
