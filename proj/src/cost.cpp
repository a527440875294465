// SPDX-License-Identifier: Apache-2.0
#include "instatune/cost.hpp"

#include <cmath>
#include <stdexcept>

namespace instatune {

CostReport macs(const ArchDims& dims, const SubnetConfig& config,
                CostOptions options) {
  config.validate(dims);
  const std::uint64_t n = dims.seq_len, d = dims.embed;
  CostReport report;
  report.options = options;
  for (std::size_t j = 0; j < config.depth; ++j) {
    const std::uint64_t a = config.heads[j] * dims.head_dim;
    const std::uint64_t f = config.ffn[j];
    LayerCost lc;
    lc.qkv = 3 * n * d * a;
    lc.scores = n * n * a;
    lc.context = n * n * a;
    lc.projection = n * a * d;
    lc.ffn = 2 * n * d * f;
    report.macs += lc.total();
    report.layers.push_back(lc);
  }
  if (options.include_embeddings) report.embeddings = n * d * dims.patch_dim;
  if (options.include_classifier) report.classifier = d * dims.classes;
  report.macs += report.embeddings + report.classifier;
  report.params = params(dims, config);
  return report;
}

std::uint64_t params(const ArchDims& dims, const SubnetConfig& config) {
  return active_param_count(dims, config);
}

DeltaReport delta(const Measurement& baseline, const Measurement& subnet) {
  if (!(baseline.macs > 0.0))
    throw std::invalid_argument("delta: baseline MACs must be positive");
  if (!(baseline.accuracy > 0.0))
    throw std::invalid_argument("delta: baseline accuracy must be positive");
  return {100.0 * (baseline.macs - subnet.macs) / baseline.macs,
          100.0 * (baseline.accuracy - subnet.accuracy) / baseline.accuracy};
}

double truncate_decimals(double value, int decimals) {
  const double scale = std::pow(10.0, decimals);
  // Nudge by a few ulps so values like 0.29 * 100 do not truncate to 28.
  return std::trunc(value * scale * (1.0 + 1e-12)) / scale;
}

}  // namespace instatune
