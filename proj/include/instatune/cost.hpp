// SPDX-License-Identifier: Apache-2.0
#pragma once

// Closed-form multiply-accumulate and parameter counts.
//
// One MAC per scalar multiply inside a matrix product. Softmax, LayerNorm,
// activations and the attention scaling count zero. Per active layer j with
// a = h_j * d_head:
//   QKV 3*N*D_in*a, scores N^2*a, context N^2*a, projection N*a*D_in,
//   FFN 2*N*D_in*f_j.

#include <cstdint>
#include <vector>

#include "instatune/model.hpp"

namespace instatune {

struct CostOptions {
  // Patch embedding N*D_in*patch_dim; token lookup presets have patch_dim 0
  // and cost nothing here.
  bool include_embeddings = true;
  bool include_classifier = false;  // pooled head D_in*C
  friend bool operator==(const CostOptions&, const CostOptions&) = default;
};

struct LayerCost {
  std::uint64_t qkv = 0;
  std::uint64_t scores = 0;
  std::uint64_t context = 0;
  std::uint64_t projection = 0;
  std::uint64_t ffn = 0;

  std::uint64_t total() const { return qkv + scores + context + projection + ffn; }
  friend bool operator==(const LayerCost&, const LayerCost&) = default;
};

struct CostReport {
  std::uint64_t macs = 0;
  std::uint64_t params = 0;
  std::vector<LayerCost> layers;
  std::uint64_t embeddings = 0;
  std::uint64_t classifier = 0;
  CostOptions options;
};

CostReport macs(const ArchDims& dims, const SubnetConfig& config,
                CostOptions options = {});
std::uint64_t params(const ArchDims& dims, const SubnetConfig& config);

struct Measurement {
  double accuracy = 0.0;
  double macs = 0.0;
};

/// Relative percentage differences against a baseline. Positive delta_mac
/// means fewer MACs; negative delta_acc means the sub-network beat baseline.
struct DeltaReport {
  double delta_mac = 0.0;
  double delta_acc = 0.0;
};

DeltaReport delta(const Measurement& baseline, const Measurement& subnet);

/// Drops digits past `decimals` (toward zero), the way Table-style reports
/// print percentages.
double truncate_decimals(double value, int decimals);

}  // namespace instatune
