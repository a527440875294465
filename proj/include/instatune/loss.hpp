// SPDX-License-Identifier: Apache-2.0
#pragma once

// Elastic fine-tuning objective:
//
//   total = alpha * [CE(S) + sum_i CE(S_i)]
//         + (1 - alpha) * [ gamma * KL(S, T, rho)
//                         + sum_i ((1 - gamma) * KL(S_i, S, rho)
//                                  + gamma * KL(S_i, T, rho)) ]
//
// S is the super-network, S_i the M sampled sub-networks, T the frozen strong
// teacher. KL(student, teacher, rho) = rho^2 * KL(softmax(teacher / rho) ||
// softmax(student / rho)), batch mean; the teacher side is always detached,
// including S when it teaches S_i.

#include <cstddef>
#include <optional>
#include <vector>

#include "instatune/graph.hpp"

namespace instatune {

struct LossWeights {
  double alpha = 0.3;
  int gamma = 0;  // 0 or 1
  double rho = 1.0;
  std::size_t samples = 1;  // M

  void validate() const;
  friend bool operator==(const LossWeights&, const LossWeights&) = default;
};

struct StepLogits {
  NodeId supernet;
  std::vector<NodeId> subnets;
  std::optional<NodeId> teacher;  // present iff gamma == 1
  std::vector<std::size_t> labels;
};

struct LossTerms {
  NodeId total;
  NodeId ce_supernet;
  std::vector<NodeId> ce_subnets;
  std::optional<NodeId> kl_supernet_teacher;  // gamma == 1 only
  std::vector<NodeId> kl_subnet_supernet;     // gamma == 0 only
  std::vector<NodeId> kl_subnet_teacher;      // gamma == 1 only
};

/// Evaluated term values. Terms removed by the gamma gate read as 0.
struct LossBreakdown {
  double total = 0.0;
  double ce_supernet = 0.0;
  std::vector<double> ce_subnets;
  double kl_supernet_teacher = 0.0;
  std::vector<double> kl_subnet_supernet;
  std::vector<double> kl_subnet_teacher;
};

NodeId cross_entropy(Graph& g, NodeId logits,
                     const std::vector<std::size_t>& labels);
NodeId kl_distill(Graph& g, NodeId student, NodeId teacher, double rho);
LossTerms instatune_loss(Graph& g, const StepLogits& step, const LossWeights& w);
LossBreakdown read_breakdown(const Graph& g, const LossTerms& terms);

// Tensor conveniences (each builds a throwaway graph).
double cross_entropy(const Tensor& logits, const std::vector<std::size_t>& labels);
double kl_distill(const Tensor& student, const Tensor& teacher, double rho);

}  // namespace instatune
