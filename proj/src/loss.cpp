// SPDX-License-Identifier: Apache-2.0
#include "instatune/loss.hpp"

#include <stdexcept>
#include <string>

namespace instatune {

void LossWeights::validate() const {
  if (!(alpha >= 0.0 && alpha <= 1.0))
    throw std::invalid_argument("alpha must lie in [0, 1]");
  if (gamma != 0 && gamma != 1)
    throw std::invalid_argument("gamma must be 0 or 1");
  if (!(rho > 0.0)) throw std::invalid_argument("rho must be positive");
}

NodeId cross_entropy(Graph& g, NodeId logits,
                     const std::vector<std::size_t>& labels) {
  const std::size_t classes = g.cols(logits);
  if (labels.size() != g.rows(logits))
    throw std::invalid_argument("cross_entropy: one label per row required");
  for (auto y : labels)
    if (y >= classes)
      throw std::invalid_argument("cross_entropy: label " + std::to_string(y) +
                                  " outside [0, " + std::to_string(classes) + ")");
  NodeId picked = g.pick(g.log_softmax(logits), labels);
  return g.scale(g.sum(picked), -1.0 / static_cast<double>(labels.size()));
}

NodeId kl_distill(Graph& g, NodeId student, NodeId teacher, double rho) {
  if (!(rho > 0.0)) throw std::invalid_argument("kl_distill: rho must be positive");
  if (g.rows(student) != g.rows(teacher) || g.cols(student) != g.cols(teacher))
    throw StructuralError("kl_distill: student and teacher shapes differ");
  const double inv = 1.0 / rho;
  NodeId t = g.scale(g.detach(teacher), inv);
  NodeId p_teacher = g.softmax(t);
  NodeId log_teacher = g.log_softmax(t);
  NodeId log_student = g.log_softmax(g.scale(student, inv));
  NodeId pointwise = g.mul(p_teacher, g.sub(log_teacher, log_student));
  return g.scale(g.sum(pointwise),
                 rho * rho / static_cast<double>(g.rows(student)));
}

LossTerms instatune_loss(Graph& g, const StepLogits& step, const LossWeights& w) {
  w.validate();
  if (w.gamma == 1 && !step.teacher)
    throw std::invalid_argument("instatune_loss: gamma = 1 requires teacher logits");
  if (w.gamma == 0 && step.teacher)
    throw std::invalid_argument("instatune_loss: teacher logits given with gamma = 0");

  LossTerms terms;
  terms.ce_supernet = cross_entropy(g, step.supernet, step.labels);
  NodeId ce_sum = terms.ce_supernet;
  for (NodeId sub : step.subnets) {
    NodeId ce = cross_entropy(g, sub, step.labels);
    terms.ce_subnets.push_back(ce);
    ce_sum = g.add(ce_sum, ce);
  }

  std::optional<NodeId> kd;
  auto accumulate = [&](NodeId term) { kd = kd ? g.add(*kd, term) : term; };
  if (w.gamma == 1) {
    terms.kl_supernet_teacher = kl_distill(g, step.supernet, *step.teacher, w.rho);
    accumulate(*terms.kl_supernet_teacher);
  }
  for (NodeId sub : step.subnets) {
    if (w.gamma == 0) {
      NodeId kl = kl_distill(g, sub, step.supernet, w.rho);
      terms.kl_subnet_supernet.push_back(kl);
      accumulate(kl);
    } else {
      NodeId kl = kl_distill(g, sub, *step.teacher, w.rho);
      terms.kl_subnet_teacher.push_back(kl);
      accumulate(kl);
    }
  }

  terms.total = g.scale(ce_sum, w.alpha);
  if (kd) terms.total = g.add(terms.total, g.scale(*kd, 1.0 - w.alpha));
  return terms;
}

LossBreakdown read_breakdown(const Graph& g, const LossTerms& t) {
  LossBreakdown b;
  b.total = g.scalar(t.total);
  b.ce_supernet = g.scalar(t.ce_supernet);
  for (auto id : t.ce_subnets) b.ce_subnets.push_back(g.scalar(id));
  if (t.kl_supernet_teacher) b.kl_supernet_teacher = g.scalar(*t.kl_supernet_teacher);
  const std::size_t m = t.ce_subnets.size();
  b.kl_subnet_supernet.assign(m, 0.0);
  b.kl_subnet_teacher.assign(m, 0.0);
  for (std::size_t i = 0; i < t.kl_subnet_supernet.size(); ++i)
    b.kl_subnet_supernet[i] = g.scalar(t.kl_subnet_supernet[i]);
  for (std::size_t i = 0; i < t.kl_subnet_teacher.size(); ++i)
    b.kl_subnet_teacher[i] = g.scalar(t.kl_subnet_teacher[i]);
  return b;
}

double cross_entropy(const Tensor& logits, const std::vector<std::size_t>& labels) {
  Graph g;
  NodeId ce = cross_entropy(g, g.constant(logits), labels);
  g.evaluate();
  return g.scalar(ce);
}

double kl_distill(const Tensor& student, const Tensor& teacher, double rho) {
  Graph g;
  NodeId kl = kl_distill(g, g.constant(student), g.constant(teacher), rho);
  g.evaluate();
  return g.scalar(kl);
}

}  // namespace instatune
