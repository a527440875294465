// SPDX-License-Identifier: Apache-2.0
#pragma once

// Central finite-difference gradient checking against Graph::backward.

#include <algorithm>
#include <cmath>
#include <functional>
#include <random>
#include <string>
#include <vector>

#include "instatune/graph.hpp"

namespace instatune::testing {

struct GradCheckResult {
  double worst = 0.0;  // max |analytic - numeric| / (max(|a|, |n|) + floor)
  std::string where;
};

/// |a - n| <= tol * max(|a|, |n|) + floor passes; `worst` reports the scaled
/// error so callers can compare against `tol`.
inline GradCheckResult check_gradients(Graph& g, NodeId out,
                                       const std::vector<Parameter*>& params,
                                       double step = 1e-5, double tol = 1e-4,
                                       double floor = 1e-8) {
  g.evaluate();
  for (auto* p : params) p->zero_grad();
  g.backward(out);
  GradCheckResult res;
  for (auto* p : params) {
    auto w = p->value.data();
    for (std::size_t k = 0; k < w.size(); ++k) {
      const double saved = w[k];
      w[k] = saved + step;
      g.evaluate();
      const double plus = g.scalar(out);
      w[k] = saved - step;
      g.evaluate();
      const double minus = g.scalar(out);
      w[k] = saved;
      const double numeric = (plus - minus) / (2.0 * step);
      const double analytic = p->grad[k];
      const double scale = std::max(std::abs(analytic), std::abs(numeric));
      const double err = std::abs(analytic - numeric) / (scale + floor / tol);
      if (err > res.worst) {
        res.worst = err;
        res.where = p->name + "[" + std::to_string(k) + "] analytic=" +
                    std::to_string(analytic) + " numeric=" + std::to_string(numeric);
      }
    }
  }
  g.evaluate();
  return res;
}

/// Same criterion over an explicit list of (parameter, flat index) pairs,
/// for graphs too large to sweep every coordinate.
inline GradCheckResult check_gradients_at(
    Graph& g, NodeId out, const std::vector<Parameter*>& params,
    const std::vector<std::pair<Parameter*, std::size_t>>& coords,
    double step = 1e-5, double tol = 1e-4, double floor = 1e-8) {
  g.evaluate();
  for (auto* p : params) p->zero_grad();
  g.backward(out);
  GradCheckResult res;
  for (auto [p, k] : coords) {
    auto w = p->value.data();
    const double saved = w[k];
    w[k] = saved + step;
    g.evaluate();
    const double plus = g.scalar(out);
    w[k] = saved - step;
    g.evaluate();
    const double minus = g.scalar(out);
    w[k] = saved;
    const double numeric = (plus - minus) / (2.0 * step);
    const double analytic = p->grad[k];
    const double scale = std::max(std::abs(analytic), std::abs(numeric));
    const double err = std::abs(analytic - numeric) / (scale + floor / tol);
    if (err > res.worst) {
      res.worst = err;
      res.where = p->name + "[" + std::to_string(k) + "] analytic=" +
                  std::to_string(analytic) + " numeric=" + std::to_string(numeric);
    }
  }
  g.evaluate();
  return res;
}

inline Parameter random_param(std::string name, std::size_t rows,
                              std::size_t cols, std::mt19937_64& rng,
                              double scale = 1.0) {
  std::normal_distribution<double> d(0.0, scale);
  Parameter p{std::move(name), Tensor({rows, cols}), Tensor({rows, cols})};
  for (double& v : p.value.data()) v = d(rng);
  return p;
}

inline Tensor random_tensor(std::size_t rows, std::size_t cols,
                            std::mt19937_64& rng) {
  std::normal_distribution<double> d(0.0, 1.0);
  Tensor t({rows, cols});
  for (double& v : t.data()) v = d(rng);
  return t;
}

/// Scalar readout sum(x * R) with a fixed random R, so every output element
/// carries a distinct weight.
inline NodeId random_readout(Graph& g, NodeId x, std::mt19937_64& rng) {
  return g.sum(g.mul(x, g.constant(random_tensor(g.rows(x), g.cols(x), rng))));
}

}  // namespace instatune::testing
