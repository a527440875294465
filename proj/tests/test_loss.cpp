// SPDX-License-Identifier: Apache-2.0
#include <cmath>
#include <random>

#include "doctest.h"
#include "gradcheck.hpp"
#include "instatune/loss.hpp"

using namespace instatune;
using instatune::testing::random_param;

namespace {

Tensor row(std::vector<double> v) {
  Tensor t({1, v.size()});
  for (std::size_t i = 0; i < v.size(); ++i) t[i] = v[i];
  return t;
}

// Plain-double oracle, one row at a time.
std::vector<double> log_softmax_row(const std::vector<double>& x) {
  double m = x[0];
  for (double v : x) m = std::max(m, v);
  double z = 0.0;
  for (double v : x) z += std::exp(v - m);
  z = std::log(z) + m;
  std::vector<double> out;
  for (double v : x) out.push_back(v - z);
  return out;
}

std::vector<double> row_of(const Tensor& t, std::size_t r) {
  std::vector<double> v;
  for (std::size_t c = 0; c < t.cols(); ++c) v.push_back(t.at(r, c));
  return v;
}

double oracle_ce(const Tensor& logits, const std::vector<std::size_t>& y) {
  double s = 0.0;
  for (std::size_t r = 0; r < logits.rows(); ++r)
    s -= log_softmax_row(row_of(logits, r))[y[r]];
  return s / static_cast<double>(logits.rows());
}

double oracle_kl(const Tensor& s, const Tensor& t, double rho) {
  double total = 0.0;
  for (std::size_t r = 0; r < s.rows(); ++r) {
    auto sr = row_of(s, r), tr = row_of(t, r);
    for (auto& v : sr) v /= rho;
    for (auto& v : tr) v /= rho;
    const auto ls = log_softmax_row(sr), lt = log_softmax_row(tr);
    for (std::size_t c = 0; c < ls.size(); ++c)
      total += std::exp(lt[c]) * (lt[c] - ls[c]);
  }
  return rho * rho * total / static_cast<double>(s.rows());
}

struct Setup {
  Parameter super, teacher;
  std::vector<Parameter> subs;
  std::vector<std::size_t> labels;
};

Setup make_setup(std::uint64_t seed, std::size_t m, std::size_t rows = 5,
                 std::size_t classes = 4) {
  std::mt19937_64 rng(seed);
  Setup s{random_param("super", rows, classes, rng, 2.0),
          random_param("teacher", rows, classes, rng, 2.0), {}, {}};
  for (std::size_t i = 0; i < m; ++i)
    s.subs.push_back(random_param("sub" + std::to_string(i), rows, classes, rng, 2.0));
  std::uniform_int_distribution<std::size_t> lab(0, classes - 1);
  for (std::size_t r = 0; r < rows; ++r) s.labels.push_back(lab(rng));
  return s;
}

struct Built {
  Graph g;
  LossTerms terms;
};

void build(Built& b, Setup& s, const LossWeights& w) {
  StepLogits step;
  step.supernet = b.g.parameter(s.super);
  for (auto& p : s.subs) step.subnets.push_back(b.g.parameter(p));
  if (w.gamma == 1) step.teacher = b.g.parameter(s.teacher);
  step.labels = s.labels;
  b.terms = instatune_loss(b.g, step, w);
  b.g.evaluate();
}

double total_of(Setup& s, const LossWeights& w) {
  Built b;
  build(b, s, w);
  return b.g.scalar(b.terms.total);
}

}  // namespace

TEST_CASE("cross-entropy frozen values") {
  CHECK(cross_entropy(row({0, 0, 0, 0}), {2}) == doctest::Approx(std::log(4.0)).epsilon(1e-15));
  CHECK(std::abs(cross_entropy(row({1, 2, 3}), {2}) - 0.407605964444380304483) < 1e-15);
  CHECK(std::abs(cross_entropy(row({0.5, -1.25, 2.0, 0.0}), {1}) -
                 3.58449861260366261909) < 1e-14);
  CHECK_THROWS_AS(cross_entropy(row({1, 2}), {2}), std::invalid_argument);
  CHECK_THROWS_AS(cross_entropy(row({1, 2}), {0, 1}), std::invalid_argument);
}

TEST_CASE("distillation KL frozen values") {
  const Tensor s = row({1, 2, 3}), t = row({3, 2, 1});
  CHECK(std::abs(kl_distill(s, t, 1.0) - 1.15042076520888286306) < 1e-14);
  CHECK(std::abs(kl_distill(s, t, 2.0) - 1.28062667131922579552) < 1e-14);
  CHECK(std::abs(kl_distill(s, t, 4.0) - 1.31962991215385665842) < 1e-14);
  const Tensor s2 = row({0.3, -0.7, 1.1, 0.0}), t2 = row({-0.2, 0.9, 0.4, 1.5});
  CHECK(std::abs(kl_distill(s2, t2, 1.0) - 0.53657865419207805515) < 1e-14);
  CHECK(std::abs(kl_distill(s2, t2, 3.0) - 0.57748113745017842448) < 1e-14);
  // rho^2 KL tends to half the variance of (t - s) over classes: 4/3 here.
  CHECK(std::abs(kl_distill(s, t, 1000.0) - 4.0 / 3.0) < 1e-6);
  CHECK(kl_distill(s, s, 1.0) == 0.0);
  CHECK_THROWS_AS(kl_distill(s, t, 0.0), std::invalid_argument);
}

TEST_CASE("loss matches the term-by-term oracle") {
  for (int gamma : {0, 1})
    for (std::size_t m : {0u, 1u, 3u}) {
      auto s = make_setup(gamma * 10 + m, m);
      LossWeights w{.alpha = 0.3, .gamma = gamma, .rho = 2.0, .samples = m};
      Built b;
      build(b, s, w);
      double ce = oracle_ce(s.super.value, s.labels);
      double kd = gamma ? oracle_kl(s.super.value, s.teacher.value, w.rho) : 0.0;
      for (const auto& sub : s.subs) {
        ce += oracle_ce(sub.value, s.labels);
        kd += gamma ? oracle_kl(sub.value, s.teacher.value, w.rho)
                    : oracle_kl(sub.value, s.super.value, w.rho);
      }
      const double expected = w.alpha * ce + (1 - w.alpha) * kd;
      CHECK(std::abs(b.g.scalar(b.terms.total) - expected) < 1e-12);
      const auto br = read_breakdown(b.g, b.terms);
      CHECK(br.ce_subnets.size() == m);
      if (gamma == 0) {
        CHECK(br.kl_supernet_teacher == 0.0);
        CHECK_FALSE(b.terms.kl_supernet_teacher.has_value());
        CHECK(b.terms.kl_subnet_teacher.empty());
        CHECK(b.terms.kl_subnet_supernet.size() == m);
      } else {
        CHECK(b.terms.kl_subnet_supernet.empty());
        for (double v : br.kl_subnet_supernet) CHECK(v == 0.0);
        CHECK(b.terms.kl_subnet_teacher.size() == m);
      }
    }
}

TEST_CASE("alpha = 1 leaves only the cross-entropy sum") {
  for (int gamma : {0, 1}) {
    auto s = make_setup(3 + gamma, 2);
    Built b;
    build(b, s, {.alpha = 1.0, .gamma = gamma, .rho = 1.0, .samples = 2});
    const auto br = read_breakdown(b.g, b.terms);
    CHECK(br.total == br.ce_supernet + br.ce_subnets[0] + br.ce_subnets[1]);
  }
}

TEST_CASE("total is affine in alpha") {
  for (int gamma : {0, 1}) {
    auto s = make_setup(20 + gamma, 2);
    auto at = [&](double a) {
      return total_of(s, {.alpha = a, .gamma = gamma, .rho = 1.5, .samples = 2});
    };
    const double t0 = at(0.0), t1 = at(1.0), tm = at(0.3);
    CHECK(std::abs(tm - (0.7 * t0 + 0.3 * t1)) < 1e-12);
  }
}

TEST_CASE("loss is non-negative and zero-KL for identical students") {
  for (std::uint64_t seed = 0; seed < 30; ++seed) {
    auto s = make_setup(seed, 2);
    CHECK(total_of(s, {.alpha = 0.3, .gamma = 1, .samples = 2}) >= 0.0);
    CHECK(total_of(s, {.alpha = 0.0, .gamma = 0, .samples = 2}) >= 0.0);
  }
  auto s = make_setup(1, 2);
  for (auto& sub : s.subs) sub.value = s.super.value;
  Built b;
  build(b, s, {.alpha = 0.3, .gamma = 0, .samples = 2});
  for (double v : read_breakdown(b.g, b.terms).kl_subnet_supernet) CHECK(v == 0.0);
}

TEST_CASE("teacher side receives no gradient") {
  auto s = make_setup(5, 2);
  Built b;
  build(b, s, {.alpha = 0.3, .gamma = 1, .rho = 2.0, .samples = 2});
  s.teacher.zero_grad();
  b.g.backward(b.terms.total);
  for (double v : s.teacher.grad.data()) CHECK(v == 0.0);
}

TEST_CASE("gamma = 0 does not push the super-network toward its students") {
  auto s = make_setup(6, 2);
  const LossWeights w{.alpha = 0.3, .gamma = 0, .rho = 1.0, .samples = 2};
  Built full;
  build(full, s, w);
  s.super.zero_grad();
  full.g.backward(full.terms.total);
  const Tensor grad_full = s.super.grad;

  Graph g;
  NodeId ce = g.scale(cross_entropy(g, g.parameter(s.super), s.labels), w.alpha);
  g.evaluate();
  s.super.zero_grad();
  g.backward(ce);
  CHECK(grad_full == s.super.grad);
}

TEST_CASE("loss gradients match finite differences") {
  for (std::uint64_t seed = 0; seed < 20; ++seed) {
    const int gamma = static_cast<int>(seed % 2);
    auto s = make_setup(seed + 40, 2, 3, 4);
    Built b;
    build(b, s, {.alpha = 0.4, .gamma = gamma, .rho = 1.7, .samples = 2});
    // With gamma = 0 the super-network is a detached teacher inside the
    // sub-network terms, so finite differences only see the sub-networks.
    std::vector<Parameter*> ps{&s.subs[0], &s.subs[1]};
    if (gamma == 1) ps.push_back(&s.super);
    const auto res = instatune::testing::check_gradients(b.g, b.terms.total, ps);
    CHECK_MESSAGE(res.worst < 1.0, res.where);
  }
}

TEST_CASE("gate and teacher mismatch is rejected") {
  auto s = make_setup(0, 1);
  Graph g;
  StepLogits step{g.parameter(s.super), {g.parameter(s.subs[0])}, std::nullopt, s.labels};
  CHECK_THROWS_AS(instatune_loss(g, step, {.gamma = 1}), std::invalid_argument);
  step.teacher = g.parameter(s.teacher);
  CHECK_THROWS_AS(instatune_loss(g, step, {.gamma = 0}), std::invalid_argument);
  CHECK_THROWS_AS(instatune_loss(g, step, {.alpha = 1.5, .gamma = 1}), std::invalid_argument);
  CHECK_THROWS_AS(instatune_loss(g, step, {.gamma = 2}), std::invalid_argument);
}
