// SPDX-License-Identifier: Apache-2.0
#pragma once

// Two-objective sub-network search: maximize accuracy, minimize MACs.

#include <cstddef>
#include <cstdint>
#include <functional>
#include <optional>
#include <span>
#include <string>
#include <vector>

#include "instatune/cost.hpp"
#include "instatune/space.hpp"

namespace instatune {

struct Candidate {
  ArchEncoding encoding;
  SubnetConfig config;
  double accuracy = 0.0;
  std::uint64_t macs = 0;
  std::size_t index = 0;      // evaluation order within the run
  std::size_t iteration = 0;  // generation or LINAS round that proposed it
};

/// a has >= accuracy and <= MACs, strictly better in at least one.
bool dominates(const Candidate& a, const Candidate& b);

/// Non-dominated subset sorted by MACs ascending; ties keep input order.
std::vector<Candidate> pareto_front(std::span<const Candidate> candidates);

struct HvReference {
  double accuracy = 0.0;
  double macs = 0.0;
  friend bool operator==(const HvReference&, const HvReference&) = default;
};

/// Area dominated by the front of `candidates` and bounded by `ref`.
/// Throws std::invalid_argument naming any front member that does not
/// strictly dominate the reference point.
double hypervolume(std::span<const Candidate> candidates, const HvReference& ref);

/// Default reference: zero accuracy, 1.01 x the maximal config's MACs.
HvReference default_reference(const SearchSpace& space, const CostOptions& cost = {});

/// Accuracy objective. Called concurrently from several threads; must be
/// safe for that and deterministic.
using AccuracyFn = std::function<double(const SubnetConfig&)>;

struct Evaluator {
  AccuracyFn accuracy;
  CostOptions cost;
  std::optional<HvReference> reference;  // default_reference() when empty
};

struct SearchHistory {
  std::string algorithm;
  std::uint64_t seed = 0;
  HvReference reference;
  std::vector<Candidate> evaluated;
  std::vector<double> hypervolume;  // after each evaluation

  std::vector<Candidate> front() const { return pareto_front(evaluated); }
  double final_hypervolume() const {
    return hypervolume.empty() ? 0.0 : hypervolume.back();
  }
};

/// Draws `count` distinct canonical encodings not in `exclude`. When the
/// rest of the space is no larger than `count` it is enumerated and
/// shuffled instead, so the result is exhaustive.
std::vector<ArchEncoding> draw_unique(const SearchSpace& space, std::mt19937_64& rng,
                                      std::size_t count,
                                      const std::vector<ArchEncoding>& exclude = {});

SearchHistory random_search(const SearchSpace& space, const Evaluator& eval,
                            std::size_t budget, std::uint64_t seed);

struct NsgaConfig {
  std::size_t population = 12;
  std::size_t generations = 10;
  // Per-gene resample probability; nullopt means 1 / gene count.
  std::optional<double> mutation;
  double crossover = 0.9;
  std::size_t duplicate_retries = 10;
  void validate() const;
  friend bool operator==(const NsgaConfig&, const NsgaConfig&) = default;
};

SearchHistory nsga2(const SearchSpace& space, const Evaluator& eval,
                    const NsgaConfig& config, std::uint64_t seed);

struct LinasConfig {
  std::size_t budget = 60;
  std::size_t batch = 10;  // B
  NsgaConfig inner{.population = 20, .generations = 20, .mutation = {},
                   .crossover = 0.9, .duplicate_retries = 10};
  double ridge = 1e-3;
  void validate() const;
  friend bool operator==(const LinasConfig&, const LinasConfig&) = default;
};

SearchHistory linas(const SearchSpace& space, const Evaluator& eval,
                    const LinasConfig& config, std::uint64_t seed);

// ---------------------------------------------------------------------------
// Building blocks, exposed for testing.

/// Fronts of (maximize objective 0, minimize objective 1) points; each
/// front lists indices in input order.
struct Point {
  double accuracy = 0.0;
  double macs = 0.0;
};
bool dominates(const Point& a, const Point& b);
std::vector<std::vector<std::size_t>> non_dominated_sort(std::span<const Point> points);
/// Crowding distance of the members of one front; boundary members get
/// +infinity.
std::vector<double> crowding_distance(std::span<const Point> points,
                                      std::span<const std::size_t> front);

/// Ridge regression on one-hot active-gene features plus an intercept.
class RidgePredictor {
 public:
  RidgePredictor(const SearchSpace& space, double ridge);
  std::vector<double> features(const ArchEncoding& enc) const;
  /// Returns false (and stays unfitted) with fewer than two samples.
  bool fit(std::span<const ArchEncoding> x, std::span<const double> y);
  bool fitted() const { return !weights_.empty(); }
  double predict(const ArchEncoding& enc) const;
  const std::vector<double>& weights() const { return weights_; }

 private:
  const SearchSpace* space_;
  double ridge_;
  std::vector<std::size_t> offsets_;
  std::size_t width_ = 0;
  std::vector<double> weights_;
};

/// One-sided sign test: P(X >= wins) for X ~ Binomial(trials, 1/2).
double sign_test_p(std::size_t wins, std::size_t trials);

/// Deterministic accuracy proxy, additive over active genes: a concave
/// capacity score per layer plus fixed per-value jitter.
AccuracyFn synthetic_accuracy(const SearchSpace& space, std::uint64_t salt = 0);

}  // namespace instatune
