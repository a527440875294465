// SPDX-License-Identifier: Apache-2.0
#include "instatune/search.hpp"

#include <Eigen/Dense>

#include <algorithm>
#include <cmath>
#include <limits>
#include <map>
#include <numeric>
#include <set>
#include <stdexcept>

namespace instatune {

bool dominates(const Point& a, const Point& b) {
  return a.accuracy >= b.accuracy && a.macs <= b.macs &&
         (a.accuracy > b.accuracy || a.macs < b.macs);
}

bool dominates(const Candidate& a, const Candidate& b) {
  return dominates(Point{a.accuracy, static_cast<double>(a.macs)},
                   Point{b.accuracy, static_cast<double>(b.macs)});
}

std::vector<Candidate> pareto_front(std::span<const Candidate> candidates) {
  // Sort by MACs ascending, accuracy descending; a point survives when it
  // beats the best accuracy seen at strictly lower MACs (or ties the
  // current best exactly).
  std::vector<std::size_t> order(candidates.size());
  std::iota(order.begin(), order.end(), 0);
  std::stable_sort(order.begin(), order.end(), [&](std::size_t i, std::size_t j) {
    const auto &a = candidates[i], &b = candidates[j];
    if (a.macs != b.macs) return a.macs < b.macs;
    return a.accuracy > b.accuracy;
  });
  std::vector<Candidate> front;
  for (std::size_t i : order) {
    const Candidate& c = candidates[i];
    if (front.empty()) {
      front.push_back(c);
      continue;
    }
    const Candidate& last = front.back();
    if (c.accuracy > last.accuracy ||
        (c.accuracy == last.accuracy && c.macs == last.macs))
      front.push_back(c);
  }
  return front;
}

double hypervolume(std::span<const Candidate> candidates, const HvReference& ref) {
  auto front = pareto_front(candidates);
  for (const auto& c : front)
    if (!(c.accuracy > ref.accuracy && static_cast<double>(c.macs) < ref.macs))
      throw std::invalid_argument("hypervolume: candidate " + c.encoding.to_string() +
                                  " (accuracy " + std::to_string(c.accuracy) +
                                  ", macs " + std::to_string(c.macs) +
                                  ") does not dominate the reference point");
  // Front is MACs ascending, so accuracy ascending; walk it from the top.
  double area = 0.0, prev = ref.macs;
  for (auto it = front.rbegin(); it != front.rend(); ++it) {
    const double m = static_cast<double>(it->macs);
    area += (it->accuracy - ref.accuracy) * (prev - m);
    prev = m;
  }
  return area;
}

HvReference default_reference(const SearchSpace& space, const CostOptions& cost) {
  return {0.0, 1.01 * static_cast<double>(macs(space.dims(), space.maximal(), cost).macs)};
}

// ---------------------------------------------------------------------------

std::vector<ArchEncoding> draw_unique(const SearchSpace& space, std::mt19937_64& rng,
                                      std::size_t count,
                                      const std::vector<ArchEncoding>& exclude) {
  std::set<ArchEncoding> taken(exclude.begin(), exclude.end());
  std::vector<ArchEncoding> out;
  if (count == 0) return out;
  const auto size = space.size();
  if (size && *size <= kDefaultEnumerationCap && *size - std::min<std::uint64_t>(*size, taken.size()) <= count) {
    for (const auto& c : space.enumerate()) {
      auto e = space.encode(c);
      if (!taken.contains(e)) out.push_back(std::move(e));
    }
    std::shuffle(out.begin(), out.end(), rng);
    return out;
  }
  const std::size_t cap = 100 * count + 1000;
  for (std::size_t attempt = 0; attempt < cap && out.size() < count; ++attempt) {
    auto e = space.sample_encoding(rng);
    if (taken.insert(e).second) out.push_back(std::move(e));
  }
  return out;
}

namespace {

// One search run: evaluation cache, budget and hypervolume trace.
class Run {
 public:
  Run(const SearchSpace& space, const Evaluator& eval, std::string algorithm,
      std::uint64_t seed, std::size_t budget)
      : space_(space), eval_(eval), budget_(budget) {
    if (!eval.accuracy) throw std::invalid_argument("search: evaluator has no accuracy function");
    history.algorithm = std::move(algorithm);
    history.seed = seed;
    history.reference = eval.reference.value_or(default_reference(space, eval.cost));
  }

  std::size_t size() const { return history.evaluated.size(); }
  std::size_t remaining() const { return budget_ - size(); }
  bool contains(const ArchEncoding& e) const { return index_.contains(e); }
  const Candidate& at(const ArchEncoding& e) const {
    return history.evaluated[index_.at(e)];
  }
  std::vector<ArchEncoding> encodings() const {
    std::vector<ArchEncoding> out;
    for (const auto& c : history.evaluated) out.push_back(c.encoding);
    return out;
  }

  /// Evaluates the uncached members of `batch` (up to the budget) in
  /// parallel and appends them in batch order.
  void evaluate(const std::vector<ArchEncoding>& batch, std::size_t iteration) {
    std::vector<Candidate> fresh;
    std::set<ArchEncoding> in_batch;
    for (const auto& raw : batch) {
      if (fresh.size() >= remaining()) break;
      ArchEncoding e = space_.canonical(raw);
      if (contains(e) || !in_batch.insert(e).second) continue;
      Candidate c;
      c.config = space_.decode(e);
      c.encoding = std::move(e);
      c.iteration = iteration;
      fresh.push_back(std::move(c));
    }
    std::vector<std::string> errors(fresh.size());
#pragma omp parallel for schedule(dynamic)
    for (long long i = 0; i < static_cast<long long>(fresh.size()); ++i) {
      try {
        auto& c = fresh[static_cast<std::size_t>(i)];
        c.accuracy = eval_.accuracy(c.config);
        c.macs = macs(space_.dims(), c.config, eval_.cost).macs;
      } catch (const std::exception& ex) {
        errors[static_cast<std::size_t>(i)] = ex.what();
      }
    }
    for (std::size_t i = 0; i < fresh.size(); ++i)
      if (!errors[i].empty())
        throw std::runtime_error("evaluating " + fresh[i].config.to_string() + ": " +
                                 errors[i]);
    for (auto& c : fresh) {
      c.index = size();
      index_.emplace(c.encoding, c.index);
      front_.push_back(c);
      front_ = pareto_front(front_);
      history.evaluated.push_back(std::move(c));
      history.hypervolume.push_back(clipped_hypervolume());
    }
  }

  SearchHistory history;

 private:
  double clipped_hypervolume() const {
    std::vector<Candidate> inside;
    for (const auto& c : front_)
      if (c.accuracy > history.reference.accuracy &&
          static_cast<double>(c.macs) < history.reference.macs)
        inside.push_back(c);
    return hypervolume(inside, history.reference);
  }

  const SearchSpace& space_;
  const Evaluator& eval_;
  std::size_t budget_;
  std::map<ArchEncoding, std::size_t> index_;
  std::vector<Candidate> front_;
};

}  // namespace

SearchHistory random_search(const SearchSpace& space, const Evaluator& eval,
                            std::size_t budget, std::uint64_t seed) {
  if (budget == 0) throw std::invalid_argument("random_search: budget must be >= 1");
  Run run(space, eval, "random", seed, budget);
  std::mt19937_64 rng(seed);
  run.evaluate(draw_unique(space, rng, budget), 0);
  return std::move(run.history);
}

// ---------------------------------------------------------------------------
// NSGA-II

std::vector<std::vector<std::size_t>> non_dominated_sort(std::span<const Point> pts) {
  const std::size_t n = pts.size();
  std::vector<std::vector<std::size_t>> dominated(n);
  std::vector<std::size_t> count(n, 0);
  std::vector<std::vector<std::size_t>> fronts(1);
  for (std::size_t i = 0; i < n; ++i) {
    for (std::size_t j = 0; j < n; ++j) {
      if (i == j) continue;
      if (dominates(pts[i], pts[j]))
        dominated[i].push_back(j);
      else if (dominates(pts[j], pts[i]))
        ++count[i];
    }
    if (count[i] == 0) fronts[0].push_back(i);
  }
  if (n == 0) return {};
  while (true) {
    std::vector<std::size_t> next;
    for (std::size_t i : fronts.back())
      for (std::size_t j : dominated[i])
        if (--count[j] == 0) next.push_back(j);
    if (next.empty()) break;
    std::sort(next.begin(), next.end());
    fronts.push_back(std::move(next));
  }
  return fronts;
}

std::vector<double> crowding_distance(std::span<const Point> pts,
                                      std::span<const std::size_t> front) {
  const std::size_t m = front.size();
  std::vector<double> dist(m, 0.0);
  if (m <= 2) {
    std::fill(dist.begin(), dist.end(), std::numeric_limits<double>::infinity());
    return dist;
  }
  for (int obj = 0; obj < 2; ++obj) {
    auto value = [&](std::size_t k) {
      return obj == 0 ? pts[front[k]].accuracy : pts[front[k]].macs;
    };
    std::vector<std::size_t> order(m);
    std::iota(order.begin(), order.end(), 0);
    std::stable_sort(order.begin(), order.end(),
                     [&](std::size_t a, std::size_t b) { return value(a) < value(b); });
    dist[order.front()] = dist[order.back()] = std::numeric_limits<double>::infinity();
    const double span = value(order.back()) - value(order.front());
    if (span <= 0.0) continue;
    for (std::size_t k = 1; k + 1 < m; ++k)
      dist[order[k]] += (value(order[k + 1]) - value(order[k - 1])) / span;
  }
  return dist;
}

void NsgaConfig::validate() const {
  if (population < 2 || population % 2 != 0)
    throw std::invalid_argument("nsga2: population must be even and >= 2");
  if (generations < 1) throw std::invalid_argument("nsga2: generations must be >= 1");
  if (mutation && !(*mutation >= 0.0 && *mutation <= 1.0))
    throw std::invalid_argument("nsga2: mutation probability must lie in [0, 1]");
  if (!(crossover >= 0.0 && crossover <= 1.0))
    throw std::invalid_argument("nsga2: crossover probability must lie in [0, 1]");
}

namespace {

using BatchObjective =
    std::function<std::vector<Point>(const std::vector<ArchEncoding>&, std::size_t)>;

// Rank and crowding for every member; rank 0 is the first front.
struct Fitness {
  std::vector<std::size_t> rank;
  std::vector<double> crowding;
};

Fitness fitness(std::span<const Point> pts) {
  Fitness f{std::vector<std::size_t>(pts.size()), std::vector<double>(pts.size())};
  auto fronts = non_dominated_sort(pts);
  for (std::size_t r = 0; r < fronts.size(); ++r) {
    auto cd = crowding_distance(pts, fronts[r]);
    for (std::size_t k = 0; k < fronts[r].size(); ++k) {
      f.rank[fronts[r][k]] = r;
      f.crowding[fronts[r][k]] = cd[k];
    }
  }
  return f;
}

bool better(const Fitness& f, std::size_t a, std::size_t b) {
  if (f.rank[a] != f.rank[b]) return f.rank[a] < f.rank[b];
  if (f.crowding[a] != f.crowding[b]) return f.crowding[a] > f.crowding[b];
  return a < b;
}

// Indices of `pts` ordered by rank, then crowding (descending), then index.
std::vector<std::size_t> survival_order(std::span<const Point> pts) {
  const Fitness f = fitness(pts);
  std::vector<std::size_t> order(pts.size());
  std::iota(order.begin(), order.end(), 0);
  std::sort(order.begin(), order.end(),
            [&](std::size_t a, std::size_t b) { return better(f, a, b); });
  return order;
}

void mutate(const SearchSpace& space, ArchEncoding& e, double p, std::mt19937_64& rng) {
  std::bernoulli_distribution flip(p);
  for (std::size_t g = 0; g < e.genes.size(); ++g)
    if (flip(rng))
      e.genes[g] = static_cast<std::uint32_t>(std::uniform_int_distribution<std::size_t>(
          0, space.gene_cardinality(g) - 1)(rng));
}

// Returns the final population.
std::vector<ArchEncoding> nsga_core(const SearchSpace& space, const NsgaConfig& cfg,
                                    std::mt19937_64& rng, std::vector<ArchEncoding> pop,
                                    const BatchObjective& objective) {
  const double pm = cfg.mutation.value_or(1.0 / static_cast<double>(space.gene_count()));
  const std::size_t p = cfg.population;
  std::vector<Point> pts = objective(pop, 0);
  for (std::size_t gen = 1; gen <= cfg.generations; ++gen) {
    const Fitness f = fitness(pts);
    std::uniform_int_distribution<std::size_t> pick(0, p - 1);
    std::bernoulli_distribution do_cross(cfg.crossover), coin(0.5);
    auto tournament = [&] {
      const std::size_t a = pick(rng), b = pick(rng);
      return better(f, a, b) ? a : b;
    };
    std::set<ArchEncoding> seen(pop.begin(), pop.end());
    std::vector<ArchEncoding> kids;
    while (kids.size() < p) {
      ArchEncoding c1 = pop[tournament()], c2 = pop[tournament()];
      if (do_cross(rng))
        for (std::size_t g = 0; g < c1.genes.size(); ++g)
          if (coin(rng)) std::swap(c1.genes[g], c2.genes[g]);
      for (ArchEncoding* c : {&c1, &c2}) {
        mutate(space, *c, pm, rng);
        *c = space.canonical(*c);
        for (std::size_t t = 0; t < cfg.duplicate_retries && seen.contains(*c); ++t) {
          mutate(space, *c, std::max(pm, 1.0 / static_cast<double>(c->genes.size())), rng);
          *c = space.canonical(*c);
        }
        seen.insert(*c);
        if (kids.size() < p) kids.push_back(*c);
      }
    }
    std::vector<Point> kid_pts = objective(kids, gen);
    std::vector<ArchEncoding> all = pop;
    all.insert(all.end(), kids.begin(), kids.end());
    std::vector<Point> all_pts = pts;
    all_pts.insert(all_pts.end(), kid_pts.begin(), kid_pts.end());
    const auto order = survival_order(all_pts);
    pop.clear();
    pts.clear();
    for (std::size_t k = 0; k < p; ++k) {
      pop.push_back(all[order[k]]);
      pts.push_back(all_pts[order[k]]);
    }
  }
  return pop;
}

std::vector<ArchEncoding> initial_population(const SearchSpace& space, std::mt19937_64& rng,
                                             std::size_t p,
                                             std::vector<ArchEncoding> seeds = {}) {
  if (seeds.size() > p) seeds.resize(p);
  auto pop = std::move(seeds);
  auto fresh = draw_unique(space, rng, p - pop.size(), pop);
  pop.insert(pop.end(), fresh.begin(), fresh.end());
  while (pop.size() < p) pop.push_back(space.canonical(space.sample_encoding(rng)));
  return pop;
}

}  // namespace

SearchHistory nsga2(const SearchSpace& space, const Evaluator& eval,
                    const NsgaConfig& config, std::uint64_t seed) {
  config.validate();
  Run run(space, eval, "nsga2", seed,
          config.population * (config.generations + 1));
  std::mt19937_64 rng(seed);
  auto pop = initial_population(space, rng, config.population);
  nsga_core(space, config, rng, std::move(pop),
            [&](const std::vector<ArchEncoding>& batch, std::size_t gen) {
              run.evaluate(batch, gen);
              std::vector<Point> pts;
              for (const auto& e : batch) {
                const auto& c = run.at(space.canonical(e));
                pts.push_back({c.accuracy, static_cast<double>(c.macs)});
              }
              return pts;
            });
  return std::move(run.history);
}

// ---------------------------------------------------------------------------
// LINAS

RidgePredictor::RidgePredictor(const SearchSpace& space, double ridge)
    : space_(&space), ridge_(ridge) {
  if (!(ridge > 0.0)) throw std::invalid_argument("ridge coefficient must be positive");
  width_ = 1;
  for (std::size_t g = 0; g < space.gene_count(); ++g) {
    offsets_.push_back(width_);
    width_ += space.gene_cardinality(g);
  }
}

std::vector<double> RidgePredictor::features(const ArchEncoding& enc) const {
  const auto e = space_->canonical(enc);
  std::vector<double> x(width_, 0.0);
  x[0] = 1.0;
  for (std::size_t g = 0; g < e.genes.size(); ++g)
    if (space_->gene_active(e, g)) x[offsets_[g] + e.genes[g]] = 1.0;
  return x;
}

bool RidgePredictor::fit(std::span<const ArchEncoding> x, std::span<const double> y) {
  if (x.size() != y.size()) throw std::invalid_argument("ridge fit: size mismatch");
  weights_.clear();
  if (x.size() < 2) return false;
  Eigen::MatrixXd a = Eigen::MatrixXd::Zero(width_, width_);
  Eigen::VectorXd b = Eigen::VectorXd::Zero(width_);
  for (std::size_t i = 0; i < x.size(); ++i) {
    const auto f = features(x[i]);
    Eigen::Map<const Eigen::VectorXd> v(f.data(), static_cast<Eigen::Index>(width_));
    a.noalias() += v * v.transpose();
    b += y[i] * v;
  }
  a.diagonal().array() += ridge_;
  Eigen::VectorXd w = a.ldlt().solve(b);
  weights_.assign(w.data(), w.data() + w.size());
  return true;
}

double RidgePredictor::predict(const ArchEncoding& enc) const {
  if (!fitted()) throw std::logic_error("ridge predictor used before fit");
  const auto f = features(enc);
  double s = 0.0;
  for (std::size_t k = 0; k < width_; ++k) s += f[k] * weights_[k];
  return s;
}

void LinasConfig::validate() const {
  if (batch == 0) throw std::invalid_argument("linas: batch must be >= 1");
  if (budget < batch) throw std::invalid_argument("linas: budget must be >= batch");
  if (budget != batch && budget < 2 * batch)
    throw std::invalid_argument("linas: budget must be >= 2 * batch");
  if (!(ridge > 0.0)) throw std::invalid_argument("linas: ridge must be positive");
  inner.validate();
}

SearchHistory linas(const SearchSpace& space, const Evaluator& eval,
                    const LinasConfig& config, std::uint64_t seed) {
  config.validate();
  Run run(space, eval, "linas", seed, config.budget);
  std::mt19937_64 rng(seed);
  run.evaluate(draw_unique(space, rng, config.batch), 0);

  const auto space_size = space.size();
  RidgePredictor predictor(space, config.ridge);
  for (std::size_t iteration = 1; run.remaining() > 0; ++iteration) {
    if (space_size && run.size() >= *space_size) break;
    const std::size_t want = std::min(config.batch, run.remaining());
    std::vector<ArchEncoding> proposals;

    std::vector<ArchEncoding> xs = run.encodings();
    std::vector<double> ys;
    for (const auto& c : run.history.evaluated) ys.push_back(c.accuracy);
    if (predictor.fit(xs, ys)) {
      std::map<ArchEncoding, Point> seen;
      auto predicted = [&](const std::vector<ArchEncoding>& batch, std::size_t) {
        std::vector<Point> pts;
        for (const auto& raw : batch) {
          const auto e = space.canonical(raw);
          auto it = seen.find(e);
          if (it == seen.end()) {
            const double m = static_cast<double>(
                macs(space.dims(), space.decode(e), eval.cost).macs);
            it = seen.emplace(e, Point{predictor.predict(e), m}).first;
          }
          pts.push_back(it->second);
        }
        return pts;
      };
      std::vector<ArchEncoding> elite;
      for (const auto& c : run.history.front()) elite.push_back(c.encoding);
      nsga_core(space, config.inner, rng,
                initial_population(space, rng, config.inner.population, elite), predicted);

      std::vector<ArchEncoding> pool;
      std::vector<Point> pool_pts;
      for (const auto& [e, pt] : seen)
        if (!run.contains(e)) {
          pool.push_back(e);
          pool_pts.push_back(pt);
        }
      const auto order = survival_order(pool_pts);
      for (std::size_t k = 0; k < order.size() && proposals.size() < want; ++k)
        proposals.push_back(pool[order[k]]);
    }
    if (proposals.size() < want) {
      auto exclude = xs;
      exclude.insert(exclude.end(), proposals.begin(), proposals.end());
      auto fill = draw_unique(space, rng, want - proposals.size(), exclude);
      proposals.insert(proposals.end(), fill.begin(), fill.end());
    }
    if (proposals.empty()) break;
    run.evaluate(proposals, iteration);
  }
  return std::move(run.history);
}

// ---------------------------------------------------------------------------

double sign_test_p(std::size_t wins, std::size_t trials) {
  if (wins > trials) throw std::invalid_argument("sign test: wins > trials");
  double p = 0.0;
  for (std::size_t k = wins; k <= trials; ++k)
    p += std::exp(std::lgamma(trials + 1.0) - std::lgamma(k + 1.0) -
                  std::lgamma(trials - k + 1.0) - static_cast<double>(trials) * std::log(2.0));
  return std::min(1.0, p);
}

namespace {

double jitter(std::uint64_t salt, std::uint64_t gene, std::uint64_t value) {
  std::uint64_t z = salt * 0x9E3779B97F4A7C15ull + gene * 0xBF58476D1CE4E5B9ull +
                    value * 0x94D049BB133111EBull + 0x632BE59BD9B4E019ull;
  z = (z ^ (z >> 30)) * 0xBF58476D1CE4E5B9ull;
  z = (z ^ (z >> 27)) * 0x94D049BB133111EBull;
  z ^= z >> 31;
  return (static_cast<double>(z >> 11) / 9007199254740992.0 - 0.5) * 0.04;
}

}  // namespace

AccuracyFn synthetic_accuracy(const SearchSpace& space, std::uint64_t salt) {
  const ArchDims dims = space.dims();
  return [dims, salt](const SubnetConfig& c) {
    double score = 0.0;
    for (std::size_t j = 0; j < c.depth; ++j) {
      const double h = static_cast<double>(c.heads[j]) / static_cast<double>(dims.heads);
      const double f = static_cast<double>(c.ffn[j]) / static_cast<double>(dims.ffn);
      score += 0.5 * std::sqrt(h) + 0.5 * std::sqrt(f) + jitter(salt, 2 * j, c.heads[j]) +
               jitter(salt, 2 * j + 1, c.ffn[j]);
    }
    return 0.25 + 0.7 * score / static_cast<double>(dims.layers);
  };
}

}  // namespace instatune
