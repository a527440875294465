// SPDX-License-Identifier: Apache-2.0
#include "instatune/data.hpp"

#include <algorithm>
#include <random>
#include <stdexcept>

namespace instatune {

Dataset make_marker_task(const ArchDims& dims, std::size_t count,
                         std::uint64_t seed, double marker_prob) {
  if (dims.vocab <= dims.classes)
    throw std::invalid_argument("marker task needs filler tokens (vocab > classes)");
  std::mt19937_64 rng(seed);
  std::bernoulli_distribution is_marker(marker_prob);
  std::uniform_int_distribution<std::size_t> marker(0, dims.classes - 1);
  std::uniform_int_distribution<std::size_t> filler(dims.classes, dims.vocab - 1);

  Dataset data;
  data.tokens.reserve(count);
  data.labels.reserve(count);
  std::vector<std::size_t> counts(dims.classes);
  for (std::size_t i = 0; i < count; ++i) {
    const std::size_t target = i % dims.classes;
    while (true) {
      std::vector<std::size_t> seq(dims.seq_len);
      std::fill(counts.begin(), counts.end(), 0);
      for (auto& t : seq) {
        t = is_marker(rng) ? marker(rng) : filler(rng);
        if (t < dims.classes) ++counts[t];
      }
      auto best = std::max_element(counts.begin(), counts.end());
      if (std::count(counts.begin(), counts.end(), *best) != 1) continue;
      if (static_cast<std::size_t>(best - counts.begin()) != target) continue;
      data.tokens.push_back(std::move(seq));
      data.labels.push_back(target);
      break;
    }
  }
  return data;
}

Dataset slice_dataset(const Dataset& data, std::size_t begin, std::size_t count) {
  if (begin + count > data.size()) throw std::out_of_range("slice_dataset");
  Dataset out;
  out.tokens.assign(data.tokens.begin() + begin, data.tokens.begin() + begin + count);
  out.labels.assign(data.labels.begin() + begin, data.labels.begin() + begin + count);
  return out;
}

Dataset select_dataset(const Dataset& data, const std::vector<std::size_t>& rows) {
  Dataset out;
  out.tokens.reserve(rows.size());
  out.labels.reserve(rows.size());
  for (auto r : rows) {
    out.tokens.push_back(data.tokens.at(r));
    out.labels.push_back(data.labels.at(r));
  }
  return out;
}

}  // namespace instatune
