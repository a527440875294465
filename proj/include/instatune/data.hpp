// SPDX-License-Identifier: Apache-2.0
#pragma once

#include <cstdint>
#include <vector>

#include "instatune/model.hpp"

namespace instatune {

struct Dataset {
  TokenBatch tokens;
  std::vector<std::size_t> labels;

  std::size_t size() const { return labels.size(); }
};

/// Marker-count classification task. Tokens [0, C) are markers, the rest are
/// filler; the label is the marker that occurs most often (ties are
/// rejected). Sample i is drawn conditioned on label i mod C, so every class
/// appears equally often.
Dataset make_marker_task(const ArchDims& dims, std::size_t count,
                         std::uint64_t seed, double marker_prob = 0.7);

/// Rows [begin, begin + count) as a batch.
Dataset slice_dataset(const Dataset& data, std::size_t begin, std::size_t count);
Dataset select_dataset(const Dataset& data, const std::vector<std::size_t>& rows);

}  // namespace instatune
