// SPDX-License-Identifier: Apache-2.0
#pragma once

// One small random graph per primitive op, for finite-difference checks.

#include <functional>
#include <random>
#include <utility>
#include <vector>

#include "gradcheck.hpp"
#include "instatune/kernels.hpp"

namespace instatune::testing {

using Trans = kernels::Trans;

// Builds a scalar from a primitive op applied to fresh random parameters.
using OpCase = std::function<NodeId(Graph&, std::mt19937_64&, std::vector<Parameter>&)>;

inline std::vector<std::pair<const char*, OpCase>> op_cases() {
  auto p = [](std::vector<Parameter>& store, Graph& g, std::size_t r,
              std::size_t c, std::mt19937_64& rng) {
    store.push_back(random_param("p" + std::to_string(store.size()), r, c, rng));
    return store.size() - 1;
  };
  // Parameters are bound after all have been created so addresses are stable.
  std::vector<std::pair<const char*, OpCase>> cases;
  auto add_case = [&](const char* name, std::vector<std::pair<std::size_t, std::size_t>> shapes,
                      std::function<NodeId(Graph&, std::vector<NodeId>&, std::mt19937_64&)> body) {
    cases.emplace_back(name, [=](Graph& g, std::mt19937_64& rng, std::vector<Parameter>& store) {
      store.reserve(shapes.size());
      for (auto [r, c] : shapes) p(store, g, r, c, rng);
      std::vector<NodeId> ids;
      for (auto& param : store) ids.push_back(g.parameter(param));
      return random_readout(g, body(g, ids, rng), rng);
    });
  };
  add_case("matmul", {{3, 4}, {4, 2}}, [](Graph& g, auto& v, auto&) { return g.matmul(v[0], v[1]); });
  add_case("matmul_ta", {{4, 3}, {4, 2}}, [](Graph& g, auto& v, auto&) { return g.matmul(v[0], v[1], Trans::yes, Trans::no); });
  add_case("matmul_tb", {{3, 4}, {2, 4}}, [](Graph& g, auto& v, auto&) { return g.matmul(v[0], v[1], Trans::no, Trans::yes); });
  add_case("matmul_tab", {{4, 3}, {2, 4}}, [](Graph& g, auto& v, auto&) { return g.matmul(v[0], v[1], Trans::yes, Trans::yes); });
  add_case("add_broadcast", {{4, 3}, {1, 3}}, [](Graph& g, auto& v, auto&) { return g.add(v[0], v[1]); });
  add_case("add_tiled", {{6, 3}, {2, 3}}, [](Graph& g, auto& v, auto&) { return g.add(v[0], v[1]); });
  add_case("sub", {{3, 3}, {3, 3}}, [](Graph& g, auto& v, auto&) { return g.sub(v[0], v[1]); });
  add_case("mul", {{3, 2}, {3, 2}}, [](Graph& g, auto& v, auto&) { return g.mul(v[0], v[1]); });
  add_case("scale", {{2, 5}}, [](Graph& g, auto& v, auto&) { return g.scale(v[0], -1.7); });
  add_case("softmax", {{3, 5}}, [](Graph& g, auto& v, auto&) { return g.softmax(v[0]); });
  add_case("log_softmax", {{3, 5}}, [](Graph& g, auto& v, auto&) { return g.log_softmax(v[0]); });
  add_case("gelu", {{3, 4}}, [](Graph& g, auto& v, auto&) { return g.gelu(v[0]); });
  add_case("layernorm", {{4, 6}, {1, 6}, {1, 6}}, [](Graph& g, auto& v, auto&) { return g.layernorm(v[0], v[1], v[2]); });
  add_case("slice", {{5, 6}}, [](Graph& g, auto& v, auto&) { return g.slice(v[0], {1, 3}, {2, 3}); });
  add_case("slice_of_slice", {{5, 6}}, [](Graph& g, auto& v, auto&) {
    return g.slice(g.slice(v[0], {1, 4}, {1, 5}), {1, 2}, {2, 2});
  });
  add_case("reshape", {{4, 3}}, [](Graph& g, auto& v, auto&) { return g.reshape(v[0], 2, 6); });
  add_case("mean_rows", {{4, 3}}, [](Graph& g, auto& v, auto&) { return g.mean_rows(v[0]); });
  add_case("sum", {{4, 3}}, [](Graph& g, auto& v, auto&) { return g.sum(v[0]); });
  add_case("concat_rows", {{2, 3}, {3, 3}}, [](Graph& g, auto& v, auto&) {
    std::vector<NodeId> parts{v[0], v[1]};
    return g.concat_rows(parts);
  });
  add_case("concat_cols", {{2, 3}, {2, 1}}, [](Graph& g, auto& v, auto&) {
    std::vector<NodeId> parts{v[0], v[1]};
    return g.concat_cols(parts);
  });
  add_case("gather_rows", {{5, 3}}, [](Graph& g, auto& v, auto&) { return g.gather_rows(v[0], {4, 0, 4, 2}); });
  add_case("pick", {{3, 4}}, [](Graph& g, auto& v, auto&) { return g.pick(g.log_softmax(v[0]), {3, 0, 1}); });
  return cases;
}


}  // namespace instatune::testing
