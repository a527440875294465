// SPDX-License-Identifier: Apache-2.0
#include "doctest.h"

#include <filesystem>
#include <map>
#include <random>
#include <set>

#include "gradcheck.hpp"
#include "instatune/cost.hpp"
#include "instatune/model.hpp"
#include "instatune/optim.hpp"
#include "instatune/space.hpp"
#include "reference_transformer.hpp"

using namespace instatune;
using instatune::testing::reference_sample_logits;

namespace {

TokenBatch random_batch(const ArchDims& dims, std::size_t count,
                        std::uint64_t seed) {
  std::mt19937_64 rng(seed);
  std::uniform_int_distribution<std::size_t> tok(0, dims.vocab - 1);
  TokenBatch batch(count, std::vector<std::size_t>(dims.seq_len));
  for (auto& seq : batch)
    for (auto& t : seq) t = tok(rng);
  return batch;
}

ArchDims tiny_dims() {
  return ArchDims{.layers = 2, .heads = 2, .head_dim = 2, .embed = 4, .ffn = 6,
                  .seq_len = 3, .vocab = 5, .classes = 3};
}

using ActiveSet = std::set<std::pair<std::string, std::size_t>>;

ActiveSet active_set(const SupernetParams& p, const SubnetConfig& c) {
  ActiveSet s;
  for_each_active_index(p, c, [&](const Parameter& param, std::size_t i) {
    s.emplace(param.name, i);
  });
  return s;
}

}  // namespace

TEST_CASE("init is deterministic per seed") {
  ArchDims dims;
  CHECK(init_supernet(dims, 7) == init_supernet(dims, 7));
  CHECK_FALSE(init_supernet(dims, 7) == init_supernet(dims, 8));
}

TEST_CASE("desk parameter count") {
  ArchDims dims;
  const auto p = init_supernet(dims, 0);
  // Hand tally: embeddings 32*32 + 16*32; per layer 4*(32*32+32) for Q, K, V,
  // O, 2*32*64 + 64 + 32 for the FFN, 4*32 for LayerNorms; final LN 64;
  // classifier 32*4 + 4.
  const std::size_t per_layer = 4 * (32 * 32 + 32) + 2 * 32 * 64 + 64 + 32 + 128;
  const std::size_t expected = 1024 + 512 + 4 * per_layer + 64 + 132;
  CHECK(expected == 35908);
  CHECK(p.total_count() == expected);
  CHECK(active_param_count(dims, SubnetConfig::maximal(dims)) == expected);
}

TEST_CASE("active parameter count matches the active index set") {
  ArchDims dims;
  const auto p = init_supernet(dims, 0);
  for (const auto& c : {SubnetConfig::uniform(3, 2, 32), SubnetConfig::uniform(4, 3, 48),
                        SubnetConfig{2, {1, 4}, {64, 8}}}) {
    CHECK(active_set(p, c).size() == active_param_count(dims, c));
    CHECK(params(dims, c) == active_param_count(dims, c));
  }
  // (3, 2, 32): a = 16.
  const std::size_t layer = 3 * (32 * 16 + 16) + 16 * 32 + 32 + 32 * 32 + 32 +
                            32 * 32 + 32 + 128;
  CHECK(active_param_count(dims, SubnetConfig::uniform(3, 2, 32)) ==
        1536 + 3 * layer + 64 + 132);
}

TEST_CASE("active index sets nest") {
  ArchDims dims;
  const auto p = init_supernet(dims, 0);
  const auto small = active_set(p, SubnetConfig::uniform(3, 2, 32));
  const auto mid = active_set(p, SubnetConfig::uniform(3, 3, 48));
  const auto big = active_set(p, SubnetConfig::maximal(dims));
  CHECK(std::includes(mid.begin(), mid.end(), small.begin(), small.end()));
  CHECK(std::includes(big.begin(), big.end(), mid.begin(), mid.end()));
  CHECK(big.size() == p.total_count());
}

TEST_CASE("invalid dims and configs are rejected") {
  ArchDims zero;
  zero.layers = 0;
  CHECK_THROWS_AS(zero.validate(), StructuralError);
  ArchDims dims;
  CHECK_THROWS_AS(SubnetConfig::uniform(5, 2, 32).validate(dims), StructuralError);
  CHECK_THROWS_AS(SubnetConfig::uniform(0, 2, 32).validate(dims), StructuralError);
  CHECK_THROWS_AS(SubnetConfig::uniform(3, 5, 32).validate(dims), StructuralError);
  CHECK_THROWS_AS(SubnetConfig::uniform(3, 0, 32).validate(dims), StructuralError);
  CHECK_THROWS_AS(SubnetConfig::uniform(3, 2, 65).validate(dims), StructuralError);
  CHECK_THROWS_AS((SubnetConfig{3, {2, 2}, {32, 32, 32}}.validate(dims)),
                  StructuralError);
  const auto p = init_supernet(dims, 0);
  auto batch = random_batch(dims, 1, 0);
  batch[0][0] = dims.vocab;
  CHECK_THROWS_AS(forward(p, SubnetConfig::maximal(dims), batch), StructuralError);
  batch[0].pop_back();
  CHECK_THROWS_AS(forward(p, SubnetConfig::maximal(dims), batch), StructuralError);
}

TEST_CASE("maximal config is bit-identical to the dense forward") {
  ArchDims dims;
  for (std::uint64_t seed = 0; seed < 5; ++seed) {
    const auto p = init_supernet(dims, seed);
    const auto batch = random_batch(dims, 6, seed + 100);
    CHECK(forward(p, SubnetConfig::maximal(dims), batch) == forward_dense(p, batch));
  }
}

TEST_CASE("graph forward matches the straight-line reference") {
  ArchDims dims;
  const auto p = init_supernet(dims, 3);
  std::mt19937_64 rng(11);
  const auto space = preset("desk-wide-depth").space;
  std::vector<SubnetConfig> configs = space.enumerate();
  configs.push_back(SubnetConfig{2, {1, 4}, {8, 64}});
  for (const auto& c : configs) {
    const auto batch = random_batch(dims, 3, rng());
    const Tensor logits = forward(p, c, batch);
    double worst = 0.0;
    for (std::size_t s = 0; s < batch.size(); ++s) {
      const auto ref = reference_sample_logits(p, c, batch[s]);
      for (std::size_t k = 0; k < dims.classes; ++k)
        worst = std::max(worst, std::abs(ref[k] - logits.at(s, k)));
    }
    CHECK_MESSAGE(worst < 1e-10, c.to_string());
  }
}

TEST_CASE("closed-form MACs match the reference loop nest") {
  ArchDims dims;
  const auto p = init_supernet(dims, 0);
  const auto batch = random_batch(dims, 1, 0);
  std::mt19937_64 rng(5);
  const auto space = SearchSpace(dims, {1, 2, 3, 4}, {1, 2, 3, 4},
                                 {8, 16, 32, 48, 64}, SpaceMode::per_layer);
  for (int trial = 0; trial < 60; ++trial) {
    const auto c = space.sample(rng);
    instatune::testing::MacTally tally;
    reference_sample_logits(p, c, batch[0], &tally);
    const auto report = macs(dims, c);
    CHECK(report.macs == tally.layers_total());
    std::uint64_t qkv = 0, sc = 0, ctx = 0, proj = 0, ffn = 0;
    for (const auto& l : report.layers) {
      qkv += l.qkv;
      sc += l.scores;
      ctx += l.context;
      proj += l.projection;
      ffn += l.ffn;
    }
    CHECK(qkv == tally.qkv);
    CHECK(sc == tally.scores);
    CHECK(ctx == tally.context);
    CHECK(proj == tally.projection);
    CHECK(ffn == tally.ffn);
    CHECK(macs(dims, c, {.include_classifier = true}).macs ==
          tally.layers_total() + tally.classifier);
  }
}

TEST_CASE("sliced shapes follow the config") {
  ArchDims dims;
  auto p = init_supernet(dims, 0);
  Graph g;
  const SubnetConfig c{3, {2, 4, 3}, {32, 64, 48}};
  const auto trace = build_forward(g, p, c, random_batch(dims, 2, 0));
  g.evaluate();
  REQUIRE(trace.attention_context.size() == 3);
  for (std::size_t j = 0; j < 3; ++j) {
    CHECK(g.cols(trace.attention_context[j]) == c.heads[j] * dims.head_dim);
    CHECK(g.rows(trace.attention_context[j]) == 2 * dims.seq_len);
    CHECK(g.cols(trace.ffn_hidden[j]) == c.ffn[j]);
  }
  CHECK(g.rows(trace.logits) == 2);
  CHECK(g.cols(trace.logits) == dims.classes);
}

TEST_CASE("elastic forward gradients match finite differences") {
  const ArchDims dims = tiny_dims();
  const auto space = SearchSpace(dims, {1, 2}, {1, 2}, {3, 6}, SpaceMode::per_layer);
  for (std::uint64_t seed = 0; seed < 20; ++seed) {
    auto p = init_supernet(dims, seed);
    std::mt19937_64 rng(seed);
    const auto c = space.sample(rng);
    Graph g;
    const auto trace = build_forward(g, p, c, random_batch(dims, 2, seed));
    const NodeId out = instatune::testing::random_readout(g, trace.logits, rng);
    const auto res = instatune::testing::check_gradients(g, out, p.all());
    CHECK_MESSAGE(res.worst <= 1e-4, c.to_string() << " " << res.where);
  }
}

TEST_CASE("a step through a sub-network touches only its slice") {
  ArchDims dims;
  auto p = init_supernet(dims, 1);
  const auto before = p;
  const SubnetConfig c{3, {2, 3, 2}, {32, 48, 32}};
  const auto active = active_set(p, c);
  Graph g;
  const auto trace = build_forward(g, p, c, random_batch(dims, 4, 9));
  std::mt19937_64 rng(2);
  const NodeId out = instatune::testing::random_readout(g, trace.logits, rng);
  g.evaluate();
  p.zero_grad();
  g.backward(out);
  std::size_t outside_nonzero = 0;
  for (const Parameter* param : std::as_const(p).all())
    for (std::size_t i = 0; i < param->value.size(); ++i)
      if (!active.contains({param->name, i}) && param->grad[i] != 0.0)
        ++outside_nonzero;
  CHECK(outside_nonzero == 0);

  Adam adam;
  adam.step(p.all());
  std::size_t changed_outside = 0, changed_inside = 0;
  const auto now = std::as_const(p).all();
  const auto old = before.all();
  for (std::size_t t = 0; t < now.size(); ++t)
    for (std::size_t i = 0; i < now[t]->value.size(); ++i) {
      if (now[t]->value[i] == old[t]->value[i]) continue;
      if (active.contains({now[t]->name, i}))
        ++changed_inside;
      else
        ++changed_outside;
    }
  CHECK(changed_outside == 0);
  CHECK(changed_inside > 0);
}

TEST_CASE("checkpoint round trip") {
  ArchDims dims;
  const auto p = init_supernet(dims, 4);
  const auto path = std::filesystem::temp_directory_path() / "instatune_ckpt_test.bin";
  save_checkpoint(p, path);
  const auto q = load_checkpoint(path);
  CHECK(q == p);
  CHECK(q.dims() == dims);
  std::filesystem::resize_file(path, 100);
  CHECK_THROWS(load_checkpoint(path));
  std::filesystem::remove(path);
  CHECK_THROWS(load_checkpoint(path));
}
