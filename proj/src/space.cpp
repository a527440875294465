// SPDX-License-Identifier: Apache-2.0
#include "instatune/space.hpp"

#include <algorithm>
#include <stdexcept>

namespace instatune {

std::string ArchEncoding::to_string() const {
  std::string s;
  for (std::size_t i = 0; i < genes.size(); ++i) {
    if (i) s += '-';
    s += std::to_string(genes[i]);
  }
  return s;
}

namespace {

void check_values(const std::vector<std::size_t>& values, std::size_t max,
                  const char* what) {
  if (values.empty())
    throw std::invalid_argument(std::string("search space: empty ") + what +
                                " list");
  for (std::size_t i = 0; i < values.size(); ++i) {
    if (values[i] == 0)
      throw std::invalid_argument(std::string("search space: zero in ") + what);
    if (i && values[i] <= values[i - 1])
      throw std::invalid_argument(std::string("search space: ") + what +
                                  " values must be strictly increasing");
  }
  if (values.back() != max)
    throw std::invalid_argument(std::string("search space: largest ") + what +
                                " value " + std::to_string(values.back()) +
                                " must equal the architecture maximum " +
                                std::to_string(max));
}

std::uint32_t index_of(const std::vector<std::size_t>& values, std::size_t v,
                       const char* what) {
  auto it = std::find(values.begin(), values.end(), v);
  if (it == values.end())
    throw std::invalid_argument(std::string("search space: ") + what + " " +
                                std::to_string(v) + " not allowed");
  return static_cast<std::uint32_t>(it - values.begin());
}

std::size_t draw(std::mt19937_64& rng, std::size_t n) {
  return std::uniform_int_distribution<std::size_t>(0, n - 1)(rng);
}

}  // namespace

SearchSpace::SearchSpace(ArchDims dims, std::vector<std::size_t> depth_values,
                         std::vector<std::size_t> head_values,
                         std::vector<std::size_t> ffn_values, SpaceMode mode)
    : dims_(dims),
      depth_(std::move(depth_values)),
      heads_(std::move(head_values)),
      ffn_(std::move(ffn_values)),
      mode_(mode) {
  dims_.validate();
  check_values(depth_, dims_.layers, "depth");
  check_values(heads_, dims_.heads, "head");
  check_values(ffn_, dims_.ffn, "ffn");
}

std::size_t SearchSpace::gene_count() const {
  return mode_ == SpaceMode::uniform ? 3 : 1 + 2 * dims_.layers;
}

std::size_t SearchSpace::gene_cardinality(std::size_t gene) const {
  if (gene >= gene_count()) throw std::out_of_range("gene index out of range");
  if (gene == 0) return depth_.size();
  if (mode_ == SpaceMode::uniform) return gene == 1 ? heads_.size() : ffn_.size();
  return gene <= dims_.layers ? heads_.size() : ffn_.size();
}

bool SearchSpace::gene_active(const ArchEncoding& enc, std::size_t gene) const {
  if (mode_ == SpaceMode::uniform || gene == 0) return true;
  const std::size_t depth = depth_.at(enc.genes.at(0));
  const std::size_t layer = gene <= dims_.layers ? gene - 1 : gene - 1 - dims_.layers;
  return layer < depth;
}

ArchEncoding SearchSpace::encode(const SubnetConfig& config) const {
  config.validate(dims_);
  ArchEncoding enc;
  enc.genes.assign(gene_count(), 0);
  enc.genes[0] = index_of(depth_, config.depth, "depth");
  if (mode_ == SpaceMode::uniform) {
    if (!config.is_uniform())
      throw std::invalid_argument("search space: per-layer config in uniform space");
    enc.genes[1] = index_of(heads_, config.heads[0], "heads");
    enc.genes[2] = index_of(ffn_, config.ffn[0], "ffn");
    return enc;
  }
  for (std::size_t j = 0; j < config.depth; ++j) {
    enc.genes[1 + j] = index_of(heads_, config.heads[j], "heads");
    enc.genes[1 + dims_.layers + j] = index_of(ffn_, config.ffn[j], "ffn");
  }
  return enc;
}

SubnetConfig SearchSpace::decode(const ArchEncoding& enc) const {
  if (enc.genes.size() != gene_count())
    throw std::invalid_argument("search space: encoding has " +
                                std::to_string(enc.genes.size()) +
                                " genes, expected " +
                                std::to_string(gene_count()));
  for (std::size_t g = 0; g < enc.genes.size(); ++g)
    if (enc.genes[g] >= gene_cardinality(g))
      throw std::invalid_argument("search space: gene " + std::to_string(g) +
                                  " index " + std::to_string(enc.genes[g]) +
                                  " out of range");
  const std::size_t depth = depth_[enc.genes[0]];
  if (mode_ == SpaceMode::uniform)
    return SubnetConfig::uniform(depth, heads_[enc.genes[1]], ffn_[enc.genes[2]]);
  SubnetConfig c{depth, {}, {}};
  for (std::size_t j = 0; j < depth; ++j) {
    c.heads.push_back(heads_[enc.genes[1 + j]]);
    c.ffn.push_back(ffn_[enc.genes[1 + dims_.layers + j]]);
  }
  return c;
}

ArchEncoding SearchSpace::canonical(ArchEncoding enc) const {
  decode(enc);
  for (std::size_t g = 1; g < enc.genes.size(); ++g)
    if (!gene_active(enc, g)) enc.genes[g] = 0;
  return enc;
}

bool SearchSpace::contains(const SubnetConfig& config) const {
  try {
    encode(config);
    return true;
  } catch (const std::exception&) {
    return false;
  }
}

std::optional<std::uint64_t> SearchSpace::size() const {
  const std::uint64_t per_layer = heads_.size() * ffn_.size();
  if (mode_ == SpaceMode::uniform) return depth_.size() * per_layer;
  std::uint64_t total = 0;
  for (auto depth : depth_) {
    std::uint64_t count = 1;
    for (std::size_t j = 0; j < depth; ++j) {
      if (count > UINT64_MAX / per_layer) return std::nullopt;
      count *= per_layer;
    }
    if (total > UINT64_MAX - count) return std::nullopt;
    total += count;
  }
  return total;
}

std::vector<SubnetConfig> SearchSpace::enumerate(std::uint64_t cap) const {
  auto n = size();
  if (!n || *n > cap)
    throw std::length_error("search space too large to enumerate (cap " +
                            std::to_string(cap) + ")");
  std::vector<SubnetConfig> out;
  out.reserve(*n);
  ArchEncoding enc;
  enc.genes.assign(gene_count(), 0);
  // Odometer over active genes only, most significant gene first.
  while (true) {
    out.push_back(decode(enc));
    std::size_t g = gene_count();
    while (g-- > 0) {
      if (!gene_active(enc, g)) continue;
      if (++enc.genes[g] < gene_cardinality(g)) break;
      enc.genes[g] = 0;
      if (g == 0) return out;
    }
    enc = canonical(enc);
  }
}

SubnetConfig SearchSpace::sample(std::mt19937_64& rng) const {
  const std::size_t depth = depth_[draw(rng, depth_.size())];
  if (mode_ == SpaceMode::uniform) {
    const std::size_t h = heads_[draw(rng, heads_.size())];
    const std::size_t f = ffn_[draw(rng, ffn_.size())];
    return SubnetConfig::uniform(depth, h, f);
  }
  SubnetConfig c{depth, {}, {}};
  for (std::size_t j = 0; j < depth; ++j) {
    c.heads.push_back(heads_[draw(rng, heads_.size())]);
    c.ffn.push_back(ffn_[draw(rng, ffn_.size())]);
  }
  return c;
}

ArchEncoding SearchSpace::sample_encoding(std::mt19937_64& rng) const {
  return encode(sample(rng));
}

SubnetConfig SearchSpace::maximal() const { return SubnetConfig::maximal(dims_); }

// ---------------------------------------------------------------------------

namespace {

ArchDims desk_dims() { return ArchDims{}; }

ArchDims base_transformer(std::size_t seq_len, std::size_t vocab,
                          std::size_t classes, std::size_t patch_dim) {
  return ArchDims{.layers = 12,
                  .heads = 12,
                  .head_dim = 64,
                  .embed = 768,
                  .ffn = 3072,
                  .seq_len = seq_len,
                  .vocab = vocab,
                  .classes = classes,
                  .patch_dim = patch_dim};
}

}  // namespace

Preset preset(const std::string& name) {
  // Image presets: 196 patches of 16x16x3 plus a class token; token
  // embedding is unused so vocab is 1.
  const ArchDims bert = base_transformer(128, 30522, 2, 0);
  const ArchDims vit = base_transformer(197, 1, 1000, 768);
  if (name == "desk")
    return {name, SearchSpace(desk_dims(), {3, 4}, {2, 3, 4}, {32, 48, 64})};
  if (name == "desk-wide-depth")
    return {name, SearchSpace(desk_dims(), {2, 3, 4}, {2, 3, 4}, {32, 48, 64})};
  if (name == "bert")
    return {name, SearchSpace(bert, {6, 7, 8, 9, 10, 11, 12}, {6, 8, 10, 12},
                              {1024, 2048, 3072})};
  if (name == "vit" || name == "beit3")
    return {name, SearchSpace(vit, {11, 12}, {6, 8, 10, 12}, {2048, 2560, 3072})};
  if (name == "beit3-wide-depth")
    return {name, SearchSpace(vit, {9, 10, 11, 12}, {6, 8, 10, 12},
                              {2048, 2560, 3072})};
  if (name == "synthetic-10k") {
    ArchDims d{.layers = 2, .heads = 10, .head_dim = 8, .embed = 64,
               .ffn = 160, .seq_len = 16, .vocab = 32, .classes = 4};
    return {name, SearchSpace(d, {2}, {1, 2, 3, 4, 5, 6, 7, 8, 9, 10},
                              {16, 32, 48, 64, 80, 96, 112, 128, 144, 160},
                              SpaceMode::per_layer)};
  }
  throw std::invalid_argument("unknown preset '" + name + "'");
}

std::vector<std::string> preset_names() {
  return {"desk", "desk-wide-depth", "bert", "vit",
          "beit3", "beit3-wide-depth", "synthetic-10k"};
}

std::string to_string(SpaceMode mode) {
  return mode == SpaceMode::uniform ? "uniform" : "per_layer";
}

SpaceMode parse_space_mode(const std::string& text) {
  if (text == "uniform") return SpaceMode::uniform;
  if (text == "per_layer") return SpaceMode::per_layer;
  throw std::invalid_argument("unknown space mode '" + text + "'");
}

}  // namespace instatune
