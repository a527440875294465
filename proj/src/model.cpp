// SPDX-License-Identifier: Apache-2.0
#include "instatune/model.hpp"

#include <cmath>
#include <cstring>
#include <fstream>
#include <random>
#include <sstream>
#include <type_traits>

namespace instatune {

void ArchDims::validate() const {
  if (layers == 0) throw StructuralError("ArchDims: layers must be >= 1");
  if (heads == 0 || head_dim == 0 || embed == 0 || ffn == 0 || seq_len == 0 ||
      vocab == 0 || classes == 0)
    throw StructuralError("ArchDims: all extents must be positive");
}

SubnetConfig SubnetConfig::uniform(std::size_t depth, std::size_t heads,
                                   std::size_t ffn) {
  return {depth, std::vector<std::size_t>(depth, heads),
          std::vector<std::size_t>(depth, ffn)};
}

SubnetConfig SubnetConfig::maximal(const ArchDims& dims) {
  return uniform(dims.layers, dims.heads, dims.ffn);
}

bool SubnetConfig::is_uniform() const {
  for (std::size_t j = 1; j < depth; ++j)
    if (heads[j] != heads[0] || ffn[j] != ffn[0]) return false;
  return true;
}

void SubnetConfig::validate(const ArchDims& dims) const {
  if (depth == 0 || depth > dims.layers)
    throw StructuralError("SubnetConfig: depth " + std::to_string(depth) +
                          " outside [1, " + std::to_string(dims.layers) + "]");
  if (heads.size() != depth || ffn.size() != depth)
    throw StructuralError("SubnetConfig: need one heads/ffn entry per layer");
  for (std::size_t j = 0; j < depth; ++j) {
    if (heads[j] == 0 || heads[j] > dims.heads)
      throw StructuralError("SubnetConfig: layer " + std::to_string(j) +
                            " heads " + std::to_string(heads[j]) +
                            " outside [1, " + std::to_string(dims.heads) + "]");
    if (ffn[j] == 0 || ffn[j] > dims.ffn)
      throw StructuralError("SubnetConfig: layer " + std::to_string(j) +
                            " ffn " + std::to_string(ffn[j]) + " outside [1, " +
                            std::to_string(dims.ffn) + "]");
  }
}

std::string SubnetConfig::to_string() const {
  std::ostringstream os;
  os << "L=" << depth;
  if (is_uniform() && depth > 0) {
    os << " H=" << heads[0] << " F=" << ffn[0];
    return os.str();
  }
  os << " H=";
  for (std::size_t j = 0; j < depth; ++j) os << (j ? ";" : "") << heads[j];
  os << " F=";
  for (std::size_t j = 0; j < depth; ++j) os << (j ? ";" : "") << ffn[j];
  return os.str();
}

// ---------------------------------------------------------------------------

namespace {

Parameter make_param(std::string name, std::size_t rows, std::size_t cols,
                     double fill = 0.0) {
  return {std::move(name), Tensor({rows, cols}, fill), Tensor({rows, cols})};
}

void normal_fill(Parameter& p, double stddev, std::mt19937_64& rng) {
  std::normal_distribution<double> dist(0.0, stddev);
  for (double& v : p.value.data()) v = dist(rng);
}

}  // namespace

SupernetParams::SupernetParams(const ArchDims& dims, std::uint64_t seed)
    : dims_(dims) {
  dims.validate();
  const std::size_t d = dims.embed, a = dims.attn_width(), f = dims.ffn;
  token_embedding = make_param("tok_emb", dims.vocab, d);
  position_embedding = make_param("pos_emb", dims.seq_len, d);
  layers.resize(dims.layers);
  for (std::size_t j = 0; j < dims.layers; ++j) {
    auto p = "layer" + std::to_string(j) + ".";
    auto& l = layers[j];
    l.wq = make_param(p + "wq", d, a);
    l.bq = make_param(p + "bq", 1, a);
    l.wk = make_param(p + "wk", d, a);
    l.bk = make_param(p + "bk", 1, a);
    l.wv = make_param(p + "wv", d, a);
    l.bv = make_param(p + "bv", 1, a);
    l.wo = make_param(p + "wo", a, d);
    l.bo = make_param(p + "bo", 1, d);
    l.w1 = make_param(p + "w1", d, f);
    l.b1 = make_param(p + "b1", 1, f);
    l.w2 = make_param(p + "w2", f, d);
    l.b2 = make_param(p + "b2", 1, d);
    l.ln1_gain = make_param(p + "ln1_gain", 1, d, 1.0);
    l.ln1_bias = make_param(p + "ln1_bias", 1, d);
    l.ln2_gain = make_param(p + "ln2_gain", 1, d, 1.0);
    l.ln2_bias = make_param(p + "ln2_bias", 1, d);
  }
  final_gain = make_param("final_gain", 1, d, 1.0);
  final_bias = make_param("final_bias", 1, d);
  classifier_w = make_param("cls_w", d, dims.classes);
  classifier_b = make_param("cls_b", 1, dims.classes);

  std::mt19937_64 rng(seed);
  normal_fill(token_embedding, 1.0, rng);
  normal_fill(position_embedding, 0.1, rng);
  auto inv_sqrt = [](std::size_t fan_in) {
    return 1.0 / std::sqrt(static_cast<double>(fan_in));
  };
  for (auto& l : layers) {
    normal_fill(l.wq, inv_sqrt(d), rng);
    normal_fill(l.wk, inv_sqrt(d), rng);
    normal_fill(l.wv, inv_sqrt(d), rng);
    normal_fill(l.wo, inv_sqrt(a), rng);
    normal_fill(l.w1, inv_sqrt(d), rng);
    normal_fill(l.w2, inv_sqrt(f), rng);
  }
  normal_fill(classifier_w, inv_sqrt(d), rng);
}

std::vector<Parameter*> SupernetParams::all() {
  std::vector<Parameter*> out{&token_embedding, &position_embedding};
  for (auto& l : layers)
    for (Parameter* p : {&l.wq, &l.bq, &l.wk, &l.bk, &l.wv, &l.bv, &l.wo,
                         &l.bo, &l.w1, &l.b1, &l.w2, &l.b2, &l.ln1_gain,
                         &l.ln1_bias, &l.ln2_gain, &l.ln2_bias})
      out.push_back(p);
  for (Parameter* p : {&final_gain, &final_bias, &classifier_w, &classifier_b})
    out.push_back(p);
  return out;
}

std::vector<const Parameter*> SupernetParams::all() const {
  auto mut = const_cast<SupernetParams*>(this)->all();
  return {mut.begin(), mut.end()};
}

std::size_t SupernetParams::total_count() const {
  std::size_t n = 0;
  for (const auto* p : all()) n += p->value.size();
  return n;
}

void SupernetParams::zero_grad() {
  for (auto* p : all()) p->zero_grad();
}

bool operator==(const SupernetParams& a, const SupernetParams& b) {
  if (!(a.dims_ == b.dims_)) return false;
  auto pa = a.all();
  auto pb = b.all();
  for (std::size_t i = 0; i < pa.size(); ++i)
    if (pa[i]->name != pb[i]->name || !(pa[i]->value == pb[i]->value))
      return false;
  return true;
}

SupernetParams init_supernet(const ArchDims& dims, std::uint64_t seed) {
  return SupernetParams(dims, seed);
}

// ---------------------------------------------------------------------------

namespace {

template <typename Params>
ForwardTrace build_forward_impl(Graph& g, Params& params,
                                const std::optional<SubnetConfig>& config,
                                const TokenBatch& batch) {
  using Param = std::conditional_t<std::is_const_v<Params>, const Parameter,
                                   Parameter>;
  const ArchDims& dims = params.dims();
  if (config) config->validate(dims);
  if (batch.empty()) throw StructuralError("forward: empty batch");
  const std::size_t n = dims.seq_len, d = dims.embed, dh = dims.head_dim;
  const std::size_t b = batch.size();

  std::vector<std::size_t> ids;
  ids.reserve(b * n);
  for (const auto& seq : batch) {
    if (seq.size() != n)
      throw StructuralError("forward: sequence length " +
                            std::to_string(seq.size()) + " != " +
                            std::to_string(n));
    for (auto t : seq) {
      if (t >= dims.vocab)
        throw StructuralError("forward: token id " + std::to_string(t) +
                              " >= vocab " + std::to_string(dims.vocab));
      ids.push_back(t);
    }
  }

  const bool dense = !config.has_value();
  auto leaf_of = [&](Param& p) {
    if constexpr (std::is_const_v<Params>)
      return g.frozen(p);
    else
      return g.parameter(p);
  };
  auto cols = [&](Param& p, std::size_t count) {
    NodeId leaf = leaf_of(p);
    if (dense) return leaf;
    return g.slice(leaf, {0, p.value.rows()}, {0, count});
  };
  auto rows = [&](Param& p, std::size_t count) {
    NodeId leaf = leaf_of(p);
    if (dense) return leaf;
    return g.slice(leaf, {0, count}, {0, p.value.cols()});
  };
  auto full = [&](Param& p) { return leaf_of(p); };

  ForwardTrace trace;
  NodeId x = g.gather_rows(full(params.token_embedding), std::move(ids));
  x = g.add(x, full(params.position_embedding));

  const std::size_t depth = dense ? dims.layers : config->depth;
  const double inv_sqrt_dh = 1.0 / std::sqrt(static_cast<double>(dh));
  for (std::size_t j = 0; j < depth; ++j) {
    auto& l = params.layers[j];
    const std::size_t h = dense ? dims.heads : config->heads[j];
    const std::size_t f = dense ? dims.ffn : config->ffn[j];
    const std::size_t a = h * dh;

    NodeId hn = g.layernorm(x, full(l.ln1_gain), full(l.ln1_bias));
    NodeId q = g.add(g.matmul(hn, cols(l.wq, a)), cols(l.bq, a));
    NodeId k = g.add(g.matmul(hn, cols(l.wk, a)), cols(l.bk, a));
    NodeId v = g.add(g.matmul(hn, cols(l.wv, a)), cols(l.bv, a));

    std::vector<NodeId> per_sample;
    per_sample.reserve(b);
    std::vector<NodeId> per_head(h);
    for (std::size_t s = 0; s < b; ++s) {
      Range rs{s * n, n};
      for (std::size_t t = 0; t < h; ++t) {
        Range cs{t * dh, dh};
        NodeId qs = g.slice(q, rs, cs);
        NodeId ks = g.slice(k, rs, cs);
        NodeId vs = g.slice(v, rs, cs);
        NodeId scores =
            g.scale(g.matmul(qs, ks, Graph::Trans::no, Graph::Trans::yes),
                    inv_sqrt_dh);
        per_head[t] = g.matmul(g.softmax(scores), vs);
      }
      per_sample.push_back(h == 1 ? per_head[0] : g.concat_cols(per_head));
    }
    NodeId ctx = b == 1 ? per_sample[0] : g.concat_rows(per_sample);
    trace.attention_context.push_back(ctx);
    NodeId attn = g.add(g.matmul(ctx, rows(l.wo, a)), full(l.bo));
    x = g.add(x, attn);

    NodeId hn2 = g.layernorm(x, full(l.ln2_gain), full(l.ln2_bias));
    NodeId hidden = g.gelu(g.add(g.matmul(hn2, cols(l.w1, f)), cols(l.b1, f)));
    trace.ffn_hidden.push_back(hidden);
    NodeId mlp = g.add(g.matmul(hidden, rows(l.w2, f)), full(l.b2));
    x = g.add(x, mlp);
  }

  x = g.layernorm(x, full(params.final_gain), full(params.final_bias));
  std::vector<NodeId> pooled;
  pooled.reserve(b);
  for (std::size_t s = 0; s < b; ++s)
    pooled.push_back(g.mean_rows(g.slice(x, {s * n, n}, {0, d})));
  NodeId pool = b == 1 ? pooled[0] : g.concat_rows(pooled);
  trace.logits = g.add(g.matmul(pool, full(params.classifier_w)),
                       full(params.classifier_b));
  return trace;
}

}  // namespace

ForwardTrace build_forward(Graph& g, SupernetParams& params,
                           const std::optional<SubnetConfig>& config,
                           const TokenBatch& batch) {
  return build_forward_impl(g, params, config, batch);
}

ForwardTrace build_forward(Graph& g, const SupernetParams& params,
                           const std::optional<SubnetConfig>& config,
                           const TokenBatch& batch) {
  return build_forward_impl(g, params, config, batch);
}

Tensor forward(const SupernetParams& params, const SubnetConfig& config,
               const TokenBatch& batch) {
  Graph g;
  auto trace = build_forward(g, params, config, batch);
  g.evaluate();
  return g.value(trace.logits);
}

Tensor forward_dense(const SupernetParams& params, const TokenBatch& batch) {
  Graph g;
  auto trace = build_forward(g, params, std::nullopt, batch);
  g.evaluate();
  return g.value(trace.logits);
}

std::size_t active_param_count(const ArchDims& dims, const SubnetConfig& config) {
  config.validate(dims);
  const std::size_t d = dims.embed;
  std::size_t count = dims.vocab * d + dims.seq_len * d;
  for (std::size_t j = 0; j < config.depth; ++j) {
    const std::size_t a = config.heads[j] * dims.head_dim;
    const std::size_t f = config.ffn[j];
    count += 3 * (d * a + a);  // Q, K, V
    count += a * d + d;        // output projection
    count += d * f + f;        // FFN in
    count += f * d + d;        // FFN out
    count += 4 * d;            // two LayerNorms
  }
  count += 2 * d;                            // final LayerNorm
  count += d * dims.classes + dims.classes;  // classifier
  return count;
}

void for_each_active_index(
    const SupernetParams& params, const SubnetConfig& config,
    const std::function<void(const Parameter&, std::size_t)>& visit) {
  const ArchDims& dims = params.dims();
  config.validate(dims);
  auto all = [&](const Parameter& p) {
    for (std::size_t i = 0; i < p.value.size(); ++i) visit(p, i);
  };
  auto col_prefix = [&](const Parameter& p, std::size_t count) {
    const std::size_t c = p.value.cols();
    for (std::size_t r = 0; r < p.value.rows(); ++r)
      for (std::size_t k = 0; k < count; ++k) visit(p, r * c + k);
  };
  auto row_prefix = [&](const Parameter& p, std::size_t count) {
    for (std::size_t i = 0; i < count * p.value.cols(); ++i) visit(p, i);
  };
  all(params.token_embedding);
  all(params.position_embedding);
  for (std::size_t j = 0; j < config.depth; ++j) {
    const auto& l = params.layers[j];
    const std::size_t a = config.heads[j] * dims.head_dim;
    const std::size_t f = config.ffn[j];
    for (const Parameter* p : {&l.wq, &l.bq, &l.wk, &l.bk, &l.wv, &l.bv})
      col_prefix(*p, a);
    row_prefix(l.wo, a);
    all(l.bo);
    col_prefix(l.w1, f);
    col_prefix(l.b1, f);
    row_prefix(l.w2, f);
    all(l.b2);
    for (const Parameter* p : {&l.ln1_gain, &l.ln1_bias, &l.ln2_gain, &l.ln2_bias})
      all(*p);
  }
  all(params.final_gain);
  all(params.final_bias);
  all(params.classifier_w);
  all(params.classifier_b);
}

// ---------------------------------------------------------------------------
// Checkpoints

namespace {

template <typename T>
void put(std::ostream& os, T v) {
  os.write(reinterpret_cast<const char*>(&v), sizeof(T));
}

template <typename T>
T get(std::istream& is) {
  T v{};
  is.read(reinterpret_cast<char*>(&v), sizeof(T));
  if (!is) throw std::runtime_error("checkpoint: truncated file");
  return v;
}

}  // namespace

void save_checkpoint(const SupernetParams& params,
                     const std::filesystem::path& path) {
  std::ofstream os(path, std::ios::binary | std::ios::trunc);
  if (!os) throw std::runtime_error("checkpoint: cannot write " + path.string());
  os.write("ITCK", 4);
  put<std::uint32_t>(os, kCheckpointVersion);
  const auto& d = params.dims();
  for (std::uint64_t v : {d.layers, d.heads, d.head_dim, d.embed, d.ffn,
                          d.seq_len, d.vocab, d.classes, d.patch_dim})
    put<std::uint64_t>(os, v);
  auto all = params.all();
  put<std::uint64_t>(os, all.size());
  for (const Parameter* p : all) {
    put<std::uint64_t>(os, p->name.size());
    os.write(p->name.data(), static_cast<std::streamsize>(p->name.size()));
    put<std::uint64_t>(os, p->value.rank());
    for (auto e : p->value.shape()) put<std::uint64_t>(os, e);
    os.write(reinterpret_cast<const char*>(p->value.data().data()),
             static_cast<std::streamsize>(p->value.size() * sizeof(double)));
  }
  if (!os) throw std::runtime_error("checkpoint: write failed for " + path.string());
}

SupernetParams load_checkpoint(const std::filesystem::path& path) {
  std::ifstream is(path, std::ios::binary);
  if (!is) throw std::runtime_error("checkpoint: cannot open " + path.string());
  char magic[4];
  is.read(magic, 4);
  if (!is || std::memcmp(magic, "ITCK", 4) != 0)
    throw std::runtime_error("checkpoint: bad magic in " + path.string());
  auto version = get<std::uint32_t>(is);
  if (version != kCheckpointVersion)
    throw std::runtime_error("checkpoint: unsupported version " +
                             std::to_string(version));
  ArchDims d;
  for (std::size_t* f : {&d.layers, &d.heads, &d.head_dim, &d.embed, &d.ffn,
                         &d.seq_len, &d.vocab, &d.classes, &d.patch_dim})
    *f = get<std::uint64_t>(is);
  SupernetParams params(d, 0);
  auto all = params.all();
  auto count = get<std::uint64_t>(is);
  if (count != all.size())
    throw std::runtime_error("checkpoint: tensor count mismatch");
  for (Parameter* p : all) {
    std::string name(get<std::uint64_t>(is), '\0');
    is.read(name.data(), static_cast<std::streamsize>(name.size()));
    if (name != p->name)
      throw std::runtime_error("checkpoint: expected tensor '" + p->name +
                               "', found '" + name + "'");
    Shape shape(get<std::uint64_t>(is));
    for (auto& e : shape) e = get<std::uint64_t>(is);
    if (shape != p->value.shape())
      throw std::runtime_error("checkpoint: shape mismatch for " + name);
    is.read(reinterpret_cast<char*>(p->value.data().data()),
            static_cast<std::streamsize>(p->value.size() * sizeof(double)));
    if (!is) throw std::runtime_error("checkpoint: truncated tensor " + name);
  }
  return params;
}

}  // namespace instatune
