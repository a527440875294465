// SPDX-License-Identifier: Apache-2.0
#pragma once

// Elastic transformer-encoder super-network. Sub-networks are prefix slices
// of the shared weights: the first `depth` layers, the first h*d_head columns
// of Q/K/V (rows of the output projection) and the first f FFN channels.

#include <cstddef>
#include <cstdint>
#include <filesystem>
#include <functional>
#include <optional>
#include <span>
#include <string>
#include <vector>

#include "instatune/graph.hpp"

namespace instatune {

struct ArchDims {
  std::size_t layers = 4;      // L_max
  std::size_t heads = 4;       // H_max
  std::size_t head_dim = 8;    // d_head
  std::size_t embed = 32;      // D_in
  std::size_t ffn = 64;        // D_ffn max
  std::size_t seq_len = 16;    // N
  std::size_t vocab = 32;      // V
  std::size_t classes = 4;     // C
  // Width of one flattened input patch for image presets; 0 means token
  // lookup. Only the cost model reads it.
  std::size_t patch_dim = 0;

  std::size_t attn_width() const { return heads * head_dim; }  // D_attn
  void validate() const;

  friend bool operator==(const ArchDims&, const ArchDims&) = default;
};

struct SubnetConfig {
  std::size_t depth = 0;
  std::vector<std::size_t> heads;  // one entry per active layer
  std::vector<std::size_t> ffn;

  static SubnetConfig uniform(std::size_t depth, std::size_t heads,
                              std::size_t ffn);
  static SubnetConfig maximal(const ArchDims& dims);

  bool is_uniform() const;
  /// Throws StructuralError when the config does not fit `dims`.
  void validate(const ArchDims& dims) const;
  std::string to_string() const;

  friend bool operator==(const SubnetConfig&, const SubnetConfig&) = default;
  friend auto operator<=>(const SubnetConfig&, const SubnetConfig&) = default;
};

struct LayerParams {
  Parameter wq, bq, wk, bk, wv, bv;  // D_in x D_attn, 1 x D_attn
  Parameter wo, bo;                  // D_attn x D_in, 1 x D_in
  Parameter w1, b1;                  // D_in x D_ffn, 1 x D_ffn
  Parameter w2, b2;                  // D_ffn x D_in, 1 x D_in
  Parameter ln1_gain, ln1_bias, ln2_gain, ln2_bias;
};

class SupernetParams {
 public:
  SupernetParams() = default;
  SupernetParams(const ArchDims& dims, std::uint64_t seed);

  const ArchDims& dims() const { return dims_; }

  Parameter token_embedding;     // V x D_in
  Parameter position_embedding;  // N x D_in
  std::vector<LayerParams> layers;
  Parameter final_gain, final_bias;
  Parameter classifier_w, classifier_b;  // D_in x C, 1 x C

  std::vector<Parameter*> all();
  std::vector<const Parameter*> all() const;

  std::size_t total_count() const;
  void zero_grad();

  friend bool operator==(const SupernetParams& a, const SupernetParams& b);

 private:
  ArchDims dims_;
};

/// Seeded scaled-normal weights, zero biases, unit LayerNorm gains.
SupernetParams init_supernet(const ArchDims& dims, std::uint64_t seed);

/// One sequence of token ids per sample, each of length N.
using TokenBatch = std::vector<std::vector<std::size_t>>;

struct ForwardTrace {
  NodeId logits;
  // Per active layer: the concatenated attention context (rows x h*d_head)
  // and the FFN hidden activation (rows x f).
  std::vector<NodeId> attention_context;
  std::vector<NodeId> ffn_hidden;
};

/// Appends the forward pass to `g`. Without a config the dense maximal
/// network is built with no slice ops at all. The non-const overload binds
/// trainable leaves; the const overload binds frozen ones.
ForwardTrace build_forward(Graph& g, SupernetParams& params,
                           const std::optional<SubnetConfig>& config,
                           const TokenBatch& batch);
ForwardTrace build_forward(Graph& g, const SupernetParams& params,
                           const std::optional<SubnetConfig>& config,
                           const TokenBatch& batch);

/// Evaluates logits (batch x C) for `config`.
Tensor forward(const SupernetParams& params, const SubnetConfig& config,
               const TokenBatch& batch);
Tensor forward_dense(const SupernetParams& params, const TokenBatch& batch);

/// Scalars read by forward under `config`.
std::size_t active_param_count(const ArchDims& dims, const SubnetConfig& config);

/// Visits every active (parameter name, flat index) pair.
void for_each_active_index(
    const SupernetParams& params, const SubnetConfig& config,
    const std::function<void(const Parameter&, std::size_t)>& visit);

// Checkpoint: "ITCK" magic, format version, dims, then named tensors with
// shapes and raw little-endian doubles.
inline constexpr std::uint32_t kCheckpointVersion = 1;
void save_checkpoint(const SupernetParams& params,
                     const std::filesystem::path& path);
SupernetParams load_checkpoint(const std::filesystem::path& path);

}  // namespace instatune
