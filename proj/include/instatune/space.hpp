// SPDX-License-Identifier: Apache-2.0
#pragma once

#include <compare>
#include <cstdint>
#include <optional>
#include <random>
#include <string>
#include <vector>

#include "instatune/model.hpp"

namespace instatune {

enum class SpaceMode { uniform, per_layer };

/// Value-list indices. Uniform mode: [depth, head, ffn]. Per-layer mode:
/// [depth, head_1..head_Lmax, ffn_1..ffn_Lmax] with genes of inactive layers
/// held at 0.
struct ArchEncoding {
  std::vector<std::uint32_t> genes;

  std::string to_string() const;
  friend bool operator==(const ArchEncoding&, const ArchEncoding&) = default;
  friend auto operator<=>(const ArchEncoding&, const ArchEncoding&) = default;
};

inline constexpr std::uint64_t kDefaultEnumerationCap = 1'000'000;

class SearchSpace {
 public:
  SearchSpace(ArchDims dims, std::vector<std::size_t> depth_values,
              std::vector<std::size_t> head_values,
              std::vector<std::size_t> ffn_values,
              SpaceMode mode = SpaceMode::uniform);

  const ArchDims& dims() const { return dims_; }
  const std::vector<std::size_t>& depth_values() const { return depth_; }
  const std::vector<std::size_t>& head_values() const { return heads_; }
  const std::vector<std::size_t>& ffn_values() const { return ffn_; }
  SpaceMode mode() const { return mode_; }

  std::size_t gene_count() const;
  std::size_t gene_cardinality(std::size_t gene) const;
  /// Whether `gene` influences the decoded config of `enc`.
  bool gene_active(const ArchEncoding& enc, std::size_t gene) const;

  ArchEncoding encode(const SubnetConfig& config) const;
  SubnetConfig decode(const ArchEncoding& enc) const;
  ArchEncoding canonical(ArchEncoding enc) const;
  bool contains(const SubnetConfig& config) const;

  /// Number of distinct configs; nullopt when it overflows 64 bits.
  std::optional<std::uint64_t> size() const;
  /// Exhaustive, duplicate-free, in lexicographic encoding order. Throws
  /// std::length_error when the space exceeds `cap`.
  std::vector<SubnetConfig> enumerate(
      std::uint64_t cap = kDefaultEnumerationCap) const;

  /// Each elastic choice drawn independently and uniformly.
  SubnetConfig sample(std::mt19937_64& rng) const;
  ArchEncoding sample_encoding(std::mt19937_64& rng) const;

  SubnetConfig maximal() const;

  friend bool operator==(const SearchSpace&, const SearchSpace&) = default;

 private:
  ArchDims dims_;
  std::vector<std::size_t> depth_, heads_, ffn_;
  SpaceMode mode_;
};

struct Preset {
  std::string name;
  SearchSpace space;
};

/// Named presets: desk, desk-wide-depth, bert, vit, beit3, beit3-wide-depth,
/// synthetic-10k.
Preset preset(const std::string& name);
std::vector<std::string> preset_names();

std::string to_string(SpaceMode mode);
SpaceMode parse_space_mode(const std::string& text);

}  // namespace instatune
