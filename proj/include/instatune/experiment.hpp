// SPDX-License-Identifier: Apache-2.0
#pragma once

// Experiment configs, the end-to-end pipeline and its on-disk bundle.
//
// Bundle layout (all paths relative to the output directory):
//   config.json           full config snapshot, defaults filled in
//   summary.json          baseline, Pareto front with deltas, checkpoint hashes
//   checkpoints/*.ckpt    warm start and fine-tuned super-networks
//   train_steps.jsonl     one line per optimizer step
//   train_epochs.jsonl    one line per epoch (per arm for ablations)
//   search_history.jsonl  one line per evaluation
//   front.csv             baseline row, then the front by MACs ascending
//   cost.csv              per-config MACs and parameters (kind = cost)
//   plots/*.csv           plot-ready tables

#include <cstdint>
#include <filesystem>
#include <optional>
#include <ostream>
#include <string>
#include <vector>

#include "json.hpp"
#include "instatune/search.hpp"
#include "instatune/train.hpp"

namespace instatune {

inline constexpr int kConfigVersion = 1;
inline constexpr int kBundleVersion = 1;

enum class ExperimentKind {
  finetune,
  search,
  cost,
  ablation_teacher,
  ablation_space,
  ablation_epochs
};
std::string to_string(ExperimentKind kind);
ExperimentKind parse_experiment_kind(const std::string& text);

struct SpaceSpec {
  std::string preset = "desk";
  // Overrides; unset or empty means the preset's value.
  std::optional<ArchDims> dims;
  std::optional<SpaceMode> mode;
  std::vector<std::size_t> depth, heads, ffn;

  SearchSpace build() const;
  friend bool operator==(const SpaceSpec&, const SpaceSpec&) = default;
};

struct DataSpec {
  std::size_t train = 1024;
  std::size_t held_out = 512;
  double marker_prob = 0.7;
  friend bool operator==(const DataSpec&, const DataSpec&) = default;
};

enum class Objective { supernet, synthetic };

struct SearchSpec {
  std::vector<std::string> algorithms = {"linas", "nsga2", "random"};
  std::size_t budget = 18;  // random and LINAS; NSGA-II uses P * (G + 1)
  std::size_t runs = 1;     // seeds per algorithm
  Objective objective = Objective::supernet;
  std::uint64_t synthetic_salt = 0;
  LinasConfig linas;
  NsgaConfig nsga2;
  std::optional<HvReference> reference;
  friend bool operator==(const SearchSpec&, const SearchSpec&) = default;
};

struct AblationSpec {
  std::vector<std::size_t> epochs = {5, 10, 20};
  std::vector<std::string> spaces = {"desk", "desk-wide-depth"};
  friend bool operator==(const AblationSpec&, const AblationSpec&) = default;
};

struct ExperimentConfig {
  ExperimentKind kind = ExperimentKind::search;
  std::uint64_t seed = 0;
  std::string output;  // empty: derived from the output root
  SpaceSpec space;
  DataSpec data;
  std::size_t warmup_epochs = 3;
  TrainConfig train;  // seeds are derived from `seed`
  SearchSpec search;
  CostOptions cost;
  AblationSpec ablation;

  /// Throws std::invalid_argument describing the first problem found.
  void validate() const;
  /// Sets train.seeds from `seed`.
  void derive_seeds();
  friend bool operator==(const ExperimentConfig&, const ExperimentConfig&) = default;
};

/// Desk defaults for the given preset (probe = smallest uniform config).
ExperimentConfig default_config(const std::string& preset = "desk");

nlohmann::json to_json(const ExperimentConfig& config);
/// Strict: unknown keys and wrong types are errors; missing keys keep
/// their defaults. The result is validated.
ExperimentConfig config_from_json(const nlohmann::json& j);
ExperimentConfig load_config(const std::filesystem::path& path);

/// `config.output` if set, else `$INSTATUNE_OUT` (or "runs") joined with
/// "<kind>-<preset>-s<seed>".
std::filesystem::path default_output_dir(const ExperimentConfig& config);

/// The marker-task train and held-out sets an experiment trains and
/// evaluates on (seeds derived from `config.seed`).
struct ExperimentData {
  Dataset train, held_out;
};
ExperimentData experiment_data(const ExperimentConfig& config, const ArchDims& dims);

struct ResultBundle {
  std::filesystem::path dir;
  nlohmann::json summary;
  bool complete = false;
};

/// Validates, then runs every stage of `config.kind` and writes the bundle
/// into `out`. On a stage failure the summary is written with
/// "complete": false and the error is rethrown.
ResultBundle run_experiment(const ExperimentConfig& config,
                            const std::filesystem::path& out,
                            std::ostream* progress = nullptr);

// ---------------------------------------------------------------------------
// Bundle pieces.

inline constexpr const char* kFrontHeader =
    "encoding,depth,heads,ffn,accuracy,macs,delta_mac,delta_acc";

struct FrontRow {
  std::string encoding;
  std::size_t depth = 0;
  std::string heads, ffn;  // ';'-joined per-layer values
  double accuracy = 0.0;
  std::uint64_t macs = 0;
  double delta_mac = 0.0, delta_acc = 0.0;
};

/// Baseline row (deltas 0) first when given, then `front` sorted by MACs.
void export_front(const std::vector<Candidate>& front,
                  const std::optional<Candidate>& baseline,
                  const std::filesystem::path& path);
std::vector<FrontRow> read_front(const std::filesystem::path& path);

/// Reads summary.json and checks every stored delta against one recomputed
/// from its accuracy and MACs; throws on any mismatch.
nlohmann::json load_summary(const std::filesystem::path& path);

/// Writes plots/*.csv for the bundle in `dir` and returns the files
/// written. Throws listing the missing stages when the bundle lacks what
/// its kind needs.
std::vector<std::filesystem::path> emit_plot_data(const std::filesystem::path& dir);

/// Hex SHA-256 of a file's bytes.
std::string sha256_file(const std::filesystem::path& path);

/// Shortest decimal text that parses back to the same double.
std::string format_number(double value);

}  // namespace instatune
