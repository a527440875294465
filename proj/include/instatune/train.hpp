// SPDX-License-Identifier: Apache-2.0
#pragma once

// Desk-scale warm-up ("pre-training"), strong-teacher freezing and the
// elastic fine-tuning loop.

#include <cstdint>
#include <random>
#include <string>
#include <vector>

#include "instatune/data.hpp"
#include "instatune/loss.hpp"
#include "instatune/optim.hpp"
#include "instatune/space.hpp"

namespace instatune {

enum class TeacherRegime { none, always, until_epoch };

struct TeacherSchedule {
  TeacherRegime regime = TeacherRegime::none;
  std::size_t until_epoch = 0;  // epochs [0, until_epoch) use the teacher

  int gamma(std::size_t epoch) const;
  friend bool operator==(const TeacherSchedule&, const TeacherSchedule&) = default;
};

std::string to_string(TeacherRegime regime);
TeacherRegime parse_teacher_regime(const std::string& text);

struct TrainSeeds {
  std::uint64_t init = 0;
  std::uint64_t sampling = 1;
  std::uint64_t data = 2;

  static TrainSeeds from_base(std::uint64_t base) { return {base, base + 1, base + 2}; }
  friend bool operator==(const TrainSeeds&, const TrainSeeds&) = default;
};

struct TrainConfig {
  std::size_t epochs = 20;
  std::size_t batch_size = 32;
  AdamConfig adam;
  // gamma is driven by `teacher`; the value stored here is ignored.
  LossWeights loss;
  TeacherSchedule teacher;
  TrainSeeds seeds;
  // Sub-network whose accuracy is logged every epoch.
  SubnetConfig probe;

  void validate(const ArchDims& dims) const;
  friend bool operator==(const TrainConfig&, const TrainConfig&) = default;
};

struct StepRecord {
  std::size_t step = 0;
  std::size_t epoch = 0;
  int gamma = 0;
  bool teacher_forward = false;
  LossBreakdown terms;
  std::vector<SubnetConfig> sampled;
};

struct EpochRecord {
  std::size_t epoch = 0;
  double mean_loss = 0.0;
  double supernet_accuracy = 0.0;
  double probe_accuracy = 0.0;
  std::size_t teacher_steps = 0;  // in this epoch
};

struct TrainLog {
  std::vector<StepRecord> steps;
  std::vector<EpochRecord> epochs;
  std::size_t teacher_forwards = 0;
};

/// Uniform random sub-network from `space`.
SubnetConfig sample_subnet(const SearchSpace& space, std::mt19937_64& rng);

/// Non-elastic training of the maximal network on cross-entropy only.
TrainLog train_plain(SupernetParams& params, const Dataset& train,
                     const Dataset& held_out, const TrainConfig& config);

struct WarmStart {
  SupernetParams student;  // elastic fine-tuning starts here
  SupernetParams teacher;  // frozen copy, the strong teacher
  TrainLog log;
};

/// Trains a fresh maximal network (seeded by config.seeds.init) and hands
/// out two bit-identical copies. Throws NumericError on divergence.
WarmStart pretrain_and_freeze_teacher(const ArchDims& dims, const Dataset& train,
                                      const Dataset& held_out,
                                      const TrainConfig& config);

/// Elastic fine-tuning. Per step: the super-network forward, M sampled
/// sub-network forwards, a teacher forward when gamma = 1, one backward on
/// the combined loss and one Adam update of the shared weights.
TrainLog finetune_elastic(SupernetParams& params, const SupernetParams& teacher,
                          const SearchSpace& space, const Dataset& train,
                          const Dataset& held_out, const TrainConfig& config);

/// Fraction of `data` classified correctly by `config` (argmax, lowest index
/// wins ties). Chunks run in parallel; the result is deterministic.
double evaluate(const SupernetParams& params, const SubnetConfig& config,
                const Dataset& data, std::size_t chunk = 128);

}  // namespace instatune
