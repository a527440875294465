// SPDX-License-Identifier: Apache-2.0
#include "instatune/train.hpp"

#include <algorithm>
#include <cmath>
#include <numeric>
#include <stdexcept>

namespace instatune {

int TeacherSchedule::gamma(std::size_t epoch) const {
  switch (regime) {
    case TeacherRegime::none: return 0;
    case TeacherRegime::always: return 1;
    case TeacherRegime::until_epoch: return epoch < until_epoch ? 1 : 0;
  }
  return 0;
}

std::string to_string(TeacherRegime regime) {
  switch (regime) {
    case TeacherRegime::none: return "none";
    case TeacherRegime::always: return "always";
    case TeacherRegime::until_epoch: return "until_epoch";
  }
  return "none";
}

TeacherRegime parse_teacher_regime(const std::string& text) {
  if (text == "none") return TeacherRegime::none;
  if (text == "always") return TeacherRegime::always;
  if (text == "until_epoch") return TeacherRegime::until_epoch;
  throw std::invalid_argument("unknown teacher regime '" + text + "'");
}

void TrainConfig::validate(const ArchDims& dims) const {
  if (batch_size == 0) throw std::invalid_argument("batch_size must be positive");
  LossWeights w = loss;
  w.gamma = 0;
  w.validate();
  if (!(adam.lr > 0.0)) throw std::invalid_argument("learning rate must be positive");
  probe.validate(dims);
}

SubnetConfig sample_subnet(const SearchSpace& space, std::mt19937_64& rng) {
  return space.sample(rng);
}

namespace {

std::vector<std::vector<std::size_t>> epoch_batches(std::size_t n,
                                                    std::size_t batch_size,
                                                    std::mt19937_64& rng) {
  std::vector<std::size_t> order(n);
  std::iota(order.begin(), order.end(), 0);
  std::shuffle(order.begin(), order.end(), rng);
  std::vector<std::vector<std::size_t>> batches;
  for (std::size_t i = 0; i < n; i += batch_size)
    batches.emplace_back(order.begin() + i,
                         order.begin() + std::min(n, i + batch_size));
  return batches;
}

}  // namespace

TrainLog train_plain(SupernetParams& params, const Dataset& train,
                     const Dataset& held_out, const TrainConfig& config) {
  config.validate(params.dims());
  std::mt19937_64 data_rng(config.seeds.data);
  Adam adam(config.adam);
  auto leaves = params.all();
  TrainLog log;
  const auto maximal = SubnetConfig::maximal(params.dims());
  for (std::size_t epoch = 0; epoch < config.epochs; ++epoch) {
    double loss_sum = 0.0;
    auto batches = epoch_batches(train.size(), config.batch_size, data_rng);
    for (const auto& rows : batches) {
      Dataset batch = select_dataset(train, rows);
      Graph g;
      auto trace = build_forward(g, params, std::nullopt, batch.tokens);
      NodeId ce = cross_entropy(g, trace.logits, batch.labels);
      try {
        g.evaluate();
      } catch (const NumericError& e) {
        throw NumericError("step " + std::to_string(log.steps.size()) + ": " + e.what());
      }
      params.zero_grad();
      g.backward(ce);
      adam.step(leaves);
      StepRecord rec;
      rec.step = log.steps.size();
      rec.epoch = epoch;
      rec.terms.total = rec.terms.ce_supernet = g.scalar(ce);
      loss_sum += rec.terms.total;
      log.steps.push_back(std::move(rec));
    }
    EpochRecord er;
    er.epoch = epoch;
    er.mean_loss = loss_sum / static_cast<double>(batches.size());
    er.supernet_accuracy = evaluate(params, maximal, held_out);
    er.probe_accuracy = evaluate(params, config.probe, held_out);
    log.epochs.push_back(er);
  }
  return log;
}

WarmStart pretrain_and_freeze_teacher(const ArchDims& dims, const Dataset& train,
                                      const Dataset& held_out,
                                      const TrainConfig& config) {
  SupernetParams student = init_supernet(dims, config.seeds.init);
  TrainLog log = train_plain(student, train, held_out, config);
  SupernetParams teacher = student;
  return {std::move(student), std::move(teacher), std::move(log)};
}

TrainLog finetune_elastic(SupernetParams& params, const SupernetParams& teacher,
                          const SearchSpace& space, const Dataset& train,
                          const Dataset& held_out, const TrainConfig& config) {
  const ArchDims& dims = params.dims();
  config.validate(dims);
  if (!(teacher.dims() == dims) || !(space.dims() == dims))
    throw StructuralError("finetune_elastic: teacher/space dims differ from params");
  std::mt19937_64 data_rng(config.seeds.data);
  std::mt19937_64 sample_rng(config.seeds.sampling);
  Adam adam(config.adam);
  auto leaves = params.all();
  const auto maximal = SubnetConfig::maximal(dims);

  TrainLog log;
  for (std::size_t epoch = 0; epoch < config.epochs; ++epoch) {
    LossWeights w = config.loss;
    w.gamma = config.teacher.gamma(epoch);
    double loss_sum = 0.0;
    std::size_t teacher_steps = 0;
    auto batches = epoch_batches(train.size(), config.batch_size, data_rng);
    for (const auto& rows : batches) {
      Dataset batch = select_dataset(train, rows);
      Graph g;
      StepLogits step;
      step.labels = batch.labels;
      step.supernet = build_forward(g, params, maximal, batch.tokens).logits;
      StepRecord rec;
      for (std::size_t i = 0; i < w.samples; ++i) {
        SubnetConfig sub = sample_subnet(space, sample_rng);
        step.subnets.push_back(build_forward(g, params, sub, batch.tokens).logits);
        rec.sampled.push_back(std::move(sub));
      }
      if (w.gamma == 1) {
        step.teacher = build_forward(g, teacher, maximal, batch.tokens).logits;
        rec.teacher_forward = true;
        ++log.teacher_forwards;
        ++teacher_steps;
      }
      LossTerms terms = instatune_loss(g, step, w);
      try {
        g.evaluate();
      } catch (const NumericError& e) {
        throw NumericError("step " + std::to_string(log.steps.size()) + ": " + e.what());
      }
      params.zero_grad();
      g.backward(terms.total);
      adam.step(leaves);

      rec.step = log.steps.size();
      rec.epoch = epoch;
      rec.gamma = w.gamma;
      rec.terms = read_breakdown(g, terms);
      loss_sum += rec.terms.total;
      log.steps.push_back(std::move(rec));
    }
    EpochRecord er;
    er.epoch = epoch;
    er.mean_loss = loss_sum / static_cast<double>(batches.size());
    er.supernet_accuracy = evaluate(params, maximal, held_out);
    er.probe_accuracy = evaluate(params, config.probe, held_out);
    er.teacher_steps = teacher_steps;
    log.epochs.push_back(er);
  }
  return log;
}

double evaluate(const SupernetParams& params, const SubnetConfig& config,
                const Dataset& data, std::size_t chunk) {
  config.validate(params.dims());
  if (data.size() == 0) throw std::invalid_argument("evaluate: empty dataset");
  if (chunk == 0) chunk = data.size();
  const std::size_t chunks = (data.size() + chunk - 1) / chunk;
  std::vector<std::size_t> correct(chunks, 0);
  std::vector<std::string> errors(chunks);
#pragma omp parallel for schedule(dynamic)
  for (long long c = 0; c < static_cast<long long>(chunks); ++c) {
    try {
      const std::size_t begin = static_cast<std::size_t>(c) * chunk;
      const std::size_t count = std::min(chunk, data.size() - begin);
      Dataset part = slice_dataset(data, begin, count);
      Tensor logits = forward(params, config, part.tokens);
      for (std::size_t r = 0; r < count; ++r) {
        std::size_t best = 0;
        for (std::size_t k = 1; k < logits.cols(); ++k)
          if (logits.at(r, k) > logits.at(r, best)) best = k;
        if (best == part.labels[r]) ++correct[c];
      }
    } catch (const std::exception& e) {
      errors[c] = e.what();
    }
  }
  for (const auto& e : errors)
    if (!e.empty()) throw std::runtime_error("evaluate: " + e);
  const std::size_t total = std::accumulate(correct.begin(), correct.end(), std::size_t{0});
  return static_cast<double>(total) / static_cast<double>(data.size());
}

}  // namespace instatune
