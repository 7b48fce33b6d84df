#pragma once

// Epoch loops: supervised training and single-teacher distillation.

#include <algorithm>
#include <cstdint>
#include <span>
#include <vector>

#include "hpmkd/distill.hpp"
#include "hpmkd/nn.hpp"
#include "hpmkd/rng.hpp"

namespace hpmkd {

struct TrainOptions {
  double lr = 0.1;
  double momentum = 0.9;
  double weight_decay = 0.0;
  int epochs = 30;
  std::size_t batch_size = 256;
  std::uint64_t seed = 0;
  // Multiply lr by lr_decay at each listed epoch. Empty by default.
  std::vector<int> lr_milestones;
  double lr_decay = 0.1;
};

struct DistillOptions {
  double momentum = 0.9;
  std::size_t batch_size = 256;
  std::uint64_t seed = 0;
  bool adaptive_temperature = true;
  double gamma = 0.5;
};

struct EpochLog {
  int epoch = 0;
  double mean_loss = 0.0;
  double temperature = 0.0;
};

// Seeded shuffle each epoch; the last short batch is kept.
inline std::vector<std::vector<std::size_t>> epoch_batches(std::size_t n, std::size_t batch_size, std::uint64_t seed,
                                                           int epoch) {
  if (batch_size == 0) throw InvalidParameterError("batch size must be positive");
  const auto order = shuffled_indices(n, derive_seed(seed, static_cast<std::uint64_t>(epoch)));
  std::vector<std::vector<std::size_t>> batches;
  for (std::size_t start = 0; start < n; start += batch_size) {
    const auto end = std::min(n, start + batch_size);
    batches.emplace_back(order.begin() + static_cast<std::ptrdiff_t>(start),
                         order.begin() + static_cast<std::ptrdiff_t>(end));
  }
  return batches;
}

inline std::vector<int> gather_labels(std::span<const int> labels, std::span<const std::size_t> rows) {
  std::vector<int> out;
  out.reserve(rows.size());
  for (auto r : rows) out.push_back(labels[r]);
  return out;
}

inline std::vector<EpochLog> train_supervised(Model& model, const Matrix& features, std::span<const int> labels,
                                              const TrainOptions& opts) {
  if (features.rows() == 0 || static_cast<std::size_t>(features.rows()) != labels.size()) {
    throw ShapeError("training data is empty or labels do not match features");
  }
  OptState opt = make_opt_state(model, opts.lr, opts.momentum, opts.weight_decay);
  std::vector<EpochLog> log;
  for (int epoch = 0; epoch < opts.epochs; ++epoch) {
    if (std::find(opts.lr_milestones.begin(), opts.lr_milestones.end(), epoch) != opts.lr_milestones.end()) {
      opt.learning_rate *= opts.lr_decay;
    }
    double total = 0.0;
    for (const auto& rows : epoch_batches(labels.size(), opts.batch_size, opts.seed, epoch)) {
      const Matrix x = gather_rows(features, rows);
      const auto y = gather_labels(labels, rows);
      ForwardTrace trace;
      const Matrix logits = forward(model, x, &trace);
      const KdLoss l = ce_loss(logits, y);
      apply_gradients(model, opt, backward(model, trace, l.grad));
      total += l.loss * static_cast<double>(rows.size());
    }
    log.push_back({epoch, total / static_cast<double>(labels.size()), 1.0});
  }
  return log;
}

// Distils `teacher` into `student` with the combined loss. Tempered teacher
// probabilities are recomputed at the start of each epoch from the epoch's
// temperature; the schedule advances once per epoch on the mean loss.
inline std::vector<EpochLog> distill_single(Model& student, const Model& teacher, const Matrix& features,
                                            std::span<const int> labels, const DistillConfig& config,
                                            const DistillOptions& opts) {
  config.validate();
  if (features.rows() == 0 || static_cast<std::size_t>(features.rows()) != labels.size()) {
    throw ShapeError("training data is empty or labels do not match features");
  }
  if (teacher.class_count() != student.class_count() || teacher.input_dim() != student.input_dim()) {
    throw ShapeError("teacher and student disagree on input dim or class count");
  }
  const Matrix teacher_logits = forward(teacher, features);
  OptState opt = make_opt_state(student, config.lr, opts.momentum);
  SchedulerState sched = make_scheduler(config.T0, opts.gamma);
  std::vector<EpochLog> log;
  for (int epoch = 0; epoch < config.epochs; ++epoch) {
    const double t = opts.adaptive_temperature ? sched.current_T : config.T0;
    const Matrix teacher_probs = softmax_rows(teacher_logits, t);
    double total = 0.0;
    for (const auto& rows : epoch_batches(labels.size(), opts.batch_size, opts.seed, epoch)) {
      const Matrix x = gather_rows(features, rows);
      const auto y = gather_labels(labels, rows);
      ForwardTrace trace;
      const Matrix logits = forward(student, x, &trace);
      const KdLoss l = kd_loss(logits, gather_rows(teacher_probs, rows), y, t, config.alpha);
      apply_gradients(student, opt, backward(student, trace, l.grad));
      total += l.loss * static_cast<double>(rows.size());
    }
    const double mean_loss = total / static_cast<double>(labels.size());
    log.push_back({epoch, mean_loss, t});
    if (opts.adaptive_temperature && mean_loss > 0.0) sched = next_temperature(sched, mean_loss).second;
  }
  return log;
}

}  // namespace hpmkd
