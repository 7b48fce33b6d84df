#pragma once

// Progressive distillation chain: teacher -> intermediates -> student, with
// intermediate sizes at the geometric mean of the current and student sizes
// and an improvement threshold deciding when to stop.

#include <cmath>
#include <functional>
#include <memory>
#include <optional>
#include <string>
#include <vector>

#include "hpmkd/errors.hpp"
#include "hpmkd/nn.hpp"

namespace hpmkd {

// round(sqrt(curr * student)), half up.
inline std::size_t plan_next_size(std::size_t curr_params, std::size_t student_params) {
  const long double g = std::sqrt(static_cast<long double>(curr_params) * static_cast<long double>(student_params));
  return static_cast<std::size_t>(std::floor(g + 0.5L));
}

// Sizes the chain loop visits when every intermediate is accepted.
inline std::vector<std::size_t> plan_chain_sizes(std::size_t teacher_params, std::size_t student_params,
                                                 std::size_t max_intermediates = SIZE_MAX) {
  std::vector<std::size_t> sizes;
  std::size_t curr = teacher_params;
  while (sizes.size() < max_intermediates &&
         static_cast<double>(curr) / static_cast<double>(student_params) > 2.0) {
    curr = plan_next_size(curr, student_params);
    sizes.push_back(curr);
  }
  return sizes;
}

// Hidden widths max(1, round(ratio_i * s)) for a common scale s found by
// bisection so the parameter count lands within 2% of the target.
inline std::vector<std::size_t> realize_architecture(std::size_t target_params, std::size_t input_dim,
                                                     std::size_t class_count, std::span<const double> ratios) {
  if (ratios.empty()) throw InvalidSpecError("width template needs at least one hidden layer");
  for (double r : ratios) {
    if (!(r > 0.0)) throw InvalidSpecError("width template ratios must be positive");
  }
  auto layers_at = [&](double s) {
    std::vector<std::size_t> hidden;
    for (double r : ratios) hidden.push_back(std::max<std::size_t>(1, static_cast<std::size_t>(std::floor(r * s + 0.5))));
    return mlp_layers(input_dim, hidden, class_count);
  };
  auto count_at = [&](double s) { return param_count(layers_at(s)); };
  const auto tolerance = 0.02 * static_cast<double>(target_params);
  auto error = [&](std::size_t c) { return std::abs(static_cast<double>(c) - static_cast<double>(target_params)); };

  const std::size_t minimal = count_at(0.0);
  if (static_cast<double>(minimal) > static_cast<double>(target_params) + tolerance) {
    throw InfeasibleSizeError("target " + std::to_string(target_params) + " is below the minimal network size " +
                              std::to_string(minimal));
  }
  if (static_cast<double>(target_params) <= static_cast<double>(minimal) + tolerance) return layers_at(0.0);

  double lo = 0.0, hi = 1.0;
  while (count_at(hi) < target_params) {
    hi *= 2.0;
    if (hi > 1e12) throw InfeasibleSizeError("target size unreachable");
  }
  // Invariant: count(lo) < target <= count(hi).
  for (int it = 0; it < 200 && hi - lo > 1e-12 * hi; ++it) {
    const double mid = 0.5 * (lo + hi);
    if (count_at(mid) < target_params) {
      lo = mid;
    } else {
      hi = mid;
    }
  }
  const auto below = count_at(lo), above = count_at(hi);
  const double s = error(above) <= error(below) ? hi : lo;
  const auto layers = layers_at(s);
  if (error(param_count(layers)) > tolerance) {
    throw InfeasibleSizeError("no width scale reaches " + std::to_string(target_params) + " parameters within 2%");
  }
  return layers;
}

// Acc(next) - Acc(curr) * |next| / |curr|.
inline double improvement_delta(double acc_next, double acc_curr, std::size_t p_next, std::size_t p_curr) {
  return acc_next - acc_curr * static_cast<double>(p_next) / static_cast<double>(p_curr);
}

struct ChainSpec {
  double epsilon = 0.005;
  std::size_t max_intermediates = 4;
  std::vector<std::size_t> student_layers;
  // Hidden-width ratios for intermediates; empty means the teacher's widths.
  std::vector<double> width_template;
  // When nonempty, these architectures are used as the intermediates in
  // order, without sizing or threshold checks.
  std::vector<std::vector<std::size_t>> manual_intermediates;
};

struct ChainStage {
  std::string role;  // "teacher", "intermediate", "student"
  Model model;
  std::size_t params = 0;
  std::size_t planned_params = 0;
  double validation_accuracy = 0.0;
  double delta = 0.0;     // improvement_delta against the previous member
  double raw_drop = 0.0;  // previous accuracy minus this one
  double wall_seconds = 0.0;
  bool cached = false;
  std::string cache_key;
};

struct Chain {
  std::vector<ChainStage> stages;
  std::optional<ChainStage> trained_not_appended;

  std::size_t intermediates() const { return stages.size() >= 2 ? stages.size() - 2 : 0; }
};

class ChainError : public Error {
 public:
  ChainError(const std::string& what, Chain partial)
      : Error("chain construction failed: " + what), partial_(std::make_shared<Chain>(std::move(partial))) {}
  const Chain& partial() const { return *partial_; }

 private:
  std::shared_ptr<Chain> partial_;
};

// Outcome of training one chain member.
struct StageResult {
  Model model;
  double wall_seconds = 0.0;
  bool cached = false;
  std::string cache_key;
};

struct ChainTrainer {
  // Distils `source` into a fresh model with `layers`. `stage` is the
  // 1-based position in the chain; `is_student` marks the final member.
  std::function<StageResult(const Model& source, const std::vector<std::size_t>& layers, std::size_t stage,
                            bool is_student)>
      distill;
  std::function<double(const Model&)> validate;
};

inline Chain build_chain(const Model& teacher, const ChainSpec& spec, const ChainTrainer& trainer) {
  validate_layer_sizes(spec.student_layers);
  if (spec.epsilon < 0.0) throw InvalidParameterError("epsilon must be nonnegative");
  const std::size_t student_params = param_count(spec.student_layers);
  const std::size_t teacher_params = param_count(teacher);

  Chain chain;
  ChainStage head;
  head.role = "teacher";
  head.model = teacher;
  head.params = head.planned_params = teacher_params;
  head.validation_accuracy = trainer.validate(teacher);
  chain.stages.push_back(std::move(head));

  std::vector<double> ratios = spec.width_template;
  if (ratios.empty()) {
    for (std::size_t i = 1; i + 1 < teacher.layer_sizes.size(); ++i) {
      ratios.push_back(static_cast<double>(teacher.layer_sizes[i]));
    }
    if (ratios.empty()) ratios.push_back(1.0);
  }

  auto run_stage = [&](const std::vector<std::size_t>& layers, std::size_t planned, bool is_student) {
    const ChainStage& prev = chain.stages.back();
    ChainStage st;
    st.role = is_student ? "student" : "intermediate";
    try {
      auto r = trainer.distill(prev.model, layers, chain.stages.size(), is_student);
      st.model = std::move(r.model);
      st.wall_seconds = r.wall_seconds;
      st.cached = r.cached;
      st.cache_key = std::move(r.cache_key);
      st.validation_accuracy = trainer.validate(st.model);
    } catch (const std::exception& e) {
      throw ChainError(std::string(st.role) + " at position " + std::to_string(chain.stages.size()) + ": " + e.what(),
                       chain);
    }
    st.params = param_count(st.model);
    st.planned_params = planned;
    st.delta = improvement_delta(st.validation_accuracy, prev.validation_accuracy, st.params, prev.params);
    st.raw_drop = prev.validation_accuracy - st.validation_accuracy;
    return st;
  };

  if (!spec.manual_intermediates.empty()) {
    for (const auto& layers : spec.manual_intermediates) {
      validate_layer_sizes(layers);
      chain.stages.push_back(run_stage(layers, param_count(layers), false));
    }
  } else {
    // Until the student is appended every member after the head is an intermediate.
    while (chain.stages.size() - 1 < spec.max_intermediates &&
           static_cast<double>(chain.stages.back().params) / static_cast<double>(student_params) > 2.0) {
      const std::size_t curr = chain.stages.back().params;
      const std::size_t planned = plan_next_size(curr, student_params);
      std::vector<std::size_t> layers;
      try {
        layers = realize_architecture(planned, teacher.input_dim(), teacher.class_count(), ratios);
      } catch (const InfeasibleSizeError&) {
        break;
      }
      const auto realized = param_count(layers);
      if (realized >= curr || realized <= student_params) break;
      auto st = run_stage(layers, planned, false);
      if (st.delta < spec.epsilon) {
        chain.trained_not_appended = std::move(st);
        break;
      }
      chain.stages.push_back(std::move(st));
    }
  }
  chain.stages.push_back(run_stage(spec.student_layers, student_params, true));
  return chain;
}

}  // namespace hpmkd
