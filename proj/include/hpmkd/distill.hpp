#pragma once

// Distillation losses and the adaptive temperature schedule.

#include <cmath>
#include <optional>
#include <span>
#include <string>
#include <utility>
#include <vector>

#include "hpmkd/errors.hpp"
#include "hpmkd/nn.hpp"

namespace hpmkd {

// Hyperparameter bundle c = [T0, alpha, lr, epochs].
struct DistillConfig {
  double T0 = 4.0;
  double alpha = 0.7;
  double lr = 0.05;
  int epochs = 20;

  void validate() const {
    if (!(T0 > 0.0) || !std::isfinite(T0)) throw InvalidParameterError("T0 must be positive");
    if (!(alpha >= 0.0 && alpha <= 1.0)) throw InvalidParameterError("alpha must lie in [0, 1]");
    if (!(lr > 0.0) || !std::isfinite(lr)) throw InvalidParameterError("lr must be positive");
    if (epochs <= 0) throw InvalidParameterError("epochs must be positive");
  }

  auto operator<=>(const DistillConfig&) const = default;
};

namespace detail {

inline double log_sum_exp(const Matrix& m, Eigen::Index row, double scale) {
  const double mx = m.row(row).maxCoeff() * scale;
  double s = 0.0;
  for (Eigen::Index c = 0; c < m.cols(); ++c) s += std::exp(m(row, c) * scale - mx);
  return mx + std::log(s);
}

}  // namespace detail

inline void check_distribution_rows(const Matrix& probs, double tol, const char* what) {
  for (Eigen::Index r = 0; r < probs.rows(); ++r) {
    if ((probs.row(r).array() < 0.0).any() || std::abs(probs.row(r).sum() - 1.0) > tol) {
      throw InvalidDistributionError(std::string(what) + " row " + std::to_string(r) + " is not a distribution");
    }
  }
}

struct KdLoss {
  double loss = 0.0;
  double ce = 0.0;  // mean cross-entropy against the hard labels
  double kl = 0.0;  // mean KL(teacher || student at T), without the T^2 factor
  Matrix grad;      // dloss / dstudent_logits
};

// loss = alpha * CE(y, softmax(z)) + (1 - alpha) * T^2 * KL(p_T || softmax(z / T)),
// averaged over the batch.
inline KdLoss kd_loss(const Matrix& student_logits, const Matrix& teacher_probs_T, std::span<const int> labels,
                      double temperature, double alpha) {
  check_temperature(temperature);
  if (!(alpha >= 0.0 && alpha <= 1.0)) throw InvalidParameterError("alpha must lie in [0, 1]");
  const auto n = student_logits.rows();
  const auto classes = student_logits.cols();
  if (teacher_probs_T.rows() != n || teacher_probs_T.cols() != classes ||
      static_cast<Eigen::Index>(labels.size()) != n || n == 0) {
    throw ShapeError("kd_loss: logits, teacher probabilities and labels disagree in shape");
  }
  check_distribution_rows(teacher_probs_T, 1e-6, "teacher probability");

  KdLoss out;
  out.grad.resize(n, classes);
  const double inv_n = 1.0 / static_cast<double>(n);
  const double inv_t = 1.0 / temperature;
  for (Eigen::Index r = 0; r < n; ++r) {
    const int y = labels[static_cast<std::size_t>(r)];
    if (y < 0 || y >= classes) throw InvalidInputError("label out of range");
    const double lse1 = detail::log_sum_exp(student_logits, r, 1.0);
    const double lse_t = detail::log_sum_exp(student_logits, r, inv_t);
    out.ce += lse1 - student_logits(r, y);
    for (Eigen::Index c = 0; c < classes; ++c) {
      const double p = teacher_probs_T(r, c);
      const double log_q = student_logits(r, c) * inv_t - lse_t;
      if (p > 0.0) out.kl += p * (std::log(p) - log_q);
      const double s = std::exp(student_logits(r, c) - lse1);
      const double q = std::exp(log_q);
      const double onehot = (c == y) ? 1.0 : 0.0;
      out.grad(r, c) = inv_n * (alpha * (s - onehot) + (1.0 - alpha) * temperature * (q - p));
    }
  }
  out.ce *= inv_n;
  out.kl *= inv_n;
  out.loss = alpha * out.ce + (1.0 - alpha) * temperature * temperature * out.kl;
  return out;
}

// Plain cross-entropy with its logit gradient (alpha = 1 without a teacher).
inline KdLoss ce_loss(const Matrix& logits, std::span<const int> labels) {
  const auto n = logits.rows();
  if (static_cast<Eigen::Index>(labels.size()) != n || n == 0) throw ShapeError("ce_loss: shape mismatch");
  KdLoss out;
  out.grad.resize(n, logits.cols());
  const double inv_n = 1.0 / static_cast<double>(n);
  for (Eigen::Index r = 0; r < n; ++r) {
    const int y = labels[static_cast<std::size_t>(r)];
    if (y < 0 || y >= logits.cols()) throw InvalidInputError("label out of range");
    const double lse = detail::log_sum_exp(logits, r, 1.0);
    out.ce += lse - logits(r, y);
    for (Eigen::Index c = 0; c < logits.cols(); ++c) {
      out.grad(r, c) = inv_n * (std::exp(logits(r, c) - lse) - (c == y ? 1.0 : 0.0));
    }
  }
  out.ce *= inv_n;
  out.loss = out.ce;
  return out;
}

// Shannon entropy in nats; 0 log 0 = 0.
inline double entropy(std::span<const double> weights) {
  double h = 0.0;
  for (double w : weights) {
    if (w > 0.0) h -= w * std::log(w);
  }
  return h;
}

// beta * H(weights). Callers subtract it from the loss to reward diverse
// teacher weights (see EntropySign).
inline double entropy_term(std::span<const double> weights, double beta) {
  if (beta < 0.0 || !std::isfinite(beta)) throw InvalidParameterError("beta must be nonnegative");
  double sum = 0.0;
  for (double w : weights) {
    if (w < 0.0) throw InvalidDistributionError("negative weight");
    sum += w;
  }
  if (std::abs(sum - 1.0) > 1e-9) throw InvalidDistributionError("weights must sum to 1");
  if (beta == 0.0) return 0.0;
  return beta * entropy(weights);
}

// How the entropy term enters the total loss. Reward subtracts beta*H (pushes
// toward uniform weights); Literal adds -beta * sum(a log a) = +beta*H.
enum class EntropySign { Reward, Literal };

inline double entropy_sign_factor(EntropySign s) { return s == EntropySign::Reward ? -1.0 : 1.0; }

// Adaptive temperature: T(t) = T0 * (1 + gamma * |L(t) - L(t-1)| / L(t-1)).
struct SchedulerState {
  double T0 = 4.0;
  double gamma = 0.5;
  std::optional<double> prev_loss;
  double current_T = 4.0;
};

inline SchedulerState make_scheduler(double T0, double gamma = 0.5) {
  check_temperature(T0);
  if (gamma < 0.0 || !std::isfinite(gamma)) throw InvalidParameterError("gamma must be nonnegative");
  return SchedulerState{T0, gamma, std::nullopt, T0};
}

inline std::pair<double, SchedulerState> next_temperature(const SchedulerState& state, double current_loss) {
  if (!(current_loss > 0.0) || !std::isfinite(current_loss)) {
    throw InvalidLossError("loss fed to the temperature schedule must be positive and finite");
  }
  SchedulerState next = state;
  double t = state.T0;
  if (state.prev_loss) {
    const double prev = *state.prev_loss;
    t = state.T0 * (1.0 + state.gamma * std::abs(current_loss - prev) / prev);
  }
  next.prev_loss = current_loss;
  next.current_T = t;
  return {t, next};
}

}  // namespace hpmkd
