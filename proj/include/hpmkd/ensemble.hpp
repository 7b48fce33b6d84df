#pragma once

// Attention-weighted multi-teacher distillation.
//
// For teacher k with logits f_k(x), the score is
//   e_k = w . tanh(W [f_k(x) ; x]),
// the weights alpha = softmax(e) and the soft target
//   p(x) = sum_k alpha_k(x) softmax(f_k(x) / T).
// The student and the attention parameters (W, w) are trained jointly on
// kd_loss(student, p) -/+ beta * H(alpha).

#include <cmath>
#include <span>
#include <vector>

#include "hpmkd/distill.hpp"
#include "hpmkd/errors.hpp"
#include "hpmkd/nn.hpp"
#include "hpmkd/rng.hpp"
#include "hpmkd/training.hpp"

namespace hpmkd {

struct AttentionParams {
  Matrix W;  // hidden_dim x (class_count + input_dim)
  Vector w;  // hidden_dim
  double beta = 0.1;

  std::size_t hidden_dim() const { return static_cast<std::size_t>(W.rows()); }
  std::size_t input_width() const { return static_cast<std::size_t>(W.cols()); }
};

inline AttentionParams make_attention_params(std::size_t class_count, std::size_t input_dim, std::size_t hidden_dim,
                                             double beta, std::uint64_t seed) {
  if (hidden_dim == 0 || class_count == 0 || input_dim == 0) throw InvalidSpecError("attention dims must be positive");
  if (beta < 0.0) throw InvalidParameterError("beta must be nonnegative");
  // Same Glorot-uniform scheme as the networks, on an independent stream.
  CounterRng rng(derive_seed(seed, 0xA77E'0000ull));
  AttentionParams p;
  p.beta = beta;
  const auto in = class_count + input_dim;
  const double lw = std::sqrt(6.0 / static_cast<double>(in + hidden_dim));
  p.W.resize(static_cast<Eigen::Index>(hidden_dim), static_cast<Eigen::Index>(in));
  for (Eigen::Index k = 0; k < p.W.size(); ++k) p.W.data()[k] = rng.uniform(-lw, lw);
  const double lv = std::sqrt(6.0 / static_cast<double>(hidden_dim + 1));
  p.w.resize(static_cast<Eigen::Index>(hidden_dim));
  for (Eigen::Index k = 0; k < p.w.size(); ++k) p.w[k] = rng.uniform(-lv, lv);
  return p;
}

// e_k for one sample. Concatenation order: teacher logits, then features.
inline Vector attention_scores(std::span<const Vector> teacher_logits, const Vector& features,
                               const AttentionParams& params) {
  Vector e(static_cast<Eigen::Index>(teacher_logits.size()));
  for (std::size_t k = 0; k < teacher_logits.size(); ++k) {
    const auto& f = teacher_logits[k];
    if (static_cast<std::size_t>(f.size() + features.size()) != params.input_width()) {
      throw ShapeError("attention input width does not match W");
    }
    Vector u(f.size() + features.size());
    u << f, features;
    e[static_cast<Eigen::Index>(k)] = params.w.dot((params.W * u).array().tanh().matrix());
  }
  return e;
}

inline Vector attention_weights(const Vector& scores) { return softmax_temp(scores, 1.0); }

inline Vector ensemble_soft_targets(std::span<const Vector> teacher_logits, const Vector& weights, double temperature) {
  if (teacher_logits.empty() || static_cast<std::size_t>(weights.size()) != teacher_logits.size()) {
    throw ShapeError("one weight per teacher is required");
  }
  if ((weights.array() < 0.0).any() || std::abs(weights.sum() - 1.0) > 1e-9) {
    throw InvalidDistributionError("ensemble weights must form a distribution");
  }
  Vector p = Vector::Zero(teacher_logits.front().size());
  for (std::size_t k = 0; k < teacher_logits.size(); ++k) {
    p += weights[static_cast<Eigen::Index>(k)] * softmax_temp(teacher_logits[k], temperature);
  }
  return p;
}

struct EnsembleOptions {
  EntropySign entropy_sign = EntropySign::Reward;
  // Entropy of each sample's weights averaged, instead of entropy of the
  // batch-mean weights.
  bool per_sample_entropy = false;
};

struct JointLoss {
  double loss = 0.0;
  double kd = 0.0;
  double entropy = 0.0;
  Matrix grad_student;  // n x C
  Matrix grad_W;
  Vector grad_w;
  Matrix weights;  // n x K attention weights
};

// Loss and gradients of one batch. teacher_logits[k] is n x C; features n x d.
inline JointLoss joint_loss(const Matrix& student_logits, std::span<const Matrix> teacher_logits,
                            const Matrix& features, std::span<const int> labels, const AttentionParams& params,
                            double temperature, double alpha, const EnsembleOptions& opts = {}) {
  const auto n = student_logits.rows();
  const auto classes = student_logits.cols();
  const auto teachers = static_cast<Eigen::Index>(teacher_logits.size());
  if (teachers == 0) throw InvalidSpecError("at least one teacher is required");
  if (features.rows() != n) throw ShapeError("features and logits disagree in batch size");
  if (static_cast<std::size_t>(classes + features.cols()) != params.input_width()) {
    throw ShapeError("attention input width does not match W");
  }

  // Forward: per teacher, H_k = U_k W^T, A_k = tanh(H_k), e_k = A_k w.
  std::vector<Matrix> inputs(teacher_logits.size());
  std::vector<Matrix> hidden(teacher_logits.size());
  std::vector<Matrix> tempered(teacher_logits.size());
  Matrix scores(n, teachers);
  for (Eigen::Index k = 0; k < teachers; ++k) {
    const Matrix& f = teacher_logits[static_cast<std::size_t>(k)];
    if (f.rows() != n || f.cols() != classes) throw ShapeError("teacher logits disagree with student logits");
    Matrix u(n, classes + features.cols());
    u << f, features;
    hidden[static_cast<std::size_t>(k)] = (u * params.W.transpose()).array().tanh().matrix();
    scores.col(k) = hidden[static_cast<std::size_t>(k)] * params.w;
    inputs[static_cast<std::size_t>(k)] = std::move(u);
    tempered[static_cast<std::size_t>(k)] = softmax_rows(f, temperature);
  }
  JointLoss out;
  out.weights = softmax_rows(scores, 1.0);
  Matrix soft = Matrix::Zero(n, classes);
  for (Eigen::Index k = 0; k < teachers; ++k) {
    soft += out.weights.col(k).asDiagonal() * tempered[static_cast<std::size_t>(k)];
  }
  // Row sums drift from 1 only by rounding.
  const KdLoss kd = kd_loss(student_logits, soft, labels, temperature, alpha);
  out.kd = kd.loss;
  out.grad_student = kd.grad;

  // dL/dp from the KL term: (1 - alpha) T^2 / n * (log p - log q + 1).
  const double inv_n = 1.0 / static_cast<double>(n);
  const double kl_scale = (1.0 - alpha) * temperature * temperature * inv_n;
  const Matrix student_tempered = softmax_rows(student_logits, temperature);
  Matrix dsoft(n, classes);
  for (Eigen::Index r = 0; r < n; ++r) {
    for (Eigen::Index c = 0; c < classes; ++c) {
      const double p = std::max(soft(r, c), 1e-300);
      const double q = std::max(student_tempered(r, c), 1e-300);
      dsoft(r, c) = kl_scale * (std::log(p) - std::log(q) + 1.0);
    }
  }
  // dL/dalpha_k = sum_c dL/dp_c * softmax(f_k / T)_c.
  Matrix dweights(n, teachers);
  for (Eigen::Index k = 0; k < teachers; ++k) {
    dweights.col(k) = dsoft.cwiseProduct(tempered[static_cast<std::size_t>(k)]).rowwise().sum();
  }

  const double sign = entropy_sign_factor(opts.entropy_sign);
  if (params.beta > 0.0) {
    if (opts.per_sample_entropy) {
      double h = 0.0;
      for (Eigen::Index r = 0; r < n; ++r) {
        for (Eigen::Index k = 0; k < teachers; ++k) {
          const double a = out.weights(r, k);
          if (a > 0.0) h -= a * std::log(a);
          dweights(r, k) += sign * params.beta * inv_n * -(std::log(std::max(a, 1e-300)) + 1.0);
        }
      }
      out.entropy = h * inv_n;
    } else {
      const RowVector mean = out.weights.colwise().mean();
      double h = 0.0;
      for (Eigen::Index k = 0; k < teachers; ++k) {
        const double a = mean[k];
        if (a > 0.0) h -= a * std::log(a);
        dweights.col(k).array() += sign * params.beta * inv_n * -(std::log(std::max(a, 1e-300)) + 1.0);
      }
      out.entropy = h;
    }
  } else {
    out.entropy = entropy(std::span<const double>(RowVector(out.weights.colwise().mean()).data(),
                                                  static_cast<std::size_t>(teachers)));
  }
  out.loss = out.kd + (params.beta > 0.0 ? sign * params.beta * out.entropy : 0.0);

  // Softmax Jacobian: de_k = alpha_k (g_k - sum_j alpha_j g_j).
  const Vector inner = out.weights.cwiseProduct(dweights).rowwise().sum();
  Matrix dscores = out.weights.cwiseProduct(dweights.colwise() - inner);

  out.grad_W = Matrix::Zero(params.W.rows(), params.W.cols());
  out.grad_w = Vector::Zero(params.w.size());
  for (Eigen::Index k = 0; k < teachers; ++k) {
    const Matrix& a = hidden[static_cast<std::size_t>(k)];
    out.grad_w += a.transpose() * dscores.col(k);
    Matrix g = (dscores.col(k) * params.w.transpose()).cwiseProduct((1.0 - a.array().square()).matrix());
    out.grad_W += g.transpose() * inputs[static_cast<std::size_t>(k)];
  }
  return out;
}

struct EnsembleSpec {
  std::vector<const Model*> teachers;
  std::size_t hidden_dim = 64;

  void validate() const {
    if (teachers.empty()) throw InvalidSpecError("an ensemble needs at least one teacher");
    for (const Model* t : teachers) {
      if (t->input_dim() != teachers.front()->input_dim() || t->class_count() != teachers.front()->class_count()) {
        throw InvalidSpecError("ensemble teachers must share input dim and class count");
      }
    }
  }
};

struct WeightStats {
  int epoch = 0;
  std::vector<double> mean_weights;  // per teacher, over every sample seen in the epoch
  double entropy = 0.0;              // of mean_weights, nats
};

struct MultiDistillResult {
  std::vector<EpochLog> log;
  std::vector<WeightStats> weights;
};

// Trains student and attention jointly; teachers are read-only.
inline MultiDistillResult distill_multi(Model& student, const EnsembleSpec& spec, AttentionParams& params,
                                        const DistillConfig& config, const Matrix& features,
                                        std::span<const int> labels, SchedulerState scheduler,
                                        const DistillOptions& opts, const EnsembleOptions& eopts = {}) {
  spec.validate();
  config.validate();
  if (student.input_dim() != spec.teachers.front()->input_dim() ||
      student.class_count() != spec.teachers.front()->class_count()) {
    throw ShapeError("student and teachers disagree on input dim or class count");
  }
  if (features.rows() == 0 || static_cast<std::size_t>(features.rows()) != labels.size()) {
    throw ShapeError("training data is empty or labels do not match features");
  }
  const auto teachers = spec.teachers.size();
  std::vector<Matrix> teacher_logits;
  for (const Model* t : spec.teachers) teacher_logits.push_back(forward(*t, features));

  OptState opt = make_opt_state(student, config.lr, opts.momentum);
  Matrix vel_W = Matrix::Zero(params.W.rows(), params.W.cols());
  Vector vel_w = Vector::Zero(params.w.size());

  MultiDistillResult result;
  for (int epoch = 0; epoch < config.epochs; ++epoch) {
    const double t = opts.adaptive_temperature ? scheduler.current_T : config.T0;
    double total = 0.0;
    double total_kd = 0.0;
    RowVector weight_sum = RowVector::Zero(static_cast<Eigen::Index>(teachers));
    for (const auto& rows : epoch_batches(labels.size(), opts.batch_size, opts.seed, epoch)) {
      const Matrix x = gather_rows(features, rows);
      const auto y = gather_labels(labels, rows);
      std::vector<Matrix> batch_teachers;
      batch_teachers.reserve(teachers);
      for (const auto& tl : teacher_logits) batch_teachers.push_back(gather_rows(tl, rows));
      ForwardTrace trace;
      const Matrix logits = forward(student, x, &trace);
      const JointLoss l = joint_loss(logits, batch_teachers, x, y, params, t, config.alpha, eopts);
      apply_gradients(student, opt, backward(student, trace, l.grad_student));
      if (!l.grad_W.allFinite() || !l.grad_w.allFinite()) throw NumericalError("non-finite attention gradient", 0);
      vel_W = opts.momentum * vel_W + l.grad_W;
      vel_w = opts.momentum * vel_w + l.grad_w;
      params.W -= config.lr * vel_W;
      params.w -= config.lr * vel_w;
      total += l.loss * static_cast<double>(rows.size());
      total_kd += l.kd * static_cast<double>(rows.size());
      weight_sum += l.weights.colwise().sum();
    }
    const double mean_loss = total / static_cast<double>(labels.size());
    result.log.push_back({epoch, mean_loss, t});
    WeightStats ws;
    ws.epoch = epoch;
    for (Eigen::Index k = 0; k < weight_sum.size(); ++k) {
      ws.mean_weights.push_back(weight_sum[k] / static_cast<double>(labels.size()));
    }
    ws.entropy = entropy(ws.mean_weights);
    result.weights.push_back(std::move(ws));
    // The schedule follows the distillation loss; the entropy reward can
    // drive the total negative.
    const double mean_kd = total_kd / static_cast<double>(labels.size());
    if (opts.adaptive_temperature && mean_kd > 0.0) scheduler = next_temperature(scheduler, mean_kd).second;
  }
  return result;
}

}  // namespace hpmkd
