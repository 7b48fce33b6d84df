#pragma once

// Finite-difference checks of the distillation gradients on small random
// models. Each returns the largest relative error over every parameter.

#include <cstdint>
#include <vector>

#include "hpmkd/distill.hpp"
#include "hpmkd/ensemble.hpp"
#include "hpmkd/nn.hpp"
#include "hpmkd/rng.hpp"
#include "oracles.hpp"

namespace gradcheck {

using hpmkd::Matrix;

struct Problem {
  hpmkd::Model model;
  std::vector<oracle::Vec> x;
  Matrix features;
  std::vector<int> labels;
  std::size_t classes = 0;
};

// A random MLP of at most 200 parameters and a six-row batch.
inline Problem random_problem(std::uint64_t seed) {
  hpmkd::CounterRng rng(seed);
  const std::size_t dim = 3 + rng.below(3);
  const std::size_t h1 = 4 + rng.below(5);
  const std::size_t h2 = 3 + rng.below(4);
  const std::size_t classes = 2 + rng.below(3);
  Problem p;
  p.classes = classes;
  p.model = hpmkd::create_model({dim, h1, h2, classes}, hpmkd::derive_seed(seed, 1));
  // Nonzero biases keep the check away from the symmetric start.
  for (auto& b : p.model.biases) {
    for (Eigen::Index i = 0; i < b.size(); ++i) b[i] = rng.uniform(-0.3, 0.3);
  }
  const std::size_t n = 6;
  p.features.resize(n, static_cast<Eigen::Index>(dim));
  for (std::size_t r = 0; r < n; ++r) {
    oracle::Vec row(dim);
    for (std::size_t d = 0; d < dim; ++d) {
      row[d] = rng.normal();
      p.features(static_cast<Eigen::Index>(r), static_cast<Eigen::Index>(d)) = row[d];
    }
    p.x.push_back(row);
    p.labels.push_back(static_cast<int>(rng.below(classes)));
  }
  return p;
}

inline std::vector<double*> model_params(hpmkd::Model& m) {
  std::vector<double*> out;
  for (std::size_t l = 0; l < m.weights.size(); ++l) {
    for (Eigen::Index i = 0; i < m.weights[l].size(); ++i) out.push_back(m.weights[l].data() + i);
    for (Eigen::Index i = 0; i < m.biases[l].size(); ++i) out.push_back(m.biases[l].data() + i);
  }
  return out;
}

inline std::vector<const double*> gradient_slots(const hpmkd::Gradients& g) {
  std::vector<const double*> out;
  for (std::size_t l = 0; l < g.weights.size(); ++l) {
    for (Eigen::Index i = 0; i < g.weights[l].size(); ++i) out.push_back(g.weights[l].data() + i);
    for (Eigen::Index i = 0; i < g.biases[l].size(); ++i) out.push_back(g.biases[l].data() + i);
  }
  return out;
}

inline std::vector<oracle::Vec> oracle_logits(const Problem& p) {
  std::vector<oracle::Vec> out;
  for (const auto& row : p.x) out.push_back(oracle::mlp(p.model, row));
  return out;
}

constexpr double kStep = 1e-5;

// Single-teacher loss: analytic backprop against differences of the oracle loss.
inline double kd_max_rel_error(std::uint64_t seed) {
  auto p = random_problem(seed);
  hpmkd::CounterRng rng(hpmkd::derive_seed(seed, 2));
  const double t = 1.0 + 4.0 * rng.uniform();
  const double alpha = rng.uniform();
  std::vector<oracle::Vec> teacher;
  Matrix teacher_m(static_cast<Eigen::Index>(p.x.size()), static_cast<Eigen::Index>(p.classes));
  for (std::size_t r = 0; r < p.x.size(); ++r) {
    oracle::Vec z(p.classes);
    for (auto& v : z) v = 2.0 * rng.normal();
    teacher.push_back(oracle::softmax(z, t));
    for (std::size_t c = 0; c < p.classes; ++c) teacher_m(static_cast<Eigen::Index>(r), static_cast<Eigen::Index>(c)) = teacher[r][c];
  }

  hpmkd::ForwardTrace trace;
  const Matrix logits = hpmkd::forward(p.model, p.features, &trace);
  const auto loss = hpmkd::kd_loss(logits, teacher_m, p.labels, t, alpha);
  const auto grads = hpmkd::backward(p.model, trace, loss.grad);

  auto f = [&] { return oracle::kd(oracle_logits(p), teacher, p.labels, t, alpha); };
  const auto params = model_params(p.model);
  const auto analytic = gradient_slots(grads);
  double worst = 0.0;
  for (std::size_t i = 0; i < params.size(); ++i) {
    worst = std::max(worst, oracle::rel_err(*analytic[i], oracle::central_diff(f, *params[i], kStep)));
  }
  return worst;
}

// Attention-weighted multi-teacher loss with the entropy term: student
// parameters, W and w.
inline double joint_max_rel_error(std::uint64_t seed, bool per_sample, hpmkd::EntropySign sign) {
  auto p = random_problem(seed);
  hpmkd::CounterRng rng(hpmkd::derive_seed(seed, 3));
  const double t = 1.0 + 4.0 * rng.uniform();
  const double alpha = rng.uniform();
  const std::size_t k = 2 + rng.below(3);
  const std::size_t n = p.x.size();
  std::vector<Matrix> teacher_m(k, Matrix(static_cast<Eigen::Index>(n), static_cast<Eigen::Index>(p.classes)));
  std::vector<std::vector<oracle::Vec>> teacher(k);
  for (std::size_t j = 0; j < k; ++j) {
    for (std::size_t r = 0; r < n; ++r) {
      oracle::Vec z(p.classes);
      for (std::size_t c = 0; c < p.classes; ++c) {
        z[c] = 2.0 * rng.normal();
        teacher_m[j](static_cast<Eigen::Index>(r), static_cast<Eigen::Index>(c)) = z[c];
      }
      teacher[j].push_back(z);
    }
  }
  auto params = hpmkd::make_attention_params(p.classes, p.x.front().size(), 4, 0.05 + 0.3 * rng.uniform(),
                                             hpmkd::derive_seed(seed, 4));
  // Larger attention weights make the scores, and so the check, nontrivial.
  params.W *= 3.0;
  params.w *= 3.0;

  hpmkd::EnsembleOptions opts;
  opts.entropy_sign = sign;
  opts.per_sample_entropy = per_sample;
  hpmkd::ForwardTrace trace;
  const Matrix logits = hpmkd::forward(p.model, p.features, &trace);
  const auto jl = hpmkd::joint_loss(logits, teacher_m, p.features, p.labels, params, t, alpha, opts);
  const auto grads = hpmkd::backward(p.model, trace, jl.grad_student);

  oracle::Attention a;
  a.beta = params.beta;
  auto sync = [&] {
    a.W.assign(static_cast<std::size_t>(params.W.rows()), {});
    for (Eigen::Index h = 0; h < params.W.rows(); ++h) {
      for (Eigen::Index i = 0; i < params.W.cols(); ++i) a.W[static_cast<std::size_t>(h)].push_back(params.W(h, i));
    }
    a.w.assign(params.w.data(), params.w.data() + params.w.size());
  };
  const double s = hpmkd::entropy_sign_factor(sign);
  auto f = [&] {
    sync();
    return oracle::joint(oracle_logits(p), teacher, p.x, p.labels, a, t, alpha, s, per_sample);
  };

  double worst = 0.0;
  const auto mp = model_params(p.model);
  const auto mg = gradient_slots(grads);
  for (std::size_t i = 0; i < mp.size(); ++i) {
    worst = std::max(worst, oracle::rel_err(*mg[i], oracle::central_diff(f, *mp[i], kStep)));
  }
  for (Eigen::Index i = 0; i < params.W.size(); ++i) {
    worst = std::max(worst, oracle::rel_err(jl.grad_W.data()[i], oracle::central_diff(f, params.W.data()[i], kStep)));
  }
  for (Eigen::Index i = 0; i < params.w.size(); ++i) {
    worst = std::max(worst, oracle::rel_err(jl.grad_w[i], oracle::central_diff(f, params.w.data()[i], kStep)));
  }
  return worst;
}

}  // namespace gradcheck
