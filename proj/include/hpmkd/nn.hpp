#pragma once

// Dense feed-forward networks: construction, forward/backward passes,
// SGD with momentum, tempered softmax and a binary container format.

#include <Eigen/Dense>

#include <bit>
#include <cmath>
#include <cstdint>
#include <cstring>
#include <span>
#include <string>
#include <string_view>
#include <vector>

#include "hpmkd/errors.hpp"
#include "hpmkd/rng.hpp"

namespace hpmkd {

using Matrix = Eigen::Matrix<double, Eigen::Dynamic, Eigen::Dynamic, Eigen::RowMajor>;
using Vector = Eigen::VectorXd;
using RowVector = Eigen::RowVectorXd;

// Layer sizes run input dim first, class count last. weights[i] maps
// layer i to layer i+1 and has shape (layer_sizes[i+1] x layer_sizes[i]).
struct Model {
  std::vector<std::size_t> layer_sizes;
  std::vector<Matrix> weights;
  std::vector<Vector> biases;
  std::uint64_t seed = 0;

  std::size_t input_dim() const { return layer_sizes.front(); }
  std::size_t class_count() const { return layer_sizes.back(); }
  std::size_t layer_count() const { return weights.size(); }

  bool operator==(const Model& other) const {
    if (layer_sizes != other.layer_sizes || seed != other.seed) return false;
    for (std::size_t i = 0; i < weights.size(); ++i) {
      if (weights[i] != other.weights[i] || biases[i] != other.biases[i]) return false;
    }
    return true;
  }
};

// Layer sizes of an MLP with the given hidden widths.
inline std::vector<std::size_t> mlp_layers(std::size_t input_dim, std::span<const std::size_t> hidden,
                                           std::size_t class_count) {
  std::vector<std::size_t> sizes;
  sizes.reserve(hidden.size() + 2);
  sizes.push_back(input_dim);
  sizes.insert(sizes.end(), hidden.begin(), hidden.end());
  sizes.push_back(class_count);
  return sizes;
}

inline std::size_t param_count(std::span<const std::size_t> layer_sizes) {
  std::size_t total = 0;
  for (std::size_t i = 0; i + 1 < layer_sizes.size(); ++i) {
    total += layer_sizes[i] * layer_sizes[i + 1] + layer_sizes[i + 1];
  }
  return total;
}

inline std::size_t param_count(const Model& model) { return param_count(model.layer_sizes); }

inline void validate_layer_sizes(std::span<const std::size_t> layer_sizes) {
  if (layer_sizes.size() < 2) {
    throw InvalidSpecError("a model needs at least an input and an output layer");
  }
  for (auto s : layer_sizes) {
    if (s == 0) throw InvalidSpecError("layer sizes must be positive");
  }
}

// Glorot-uniform weights, zero biases. Identical (layer_sizes, seed) give
// bit-identical models.
inline Model create_model(std::span<const std::size_t> layer_sizes, std::uint64_t seed) {
  validate_layer_sizes(layer_sizes);
  Model m;
  m.layer_sizes.assign(layer_sizes.begin(), layer_sizes.end());
  m.seed = seed;
  CounterRng rng(seed);
  for (std::size_t i = 0; i + 1 < layer_sizes.size(); ++i) {
    const auto fan_in = layer_sizes[i];
    const auto fan_out = layer_sizes[i + 1];
    const double limit = std::sqrt(6.0 / static_cast<double>(fan_in + fan_out));
    Matrix w(fan_out, fan_in);
    for (Eigen::Index r = 0; r < w.rows(); ++r) {
      for (Eigen::Index c = 0; c < w.cols(); ++c) w(r, c) = rng.uniform(-limit, limit);
    }
    m.weights.push_back(std::move(w));
    m.biases.push_back(Vector::Zero(static_cast<Eigen::Index>(fan_out)));
  }
  return m;
}

inline Model create_model(std::initializer_list<std::size_t> layer_sizes, std::uint64_t seed) {
  return create_model(std::span<const std::size_t>(layer_sizes.begin(), layer_sizes.size()), seed);
}

// Layer inputs recorded during a forward pass: activations[0] is the batch,
// activations[i] the post-rectifier output of hidden layer i.
struct ForwardTrace {
  std::vector<Matrix> activations;

  // Penultimate-layer activations (the embedding).
  const Matrix& penultimate() const { return activations.back(); }
};

inline Matrix forward(const Model& model, const Matrix& features, ForwardTrace* trace = nullptr) {
  if (static_cast<std::size_t>(features.cols()) != model.input_dim()) {
    throw ShapeError("feature width " + std::to_string(features.cols()) + " does not match input dim " +
                     std::to_string(model.input_dim()));
  }
  if (trace) {
    trace->activations.clear();
    trace->activations.push_back(features);
  }
  Matrix h = features;
  const std::size_t layers = model.layer_count();
  for (std::size_t i = 0; i < layers; ++i) {
    Matrix z = h * model.weights[i].transpose();
    z.rowwise() += model.biases[i].transpose();
    if (i + 1 < layers) {
      z = z.cwiseMax(0.0);
      if (trace) trace->activations.push_back(z);
    }
    h = std::move(z);
  }
  return h;
}

// Penultimate-layer activations for a batch.
inline Matrix embed(const Model& model, const Matrix& features) {
  ForwardTrace trace;
  forward(model, features, &trace);
  return trace.penultimate();
}

inline void check_temperature(double temperature) {
  if (!(temperature > 0.0) || !std::isfinite(temperature)) {
    throw InvalidTemperatureError("temperature must be positive and finite, got " + std::to_string(temperature));
  }
}

// softmax(logits / T), shifted by the max for stability.
inline Vector softmax_temp(std::span<const double> logits, double temperature) {
  check_temperature(temperature);
  Vector out(static_cast<Eigen::Index>(logits.size()));
  if (logits.empty()) return out;
  double mx = logits[0];
  for (double z : logits) mx = std::max(mx, z);
  double sum = 0.0;
  for (std::size_t i = 0; i < logits.size(); ++i) {
    out[static_cast<Eigen::Index>(i)] = std::exp((logits[i] - mx) / temperature);
    sum += out[static_cast<Eigen::Index>(i)];
  }
  return out / sum;
}

inline Vector softmax_temp(const Vector& logits, double temperature) {
  return softmax_temp(std::span<const double>(logits.data(), static_cast<std::size_t>(logits.size())), temperature);
}

// Row-wise tempered softmax.
inline Matrix softmax_rows(const Matrix& logits, double temperature = 1.0) {
  check_temperature(temperature);
  Matrix out(logits.rows(), logits.cols());
  for (Eigen::Index r = 0; r < logits.rows(); ++r) {
    const double mx = logits.row(r).maxCoeff();
    out.row(r) = ((logits.row(r).array() - mx) / temperature).exp().matrix();
    out.row(r) /= out.row(r).sum();
  }
  return out;
}

struct Gradients {
  std::vector<Matrix> weights;
  std::vector<Vector> biases;

  static Gradients zeros_like(const Model& model) {
    Gradients g;
    for (std::size_t i = 0; i < model.layer_count(); ++i) {
      g.weights.push_back(Matrix::Zero(model.weights[i].rows(), model.weights[i].cols()));
      g.biases.push_back(Vector::Zero(model.biases[i].size()));
    }
    return g;
  }
};

// Backpropagates dL/dlogits through the network recorded in `trace`.
inline Gradients backward(const Model& model, const ForwardTrace& trace, const Matrix& dlogits) {
  const std::size_t layers = model.layer_count();
  if (trace.activations.size() != layers) throw ShapeError("forward trace does not match model depth");
  if (dlogits.cols() != static_cast<Eigen::Index>(model.class_count()) ||
      dlogits.rows() != trace.activations.front().rows()) {
    throw ShapeError("loss gradient shape does not match logits");
  }
  Gradients g;
  g.weights.resize(layers);
  g.biases.resize(layers);
  Matrix delta = dlogits;
  for (std::size_t i = layers; i-- > 0;) {
    const Matrix& input = trace.activations[i];
    g.weights[i] = delta.transpose() * input;
    g.biases[i] = delta.colwise().sum().transpose();
    if (i > 0) {
      Matrix upstream = delta * model.weights[i];
      delta = upstream.cwiseProduct((input.array() > 0.0).cast<double>().matrix());
    }
  }
  return g;
}

// SGD-with-momentum state. Weight decay (L2 on weights only) defaults to off.
struct OptState {
  double learning_rate = 0.1;
  double momentum = 0.9;
  double weight_decay = 0.0;
  std::vector<Matrix> velocity_w;
  std::vector<Vector> velocity_b;
};

inline OptState make_opt_state(const Model& model, double learning_rate, double momentum,
                               double weight_decay = 0.0) {
  if (!(learning_rate > 0.0)) throw InvalidParameterError("learning rate must be positive");
  if (momentum < 0.0 || momentum >= 1.0) throw InvalidParameterError("momentum must lie in [0, 1)");
  OptState s;
  s.learning_rate = learning_rate;
  s.momentum = momentum;
  s.weight_decay = weight_decay;
  auto zeros = Gradients::zeros_like(model);
  s.velocity_w = std::move(zeros.weights);
  s.velocity_b = std::move(zeros.biases);
  return s;
}

// v <- momentum * v + grad; params <- params - lr * v.
inline void apply_gradients(Model& model, OptState& opt, const Gradients& grads) {
  const std::size_t layers = model.layer_count();
  for (std::size_t i = 0; i < layers; ++i) {
    if (!grads.weights[i].allFinite() || !grads.biases[i].allFinite()) {
      throw NumericalError("non-finite gradient", i);
    }
  }
  for (std::size_t i = 0; i < layers; ++i) {
    if (opt.weight_decay != 0.0) {
      opt.velocity_w[i] = opt.momentum * opt.velocity_w[i] + grads.weights[i] + opt.weight_decay * model.weights[i];
    } else {
      opt.velocity_w[i] = opt.momentum * opt.velocity_w[i] + grads.weights[i];
    }
    opt.velocity_b[i] = opt.momentum * opt.velocity_b[i] + grads.biases[i];
    model.weights[i] -= opt.learning_rate * opt.velocity_w[i];
    model.biases[i] -= opt.learning_rate * opt.velocity_b[i];
  }
}

struct Batch {
  Matrix features;
  std::vector<int> labels;
};

// One optimizer step given the loss gradient on the batch logits.
inline void train_step(Model& model, OptState& opt, const Batch& batch, const Matrix& loss_grad_on_logits) {
  ForwardTrace trace;
  const Matrix logits = forward(model, batch.features, &trace);
  if (loss_grad_on_logits.rows() != logits.rows() || loss_grad_on_logits.cols() != logits.cols()) {
    throw ShapeError("loss gradient shape does not match logits");
  }
  apply_gradients(model, opt, backward(model, trace, loss_grad_on_logits));
}

// Binary container:
//   "HPMKDMDL" | u32 version | u32 n_layers | u64 seed | u64 sizes[n_layers]
//   then per layer: weights row-major, biases; every value f64 little-endian.
namespace detail {

inline constexpr char kModelMagic[8] = {'H', 'P', 'M', 'K', 'D', 'M', 'D', 'L'};
inline constexpr std::uint32_t kModelVersion = 1;

inline void put_u64(std::string& out, std::uint64_t v) {
  for (int i = 0; i < 8; ++i) out.push_back(static_cast<char>((v >> (8 * i)) & 0xFF));
}
inline void put_u32(std::string& out, std::uint32_t v) {
  for (int i = 0; i < 4; ++i) out.push_back(static_cast<char>((v >> (8 * i)) & 0xFF));
}
inline void put_f64(std::string& out, double v) { put_u64(out, std::bit_cast<std::uint64_t>(v)); }

class ByteReader {
 public:
  explicit ByteReader(std::string_view bytes) : bytes_(bytes) {}

  std::uint64_t u64() { return read_le(8); }
  std::uint32_t u32() { return static_cast<std::uint32_t>(read_le(4)); }
  double f64() { return std::bit_cast<double>(u64()); }
  std::string_view take(std::size_t n) {
    need(n);
    auto s = bytes_.substr(pos_, n);
    pos_ += n;
    return s;
  }
  bool done() const { return pos_ == bytes_.size(); }

 private:
  void need(std::size_t n) const {
    if (bytes_.size() - pos_ < n) throw IntegrityError("truncated binary data");
  }
  std::uint64_t read_le(int n) {
    need(static_cast<std::size_t>(n));
    std::uint64_t v = 0;
    for (int i = 0; i < n; ++i) {
      v |= static_cast<std::uint64_t>(static_cast<unsigned char>(bytes_[pos_ + i])) << (8 * i);
    }
    pos_ += static_cast<std::size_t>(n);
    return v;
  }

  std::string_view bytes_;
  std::size_t pos_ = 0;
};

}  // namespace detail

inline std::string serialize_model(const Model& model) {
  std::string out(detail::kModelMagic, sizeof(detail::kModelMagic));
  detail::put_u32(out, detail::kModelVersion);
  detail::put_u32(out, static_cast<std::uint32_t>(model.layer_sizes.size()));
  detail::put_u64(out, model.seed);
  for (auto s : model.layer_sizes) detail::put_u64(out, s);
  for (std::size_t i = 0; i < model.layer_count(); ++i) {
    const Matrix& w = model.weights[i];
    for (Eigen::Index k = 0; k < w.size(); ++k) detail::put_f64(out, w.data()[k]);
    for (Eigen::Index k = 0; k < model.biases[i].size(); ++k) detail::put_f64(out, model.biases[i][k]);
  }
  return out;
}

inline Model deserialize_model(std::string_view bytes) {
  detail::ByteReader in(bytes);
  if (in.take(8) != std::string_view(detail::kModelMagic, 8)) throw IntegrityError("bad model magic");
  if (in.u32() != detail::kModelVersion) throw IntegrityError("unsupported model container version");
  const std::uint32_t n = in.u32();
  if (n < 2 || n > 1024) throw IntegrityError("implausible layer count");
  Model m;
  m.seed = in.u64();
  for (std::uint32_t i = 0; i < n; ++i) {
    const auto s = in.u64();
    if (s == 0 || s > (1u << 24)) throw IntegrityError("implausible layer size");
    m.layer_sizes.push_back(static_cast<std::size_t>(s));
  }
  for (std::size_t i = 0; i + 1 < m.layer_sizes.size(); ++i) {
    Matrix w(m.layer_sizes[i + 1], m.layer_sizes[i]);
    for (Eigen::Index k = 0; k < w.size(); ++k) w.data()[k] = in.f64();
    Vector b(static_cast<Eigen::Index>(m.layer_sizes[i + 1]));
    for (Eigen::Index k = 0; k < b.size(); ++k) b[k] = in.f64();
    if (!w.allFinite() || !b.allFinite()) throw IntegrityError("non-finite parameter in model container");
    m.weights.push_back(std::move(w));
    m.biases.push_back(std::move(b));
  }
  if (!in.done()) throw IntegrityError("trailing bytes after model container");
  return m;
}

// Rows `rows` of `m`, in the given order.
inline Matrix gather_rows(const Matrix& m, std::span<const std::size_t> rows) {
  Matrix out(static_cast<Eigen::Index>(rows.size()), m.cols());
  for (std::size_t i = 0; i < rows.size(); ++i) out.row(static_cast<Eigen::Index>(i)) = m.row(static_cast<Eigen::Index>(rows[i]));
  return out;
}

// Index of the largest entry; ties go to the lowest index.
inline int argmax_row(const Matrix& m, Eigen::Index row) {
  int best = 0;
  for (Eigen::Index c = 1; c < m.cols(); ++c) {
    if (m(row, c) > m(row, best)) best = static_cast<int>(c);
  }
  return best;
}

}  // namespace hpmkd
