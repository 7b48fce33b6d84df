#pragma once

// Evaluation metrics and embedding export.

#include <cmath>
#include <filesystem>
#include <fstream>
#include <limits>
#include <map>
#include <span>
#include <vector>

#include "hpmkd/data.hpp"
#include "hpmkd/errors.hpp"
#include "hpmkd/nn.hpp"
#include "hpmkd/rng.hpp"

namespace hpmkd {

struct Metrics {
  double accuracy = 0.0;
  double retention_pct = 0.0;
  double compression_ratio = 0.0;
  double train_time_s = 0.0;
  double efficiency_acc_per_min = 0.0;
};

// Fraction of rows whose argmax (lowest index on ties) equals the label.
inline double accuracy_from_logits(const Matrix& logits, std::span<const int> labels) {
  if (logits.rows() == 0) throw InvalidInputError("accuracy of an empty dataset is undefined");
  if (static_cast<std::size_t>(logits.rows()) != labels.size()) throw ShapeError("logits and labels disagree");
  std::size_t correct = 0;
  for (Eigen::Index r = 0; r < logits.rows(); ++r) {
    if (argmax_row(logits, r) == labels[static_cast<std::size_t>(r)]) ++correct;
  }
  return static_cast<double>(correct) / static_cast<double>(logits.rows());
}

inline double accuracy(const Model& model, const Matrix& features, std::span<const int> labels) {
  if (features.rows() == 0) throw InvalidInputError("accuracy of an empty dataset is undefined");
  return accuracy_from_logits(forward(model, features), labels);
}

inline double accuracy(const Model& model, const Dataset& ds) { return accuracy(model, ds.features, ds.labels); }

inline double retention(double acc_student, double acc_teacher) {
  if (!(acc_teacher > 0.0)) throw UndefinedRetentionError("retention needs a positive teacher accuracy");
  return acc_student / acc_teacher * 100.0;
}

inline double compression_ratio(std::size_t teacher_params, std::size_t student_params) {
  if (student_params < 1) throw InvalidInputError("student must have at least one parameter");
  return static_cast<double>(teacher_params) / static_cast<double>(student_params);
}

// Accuracy (in percent) per minute of training.
inline double efficiency(double accuracy_pct, double wall_seconds) {
  if (!(wall_seconds > 0.0)) throw InvalidInputError("efficiency needs a positive training time");
  return accuracy_pct / (wall_seconds / 60.0);
}

inline constexpr std::size_t kSilhouetteMaxPoints = 2000;

// Mean silhouette with Euclidean distance. Samples in singleton clusters
// score 0. Inputs larger than kSilhouetteMaxPoints are subsampled (seeded).
inline double silhouette(const Matrix& embeddings, std::span<const int> labels, std::uint64_t seed = 0) {
  if (static_cast<std::size_t>(embeddings.rows()) != labels.size()) throw ShapeError("embeddings and labels disagree");
  std::vector<std::size_t> rows(labels.size());
  for (std::size_t i = 0; i < rows.size(); ++i) rows[i] = i;
  if (rows.size() > kSilhouetteMaxPoints) {
    rows = shuffled_indices(labels.size(), seed);
    rows.resize(kSilhouetteMaxPoints);
    std::sort(rows.begin(), rows.end());
  }
  // Dense relabelling of the clusters present.
  std::vector<int> cluster(rows.size());
  std::vector<std::size_t> sizes;
  {
    std::map<int, int> ids;
    for (std::size_t i = 0; i < rows.size(); ++i) {
      auto [it, inserted] = ids.try_emplace(labels[rows[i]], static_cast<int>(ids.size()));
      if (inserted) sizes.push_back(0);
      cluster[i] = it->second;
      ++sizes[static_cast<std::size_t>(it->second)];
    }
  }
  const std::size_t k = sizes.size();
  if (k < 2) throw UndefinedSilhouetteError("silhouette needs at least two clusters");

  const Matrix x = gather_rows(embeddings, rows);
  const auto n = rows.size();
  // sums(i, c): total distance from sample i to members of cluster c.
  Matrix sums = Matrix::Zero(static_cast<Eigen::Index>(n), static_cast<Eigen::Index>(k));
  for (std::size_t i = 0; i < n; ++i) {
    for (std::size_t j = i + 1; j < n; ++j) {
      const double d = (x.row(static_cast<Eigen::Index>(i)) - x.row(static_cast<Eigen::Index>(j))).norm();
      sums(static_cast<Eigen::Index>(i), cluster[j]) += d;
      sums(static_cast<Eigen::Index>(j), cluster[i]) += d;
    }
  }
  double total = 0.0;
  for (std::size_t i = 0; i < n; ++i) {
    const auto own = static_cast<std::size_t>(cluster[i]);
    if (sizes[own] < 2) continue;
    const double a = sums(static_cast<Eigen::Index>(i), static_cast<Eigen::Index>(own)) /
                     static_cast<double>(sizes[own] - 1);
    double b = std::numeric_limits<double>::infinity();
    for (std::size_t c = 0; c < k; ++c) {
      if (c == own) continue;
      b = std::min(b, sums(static_cast<Eigen::Index>(i), static_cast<Eigen::Index>(c)) / static_cast<double>(sizes[c]));
    }
    const double denom = std::max(a, b);
    if (denom > 0.0) total += (b - a) / denom;
  }
  return total / static_cast<double>(n);
}

// Writes embeddings as u64 count | u64 dim | row-major f64 values (all
// little-endian) and the labels, one per line, to `<path>.labels`.
inline void export_embeddings(const std::filesystem::path& path, const Matrix& embeddings, std::span<const int> labels) {
  std::string bytes;
  detail::put_u64(bytes, static_cast<std::uint64_t>(embeddings.rows()));
  detail::put_u64(bytes, static_cast<std::uint64_t>(embeddings.cols()));
  for (Eigen::Index k = 0; k < embeddings.size(); ++k) detail::put_f64(bytes, embeddings.data()[k]);
  std::ofstream out(path, std::ios::binary | std::ios::trunc);
  if (!out.write(bytes.data(), static_cast<std::streamsize>(bytes.size()))) {
    throw StorageError("cannot write " + path.string());
  }
  std::ofstream side(path.string() + ".labels", std::ios::trunc);
  for (int y : labels) side << y << '\n';
  if (!side) throw StorageError("cannot write labels sidecar for " + path.string());
}

inline Matrix read_embeddings(const std::filesystem::path& path) {
  std::ifstream in(path, std::ios::binary);
  if (!in) throw StorageError("cannot open " + path.string());
  std::string bytes((std::istreambuf_iterator<char>(in)), std::istreambuf_iterator<char>());
  detail::ByteReader r(bytes);
  const auto rows = r.u64();
  const auto cols = r.u64();
  Matrix m(static_cast<Eigen::Index>(rows), static_cast<Eigen::Index>(cols));
  for (Eigen::Index k = 0; k < m.size(); ++k) m.data()[k] = r.f64();
  if (!r.done()) throw IntegrityError("trailing bytes in embedding file");
  return m;
}

}  // namespace hpmkd
