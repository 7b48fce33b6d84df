#pragma once

// Adaptive configuration: meta-features, the run-history store, a
// random-forest meta-model over (meta-features, config) -> accuracy, and
// argmax prediction over a candidate grid.

#include <algorithm>
#include <cmath>
#include <cstdio>
#include <filesystem>
#include <fstream>
#include <limits>
#include <mutex>
#include <numeric>
#include <optional>
#include <set>
#include <sstream>
#include <string>
#include <vector>

#include "hpmkd/data.hpp"
#include "hpmkd/distill.hpp"
#include "hpmkd/errors.hpp"
#include "hpmkd/nn.hpp"
#include "hpmkd/rng.hpp"
#include "hpmkd/sha256.hpp"

namespace hpmkd {

struct MetaFeatures {
  std::size_t n_samples = 0;
  std::size_t n_classes = 0;
  std::size_t dim = 0;
  std::size_t teacher_params = 0;
  std::size_t student_params = 0;
  double compression_ratio = 0.0;

  bool operator==(const MetaFeatures&) const = default;
};

inline MetaFeatures make_meta_features(std::size_t n_samples, std::size_t n_classes, std::size_t dim,
                                       std::size_t teacher_params, std::size_t student_params) {
  if (n_samples == 0 || n_classes == 0 || dim == 0 || teacher_params == 0 || student_params == 0) {
    throw InvalidInputError("meta-feature counts must be positive");
  }
  return {n_samples, n_classes, dim, teacher_params, student_params,
          static_cast<double>(teacher_params) / static_cast<double>(student_params)};
}

inline MetaFeatures extract_meta_features(const Dataset& ds, std::span<const std::size_t> teacher_layers,
                                          std::span<const std::size_t> student_layers) {
  if (ds.size() == 0) throw InvalidInputError("dataset is empty");
  return make_meta_features(ds.size(), ds.class_count, ds.dim(), param_count(teacher_layers),
                            param_count(student_layers));
}

struct HistoryEntry {
  MetaFeatures meta;
  DistillConfig config;
  double accuracy = 0.0;

  bool operator==(const HistoryEntry&) const = default;
};

inline constexpr std::size_t kWarmStartRuns = 5;

// One line, fixed field order, reals with 17 significant digits.
inline std::string canonical_line(const HistoryEntry& e) {
  char buf[512];
  std::snprintf(buf, sizeof(buf),
                "n_samples=%zu;n_classes=%zu;dim=%zu;teacher_params=%zu;student_params=%zu;cr=%.17g;"
                "T0=%.17g;alpha=%.17g;lr=%.17g;epochs=%d;accuracy=%.17g",
                e.meta.n_samples, e.meta.n_classes, e.meta.dim, e.meta.teacher_params, e.meta.student_params,
                e.meta.compression_ratio, e.config.T0, e.config.alpha, e.config.lr, e.config.epochs, e.accuracy);
  return buf;
}

inline HistoryEntry parse_history_line(const std::string& line) {
  HistoryEntry e;
  int consumed = 0;
  const int n = std::sscanf(line.c_str(),
                            "n_samples=%zu;n_classes=%zu;dim=%zu;teacher_params=%zu;student_params=%zu;cr=%lg;"
                            "T0=%lg;alpha=%lg;lr=%lg;epochs=%d;accuracy=%lg%n",
                            &e.meta.n_samples, &e.meta.n_classes, &e.meta.dim, &e.meta.teacher_params,
                            &e.meta.student_params, &e.meta.compression_ratio, &e.config.T0, &e.config.alpha,
                            &e.config.lr, &e.config.epochs, &e.accuracy, &consumed);
  if (n != 11 || static_cast<std::size_t>(consumed) != line.size()) {
    throw IntegrityError("malformed history line: " + line);
  }
  return e;
}

inline void validate_entry(const HistoryEntry& e) {
  if (!(e.accuracy >= 0.0 && e.accuracy <= 1.0)) throw InvalidInputError("history accuracy must lie in [0, 1]");
  e.config.validate();
}

// Append-only history file, deduplicated by the digest of each canonical line.
class HistoryStore {
 public:
  explicit HistoryStore(std::filesystem::path path) : path_(std::move(path)) {
    std::ifstream in(path_);
    std::string line;
    while (std::getline(in, line)) {
      if (line.empty()) continue;
      auto e = parse_history_line(line);
      if (seen_.insert(sha256_hex(line)).second) entries_.push_back(e);
    }
  }

  // Returns false when an identical entry is already stored.
  bool record(const HistoryEntry& entry) {
    validate_entry(entry);
    const auto line = canonical_line(entry);
    std::lock_guard lock(mu_);
    if (!seen_.insert(sha256_hex(line)).second) return false;
    if (path_.has_parent_path()) {
      std::error_code ec;
      std::filesystem::create_directories(path_.parent_path(), ec);
    }
    std::ofstream out(path_, std::ios::app);
    if (!out || !(out << line << '\n') || !out.flush()) {
      seen_.erase(sha256_hex(line));
      throw StorageError("cannot append to history file " + path_.string());
    }
    entries_.push_back(entry);
    return true;
  }

  std::vector<HistoryEntry> entries() const {
    std::lock_guard lock(mu_);
    return entries_;
  }
  std::size_t size() const {
    std::lock_guard lock(mu_);
    return entries_.size();
  }
  bool warm() const { return size() >= kWarmStartRuns; }
  const std::filesystem::path& path() const { return path_; }

 private:
  std::filesystem::path path_;
  std::vector<HistoryEntry> entries_;
  std::set<std::string> seen_;
  mutable std::mutex mu_;
};

// Layout: log10 of the five counts, CR, then T0, alpha, lr, epochs.
inline constexpr std::size_t kMetaInputWidth = 10;

inline std::vector<double> meta_input(const MetaFeatures& m, const DistillConfig& c) {
  auto lg = [](std::size_t v) { return std::log10(static_cast<double>(v)); };
  return {lg(m.n_samples), lg(m.n_classes), lg(m.dim), lg(m.teacher_params), lg(m.student_params),
          m.compression_ratio, c.T0, c.alpha, c.lr, static_cast<double>(c.epochs)};
}

struct ForestParams {
  std::size_t trees = 100;
  std::size_t max_depth = 8;
  std::size_t min_leaf = 2;
  std::size_t features_per_split = 0;  // 0: ceil(sqrt(feature count))
  std::uint64_t seed = 0x5EED;
};

// CART regression tree split on variance reduction.
class RegressionTree {
 public:
  struct Node {
    int feature = -1;  // -1 marks a leaf
    double threshold = 0.0;
    double value = 0.0;
    int left = -1;
    int right = -1;
  };

  void fit(const std::vector<std::vector<double>>& x, const std::vector<double>& y, std::vector<std::size_t> rows,
           const ForestParams& params, std::uint64_t seed) {
    nodes_.clear();
    CounterRng rng(seed);
    const std::size_t width = x.empty() ? 0 : x.front().size();
    mtry_ = params.features_per_split ? params.features_per_split
                                      : static_cast<std::size_t>(std::ceil(std::sqrt(static_cast<double>(width))));
    build(x, y, rows, 0, params, rng);
  }

  double predict(std::span<const double> input) const {
    int i = 0;
    while (nodes_[static_cast<std::size_t>(i)].feature >= 0) {
      const auto& n = nodes_[static_cast<std::size_t>(i)];
      i = input[static_cast<std::size_t>(n.feature)] <= n.threshold ? n.left : n.right;
    }
    return nodes_[static_cast<std::size_t>(i)].value;
  }

  std::size_t node_count() const { return nodes_.size(); }

 private:
  int build(const std::vector<std::vector<double>>& x, const std::vector<double>& y, std::vector<std::size_t>& rows,
            std::size_t depth, const ForestParams& params, CounterRng& rng) {
    const int id = static_cast<int>(nodes_.size());
    nodes_.push_back({});
    double mean = 0.0;
    for (auto r : rows) mean += y[r];
    mean /= static_cast<double>(rows.size());
    nodes_[static_cast<std::size_t>(id)].value = mean;
    if (depth >= params.max_depth || rows.size() < 2 * params.min_leaf) return id;

    const std::size_t width = x.front().size();
    std::vector<std::size_t> order(width);
    std::iota(order.begin(), order.end(), 0);
    rng.shuffle(order);

    double best_gain = 0.0;
    int best_feature = -1;
    double best_threshold = 0.0;
    double parent_sse = 0.0;
    for (auto r : rows) parent_sse += (y[r] - mean) * (y[r] - mean);

    // Keep drawing features until mtry non-constant ones have been tried.
    std::size_t tried = 0;
    std::vector<std::pair<double, double>> vals(rows.size());
    for (std::size_t f : order) {
      if (tried >= mtry_) break;
      for (std::size_t i = 0; i < rows.size(); ++i) vals[i] = {x[rows[i]][f], y[rows[i]]};
      std::sort(vals.begin(), vals.end());
      if (vals.front().first == vals.back().first) continue;
      ++tried;
      double left_sum = 0.0, left_sq = 0.0;
      double total_sum = 0.0, total_sq = 0.0;
      for (const auto& [v, t] : vals) {
        total_sum += t;
        total_sq += t * t;
      }
      for (std::size_t i = 0; i + 1 < vals.size(); ++i) {
        left_sum += vals[i].second;
        left_sq += vals[i].second * vals[i].second;
        const std::size_t nl = i + 1, nr = vals.size() - nl;
        if (vals[i].first == vals[i + 1].first || nl < params.min_leaf || nr < params.min_leaf) continue;
        const double right_sum = total_sum - left_sum, right_sq = total_sq - left_sq;
        const double sse = (left_sq - left_sum * left_sum / static_cast<double>(nl)) +
                           (right_sq - right_sum * right_sum / static_cast<double>(nr));
        const double gain = parent_sse - sse;
        if (gain > best_gain + 1e-12 * std::max(1.0, parent_sse)) {
          best_gain = gain;
          best_feature = static_cast<int>(f);
          best_threshold = 0.5 * (vals[i].first + vals[i + 1].first);
        }
      }
    }
    if (best_feature < 0) return id;

    std::vector<std::size_t> left, right;
    for (auto r : rows) (x[r][static_cast<std::size_t>(best_feature)] <= best_threshold ? left : right).push_back(r);
    const int l = build(x, y, left, depth + 1, params, rng);
    const int r = build(x, y, right, depth + 1, params, rng);
    auto& node = nodes_[static_cast<std::size_t>(id)];
    node.feature = best_feature;
    node.threshold = best_threshold;
    node.left = l;
    node.right = r;
    return id;
  }

  std::vector<Node> nodes_;
  std::size_t mtry_ = 1;
};

// Bagged regression trees; prediction is the mean over trees.
class MetaModel {
 public:
  double predict(std::span<const double> input) const {
    double s = 0.0;
    for (const auto& t : trees_) s += t.predict(input);
    return s / static_cast<double>(trees_.size());
  }
  double predict(const MetaFeatures& meta, const DistillConfig& config) const {
    const auto in = meta_input(meta, config);
    return predict(in);
  }
  std::size_t tree_count() const { return trees_.size(); }

  static MetaModel fit(const std::vector<std::vector<double>>& x, const std::vector<double>& y,
                       const ForestParams& params = {}) {
    if (x.empty() || x.size() != y.size()) throw InsufficientHistoryError("meta-model needs at least one run");
    MetaModel m;
    m.trees_.resize(params.trees);
    for (std::size_t t = 0; t < params.trees; ++t) {
      CounterRng rng(derive_seed(params.seed, t));
      std::vector<std::size_t> rows(x.size());
      for (auto& r : rows) r = static_cast<std::size_t>(rng.below(x.size()));
      m.trees_[t].fit(x, y, std::move(rows), params, derive_seed(params.seed, t + 0x10000));
    }
    return m;
  }

 private:
  std::vector<RegressionTree> trees_;
};

inline MetaModel fit_meta_model(const std::vector<HistoryEntry>& history, const ForestParams& params = {}) {
  if (history.empty()) throw InsufficientHistoryError("meta-model needs at least one recorded run");
  std::vector<std::vector<double>> x;
  std::vector<double> y;
  for (const auto& e : history) {
    x.push_back(meta_input(e.meta, e.config));
    y.push_back(e.accuracy);
  }
  return MetaModel::fit(x, y, params);
}

inline DistillConfig default_config() { return {4.0, 0.7, 0.05, 20}; }

// T0 x alpha x lr x epochs, in lexicographic ascending order.
inline std::vector<DistillConfig> candidate_grid() {
  std::vector<DistillConfig> grid;
  for (double t : {1.0, 2.0, 4.0, 8.0}) {
    for (double a : {0.3, 0.5, 0.7, 0.9}) {
      for (double lr : {0.01, 0.05, 0.1}) {
        for (int ep : {10, 20, 30}) grid.push_back({t, a, lr, ep});
      }
    }
  }
  return grid;
}

// Grid member with the highest predicted accuracy; ties go to the
// lexicographically smallest (T0, alpha, lr, epochs).
inline DistillConfig predict_config(const MetaModel& model, const MetaFeatures& meta,
                                    std::vector<DistillConfig> grid) {
  if (grid.empty()) throw InvalidGridError("candidate grid is empty");
  std::stable_sort(grid.begin(), grid.end());
  const DistillConfig* best = &grid.front();
  double best_score = model.predict(meta, grid.front());
  for (const auto& c : grid) {
    const double s = model.predict(meta, c);
    if (s > best_score) {
      best_score = s;
      best = &c;
    }
  }
  return *best;
}

enum class ConfigSource { Predicted, ColdStart, Fixed, Override };

inline const char* to_string(ConfigSource s) {
  switch (s) {
    case ConfigSource::Predicted: return "predicted";
    case ConfigSource::ColdStart: return "cold-start";
    case ConfigSource::Fixed: return "fixed";
    case ConfigSource::Override: return "override";
  }
  return "?";
}

struct ConfigDecision {
  DistillConfig config;
  ConfigSource source = ConfigSource::ColdStart;
  std::size_t history_size = 0;
  double predicted_accuracy = std::numeric_limits<double>::quiet_NaN();
};

// Defaults until kWarmStartRuns runs exist, and while every recorded run
// used the same configuration (the forest cannot rank configs then).
inline ConfigDecision recommend_config(const std::vector<HistoryEntry>& history, const MetaFeatures& meta,
                                       const ForestParams& params = {},
                                       const std::vector<DistillConfig>& grid = candidate_grid()) {
  ConfigDecision d;
  d.history_size = history.size();
  std::set<DistillConfig> distinct;
  for (const auto& e : history) distinct.insert(e.config);
  if (history.size() < kWarmStartRuns || distinct.size() < 2) {
    d.config = default_config();
    d.source = ConfigSource::ColdStart;
    return d;
  }
  const auto model = fit_meta_model(history, params);
  d.config = predict_config(model, meta, grid);
  d.source = ConfigSource::Predicted;
  d.predicted_accuracy = model.predict(meta, d.config);
  return d;
}

}  // namespace hpmkd
