#pragma once

// Datasets: delimited-text ingestion, synthetic blobs, stratified splits and
// the robustness perturbations (label noise, long-tail imbalance).

#include <algorithm>
#include <charconv>
#include <cmath>
#include <cstdio>
#include <filesystem>
#include <fstream>
#include <map>
#include <optional>
#include <set>
#include <sstream>
#include <string>
#include <vector>

#include "hpmkd/errors.hpp"
#include "hpmkd/nn.hpp"
#include "hpmkd/rng.hpp"
#include "hpmkd/sha256.hpp"

namespace hpmkd {

// Per-column affine map x -> (x - mean) / scale. Passthrough columns
// (one-hot indicators) keep mean 0 and scale 1.
struct Standardization {
  Vector mean;
  Vector scale;
  std::vector<bool> passthrough;
};

struct Dataset {
  std::string id;
  Matrix raw;       // features as ingested
  Matrix features;  // standardized
  std::vector<int> labels;
  std::size_t class_count = 0;
  Standardization standardization;
  std::vector<std::string> feature_names;
  std::vector<std::string> class_names;
  std::vector<int> original_labels;  // pre-noise labels, empty when untouched

  std::size_t size() const { return labels.size(); }
  std::size_t dim() const { return static_cast<std::size_t>(features.cols()); }

  std::vector<std::size_t> class_counts() const {
    std::vector<std::size_t> counts(class_count, 0);
    for (int y : labels) ++counts[static_cast<std::size_t>(y)];
    return counts;
  }
};

inline Standardization fit_standardization(const Matrix& raw, std::vector<bool> passthrough = {}) {
  if (passthrough.empty()) passthrough.assign(static_cast<std::size_t>(raw.cols()), false);
  Standardization s;
  s.passthrough = std::move(passthrough);
  s.mean = Vector::Zero(raw.cols());
  s.scale = Vector::Ones(raw.cols());
  const double n = static_cast<double>(raw.rows());
  for (Eigen::Index c = 0; c < raw.cols(); ++c) {
    if (s.passthrough[static_cast<std::size_t>(c)] || raw.rows() == 0) continue;
    const double mu = raw.col(c).sum() / n;
    const double var = (raw.col(c).array() - mu).square().sum() / n;
    s.mean[c] = mu;
    s.scale[c] = var > 0.0 ? std::sqrt(var) : 1.0;
  }
  return s;
}

inline Matrix apply_standardization(const Matrix& raw, const Standardization& s) {
  Matrix out = raw;
  for (Eigen::Index c = 0; c < raw.cols(); ++c) {
    out.col(c) = (raw.col(c).array() - s.mean[c]) / s.scale[c];
  }
  return out;
}

// Rows `rows` of `ds`, keeping its standardization.
inline Dataset subset(const Dataset& ds, std::span<const std::size_t> rows, std::string id) {
  Dataset out;
  out.id = std::move(id);
  out.raw = gather_rows(ds.raw, rows);
  out.features = gather_rows(ds.features, rows);
  out.class_count = ds.class_count;
  out.standardization = ds.standardization;
  out.feature_names = ds.feature_names;
  out.class_names = ds.class_names;
  out.labels.reserve(rows.size());
  for (auto r : rows) out.labels.push_back(ds.labels[r]);
  if (!ds.original_labels.empty()) {
    for (auto r : rows) out.original_labels.push_back(ds.original_labels[r]);
  }
  return out;
}

inline std::string format_real(double v, const char* fmt = "%.6f") {
  char buf[64];
  std::snprintf(buf, sizeof(buf), fmt, v);
  return buf;
}

struct LoadOptions {
  char delimiter = ',';
  bool impute_median = false;
};

namespace detail {

inline std::string trim(std::string_view s) {
  std::size_t b = 0, e = s.size();
  while (b < e && std::isspace(static_cast<unsigned char>(s[b]))) ++b;
  while (e > b && std::isspace(static_cast<unsigned char>(s[e - 1]))) --e;
  return std::string(s.substr(b, e - b));
}

inline std::vector<std::string> split_line(const std::string& line, char delim) {
  std::vector<std::string> out;
  std::size_t start = 0;
  for (std::size_t i = 0; i <= line.size(); ++i) {
    if (i == line.size() || line[i] == delim) {
      out.push_back(trim(std::string_view(line).substr(start, i - start)));
      start = i + 1;
    }
  }
  return out;
}

inline bool is_missing(const std::string& v) { return v.empty() || v == "?" || v == "NA" || v == "nan" || v == "NaN"; }

inline std::optional<double> parse_number(const std::string& v) {
  double x = 0.0;
  auto [ptr, ec] = std::from_chars(v.data(), v.data() + v.size(), x);
  if (ec != std::errc() || ptr != v.data() + v.size() || !std::isfinite(x)) return std::nullopt;
  return x;
}

inline double median(std::vector<double> v) {
  std::sort(v.begin(), v.end());
  const auto n = v.size();
  return n % 2 ? v[n / 2] : 0.5 * (v[n / 2 - 1] + v[n / 2]);
}

}  // namespace detail

// Parses a header-first delimited file. Numeric columns are standardized,
// categorical ones one-hot encoded (categories in sorted order). Labels map
// to 0..C-1 in sorted order (numeric order when every label is a number).
inline Dataset load_delimited(const std::filesystem::path& path, const std::string& label_column,
                              const LoadOptions& opts = {}) {
  std::ifstream in(path, std::ios::binary);
  if (!in) throw StorageError("cannot open " + path.string());
  std::stringstream buf;
  buf << in.rdbuf();
  const std::string content = buf.str();

  std::vector<std::vector<std::string>> rows;
  std::vector<std::string> header;
  {
    std::istringstream lines(content);
    std::string line;
    bool first = true;
    while (std::getline(lines, line)) {
      if (!line.empty() && line.back() == '\r') line.pop_back();
      if (detail::trim(line).empty()) continue;
      auto cells = detail::split_line(line, opts.delimiter);
      if (first) {
        header = std::move(cells);
        first = false;
        continue;
      }
      if (cells.size() != header.size()) {
        throw SchemaError("row " + std::to_string(rows.size() + 1) + " has " + std::to_string(cells.size()) +
                          " fields, header has " + std::to_string(header.size()));
      }
      rows.push_back(std::move(cells));
    }
  }
  if (header.empty() || rows.empty()) throw SchemaError("no data rows in " + path.string());
  const auto label_it = std::find(header.begin(), header.end(), label_column);
  if (label_it == header.end()) throw SchemaError("label column '" + label_column + "' not found");
  const auto label_idx = static_cast<std::size_t>(label_it - header.begin());

  Dataset ds;
  ds.id = path.stem().string() + "-" + sha256_hex(content).substr(0, 12);

  // Labels.
  std::vector<std::string> label_values;
  bool numeric_labels = true;
  for (const auto& r : rows) {
    if (detail::is_missing(r[label_idx])) throw MissingValueError("missing label value");
    label_values.push_back(r[label_idx]);
    if (!detail::parse_number(r[label_idx])) numeric_labels = false;
  }
  std::vector<std::string> classes(label_values.begin(), label_values.end());
  std::sort(classes.begin(), classes.end(), [&](const std::string& a, const std::string& b) {
    if (numeric_labels) return *detail::parse_number(a) < *detail::parse_number(b);
    return a < b;
  });
  classes.erase(std::unique(classes.begin(), classes.end()), classes.end());
  std::map<std::string, int> class_index;
  for (std::size_t i = 0; i < classes.size(); ++i) class_index[classes[i]] = static_cast<int>(i);
  for (const auto& v : label_values) ds.labels.push_back(class_index[v]);
  ds.class_count = classes.size();
  ds.class_names = classes;

  // Feature columns.
  std::vector<std::vector<double>> columns;
  std::vector<bool> passthrough;
  for (std::size_t c = 0; c < header.size(); ++c) {
    if (c == label_idx) continue;
    bool numeric = true;
    std::vector<std::size_t> missing;
    for (std::size_t r = 0; r < rows.size(); ++r) {
      if (detail::is_missing(rows[r][c])) {
        missing.push_back(r);
      } else if (!detail::parse_number(rows[r][c])) {
        numeric = false;
      }
    }
    if (!missing.empty() && !opts.impute_median) {
      throw MissingValueError("column '" + header[c] + "' has " + std::to_string(missing.size()) +
                              " missing values (enable median imputation to fill them)");
    }
    if (numeric) {
      std::vector<double> col(rows.size(), 0.0);
      std::vector<double> present;
      for (std::size_t r = 0; r < rows.size(); ++r) {
        if (!detail::is_missing(rows[r][c])) {
          col[r] = *detail::parse_number(rows[r][c]);
          present.push_back(col[r]);
        }
      }
      if (present.empty()) throw MissingValueError("column '" + header[c] + "' has no values");
      if (!missing.empty()) {
        const double med = detail::median(present);
        for (auto r : missing) col[r] = med;
      }
      columns.push_back(std::move(col));
      passthrough.push_back(false);
      ds.feature_names.push_back(header[c]);
    } else {
      // Categorical: missing cells take the most frequent category.
      std::map<std::string, std::size_t> freq;
      for (const auto& r : rows) {
        if (!detail::is_missing(r[c])) ++freq[r[c]];
      }
      std::string mode;
      std::size_t best = 0;
      for (const auto& [k, n] : freq) {
        if (n > best) {
          best = n;
          mode = k;
        }
      }
      for (const auto& [category, n] : freq) {
        std::vector<double> col(rows.size(), 0.0);
        for (std::size_t r = 0; r < rows.size(); ++r) {
          const auto& v = detail::is_missing(rows[r][c]) ? mode : rows[r][c];
          col[r] = v == category ? 1.0 : 0.0;
        }
        columns.push_back(std::move(col));
        passthrough.push_back(true);
        ds.feature_names.push_back(header[c] + "=" + category);
      }
    }
  }
  if (columns.empty()) throw SchemaError("no feature columns besides the label");
  ds.raw.resize(static_cast<Eigen::Index>(rows.size()), static_cast<Eigen::Index>(columns.size()));
  for (std::size_t c = 0; c < columns.size(); ++c) {
    for (std::size_t r = 0; r < rows.size(); ++r) {
      ds.raw(static_cast<Eigen::Index>(r), static_cast<Eigen::Index>(c)) = columns[c][r];
    }
  }
  ds.standardization = fit_standardization(ds.raw, passthrough);
  ds.features = apply_standardization(ds.raw, ds.standardization);
  return ds;
}

// Gaussian clusters around centers drawn uniformly from [-5, 5]^dim.
// Sample i belongs to class i mod classes, so classes are balanced.
inline Dataset synth_blobs(std::size_t n, std::size_t classes, std::size_t dim, double spread, std::uint64_t seed) {
  if (classes < 1 || dim < 1 || n < classes) throw InvalidParameterError("synth_blobs needs n >= classes >= 1");
  if (spread < 0.0) throw InvalidParameterError("spread must be nonnegative");
  CounterRng rng(seed);
  Matrix centers(static_cast<Eigen::Index>(classes), static_cast<Eigen::Index>(dim));
  for (Eigen::Index k = 0; k < centers.size(); ++k) centers.data()[k] = rng.uniform(-5.0, 5.0);
  Dataset ds;
  ds.id = "blobs-n" + std::to_string(n) + "-c" + std::to_string(classes) + "-d" + std::to_string(dim) + "-s" +
          format_real(spread) + "-seed" + std::to_string(seed);
  ds.class_count = classes;
  ds.raw.resize(static_cast<Eigen::Index>(n), static_cast<Eigen::Index>(dim));
  for (std::size_t i = 0; i < n; ++i) {
    const auto y = i % classes;
    ds.labels.push_back(static_cast<int>(y));
    for (std::size_t j = 0; j < dim; ++j) {
      ds.raw(static_cast<Eigen::Index>(i), static_cast<Eigen::Index>(j)) =
          centers(static_cast<Eigen::Index>(y), static_cast<Eigen::Index>(j)) + spread * rng.normal();
    }
  }
  for (std::size_t j = 0; j < dim; ++j) ds.feature_names.push_back("x" + std::to_string(j));
  for (std::size_t c = 0; c < classes; ++c) ds.class_names.push_back(std::to_string(c));
  ds.standardization = fit_standardization(ds.raw);
  ds.features = apply_standardization(ds.raw, ds.standardization);
  return ds;
}

inline std::size_t round_half_up(double x) { return static_cast<std::size_t>(std::floor(x + 0.5)); }

// Stratified split; the train side's statistics standardize both halves.
inline std::pair<Dataset, Dataset> split(const Dataset& ds, double test_fraction, std::uint64_t seed) {
  if (!(test_fraction > 0.0 && test_fraction < 1.0)) throw InvalidParameterError("test fraction must lie in (0, 1)");
  std::vector<std::vector<std::size_t>> by_class(ds.class_count);
  for (std::size_t i = 0; i < ds.size(); ++i) by_class[static_cast<std::size_t>(ds.labels[i])].push_back(i);
  std::vector<std::size_t> train_idx, test_idx;
  for (std::size_t c = 0; c < ds.class_count; ++c) {
    auto& members = by_class[c];
    if (members.empty()) continue;
    if (members.size() < 2) {
      throw StratificationError("class " + std::to_string(c) + " has fewer than 2 samples");
    }
    CounterRng rng(derive_seed(seed, c));
    rng.shuffle(members);
    auto n_test = round_half_up(test_fraction * static_cast<double>(members.size()));
    n_test = std::clamp<std::size_t>(n_test, 1, members.size() - 1);
    test_idx.insert(test_idx.end(), members.begin(), members.begin() + static_cast<std::ptrdiff_t>(n_test));
    train_idx.insert(train_idx.end(), members.begin() + static_cast<std::ptrdiff_t>(n_test), members.end());
  }
  std::sort(train_idx.begin(), train_idx.end());
  std::sort(test_idx.begin(), test_idx.end());
  const std::string tag = "|split(" + format_real(test_fraction) + "," + std::to_string(seed) + ")";
  Dataset train = subset(ds, train_idx, ds.id + tag + "/train");
  Dataset test = subset(ds, test_idx, ds.id + tag + "/test");
  train.standardization = fit_standardization(train.raw, ds.standardization.passthrough);
  train.features = apply_standardization(train.raw, train.standardization);
  test.standardization = train.standardization;
  test.features = apply_standardization(test.raw, test.standardization);
  return {std::move(train), std::move(test)};
}

// Copy of `ds` standardized with `s` instead of its own statistics.
inline Dataset with_standardization(const Dataset& ds, const Standardization& s) {
  Dataset out = ds;
  out.standardization = s;
  out.features = apply_standardization(ds.raw, s);
  return out;
}

// Flips exactly floor(rate * n) labels, each to a different class chosen
// uniformly. Features are untouched.
inline Dataset inject_label_noise(const Dataset& ds, double rate, std::uint64_t seed) {
  if (!(rate >= 0.0 && rate <= 1.0)) throw InvalidRateError("noise rate must lie in [0, 1]");
  if (ds.class_count < 2) throw InvalidParameterError("label noise needs at least 2 classes");
  Dataset out = ds;
  if (out.original_labels.empty()) out.original_labels = ds.labels;
  const auto n = ds.size();
  const auto flips = static_cast<std::size_t>(std::floor(rate * static_cast<double>(n)));
  auto order = shuffled_indices(n, seed);
  CounterRng rng(derive_seed(seed, 1));
  const auto c = static_cast<std::uint64_t>(ds.class_count);
  for (std::size_t k = 0; k < flips; ++k) {
    const auto i = order[k];
    const auto shift = 1 + rng.below(c - 1);
    out.labels[i] = static_cast<int>((static_cast<std::uint64_t>(ds.labels[i]) + shift) % c);
  }
  out.id = ds.id + "+noise(" + format_real(rate) + "," + std::to_string(seed) + ")";
  return out;
}

// Long-tail profile: class c keeps round(N_c * ratio^(-c / (C - 1))) samples.
inline std::vector<std::size_t> imbalance_profile(std::span<const std::size_t> counts, double ratio) {
  const auto classes = counts.size();
  std::vector<std::size_t> keep(counts.begin(), counts.end());
  if (classes < 2) return keep;
  for (std::size_t c = 0; c < classes; ++c) {
    const double factor = std::pow(ratio, -static_cast<double>(c) / static_cast<double>(classes - 1));
    keep[c] = round_half_up(static_cast<double>(counts[c]) * factor);
  }
  return keep;
}

inline Dataset apply_imbalance(const Dataset& ds, double ratio, std::uint64_t seed) {
  if (!(ratio >= 1.0) || !std::isfinite(ratio)) throw InvalidParameterError("imbalance ratio must be >= 1");
  const auto counts = ds.class_counts();
  const auto keep = imbalance_profile(counts, ratio);
  std::vector<std::vector<std::size_t>> by_class(ds.class_count);
  for (std::size_t i = 0; i < ds.size(); ++i) by_class[static_cast<std::size_t>(ds.labels[i])].push_back(i);
  std::vector<std::size_t> rows;
  for (std::size_t c = 0; c < ds.class_count; ++c) {
    if (counts[c] > 0 && keep[c] < 1) {
      throw InfeasibleRatioError("ratio " + format_real(ratio) + " leaves class " + std::to_string(c) + " empty");
    }
    auto members = by_class[c];
    CounterRng rng(derive_seed(seed, c));
    rng.shuffle(members);
    rows.insert(rows.end(), members.begin(), members.begin() + static_cast<std::ptrdiff_t>(keep[c]));
  }
  std::sort(rows.begin(), rows.end());
  return subset(ds, rows, ds.id + "+imbalance(" + format_real(ratio) + "," + std::to_string(seed) + ")");
}

}  // namespace hpmkd
