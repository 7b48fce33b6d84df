#pragma once

// Aggregation over repetitions, paired t-tests with Bonferroni correction,
// and the on-disk run bundle.
//
// Files written per run directory:
//   metrics.kv     sorted key=value lines, fixed precision, deterministic
//   runtime.kv     wall times and cache activity (varies between runs)
//   chain.txt      one line per trained stage
//   attention.log  per-epoch mean attention weights and their entropy
//   embeddings.bin penultimate-layer test embeddings (+ .labels)

#include <cmath>
#include <cstdio>
#include <filesystem>
#include <fstream>
#include <limits>
#include <map>
#include <sstream>
#include <string>
#include <vector>

#include <boost/math/distributions/students_t.hpp>

#include "hpmkd/errors.hpp"
#include "hpmkd/eval.hpp"
#include "hpmkd/pipeline.hpp"

namespace hpmkd {

struct Summary {
  std::size_t n = 0;
  double mean = 0.0;
  double stddev = 0.0;  // sample standard deviation, 0 when n < 2
};

inline Summary summarize(std::span<const double> xs) {
  Summary s;
  s.n = xs.size();
  if (s.n == 0) return s;
  double sum = 0.0;
  for (double x : xs) sum += x;
  s.mean = sum / static_cast<double>(s.n);
  if (s.n >= 2) {
    double ss = 0.0;
    for (double x : xs) ss += (x - s.mean) * (x - s.mean);
    s.stddev = std::sqrt(ss / static_cast<double>(s.n - 1));
  }
  return s;
}

struct PairedTTest {
  std::size_t n = 0;
  double mean_diff = 0.0;  // mean of a - b
  double t = 0.0;
  double df = 0.0;
  double p_value = 1.0;  // two-sided
  double threshold = 0.05;
  bool significant = false;
};

// Two-sided paired t-test of a against b. `comparisons` applies the
// Bonferroni correction to `alpha`.
inline PairedTTest paired_t_test(std::span<const double> a, std::span<const double> b, double alpha = 0.05,
                                 std::size_t comparisons = 1) {
  if (a.size() != b.size()) throw InvalidInputError("paired samples must have equal length");
  if (a.size() < 2) throw InvalidInputError("paired t-test needs at least two pairs");
  if (comparisons < 1) throw InvalidParameterError("comparisons must be >= 1");
  std::vector<double> d(a.size());
  for (std::size_t i = 0; i < a.size(); ++i) d[i] = a[i] - b[i];
  const auto s = summarize(d);
  PairedTTest r;
  r.n = a.size();
  r.mean_diff = s.mean;
  r.df = static_cast<double>(r.n - 1);
  r.threshold = alpha / static_cast<double>(comparisons);
  if (s.stddev == 0.0) {
    r.t = s.mean == 0.0 ? 0.0 : std::copysign(std::numeric_limits<double>::infinity(), s.mean);
    r.p_value = s.mean == 0.0 ? 1.0 : 0.0;
  } else {
    r.t = s.mean / (s.stddev / std::sqrt(static_cast<double>(r.n)));
    const boost::math::students_t dist(r.df);
    r.p_value = 2.0 * boost::math::cdf(boost::math::complement(dist, std::fabs(r.t)));
  }
  r.significant = r.p_value < r.threshold;
  return r;
}

inline std::string fmt6(double v) { return format_real(v, "%.6f"); }

inline std::string join_layers(const std::vector<std::size_t>& layers) { return join_sizes(layers); }

using KeyValues = std::map<std::string, std::string>;

inline std::string render_kv(const KeyValues& kv) {
  std::string out;
  for (const auto& [k, v] : kv) out += k + "=" + v + "\n";
  return out;
}

// Quantities that depend only on the experiment and seed.
inline KeyValues metrics_kv(const RunReport& r) {
  KeyValues kv;
  kv["run.ablation"] = ablation_label(r.ablation);
  kv["run.experiment"] = r.experiment;
  kv["run.ok"] = r.ok ? "true" : "false";
  kv["run.repetition"] = std::to_string(r.repetition);
  kv["run.seed"] = std::to_string(r.seed);
  if (!r.ok) kv["run.failure"] = r.failure;
  kv["config.T0"] = fmt6(r.config.config.T0);
  kv["config.alpha"] = fmt6(r.config.config.alpha);
  kv["config.lr"] = fmt6(r.config.config.lr);
  kv["config.epochs"] = std::to_string(r.config.config.epochs);
  kv["config.source"] = to_string(r.config.source);
  kv["config.history_size"] = std::to_string(r.config.history_size);
  kv["distill.adaptive_temperature"] = r.adaptive_temperature ? "true" : "false";
  kv["distill.ensemble"] = r.ensemble ? "true" : "false";
  kv["result.teacher_accuracy"] = fmt6(r.teacher_accuracy);
  kv["result.student_accuracy"] = fmt6(r.student_accuracy);
  kv["result.student_val_accuracy"] = fmt6(r.student_val_accuracy);
  kv["result.retention_pct"] = fmt6(r.retention);
  kv["result.compression_ratio"] = fmt6(r.compression_ratio);
  kv["result.silhouette"] = std::isnan(r.silhouette) ? "nan" : fmt6(r.silhouette);
  kv["result.teacher_params"] = std::to_string(r.teacher_params);
  kv["result.student_params"] = std::to_string(r.student_params);
  kv["chain.intermediates"] = std::to_string(r.intermediates);
  for (const auto& s : r.stages) {
    const std::string p = "stage." + s.name + ".";
    kv[p + "role"] = s.role;
    kv[p + "layers"] = join_layers(s.layers);
    kv[p + "params"] = std::to_string(s.params);
    kv[p + "planned_params"] = std::to_string(s.planned_params);
    kv[p + "val_accuracy"] = fmt6(s.val_accuracy);
    kv[p + "test_accuracy"] = fmt6(s.test_accuracy);
    kv[p + "delta"] = fmt6(s.delta);
    kv[p + "appended"] = s.appended ? "true" : "false";
  }
  if (!r.attention.empty()) {
    const auto& last = r.attention.back();
    for (std::size_t k = 0; k < last.mean_weights.size(); ++k) {
      kv["attention.final_weight." + std::to_string(k)] = fmt6(last.mean_weights[k]);
    }
    kv["attention.final_entropy"] = fmt6(last.entropy);
  }
  return kv;
}

inline KeyValues runtime_kv(const RunReport& r) {
  KeyValues kv;
  kv["time.configure_s"] = fmt6(r.times.configure);
  kv["time.teachers_s"] = fmt6(r.times.teachers);
  kv["time.distill_s"] = fmt6(r.times.distill);
  kv["time.total_s"] = fmt6(r.times.total);
  if (r.ok && r.times.total > 0.0) kv["efficiency_acc_per_min"] = fmt6(efficiency(100.0 * r.student_accuracy, r.times.total));
  kv["workers"] = std::to_string(r.workers);
  kv["cache.lookups"] = std::to_string(r.cache_lookups);
  kv["cache.hits"] = std::to_string(r.cache_hits);
  kv["cache.hit_rate"] = fmt6(r.cache_lookups ? static_cast<double>(r.cache_hits) / r.cache_lookups : 0.0);
  kv["history.recorded"] = r.history_recorded ? "true" : "false";
  for (const auto& s : r.stages) {
    kv["stage." + s.name + ".wall_s"] = fmt6(s.wall_seconds);
    kv["stage." + s.name + ".cached"] = s.cached ? "true" : "false";
    if (!s.cache_key.empty()) kv["stage." + s.name + ".cache_key"] = s.cache_key;
  }
  return kv;
}

inline std::string chain_trace(const RunReport& r) {
  std::ostringstream out;
  for (const auto& s : r.stages) {
    out << s.name << " role=" << s.role << " layers=" << join_layers(s.layers) << " params=" << s.params
        << " planned=" << s.planned_params << " val_acc=" << fmt6(s.val_accuracy)
        << " test_acc=" << fmt6(s.test_accuracy) << " delta=" << fmt6(s.delta)
        << " appended=" << (s.appended ? "yes" : "no") << '\n';
  }
  return out.str();
}

inline std::string attention_log(const RunReport& r) {
  std::ostringstream out;
  for (const auto& w : r.attention) {
    out << "epoch=" << w.epoch;
    for (double x : w.mean_weights) out << ' ' << fmt6(x);
    out << " entropy=" << fmt6(w.entropy) << '\n';
  }
  return out.str();
}

inline void write_text(const std::filesystem::path& p, const std::string& text) {
  std::ofstream out(p, std::ios::trunc);
  if (!out || !(out << text) || !out.flush()) throw StorageError("cannot write " + p.string());
}

inline void write_run_bundle(const std::filesystem::path& dir, const RunReport& r) {
  std::error_code ec;
  std::filesystem::create_directories(dir, ec);
  if (ec) throw StorageError("cannot create " + dir.string());
  write_text(dir / "metrics.kv", render_kv(metrics_kv(r)));
  write_text(dir / "runtime.kv", render_kv(runtime_kv(r)));
  write_text(dir / "chain.txt", chain_trace(r));
  write_text(dir / "attention.log", attention_log(r));
  if (r.embeddings.rows() > 0) export_embeddings(dir / "embeddings.bin", r.embeddings, r.embedding_labels);
}

struct VariantResult {
  std::string label;
  ComponentSet ablation;
  std::vector<RunReport> runs;

  bool all_ok() const {
    for (const auto& r : runs) {
      if (!r.ok) return false;
    }
    return !runs.empty();
  }
  std::vector<double> values(double RunReport::*field, double scale = 1.0) const {
    std::vector<double> out;
    for (const auto& r : runs) {
      if (r.ok) out.push_back(r.*field * scale);
    }
    return out;
  }
  std::vector<double> times() const {
    std::vector<double> out;
    for (const auto& r : runs) {
      if (r.ok) out.push_back(r.times.total);
    }
    return out;
  }
  Summary accuracy_pct() const { return summarize(values(&RunReport::student_accuracy, 100.0)); }
};

inline std::string pm(const Summary& s, const char* fmt = "%.2f") {
  return format_real(s.mean, fmt) + " ± " + format_real(s.stddev, fmt);
}

// Acc, Retention, Time and CR as mean ± sample std over successful runs.
inline std::string summary_table(const std::vector<VariantResult>& rows) {
  std::ostringstream out;
  char line[512];
  std::snprintf(line, sizeof(line), "%-28s %-18s %-18s %-16s %-10s %s\n", "variant", "Acc (%)", "Retention (%)",
                "Time (s)", "CR", "runs");
  out << line;
  for (const auto& v : rows) {
    const auto acc = v.accuracy_pct();
    const auto ret = summarize(v.values(&RunReport::retention));
    const auto t = summarize(v.times());
    const auto cr = summarize(v.values(&RunReport::compression_ratio));
    std::size_t failed = 0;
    for (const auto& r : v.runs) failed += r.ok ? 0 : 1;
    std::snprintf(line, sizeof(line), "%-28s %-18s %-18s %-16s %-10s %zu/%zu\n", v.label.c_str(), pm(acc).c_str(),
                  pm(ret).c_str(), pm(t).c_str(), format_real(cr.mean, "%.2f").c_str(), v.runs.size() - failed,
                  v.runs.size());
    out << line;
  }
  return out.str();
}

inline std::string describe(const PairedTTest& t, const std::string& a, const std::string& b) {
  char line[512];
  std::snprintf(line, sizeof(line), "%s vs %s: n=%zu mean_diff=%+.4f pp t=%.4f df=%.0f p=%.6f threshold=%.6f %s\n",
                a.c_str(), b.c_str(), t.n, t.mean_diff, t.t, t.df, t.p_value, t.threshold,
                t.significant ? "significant" : "not significant");
  return line;
}

}  // namespace hpmkd
