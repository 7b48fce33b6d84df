#pragma once

// Repeated runs and the comparison suites: baselines, ablation,
// interactions and robustness. Every variant in a suite uses the same
// master seed, so repetition i of one variant pairs with repetition i of
// another.

#include <filesystem>
#include <functional>
#include <optional>
#include <sstream>
#include <string>
#include <vector>

#include "hpmkd/pipeline.hpp"
#include "hpmkd/report.hpp"

namespace hpmkd {

struct Stores {
  CacheStore* cache = nullptr;
  HistoryStore* history = nullptr;
};

struct Variant {
  std::string label;
  ComponentSet ablation;
  std::optional<DistillConfig> distill_override;
  std::vector<std::vector<std::size_t>> manual_intermediates;
};

using ProgressFn = std::function<void(const RunReport&, const std::string& label)>;

// All repetitions of one variant. Bundles go to out_dir/rep<i> when out_dir
// is nonempty.
inline VariantResult run_variant(const Experiment& base, const PreparedData& data, const Variant& v, Stores stores,
                                 const std::filesystem::path& out_dir = {}, const ProgressFn& progress = {}) {
  Experiment exp = base;
  exp.pipeline.ablation = v.ablation;
  if (v.distill_override) exp.distill_override = v.distill_override;
  if (!v.manual_intermediates.empty()) exp.manual_intermediates = v.manual_intermediates;
  VariantResult out;
  out.label = v.label;
  out.ablation = v.ablation;
  for (int rep = 0; rep < exp.repetitions; ++rep) {
    auto r = run_hpmkd(exp, data, exp.pipeline, rep, stores.cache, stores.history);
    if (!out_dir.empty()) write_run_bundle(out_dir / ("rep" + std::to_string(rep)), r);
    if (progress) progress(r, v.label);
    out.runs.push_back(std::move(r));
  }
  return out;
}

struct SuiteResult {
  std::string name;
  std::vector<VariantResult> rows;
  std::string text;  // human-readable tables and tests
  KeyValues kv;      // deterministic machine-readable summary

  bool ok() const {
    for (const auto& r : rows) {
      if (!r.all_ok()) return false;
    }
    return !rows.empty();
  }
};

inline std::string slug(std::string s) {
  for (char& c : s) {
    if (!std::isalnum(static_cast<unsigned char>(c)) && c != '-' && c != '_' && c != '.') c = '_';
  }
  return s;
}

inline void add_variant_kv(KeyValues& kv, const VariantResult& v) {
  const std::string p = "variant." + slug(v.label) + ".";
  const auto acc = v.accuracy_pct();
  const auto ret = summarize(v.values(&RunReport::retention));
  kv[p + "ablation"] = ablation_label(v.ablation);
  kv[p + "accuracy_mean_pct"] = fmt6(acc.mean);
  kv[p + "accuracy_std_pct"] = fmt6(acc.stddev);
  kv[p + "retention_mean_pct"] = fmt6(ret.mean);
  kv[p + "retention_std_pct"] = fmt6(ret.stddev);
  kv[p + "compression_ratio"] = fmt6(summarize(v.values(&RunReport::compression_ratio)).mean);
  kv[p + "runs"] = std::to_string(v.runs.size());
  std::size_t ok = 0;
  for (const auto& r : v.runs) ok += r.ok ? 1 : 0;
  kv[p + "runs_ok"] = std::to_string(ok);
}

// Paired accuracies (percent) of two variants over repetitions where both
// succeeded.
inline std::pair<std::vector<double>, std::vector<double>> paired_accuracy(const VariantResult& a,
                                                                           const VariantResult& b) {
  std::vector<double> xa, xb;
  for (std::size_t i = 0; i < std::min(a.runs.size(), b.runs.size()); ++i) {
    if (a.runs[i].ok && b.runs[i].ok) {
      xa.push_back(100.0 * a.runs[i].student_accuracy);
      xb.push_back(100.0 * b.runs[i].student_accuracy);
    }
  }
  return {xa, xb};
}

inline void add_t_tests(SuiteResult& s, const VariantResult& ref, const std::vector<const VariantResult*>& others) {
  std::ostringstream out;
  out << "\npaired t-tests on accuracy (alpha=0.05, Bonferroni over " << others.size() << " comparisons)\n";
  for (const auto* o : others) {
    const auto [a, b] = paired_accuracy(ref, *o);
    const std::string p = "ttest." + slug(ref.label) + "_vs_" + slug(o->label) + ".";
    if (a.size() < 2) {
      out << ref.label << " vs " << o->label << ": fewer than two paired runs\n";
      s.kv[p + "n"] = std::to_string(a.size());
      continue;
    }
    const auto t = paired_t_test(a, b, 0.05, others.size());
    out << describe(t, ref.label, o->label);
    s.kv[p + "n"] = std::to_string(t.n);
    s.kv[p + "mean_diff_pp"] = fmt6(t.mean_diff);
    s.kv[p + "t"] = std::isfinite(t.t) ? fmt6(t.t) : (t.t > 0 ? "inf" : "-inf");
    s.kv[p + "p_value"] = fmt6(t.p_value);
    s.kv[p + "threshold"] = fmt6(t.threshold);
    s.kv[p + "significant"] = t.significant ? "true" : "false";
  }
  s.text += out.str();
}

// Hidden widths of a single intermediate at the geometric mean of teacher
// and student sizes.
inline std::vector<std::size_t> geometric_intermediate(const Experiment& exp, const Dataset& train) {
  const auto t = mlp_layers(train.dim(), exp.teachers.front().hidden, train.class_count);
  const auto s = mlp_layers(train.dim(), exp.student_hidden, train.class_count);
  std::vector<double> ratios = exp.width_template;
  if (ratios.empty()) ratios.assign(exp.teachers.front().hidden.begin(), exp.teachers.front().hidden.end());
  const auto layers =
      realize_architecture(plan_next_size(param_count(t), param_count(s)), train.dim(), train.class_count, ratios);
  return {layers.begin() + 1, layers.end() - 1};
}

inline ComponentSet all_components() { return {kComponents.begin(), kComponents.end()}; }

// Direct training, traditional KD, a one-intermediate chain and the full
// method. The full method runs first so that its configuration is not
// steered by history the baselines record.
inline SuiteResult suite_baselines(const Experiment& exp, const PreparedData& data, Stores stores,
                                   const std::filesystem::path& out_dir = {}, const ProgressFn& progress = {}) {
  SuiteResult s;
  s.name = "baselines";
  auto dir = [&](const char* v) { return out_dir.empty() ? out_dir : out_dir / v; };
  const DistillConfig fixed = exp.distill_override.value_or(default_config());
  DistillConfig direct_cfg = fixed;
  direct_cfg.alpha = 1.0;

  auto hpmkd = run_variant(exp, data, {"hpmkd", exp.pipeline.ablation, {}, {}}, stores, dir("hpmkd"), progress);
  auto direct = run_variant(exp, data, {"direct", all_components(), direct_cfg, {}}, stores, dir("direct"), progress);
  auto trad = run_variant(exp, data,
                          {"traditional-kd",
                           {Component::ProgChain, Component::MultiTeach, Component::MetaTemp, Component::AdaptConf},
                           fixed,
                           {}},
                          stores, dir("traditional-kd"), progress);
  auto manual = run_variant(exp, data,
                            {"manual-chain",
                             {Component::MultiTeach, Component::MetaTemp, Component::AdaptConf},
                             fixed,
                             {geometric_intermediate(exp, data.train)}},
                            stores, dir("manual-chain"), progress);
  s.rows = {std::move(direct), std::move(trad), std::move(manual), std::move(hpmkd)};
  s.text = summary_table(s.rows);
  for (const auto& r : s.rows) add_variant_kv(s.kv, r);
  add_t_tests(s, s.rows[3], {&s.rows[0], &s.rows[1], &s.rows[2]});
  return s;
}

inline void add_delta_columns(SuiteResult& s, const VariantResult& full) {
  const double base = full.accuracy_pct().mean;
  std::ostringstream out;
  out << "\naccuracy delta vs " << full.label << " (pp)\n";
  for (const auto& r : s.rows) {
    if (&r == &full) continue;
    const double d = r.accuracy_pct().mean - base;
    char line[256];
    std::snprintf(line, sizeof(line), "%-28s %+.4f\n", r.label.c_str(), d);
    out << line;
    s.kv["delta." + slug(r.label) + ".accuracy_pp"] = fmt6(d);
  }
  s.text += out.str();
}

// The full method plus each single component removed.
inline SuiteResult suite_ablation(const Experiment& exp, const PreparedData& data, Stores stores,
                                  const std::filesystem::path& out_dir = {}, const ProgressFn& progress = {}) {
  SuiteResult s;
  s.name = "ablation";
  s.rows.push_back(run_variant(exp, data, {"full", {}, {}, {}}, stores, out_dir.empty() ? out_dir : out_dir / "full",
                               progress));
  for (auto c : kComponents) {
    const std::string label = std::string("w/o ") + to_string(c);
    s.rows.push_back(run_variant(exp, data, {label, {c}, {}, {}}, stores,
                                 out_dir.empty() ? out_dir : out_dir / slug(label), progress));
  }
  s.text = summary_table(s.rows);
  for (const auto& r : s.rows) add_variant_kv(s.kv, r);
  add_delta_columns(s, s.rows.front());
  return s;
}

inline const std::vector<std::pair<Component, Component>>& interaction_pairs() {
  static const std::vector<std::pair<Component, Component>> pairs = {
      {Component::ProgChain, Component::MetaTemp},
      {Component::MultiTeach, Component::Memory},
      {Component::AdaptConf, Component::MetaTemp},
  };
  return pairs;
}

// Pairwise removals next to the single removals they combine. The
// interaction column is the pair's delta minus the sum of the two single
// deltas.
inline SuiteResult suite_interactions(const Experiment& exp, const PreparedData& data, Stores stores,
                                      const std::filesystem::path& out_dir = {}, const ProgressFn& progress = {}) {
  SuiteResult s;
  s.name = "interactions";
  auto dir = [&](const std::string& label) { return out_dir.empty() ? out_dir : out_dir / slug(label); };
  s.rows.push_back(run_variant(exp, data, {"full", {}, {}, {}}, stores, dir("full"), progress));
  std::map<Component, std::size_t> single_row;
  for (const auto& [a, b] : interaction_pairs()) {
    for (auto c : {a, b}) {
      if (single_row.contains(c)) continue;
      const std::string label = std::string("w/o ") + to_string(c);
      single_row[c] = s.rows.size();
      s.rows.push_back(run_variant(exp, data, {label, {c}, {}, {}}, stores, dir(label), progress));
    }
  }
  std::vector<std::size_t> pair_rows;
  for (const auto& [a, b] : interaction_pairs()) {
    const std::string label = std::string("w/o ") + to_string(a) + "+" + to_string(b);
    pair_rows.push_back(s.rows.size());
    s.rows.push_back(run_variant(exp, data, {label, {a, b}, {}, {}}, stores, dir(label), progress));
  }
  s.text = summary_table(s.rows);
  for (const auto& r : s.rows) add_variant_kv(s.kv, r);
  add_delta_columns(s, s.rows.front());

  const double base = s.rows.front().accuracy_pct().mean;
  auto delta = [&](std::size_t row) { return s.rows[row].accuracy_pct().mean - base; };
  std::ostringstream out;
  out << "\npair interactions (pp)\n";
  char line[256];
  std::snprintf(line, sizeof(line), "%-34s %12s %12s %12s\n", "pair", "pair_delta", "sum_singles", "interaction");
  out << line;
  for (std::size_t i = 0; i < interaction_pairs().size(); ++i) {
    const auto [a, b] = interaction_pairs()[i];
    const double dp = delta(pair_rows[i]);
    const double sum = delta(single_row[a]) + delta(single_row[b]);
    const std::string name = std::string(to_string(a)) + "+" + to_string(b);
    std::snprintf(line, sizeof(line), "%-34s %+12.4f %+12.4f %+12.4f\n", name.c_str(), dp, sum, dp - sum);
    out << line;
    s.kv["interaction." + name + ".pair_delta_pp"] = fmt6(dp);
    s.kv["interaction." + name + ".sum_single_deltas_pp"] = fmt6(sum);
    s.kv["interaction." + name + ".interaction_pp"] = fmt6(dp - sum);
  }
  s.text += out.str();
  return s;
}

inline const std::vector<double>& robustness_noise_levels() {
  static const std::vector<double> v = {0.0, 0.1, 0.2, 0.3};
  return v;
}
inline const std::vector<double>& robustness_imbalance_levels() {
  static const std::vector<double> v = {1.0, 10.0, 50.0, 100.0};
  return v;
}

// Noise x imbalance grid of full runs. Each cell perturbs only the training
// split; test data stays clean and balanced.
inline SuiteResult suite_robustness(const Experiment& exp, Stores stores, const std::filesystem::path& out_dir = {},
                                    const ProgressFn& progress = {}, std::vector<double> noise = {},
                                    std::vector<double> imbalance = {}) {
  if (noise.empty()) noise = robustness_noise_levels();
  if (imbalance.empty()) imbalance = robustness_imbalance_levels();
  SuiteResult s;
  s.name = "robustness";
  std::ostringstream out;
  char line[256];
  std::snprintf(line, sizeof(line), "%-8s %-10s %-18s %-14s %-12s %s\n", "noise", "imbalance", "Acc (%)",
                "vs clean (pp)", "silhouette", "runs");
  out << line;
  std::optional<double> clean;
  for (double n : noise) {
    for (double im : imbalance) {
      Experiment e = exp;
      e.dataset.noise = n;
      e.dataset.imbalance = im;
      const std::string label = "noise=" + format_real(n, "%.2f") + ",imbalance=" + format_real(im, "%g");
      VariantResult v;
      try {
        const auto data = prepare_data(e.dataset);
        v = run_variant(e, data, {label, e.pipeline.ablation, {}, {}}, stores,
                        out_dir.empty() ? out_dir : out_dir / slug(label), progress);
      } catch (const std::exception& err) {
        v.label = label;
        RunReport failed;
        failed.ok = false;
        failed.failure = err.what();
        v.runs.push_back(failed);
      }
      const auto acc = v.accuracy_pct();
      if (n == 0.0 && im == 1.0) clean = acc.mean;
      const double d = clean ? acc.mean - *clean : 0.0;
      const auto sil = summarize(v.values(&RunReport::silhouette));
      std::size_t ok = 0;
      for (const auto& r : v.runs) ok += r.ok ? 1 : 0;
      std::snprintf(line, sizeof(line), "%-8.2f %-10g %-18s %-14s %-12.4f %zu/%zu\n", n, im, pm(acc).c_str(),
                    clean ? format_real(d, "%+.2f").c_str() : "n/a", sil.mean, ok, v.runs.size());
      out << line;
      add_variant_kv(s.kv, v);
      s.kv["variant." + slug(label) + ".silhouette_mean"] = fmt6(sil.mean);
      if (clean) s.kv["variant." + slug(label) + ".delta_vs_clean_pp"] = fmt6(d);
      s.rows.push_back(std::move(v));
    }
  }
  s.text = out.str();
  return s;
}

inline void write_suite(const std::filesystem::path& dir, const SuiteResult& s) {
  std::error_code ec;
  std::filesystem::create_directories(dir, ec);
  if (ec) throw StorageError("cannot create " + dir.string());
  write_text(dir / "summary.txt", s.text);
  write_text(dir / "suite.kv", render_kv(s.kv));
}

}  // namespace hpmkd
