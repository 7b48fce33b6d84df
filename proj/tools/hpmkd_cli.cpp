// hpmkd: run distillation experiments and comparison suites.
//
//   hpmkd run experiment.ini [--workers 4] [--reps 5] [--ablate prog_chain,memory]
//   hpmkd run experiment.ini --ablation-sweep
//   hpmkd suite baselines experiment.ini

#include <cstdio>
#include <iostream>
#include <memory>
#include <optional>
#include <string>

#include <CLI11.hpp>

#include "hpmkd/experiment.hpp"
#include "hpmkd/pipeline.hpp"
#include "hpmkd/report.hpp"
#include "hpmkd/suites.hpp"

namespace {

using namespace hpmkd;

struct Overrides {
  std::optional<std::size_t> workers;
  std::optional<std::string> cache_dir;
  std::optional<std::string> history_file;
  std::optional<std::string> ablate;
  std::optional<std::uint64_t> seed;
  std::optional<int> reps;
  std::optional<std::string> output_dir;

  void add_to(CLI::App* app) {
    app->add_option("--workers", workers, "worker threads for teacher training")->check(CLI::PositiveNumber);
    app->add_option("--cache-dir", cache_dir, "model cache directory");
    app->add_option("--history-file", history_file, "run history used for configuration prediction");
    app->add_option("--ablate", ablate, "comma-separated components to disable");
    app->add_option("--seed", seed, "master seed");
    app->add_option("--reps", reps, "repetitions")->check(CLI::PositiveNumber);
    app->add_option("--output", output_dir, "report directory");
  }

  void apply(Experiment& e) const {
    if (workers) e.pipeline.workers = *workers;
    if (cache_dir) e.cache_dir = *cache_dir;
    if (history_file) e.history_file = *history_file;
    if (ablate) e.pipeline.ablation = parse_ablation(*ablate);
    if (seed) e.pipeline.master_seed = *seed;
    if (reps) e.repetitions = *reps;
    if (output_dir) e.output_dir = *output_dir;
  }
};

void print_progress(const RunReport& r, const std::string& label) {
  if (r.ok) {
    std::fprintf(stderr, "[%s] rep %d: acc %.2f%% retention %.2f%% cr %.2f config %s (%s) %.1fs\n", label.c_str(),
                 r.repetition, 100.0 * r.student_accuracy, r.retention, r.compression_ratio,
                 (format_real(r.config.config.T0, "%g") + "/" + format_real(r.config.config.alpha, "%g") + "/" +
                  format_real(r.config.config.lr, "%g") + "/" + std::to_string(r.config.config.epochs))
                     .c_str(),
                 to_string(r.config.source), r.times.total);
  } else {
    std::fprintf(stderr, "[%s] rep %d FAILED: %s\n", label.c_str(), r.repetition, r.failure.c_str());
  }
}

struct Context {
  Experiment exp;
  std::unique_ptr<CacheStore> cache;
  std::unique_ptr<HistoryStore> history;

  Stores stores() { return {cache.get(), history.get()}; }
};

Context open(const std::string& file, const Overrides& ov) {
  Context c;
  c.exp = load_experiment(file);
  ov.apply(c.exp);
  c.exp.validate();
  c.cache = std::make_unique<CacheStore>(c.exp.cache_dir);
  c.history = std::make_unique<HistoryStore>(c.exp.history_file);
  return c;
}

int finish_suite(const SuiteResult& s, const std::filesystem::path& dir) {
  write_suite(dir, s);
  std::cout << s.text;
  std::cout << "reports: " << dir.string() << "\n";
  return s.ok() ? 0 : 1;
}

int run_suite_by_name(const std::string& name, Context& c) {
  const auto dir = c.exp.output_dir / c.exp.name / name;
  if (name == "robustness") return finish_suite(suite_robustness(c.exp, c.stores(), dir, print_progress), dir);
  const auto data = prepare_data(c.exp.dataset);
  if (name == "baselines") return finish_suite(suite_baselines(c.exp, data, c.stores(), dir, print_progress), dir);
  if (name == "ablation") return finish_suite(suite_ablation(c.exp, data, c.stores(), dir, print_progress), dir);
  if (name == "interactions") {
    return finish_suite(suite_interactions(c.exp, data, c.stores(), dir, print_progress), dir);
  }
  return 2;
}

int run_experiment(Context& c) {
  const auto data = prepare_data(c.exp.dataset);
  const std::string label = ablation_label(c.exp.pipeline.ablation) == "none"
                                ? std::string("hpmkd")
                                : "without-" + ablation_label(c.exp.pipeline.ablation);
  const auto dir = c.exp.output_dir / c.exp.name / slug(label);
  auto v = run_variant(c.exp, data, {label, c.exp.pipeline.ablation, {}, {}}, c.stores(), dir, print_progress);
  SuiteResult s;
  s.name = "run";
  s.text = summary_table({v});
  add_variant_kv(s.kv, v);
  s.rows.push_back(std::move(v));
  return finish_suite(s, dir);
}

}  // namespace

int main(int argc, char** argv) {
  CLI::App app{"Hierarchical multi-teacher knowledge distillation experiments"};
  app.require_subcommand(1);

  Overrides run_ov, suite_ov;
  std::string run_file, suite_file, suite_name;
  bool ablation_sweep = false, robustness_sweep = false;

  auto* run = app.add_subcommand("run", "run an experiment file");
  run->add_option("file", run_file, "experiment file")->required();
  run->add_flag("--ablation-sweep", ablation_sweep, "full method plus each single component removed");
  run->add_flag("--robustness-sweep", robustness_sweep, "label noise x class imbalance grid");
  run_ov.add_to(run);

  auto* suite = app.add_subcommand("suite", "run a comparison suite");
  suite->add_option("name", suite_name, "baselines | ablation | robustness | interactions")->required();
  suite->add_option("file", suite_file, "experiment file")->required();
  suite_ov.add_to(suite);

  CLI11_PARSE(app, argc, argv);

  try {
    if (*run) {
      if (ablation_sweep && robustness_sweep) throw UsageError("choose at most one sweep");
      auto c = open(run_file, run_ov);
      if (ablation_sweep) return run_suite_by_name("ablation", c);
      if (robustness_sweep) return run_suite_by_name("robustness", c);
      return run_experiment(c);
    }
    if (suite_name != "baselines" && suite_name != "ablation" && suite_name != "robustness" &&
        suite_name != "interactions") {
      throw UsageError("unknown suite '" + suite_name + "' (expected baselines, ablation, robustness or interactions)");
    }
    auto c = open(suite_file, suite_ov);
    return run_suite_by_name(suite_name, c);
  } catch (const ValidationError& e) {
    std::cerr << e.what() << "\n";
    return 2;
  } catch (const UsageError& e) {
    std::cerr << "usage error: " << e.what() << "\n";
    return 2;
  } catch (const std::exception& e) {
    std::cerr << "error: " << e.what() << "\n";
    return 1;
  }
}
