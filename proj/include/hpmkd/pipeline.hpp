#pragma once

// Orchestration: LPT task scheduling over a worker pool, parallel teacher
// training, and the configure -> distill -> record flow with ablation
// switches.

#include <algorithm>
#include <array>
#include <chrono>
#include <cmath>
#include <filesystem>
#include <limits>
#include <mutex>
#include <optional>
#include <set>
#include <string>
#include <thread>
#include <vector>

#include "hpmkd/chain.hpp"
#include "hpmkd/config_manager.hpp"
#include "hpmkd/data.hpp"
#include "hpmkd/distill.hpp"
#include "hpmkd/ensemble.hpp"
#include "hpmkd/errors.hpp"
#include "hpmkd/eval.hpp"
#include "hpmkd/memory.hpp"
#include "hpmkd/nn.hpp"
#include "hpmkd/rng.hpp"
#include "hpmkd/training.hpp"

namespace hpmkd {

enum class Component { AdaptConf, ProgChain, MultiTeach, MetaTemp, Parallel, Memory };

inline constexpr std::array<Component, 6> kComponents = {Component::AdaptConf, Component::ProgChain,
                                                         Component::MultiTeach, Component::MetaTemp,
                                                         Component::Parallel,  Component::Memory};

inline const char* to_string(Component c) {
  switch (c) {
    case Component::AdaptConf: return "adapt_conf";
    case Component::ProgChain: return "prog_chain";
    case Component::MultiTeach: return "multi_teach";
    case Component::MetaTemp: return "meta_temp";
    case Component::Parallel: return "parallel";
    case Component::Memory: return "memory";
  }
  return "?";
}

inline Component parse_component(std::string_view name) {
  for (auto c : kComponents) {
    if (name == to_string(c)) return c;
  }
  throw UsageError("unknown component '" + std::string(name) +
                   "' (expected adapt_conf, prog_chain, multi_teach, meta_temp, parallel or memory)");
}

using ComponentSet = std::set<Component>;

// Comma-separated component names; empty or "none" is the empty set.
inline ComponentSet parse_ablation(std::string_view list) {
  ComponentSet out;
  if (list.empty() || list == "none") return out;
  std::size_t start = 0;
  while (start <= list.size()) {
    const auto end = std::min(list.find(',', start), list.size());
    const auto item = detail::trim(list.substr(start, end - start));
    if (!item.empty()) out.insert(parse_component(item));
    start = end + 1;
  }
  return out;
}

inline std::string ablation_label(const ComponentSet& s) {
  if (s.empty()) return "none";
  std::string out;
  for (auto c : s) {
    if (!out.empty()) out += '+';
    out += to_string(c);
  }
  return out;
}

struct PipelineConfig {
  std::size_t workers = 1;
  std::uint64_t master_seed = 0;
  ComponentSet ablation;  // disabled components

  bool active(Component c) const { return !ablation.contains(c); }
  // Without the parallel component everything runs on one worker.
  std::size_t effective_workers() const { return active(Component::Parallel) ? workers : 1; }
  void validate() const {
    if (workers < 1) throw InvalidParameterError("workers must be >= 1");
  }
};

enum class TaskKind { TeacherTrain, IntermediateDistill, StudentDistill };

struct Task {
  int id = 0;
  TaskKind kind = TaskKind::TeacherTrain;
  double cost_estimate = 0.0;  // parameter count x epochs
  std::vector<std::size_t> layers;
  std::uint64_t seed = 0;
};

using Assignment = std::vector<std::vector<Task>>;

// Longest processing time first: descending cost (ties by id), each task to
// the least-loaded worker (ties to the lowest worker index).
inline Assignment schedule_tasks(std::vector<Task> tasks, std::size_t workers) {
  if (workers < 1) throw InvalidParameterError("workers must be >= 1");
  for (const auto& t : tasks) {
    if (!(t.cost_estimate > 0.0)) throw InvalidParameterError("task " + std::to_string(t.id) + " has nonpositive cost");
  }
  std::stable_sort(tasks.begin(), tasks.end(), [](const Task& a, const Task& b) {
    if (a.cost_estimate != b.cost_estimate) return a.cost_estimate > b.cost_estimate;
    return a.id < b.id;
  });
  Assignment out(workers);
  std::vector<double> load(workers, 0.0);
  for (auto& t : tasks) {
    const auto w = static_cast<std::size_t>(std::min_element(load.begin(), load.end()) - load.begin());
    load[w] += t.cost_estimate;
    out[w].push_back(std::move(t));
  }
  return out;
}

inline double makespan(const Assignment& a) {
  double worst = 0.0;
  for (const auto& list : a) {
    double sum = 0.0;
    for (const auto& t : list) sum += t.cost_estimate;
    worst = std::max(worst, sum);
  }
  return worst;
}

// Runs each worker's list on its own thread. Any failure is rethrown as a
// PipelineError naming the lowest failing task id.
template <class Fn>
void run_assignment(const Assignment& assignment, Fn&& fn) {
  std::mutex mu;
  std::optional<std::pair<int, std::string>> failure;
  auto work = [&](const std::vector<Task>& list) {
    for (const auto& t : list) {
      try {
        fn(t);
      } catch (const std::exception& e) {
        std::lock_guard lock(mu);
        if (!failure || t.id < failure->first) failure = {t.id, e.what()};
        return;
      }
    }
  };
  std::vector<const std::vector<Task>*> busy;
  for (const auto& list : assignment) {
    if (!list.empty()) busy.push_back(&list);
  }
  if (busy.size() <= 1) {
    for (auto* list : busy) work(*list);
  } else {
    std::vector<std::thread> threads;
    threads.reserve(busy.size());
    for (auto* list : busy) threads.emplace_back(work, std::cref(*list));
    for (auto& th : threads) th.join();
  }
  if (failure) throw PipelineError(failure->second, failure->first);
}

class Stopwatch {
 public:
  Stopwatch() : start_(std::chrono::steady_clock::now()) {}
  double seconds() const {
    return std::chrono::duration<double>(std::chrono::steady_clock::now() - start_).count();
  }

 private:
  std::chrono::steady_clock::time_point start_;
};

struct TeacherSpec {
  std::vector<std::size_t> hidden{256, 128, 64};
  double lr = 0.1;
  double momentum = 0.9;
  double weight_decay = 5e-4;
  int epochs = 30;
  std::size_t batch_size = 256;

  void validate() const {
    if (hidden.empty()) throw InvalidSpecError("teacher needs at least one hidden layer");
    for (auto h : hidden) {
      if (h == 0) throw InvalidSpecError("teacher widths must be positive");
    }
    if (!(lr > 0.0) || epochs < 1 || batch_size < 1 || momentum < 0.0 || momentum >= 1.0 || weight_decay < 0.0) {
      throw InvalidSpecError("teacher training parameters out of range");
    }
  }
};

struct TeacherOutcome {
  int task_id = 0;
  std::uint64_t seed = 0;
  Model model;
  double wall_seconds = 0.0;
  bool cached = false;
  std::string cache_key;
};

struct TeacherBatch {
  std::vector<TeacherOutcome> teachers;  // indexed by task id
  double wall_seconds = 0.0;
  std::size_t workers = 1;
};

// Cache identity of a supervised teacher run. The training recipe that the
// distillation config cannot express rides along in the dataset field.
inline std::pair<std::string, DistillConfig> teacher_identity(const TeacherSpec& spec, const std::string& dataset_id) {
  const std::string lineage = dataset_id + "/teacher(wd=" + format_real(spec.weight_decay) +
                              ",mom=" + format_real(spec.momentum) + ",bs=" + std::to_string(spec.batch_size) + ")";
  return {lineage, DistillConfig{1.0, 1.0, spec.lr, spec.epochs}};
}

inline Model train_teacher(const TeacherSpec& spec, const Dataset& train, std::uint64_t seed) {
  const auto layers = mlp_layers(train.dim(), spec.hidden, train.class_count);
  Model m = create_model(layers, derive_seed(seed, 0));
  TrainOptions opts;
  opts.lr = spec.lr;
  opts.momentum = spec.momentum;
  opts.weight_decay = spec.weight_decay;
  opts.epochs = spec.epochs;
  opts.batch_size = spec.batch_size;
  opts.seed = derive_seed(seed, 1);
  train_supervised(m, train.features, train.labels, opts);
  return m;
}

// Teacher i is task i with seed derive_seed(master_seed, i); results do not
// depend on the worker count. `cache` is consulted only when the memory
// component is active.
inline TeacherBatch train_teachers_parallel(const std::vector<TeacherSpec>& specs, const PipelineConfig& pcfg,
                                            const Dataset& train, CacheStore* cache = nullptr) {
  if (specs.empty()) throw InvalidSpecError("at least one teacher spec is required");
  pcfg.validate();
  for (const auto& s : specs) s.validate();
  const bool use_cache = cache != nullptr && pcfg.active(Component::Memory);

  std::vector<Task> tasks;
  for (std::size_t i = 0; i < specs.size(); ++i) {
    Task t;
    t.id = static_cast<int>(i);
    t.kind = TaskKind::TeacherTrain;
    t.layers = mlp_layers(train.dim(), specs[i].hidden, train.class_count);
    t.cost_estimate = static_cast<double>(param_count(t.layers)) * specs[i].epochs;
    t.seed = derive_seed(pcfg.master_seed, i);
    tasks.push_back(std::move(t));
  }
  TeacherBatch batch;
  batch.workers = pcfg.effective_workers();
  batch.teachers.resize(specs.size());
  const auto assignment = schedule_tasks(tasks, batch.workers);

  Stopwatch total;
  run_assignment(assignment, [&](const Task& t) {
    const auto& spec = specs[static_cast<std::size_t>(t.id)];
    TeacherOutcome out;
    out.task_id = t.id;
    out.seed = t.seed;
    Stopwatch sw;
    const auto [lineage, cfg] = teacher_identity(spec, train.id);
    const auto canonical = canonical_config_string(lineage, t.layers, cfg, t.seed);
    const CacheKey key{sha256_hex(canonical)};
    out.cache_key = key.digest;
    std::optional<CacheEntry> hit;
    if (use_cache) hit = cache->get(key);
    if (hit) {
      out.model = std::move(hit->model);
      out.cached = true;
    } else {
      out.model = train_teacher(spec, train, t.seed);
    }
    out.wall_seconds = sw.seconds();
    if (use_cache && !hit) {
      cache->put({key, canonical, out.model, {accuracy(out.model, train), out.wall_seconds, spec.epochs}, unix_now()});
    }
    batch.teachers[static_cast<std::size_t>(t.id)] = std::move(out);
  });
  batch.wall_seconds = total.seconds();
  return batch;
}

struct DatasetSource {
  std::optional<std::filesystem::path> path;  // delimited file; synthetic blobs when empty
  std::string label_column = "label";
  char delimiter = ',';
  bool impute_median = false;
  std::size_t synth_samples = 3000;
  std::size_t synth_classes = 10;
  std::size_t synth_dim = 20;
  double synth_spread = 4.0;
  std::uint64_t synth_seed = 0;
  double test_fraction = 0.2;
  double val_fraction = 0.1;
  std::uint64_t split_seed = 0;
  double noise = 0.0;      // label noise injected into the training part
  double imbalance = 1.0;  // long-tail ratio applied to the training part
};

struct PreparedData {
  Dataset train;
  Dataset val;
  Dataset test;
};

// Split, perturb the training side, carve out validation, then standardize
// everything with the final training statistics.
inline PreparedData prepare_data(const DatasetSource& src) {
  Dataset full;
  if (src.path) {
    LoadOptions lo;
    lo.delimiter = src.delimiter;
    lo.impute_median = src.impute_median;
    full = load_delimited(*src.path, src.label_column, lo);
  } else {
    full = synth_blobs(src.synth_samples, src.synth_classes, src.synth_dim, src.synth_spread, src.synth_seed);
  }
  auto [train, test] = split(full, src.test_fraction, src.split_seed);
  if (src.noise > 0.0) train = inject_label_noise(train, src.noise, derive_seed(src.split_seed, 0x4015E));
  if (src.imbalance > 1.0) train = apply_imbalance(train, src.imbalance, derive_seed(src.split_seed, 0x1B1));
  auto [fit, val] = split(train, src.val_fraction, derive_seed(src.split_seed, 0x7A1));
  PreparedData out;
  out.test = with_standardization(test, fit.standardization);
  out.train = std::move(fit);
  out.val = std::move(val);
  return out;
}

struct Experiment {
  std::string name = "experiment";
  DatasetSource dataset;
  std::vector<TeacherSpec> teachers;
  std::vector<std::size_t> student_hidden{64, 32};
  double epsilon = 0.005;
  std::size_t max_intermediates = 4;
  std::vector<double> width_template;
  std::vector<std::vector<std::size_t>> manual_intermediates;  // hidden widths
  std::optional<DistillConfig> distill_override;               // "auto" when empty
  double gamma = 0.5;
  double beta = 0.1;
  std::size_t attention_hidden = 64;
  EntropySign entropy_sign = EntropySign::Reward;
  bool per_sample_entropy = false;
  double momentum = 0.9;
  std::size_t batch_size = 256;
  int repetitions = 5;
  PipelineConfig pipeline;
  std::filesystem::path output_dir = "hpmkd-runs";
  std::filesystem::path cache_dir = ".hpmkd/cache";
  std::filesystem::path history_file = ".hpmkd/history.log";

  void validate() const {
    if (teachers.empty()) throw ValidationError("teacher: at least one [teacher] section is required");
    for (const auto& t : teachers) t.validate();
    if (student_hidden.empty()) throw ValidationError("student.hidden: at least one hidden layer is required");
    if (repetitions < 1) throw ValidationError("pipeline.repetitions: must be >= 1");
    if (epsilon < 0.0) throw ValidationError("chain.epsilon: must be nonnegative");
    if (gamma < 0.0) throw ValidationError("distill.gamma: must be nonnegative");
    if (beta < 0.0) throw ValidationError("distill.beta: must be nonnegative");
    if (attention_hidden < 1) throw ValidationError("distill.attention_hidden: must be >= 1");
    if (batch_size < 1) throw ValidationError("distill.batch_size: must be >= 1");
    if (distill_override) distill_override->validate();
    pipeline.validate();
  }
};

struct StageReport {
  std::string name;  // "teacher0", "intermediate1", "student", ...
  std::string role;
  std::vector<std::size_t> layers;
  std::size_t params = 0;
  std::size_t planned_params = 0;
  double val_accuracy = 0.0;
  double test_accuracy = 0.0;
  double delta = 0.0;
  double wall_seconds = 0.0;
  bool cached = false;
  bool appended = true;  // false for an intermediate rejected by the threshold
  std::string cache_key;
};

struct PhaseTimes {
  double configure = 0.0;
  double teachers = 0.0;
  double distill = 0.0;
  double total = 0.0;
};

struct RunReport {
  std::string experiment;
  int repetition = 0;
  std::uint64_t seed = 0;
  ComponentSet ablation;
  std::size_t workers = 1;
  ConfigDecision config;
  bool adaptive_temperature = true;
  bool ensemble = false;
  std::vector<StageReport> stages;
  std::size_t intermediates = 0;
  std::size_t teacher_params = 0;
  std::size_t student_params = 0;
  double teacher_accuracy = 0.0;
  double student_accuracy = 0.0;
  double student_val_accuracy = 0.0;
  double retention = 0.0;
  double compression_ratio = 0.0;
  double silhouette = std::numeric_limits<double>::quiet_NaN();
  PhaseTimes times;
  std::size_t cache_lookups = 0;
  std::size_t cache_hits = 0;
  std::vector<WeightStats> attention;
  std::vector<EpochLog> student_log;
  Matrix embeddings;
  std::vector<int> embedding_labels;
  bool history_recorded = false;
  bool ok = true;
  std::string failure;
};

inline std::string short_digest(const Model& m) { return sha256_hex(serialize_model(m)).substr(0, 16); }

namespace detail {

inline void add_chain_stages(RunReport& r, const Chain& chain, const Dataset& test) {
  std::size_t next_intermediate = 1;
  auto convert = [&](const ChainStage& st, bool appended) {
    StageReport s;
    s.role = st.role;
    s.name = st.role == "student" ? "student" : "intermediate" + std::to_string(next_intermediate++);
    s.layers = st.model.layer_sizes;
    s.params = st.params;
    s.planned_params = st.planned_params;
    s.val_accuracy = st.validation_accuracy;
    s.test_accuracy = accuracy(st.model, test);
    s.delta = st.delta;
    s.wall_seconds = st.wall_seconds;
    s.cached = st.cached;
    s.appended = appended;
    s.cache_key = st.cache_key;
    return s;
  };
  for (std::size_t i = 1; i < chain.stages.size(); ++i) {
    if (chain.stages[i].role == "student") continue;
    r.stages.push_back(convert(chain.stages[i], true));
  }
  if (chain.trained_not_appended) r.stages.push_back(convert(*chain.trained_not_appended, false));
  if (chain.stages.size() >= 2 && chain.stages.back().role == "student") {
    r.stages.push_back(convert(chain.stages.back(), true));
  }
}

}  // namespace detail

// One repetition. Seeds: rep seed = derive_seed(master_seed, repetition);
// teachers derive from the rep seed by task id, chain stage s from
// (rep seed, 100 + s), the final student from (rep seed, 200) and the
// attention network from (rep seed, 300). Errors are captured in the report.
inline RunReport run_hpmkd(const Experiment& exp, const PreparedData& data, const PipelineConfig& pcfg, int repetition,
                           CacheStore* cache = nullptr, HistoryStore* history = nullptr) {
  Stopwatch total;
  RunReport r;
  r.experiment = exp.name;
  r.repetition = repetition;
  r.seed = derive_seed(pcfg.master_seed, static_cast<std::uint64_t>(repetition));
  r.ablation = pcfg.ablation;
  r.workers = pcfg.effective_workers();
  r.adaptive_temperature = pcfg.active(Component::MetaTemp);
  CacheStore* store = pcfg.active(Component::Memory) ? cache : nullptr;
  const CacheStats cache_before = store ? store->stats() : CacheStats{};

  try {
    exp.validate();
    pcfg.validate();
    const Dataset& train = data.train;
    const auto student_layers = mlp_layers(train.dim(), exp.student_hidden, train.class_count);
    const auto teacher0_layers = mlp_layers(train.dim(), exp.teachers.front().hidden, train.class_count);

    // Phase 1: configuration.
    Stopwatch phase;
    const auto meta = extract_meta_features(train, teacher0_layers, student_layers);
    if (exp.distill_override) {
      r.config.config = *exp.distill_override;
      r.config.source = ConfigSource::Override;
    } else if (!pcfg.active(Component::AdaptConf)) {
      r.config.config = default_config();
      r.config.source = ConfigSource::Fixed;
    } else {
      r.config = recommend_config(history ? history->entries() : std::vector<HistoryEntry>{}, meta);
    }
    const DistillConfig cfg = r.config.config;
    r.times.configure = phase.seconds();

    // Phase 2a: teachers.
    phase = Stopwatch();
    PipelineConfig tcfg = pcfg;
    tcfg.master_seed = r.seed;
    const auto teachers = train_teachers_parallel(exp.teachers, tcfg, train, store);
    r.times.teachers = phase.seconds();
    for (const auto& t : teachers.teachers) {
      StageReport s;
      s.name = "teacher" + std::to_string(t.task_id);
      s.role = "teacher";
      s.layers = t.model.layer_sizes;
      s.params = s.planned_params = param_count(t.model);
      s.val_accuracy = accuracy(t.model, data.val);
      s.test_accuracy = accuracy(t.model, data.test);
      s.wall_seconds = t.wall_seconds;
      s.cached = t.cached;
      s.cache_key = t.cache_key;
      r.stages.push_back(std::move(s));
    }
    const Model& teacher0 = teachers.teachers.front().model;
    r.teacher_params = param_count(teacher0);
    r.teacher_accuracy = r.stages.front().test_accuracy;

    // Phase 2b: chain, with the final step optionally an attention ensemble.
    phase = Stopwatch();
    ChainSpec cs;
    cs.epsilon = exp.epsilon;
    cs.max_intermediates = pcfg.active(Component::ProgChain) ? exp.max_intermediates : 0;
    cs.student_layers = student_layers;
    cs.width_template = exp.width_template;
    if (pcfg.active(Component::ProgChain)) {
      for (const auto& h : exp.manual_intermediates) {
        cs.manual_intermediates.push_back(mlp_layers(train.dim(), h, train.class_count));
      }
    }
    DistillOptions dopts;
    dopts.momentum = exp.momentum;
    dopts.batch_size = exp.batch_size;
    dopts.adaptive_temperature = r.adaptive_temperature;
    dopts.gamma = exp.gamma;
    const bool use_ensemble = pcfg.active(Component::MultiTeach) && teachers.teachers.size() >= 2;
    r.ensemble = use_ensemble;

    ChainTrainer trainer;
    trainer.validate = [&](const Model& m) { return accuracy(m, data.val); };
    trainer.distill = [&](const Model& source, const std::vector<std::size_t>& layers, std::size_t stage,
                          bool is_student) {
      StageResult out;
      Stopwatch sw;
      if (!is_student) {
        const auto stage_seed = derive_seed(r.seed, 100 + stage);
        const std::string lineage =
            train.id + "/kd(src=" + short_digest(source) + ",temp=" + (dopts.adaptive_temperature ? "adaptive" : "fixed") +
            ",gamma=" + format_real(dopts.gamma) + ",mom=" + format_real(dopts.momentum) +
            ",bs=" + std::to_string(dopts.batch_size) + ")";
        const auto canonical = canonical_config_string(lineage, layers, cfg, stage_seed);
        const CacheKey key{sha256_hex(canonical)};
        out.cache_key = key.digest;
        if (store) {
          if (auto hit = store->get(key)) {
            out.model = std::move(hit->model);
            out.cached = true;
            out.wall_seconds = sw.seconds();
            return out;
          }
        }
        out.model = create_model(layers, derive_seed(stage_seed, 0));
        DistillOptions o = dopts;
        o.seed = derive_seed(stage_seed, 1);
        distill_single(out.model, source, train.features, train.labels, cfg, o);
        out.wall_seconds = sw.seconds();
        if (store) store->put({key, canonical, out.model, {accuracy(out.model, data.val), out.wall_seconds, cfg.epochs}, unix_now()});
        return out;
      }
      const auto student_seed = derive_seed(r.seed, 200);
      out.model = create_model(layers, derive_seed(student_seed, 0));
      DistillOptions o = dopts;
      o.seed = derive_seed(student_seed, 1);
      if (use_ensemble) {
        EnsembleSpec es;
        es.hidden_dim = exp.attention_hidden;
        es.teachers.push_back(&source);
        for (std::size_t k = 1; k < teachers.teachers.size(); ++k) es.teachers.push_back(&teachers.teachers[k].model);
        auto params = make_attention_params(train.class_count, train.dim(), exp.attention_hidden, exp.beta,
                                            derive_seed(r.seed, 300));
        EnsembleOptions eo;
        eo.entropy_sign = exp.entropy_sign;
        eo.per_sample_entropy = exp.per_sample_entropy;
        auto res = distill_multi(out.model, es, params, cfg, train.features, train.labels,
                                 make_scheduler(cfg.T0, exp.gamma), o, eo);
        r.student_log = std::move(res.log);
        r.attention = std::move(res.weights);
      } else {
        r.student_log = distill_single(out.model, source, train.features, train.labels, cfg, o);
      }
      out.wall_seconds = sw.seconds();
      return out;
    };

    Chain chain;
    try {
      chain = build_chain(teacher0, cs, trainer);
    } catch (const ChainError& e) {
      detail::add_chain_stages(r, e.partial(), data.test);
      throw;
    }
    r.times.distill = phase.seconds();
    detail::add_chain_stages(r, chain, data.test);
    r.intermediates = chain.intermediates();

    // Evaluation.
    const Model& student = chain.stages.back().model;
    r.student_params = param_count(student);
    r.student_val_accuracy = chain.stages.back().validation_accuracy;
    r.student_accuracy = r.stages.back().test_accuracy;
    r.retention = retention(r.student_accuracy, r.teacher_accuracy);
    r.compression_ratio = compression_ratio(r.teacher_params, r.student_params);
    r.embeddings = embed(student, data.test.features);
    r.embedding_labels = data.test.labels;
    try {
      r.silhouette = silhouette(r.embeddings, r.embedding_labels, r.seed);
    } catch (const UndefinedSilhouetteError&) {
    }

    // Phase 3: history.
    if (history) r.history_recorded = history->record({meta, cfg, r.student_val_accuracy});
  } catch (const std::exception& e) {
    r.ok = false;
    r.failure = e.what();
  }
  if (store) {
    const auto after = store->stats();
    r.cache_lookups = after.lookups - cache_before.lookups;
    r.cache_hits = after.hits - cache_before.hits;
  }
  r.times.total = total.seconds();
  return r;
}

}  // namespace hpmkd
