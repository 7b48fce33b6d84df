#include <gtest/gtest.h>

#include <atomic>
#include <cmath>
#include <set>

#include "hpmkd/experiment.hpp"
#include "hpmkd/pipeline.hpp"
#include "hpmkd/report.hpp"
#include "oracles.hpp"
#include "temp_dir.hpp"

using namespace hpmkd;

namespace {

std::vector<Task> tasks_with_costs(const std::vector<double>& costs) {
  std::vector<Task> out;
  for (std::size_t i = 0; i < costs.size(); ++i) {
    Task t;
    t.id = static_cast<int>(i);
    t.cost_estimate = costs[i];
    out.push_back(t);
  }
  return out;
}

Experiment tiny_experiment() {
  Experiment e;
  e.name = "tiny";
  e.dataset.synth_samples = 400;
  e.dataset.synth_classes = 3;
  e.dataset.synth_dim = 5;
  e.dataset.synth_spread = 2.0;
  e.dataset.synth_seed = 3;
  e.dataset.split_seed = 4;
  for (std::vector<std::size_t> h : {std::vector<std::size_t>{96, 48}, {64, 32}, {48, 24}}) {
    TeacherSpec t;
    t.hidden = h;
    t.epochs = 4;
    t.batch_size = 64;
    e.teachers.push_back(t);
  }
  e.student_hidden = {8, 4};
  e.distill_override = DistillConfig{4.0, 0.7, 0.05, 4};
  e.batch_size = 64;
  e.attention_hidden = 8;
  e.repetitions = 1;
  e.pipeline.master_seed = 99;
  return e;
}

}  // namespace

TEST(Schedule, LptByHand) {
  // Sorted 5 4 3 3 2 2 on 3 workers: {5}, {4, 2}, {3, 3}... LPT gives loads
  // 5+2, 4+2, 3+3 = 7, 6, 6.
  const auto a = schedule_tasks(tasks_with_costs({3, 5, 2, 4, 3, 2}), 3);
  EXPECT_EQ(makespan(a), 7.0);
  ASSERT_EQ(a[0].size(), 2u);
  EXPECT_EQ(a[0][0].id, 1);
  EXPECT_EQ(a[2][0].id, 0);  // first of the tied 3s goes first
  EXPECT_EQ(a[2][1].id, 4);
}

TEST(Schedule, WithinLptBoundOfOptimum) {
  for (std::uint64_t seed = 0; seed < 30; ++seed) {
    CounterRng rng(seed);
    const std::size_t n = 2 + rng.below(7);
    const std::size_t w = 1 + rng.below(4);
    std::vector<double> costs;
    for (std::size_t i = 0; i < n; ++i) costs.push_back(1.0 + static_cast<double>(rng.below(20)));
    const auto a = schedule_tasks(tasks_with_costs(costs), w);
    std::size_t assigned = 0;
    for (const auto& l : a) assigned += l.size();
    EXPECT_EQ(assigned, n);
    const double opt = oracle::best_makespan(costs, w);
    EXPECT_LE(makespan(a), (4.0 / 3.0 - 1.0 / (3.0 * static_cast<double>(w))) * opt + 1e-9);
  }
}

TEST(Schedule, KnownOptimalCase) {
  // 8 5 4 4 3 on 3 workers: LPT gives 8 | 5+3 | 4+4, makespan 8 = optimum.
  const std::vector<double> costs{8, 5, 4, 4, 3};
  EXPECT_EQ(makespan(schedule_tasks(tasks_with_costs(costs), 3)), oracle::best_makespan(costs, 3));
  // LPT's worst case for 2 workers: 3 3 2 2 2 -> 7 vs optimum 6.
  const std::vector<double> bad{3, 3, 2, 2, 2};
  EXPECT_EQ(makespan(schedule_tasks(tasks_with_costs(bad), 2)), 7.0);
  EXPECT_EQ(oracle::best_makespan(bad, 2), 6.0);
}

TEST(Schedule, EdgeCases) {
  const auto one = schedule_tasks(tasks_with_costs({1, 2, 3}), 1);
  EXPECT_EQ(makespan(one), 6.0);
  const auto equal = schedule_tasks(tasks_with_costs({2, 2, 2, 2}), 4);
  for (const auto& l : equal) EXPECT_EQ(l.size(), 1u);
  EXPECT_THROW(schedule_tasks(tasks_with_costs({1}), 0), InvalidParameterError);
  EXPECT_THROW(schedule_tasks(tasks_with_costs({0}), 2), InvalidParameterError);
}

TEST(RunAssignment, ReportsLowestFailingTask) {
  const auto a = schedule_tasks(tasks_with_costs({5, 4, 3, 2, 1}), 3);
  std::atomic<int> ran{0};
  try {
    run_assignment(a, [&](const Task& t) {
      ++ran;
      if (t.id == 3 || t.id == 1) throw std::runtime_error("fail " + std::to_string(t.id));
    });
    FAIL() << "expected PipelineError";
  } catch (const PipelineError& e) {
    EXPECT_EQ(e.task_id(), 1);
  }
  std::atomic<int> count{0};
  run_assignment(a, [&](const Task&) { ++count; });
  EXPECT_EQ(count, 5);
}

TEST(Teachers, WorkerCountDoesNotChangeResults) {
  const auto data = prepare_data(tiny_experiment().dataset);
  const auto specs = tiny_experiment().teachers;
  PipelineConfig one;
  one.master_seed = 5;
  PipelineConfig four = one;
  four.workers = 4;
  const auto a = train_teachers_parallel(specs, one, data.train);
  const auto b = train_teachers_parallel(specs, four, data.train);
  ASSERT_EQ(a.teachers.size(), 3u);
  EXPECT_EQ(b.workers, 4u);
  for (std::size_t i = 0; i < 3; ++i) {
    EXPECT_TRUE(a.teachers[i].model == b.teachers[i].model);
    EXPECT_EQ(a.teachers[i].seed, derive_seed(5, i));
  }
  four.ablation = {Component::Parallel};
  EXPECT_EQ(train_teachers_parallel(specs, four, data.train).workers, 1u);
}

TEST(Teachers, CacheServesRepeatRuns) {
  test::TempDir d;
  CacheStore cache(d.path());
  const auto data = prepare_data(tiny_experiment().dataset);
  const auto specs = tiny_experiment().teachers;
  PipelineConfig p;
  p.master_seed = 6;
  const auto first = train_teachers_parallel(specs, p, data.train, &cache);
  const auto second = train_teachers_parallel(specs, p, data.train, &cache);
  for (std::size_t i = 0; i < 3; ++i) {
    EXPECT_FALSE(first.teachers[i].cached);
    EXPECT_TRUE(second.teachers[i].cached);
    EXPECT_TRUE(first.teachers[i].model == second.teachers[i].model);
  }
  p.ablation = {Component::Memory};
  EXPECT_FALSE(train_teachers_parallel(specs, p, data.train, &cache).teachers[0].cached);
}

TEST(Stats, SummarizeByHand) {
  const std::vector<double> x{1, 2, 3, 4, 5};
  const auto s = summarize(x);
  EXPECT_EQ(s.mean, 3.0);
  EXPECT_NEAR(s.stddev, std::sqrt(2.5), 1e-15);
  EXPECT_EQ(summarize(std::vector<double>{7}).stddev, 0.0);
}

TEST(Stats, PairedTTestMatchesReference) {
  const std::vector<double> a{0.85, 0.86, 0.84, 0.87, 0.85}, b{0.83, 0.85, 0.84, 0.84, 0.82};
  const auto t = paired_t_test(a, b);
  EXPECT_NEAR(t.t, 3.086974532565159, 1e-9);
  EXPECT_NEAR(t.p_value, 0.03668198940044108, 1e-9);
  EXPECT_TRUE(t.significant);
  EXPECT_FALSE(paired_t_test(a, b, 0.05, 3).significant);  // 0.0367 > 0.05 / 3
  const std::vector<double> c{1, 2, 3, 4, 5, 6}, e{1.5, 1.9, 3.6, 3.7, 5.4, 6.8};
  const auto u = paired_t_test(c, e);
  EXPECT_NEAR(u.t, -1.8198699419201882, 1e-9);
  EXPECT_NEAR(u.p_value, 0.12843066940970863, 1e-9);
  EXPECT_THROW(paired_t_test(c, a), InvalidInputError);
}

TEST(Ablation, ParseAndLabel) {
  EXPECT_TRUE(parse_ablation("").empty());
  EXPECT_TRUE(parse_ablation("none").empty());
  const auto s = parse_ablation("memory, prog_chain");
  EXPECT_EQ(s, (ComponentSet{Component::Memory, Component::ProgChain}));
  EXPECT_EQ(ablation_label(s), "prog_chain+memory");
  EXPECT_THROW(parse_ablation("teleport"), UsageError);
}

TEST(RunHpmkd, DeterministicAcrossWorkerCounts) {
  const auto exp = tiny_experiment();
  const auto data = prepare_data(exp.dataset);
  auto p1 = exp.pipeline;
  auto p3 = exp.pipeline;
  p3.workers = 3;
  const auto a = run_hpmkd(exp, data, p1, 0);
  const auto b = run_hpmkd(exp, data, p3, 0);
  ASSERT_TRUE(a.ok) << a.failure;
  ASSERT_TRUE(b.ok) << b.failure;
  EXPECT_EQ(render_kv(metrics_kv(a)), render_kv(metrics_kv(b)));
  EXPECT_EQ(a.config.source, ConfigSource::Override);
  EXPECT_TRUE(a.ensemble);
  EXPECT_EQ(a.attention.size(), 4u);
}

TEST(RunHpmkd, ChainStagesShrinkAndDiffer) {
  const auto exp = tiny_experiment();
  const auto r = run_hpmkd(exp, prepare_data(exp.dataset), exp.pipeline, 1);
  ASSERT_TRUE(r.ok) << r.failure;
  ASSERT_FALSE(r.stages.empty());
  EXPECT_EQ(r.stages.back().name, "student");
  std::size_t prev = r.teacher_params;
  std::set<std::vector<std::size_t>> archs;
  for (const auto& s : r.stages) {
    if (!s.appended || s.role == "teacher") continue;
    EXPECT_LT(s.params, prev);
    prev = s.params;
    EXPECT_TRUE(archs.insert(s.layers).second);
  }
  EXPECT_NEAR(r.compression_ratio, static_cast<double>(r.teacher_params) / r.student_params, 1e-12);
}

TEST(RunHpmkd, AblationsSwitchBehaviour) {
  auto exp = tiny_experiment();
  const auto data = prepare_data(exp.dataset);
  auto p = exp.pipeline;
  p.ablation = {Component::ProgChain, Component::MultiTeach, Component::MetaTemp};
  const auto r = run_hpmkd(exp, data, p, 0);
  ASSERT_TRUE(r.ok) << r.failure;
  EXPECT_EQ(r.intermediates, 0u);
  EXPECT_FALSE(r.ensemble);
  for (const auto& e : r.student_log) EXPECT_EQ(e.temperature, 4.0);

  exp.distill_override.reset();
  p.ablation = {Component::AdaptConf};
  const auto f = run_hpmkd(exp, data, p, 0);
  ASSERT_TRUE(f.ok) << f.failure;
  EXPECT_EQ(f.config.source, ConfigSource::Fixed);
  EXPECT_EQ(f.config.config, default_config());
}

TEST(RunHpmkd, RecordsHistory) {
  test::TempDir d;
  HistoryStore h(d.path() / "history.log");
  auto exp = tiny_experiment();
  const auto r = run_hpmkd(exp, prepare_data(exp.dataset), exp.pipeline, 0, nullptr, &h);
  ASSERT_TRUE(r.ok) << r.failure;
  EXPECT_TRUE(r.history_recorded);
  ASSERT_EQ(h.size(), 1u);
  EXPECT_EQ(h.entries()[0].accuracy, r.student_val_accuracy);
}

TEST(ExperimentFile, ParsesEveryField) {
  const auto e = parse_experiment(R"(name = demo
[dataset]
source = synth
samples = 500
classes = 4
noise = 0.1
imbalance = 10
[teacher]
hidden = 32,16
epochs = 3
[teacher]
hidden = 16
[student]
hidden = 8
[chain]
epsilon = inf
intermediate = 12,6
[distill]
mode = fixed
T0 = 2
alpha = 0.5
entropy_sign = literal
[pipeline]
workers = 2
seed = 17
ablation = memory
repetitions = 3
)");
  EXPECT_EQ(e.name, "demo");
  EXPECT_EQ(e.dataset.synth_samples, 500u);
  EXPECT_EQ(e.dataset.noise, 0.1);
  EXPECT_EQ(e.dataset.imbalance, 10.0);
  ASSERT_EQ(e.teachers.size(), 2u);
  EXPECT_EQ(e.teachers[0].epochs, 3);
  EXPECT_EQ(e.teachers[1].hidden, (std::vector<std::size_t>{16}));
  EXPECT_TRUE(std::isinf(e.epsilon));
  ASSERT_EQ(e.manual_intermediates.size(), 1u);
  ASSERT_TRUE(e.distill_override.has_value());
  EXPECT_EQ(e.distill_override->T0, 2.0);
  EXPECT_EQ(e.distill_override->lr, 0.05);
  EXPECT_EQ(e.entropy_sign, EntropySign::Literal);
  EXPECT_EQ(e.pipeline.workers, 2u);
  EXPECT_EQ(e.pipeline.master_seed, 17u);
  EXPECT_EQ(e.pipeline.ablation, ComponentSet{Component::Memory});
  EXPECT_EQ(e.repetitions, 3);
}

TEST(ExperimentFile, CollectsEveryProblem) {
  try {
    parse_experiment("[dataset]\nsamples = -3\nbogus = 1\n[mystery]\n[distill]\nT0 = 2\n");
    FAIL() << "expected ValidationError";
  } catch (const ValidationError& e) {
    const std::string msg = e.what();
    EXPECT_NE(msg.find("line 2: dataset.samples"), std::string::npos) << msg;
    EXPECT_NE(msg.find("line 3: dataset.bogus"), std::string::npos) << msg;
    EXPECT_NE(msg.find("mystery"), std::string::npos) << msg;
    EXPECT_NE(msg.find("at least one [teacher]"), std::string::npos) << msg;
    EXPECT_NE(msg.find("mode = fixed"), std::string::npos) << msg;
  }
}
