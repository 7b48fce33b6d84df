#include <gtest/gtest.h>

#include <algorithm>
#include <cmath>
#include <filesystem>
#include <fstream>
#include <numeric>

#include "hpmkd/config_manager.hpp"
#include "temp_dir.hpp"

using namespace hpmkd;

namespace {

HistoryEntry entry(const DistillConfig& c, double acc, std::size_t n = 1000) {
  return {make_meta_features(n, 10, 20, 500000, 50000), c, acc};
}

}  // namespace

TEST(MetaFeatures, HandExample) {
  const auto m = make_meta_features(1000, 10, 20, 500000, 50000);
  EXPECT_DOUBLE_EQ(m.compression_ratio, 10.0);
  EXPECT_THROW(make_meta_features(0, 10, 20, 5, 5), InvalidInputError);
}

TEST(Grid, HasEveryCombinationInOrder) {
  const auto g = candidate_grid();
  ASSERT_EQ(g.size(), 144u);
  EXPECT_TRUE(std::is_sorted(g.begin(), g.end()));
  EXPECT_EQ(std::adjacent_find(g.begin(), g.end()), g.end());
  EXPECT_NE(std::find(g.begin(), g.end(), default_config()), g.end());
  EXPECT_EQ(g.front(), (DistillConfig{1.0, 0.3, 0.01, 10}));
  EXPECT_EQ(g.back(), (DistillConfig{8.0, 0.9, 0.1, 30}));
}

TEST(Recommend, ColdStartBelowFiveRuns) {
  const auto meta = make_meta_features(1000, 10, 20, 500000, 50000);
  std::vector<HistoryEntry> h;
  for (int i = 0; i < 4; ++i) h.push_back(entry({1.0, 0.3, 0.01, 10 + 10 * (i % 3)}, 0.5 + 0.1 * i));
  const auto d = recommend_config(h, meta);
  EXPECT_EQ(d.source, ConfigSource::ColdStart);
  EXPECT_EQ(d.config, default_config());
  EXPECT_EQ(d.history_size, 4u);
}

TEST(Recommend, ColdStartWhenOnlyOneConfigRecorded) {
  const auto meta = make_meta_features(1000, 10, 20, 500000, 50000);
  std::vector<HistoryEntry> h;
  for (int i = 0; i < 8; ++i) h.push_back(entry(default_config(), 0.8 + 0.01 * i, 1000 + static_cast<std::size_t>(i)));
  EXPECT_EQ(recommend_config(h, meta).source, ConfigSource::ColdStart);
}

TEST(Recommend, PredictsTheBestRecordedRegion) {
  // Accuracy rises with T0 and falls with alpha; the forest should point at
  // high T0 and low alpha.
  const auto meta = make_meta_features(1000, 10, 20, 500000, 50000);
  std::vector<HistoryEntry> h;
  for (const auto& c : candidate_grid()) {
    if (c.lr != 0.05 || c.epochs != 20) continue;
    h.push_back(entry(c, 0.5 + 0.04 * c.T0 - 0.2 * c.alpha));
  }
  const auto d = recommend_config(h, meta);
  EXPECT_EQ(d.source, ConfigSource::Predicted);
  EXPECT_EQ(d.config.T0, 8.0);
  EXPECT_EQ(d.config.alpha, 0.3);
  EXPECT_GT(d.predicted_accuracy, 0.7);
}

TEST(Recommend, TiesGoToFirstGridPoint) {
  // Accuracy independent of the config: every prediction ties.
  const auto meta = make_meta_features(1000, 10, 20, 500000, 50000);
  std::vector<HistoryEntry> h;
  const auto grid = candidate_grid();
  for (std::size_t i = 0; i < 10; ++i) h.push_back(entry(grid[i * 13], 0.75));
  EXPECT_EQ(recommend_config(h, meta).config, grid.front());
  std::vector<DistillConfig> shuffled(grid.rbegin(), grid.rend());
  EXPECT_EQ(predict_config(fit_meta_model(h), meta, shuffled), grid.front());
  EXPECT_THROW(predict_config(fit_meta_model(h), meta, {}), InvalidGridError);
}

TEST(Forest, DeterministicForFixedSeed) {
  std::vector<HistoryEntry> h;
  const auto grid = candidate_grid();
  for (std::size_t i = 0; i < 30; ++i) h.push_back(entry(grid[i * 4], 0.5 + 0.01 * static_cast<double>(i % 7)));
  const auto a = fit_meta_model(h), b = fit_meta_model(h);
  EXPECT_EQ(a.tree_count(), 100u);
  for (const auto& c : grid) EXPECT_EQ(a.predict(h[0].meta, c), b.predict(h[0].meta, c));
}

TEST(Forest, PredictionsStayInTargetRange) {
  std::vector<std::vector<double>> x;
  std::vector<double> y;
  for (int i = 0; i < 40; ++i) {
    x.push_back({static_cast<double>(i), static_cast<double>(i % 5)});
    y.push_back(0.2 + 0.01 * i);
  }
  const auto m = MetaModel::fit(x, y);
  for (double v = -10; v < 50; v += 0.5) {
    const std::vector<double> in{v, 1.0};
    const double p = m.predict(in);
    EXPECT_GE(p, 0.2);
    EXPECT_LE(p, 0.59 + 1e-12);
  }
  EXPECT_THROW(MetaModel::fit({}, {}), InsufficientHistoryError);
}

TEST(History, RoundTripAndDedup) {
  test::TempDir dir;
  const auto path = dir.path() / "sub" / "history.log";
  {
    HistoryStore s(path);
    EXPECT_TRUE(s.record(entry(default_config(), 0.8)));
    EXPECT_FALSE(s.record(entry(default_config(), 0.8)));
    EXPECT_TRUE(s.record(entry({2.0, 0.5, 0.1, 10}, 1.0 / 3.0)));
    EXPECT_EQ(s.size(), 2u);
    EXPECT_THROW(s.record(entry(default_config(), 1.5)), InvalidInputError);
  }
  HistoryStore again(path);
  ASSERT_EQ(again.size(), 2u);
  EXPECT_EQ(again.entries()[1], entry({2.0, 0.5, 0.1, 10}, 1.0 / 3.0));
  EXPECT_FALSE(again.record(entry(default_config(), 0.8)));
}

TEST(History, CorruptLineIsRejected) {
  test::TempDir dir;
  const auto path = dir.path() / "history.log";
  std::ofstream(path) << "n_samples=oops\n";
  EXPECT_THROW(HistoryStore{path}, IntegrityError);
}

TEST(History, CanonicalLineRoundTrips) {
  const auto e = entry({4.0, 0.7, 0.05, 20}, 0.123456789012345678);
  EXPECT_EQ(parse_history_line(canonical_line(e)), e);
}

TEST(Forest, ConstantTargetsPredictThatValue) {
  std::vector<HistoryEntry> h;
  const auto grid = candidate_grid();
  for (std::size_t i = 0; i < 12; ++i) h.push_back(entry(grid[i * 11], 0.625));
  const auto m = fit_meta_model(h);
  for (const auto& c : grid) EXPECT_DOUBLE_EQ(m.predict(h[0].meta, c), 0.625);
}

TEST(Forest, SingleEntryPredictsItsTarget) {
  const auto m = fit_meta_model({entry(default_config(), 0.71)});
  for (const auto& c : candidate_grid()) EXPECT_DOUBLE_EQ(m.predict(make_meta_features(50, 2, 3, 400, 40), c), 0.71);
}

TEST(Forest, MonotoneResponseInTemperature) {
  // r = f(T0) on 50 entries; predictions should rank the grid like f does.
  const auto grid = candidate_grid();
  auto f = [](const DistillConfig& c) { return 0.5 + 0.05 * std::log2(c.T0); };
  std::vector<HistoryEntry> h;
  for (std::size_t i = 0; i < 50; ++i) h.push_back(entry(grid[(i * 37) % grid.size()], f(grid[(i * 37) % grid.size()])));
  const auto m = fit_meta_model(h);
  std::vector<double> pred, truth;
  for (const auto& c : grid) {
    pred.push_back(m.predict(h[0].meta, c));
    truth.push_back(f(c));
  }
  // Spearman correlation with average ranks for ties.
  auto ranks = [](const std::vector<double>& v) {
    std::vector<std::size_t> idx(v.size());
    std::iota(idx.begin(), idx.end(), 0);
    std::sort(idx.begin(), idx.end(), [&](auto a, auto b) { return v[a] < v[b]; });
    std::vector<double> r(v.size());
    for (std::size_t i = 0; i < idx.size();) {
      std::size_t j = i;
      while (j + 1 < idx.size() && v[idx[j + 1]] == v[idx[i]]) ++j;
      for (std::size_t k = i; k <= j; ++k) r[idx[k]] = 0.5 * static_cast<double>(i + j);
      i = j + 1;
    }
    return r;
  };
  const auto rp = ranks(pred), rt = ranks(truth);
  const double n = static_cast<double>(rp.size());
  const double mp = std::accumulate(rp.begin(), rp.end(), 0.0) / n, mt = std::accumulate(rt.begin(), rt.end(), 0.0) / n;
  double cov = 0.0, vp = 0.0, vt = 0.0;
  for (std::size_t i = 0; i < rp.size(); ++i) {
    cov += (rp[i] - mp) * (rt[i] - mt);
    vp += (rp[i] - mp) * (rp[i] - mp);
    vt += (rt[i] - mt) * (rt[i] - mt);
  }
  EXPECT_GT(cov / std::sqrt(vp * vt), 0.8);
}

TEST(Predict, SingleCandidateAndPeakedSurface) {
  const auto meta = make_meta_features(1000, 10, 20, 500000, 50000);
  const auto grid = candidate_grid();
  // Peak at T0 = 4, alpha = 0.7.
  auto r = [](const DistillConfig& c) {
    const double dt = std::log2(c.T0) - 2.0, da = (c.alpha - 0.7) / 0.2;
    return 0.9 - 0.05 * dt * dt - 0.04 * da * da - 0.02 * std::fabs(c.lr - 0.05) * 10 - 0.001 * std::fabs(c.epochs - 20);
  };
  std::vector<HistoryEntry> h;
  for (std::size_t i = 0; i < grid.size(); i += 3) h.push_back(entry(grid[i], r(grid[i])));
  const auto model = fit_meta_model(h);
  const auto best = predict_config(model, meta, grid);
  double opt = 0.0;
  for (const auto& c : grid) opt = std::max(opt, r(c));
  EXPECT_LE((opt - r(best)) / opt, 0.05);
  EXPECT_NE(std::find(grid.begin(), grid.end(), best), grid.end());
  EXPECT_EQ(predict_config(model, meta, {DistillConfig{2.0, 0.5, 0.1, 30}}), (DistillConfig{2.0, 0.5, 0.1, 30}));
}
