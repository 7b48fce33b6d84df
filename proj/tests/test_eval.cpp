#include <gtest/gtest.h>

#include "hpmkd/data.hpp"
#include "hpmkd/eval.hpp"
#include "oracles.hpp"
#include "temp_dir.hpp"

using namespace hpmkd;

TEST(Accuracy, CountsArgmaxMatches) {
  Matrix z(4, 3);
  z << 1, 0, 0, 0, 2, 2, 0, 0, 1, 5, 5, 5;
  EXPECT_DOUBLE_EQ(accuracy_from_logits(z, std::vector<int>{0, 1, 2, 1}), 0.75);
  EXPECT_THROW(accuracy_from_logits(Matrix(0, 3), std::vector<int>{}), InvalidInputError);
  EXPECT_THROW(accuracy_from_logits(z, std::vector<int>{0}), ShapeError);
}

TEST(Metrics, HandValues) {
  EXPECT_NEAR(retention(0.854, 1.0), 85.4, 1e-12);
  EXPECT_NEAR(retention(0.82, 0.96), 85.41666666666667, 1e-12);
  EXPECT_THROW(retention(0.5, 0.0), UndefinedRetentionError);
  EXPECT_NEAR(compression_ratio(47178, 3754), 12.567394778902504, 1e-12);
  EXPECT_THROW(compression_ratio(10, 0), InvalidInputError);
  // 86% in 8 minutes and 91% in 500 s.
  EXPECT_NEAR(efficiency(86.0, 480.0), 10.75, 1e-12);
  EXPECT_NEAR(efficiency(91.0, 500.0), 10.92, 1e-12);
  EXPECT_THROW(efficiency(91.0, 0.0), InvalidInputError);
}

TEST(Silhouette, MatchesBruteForce) {
  for (std::uint64_t seed = 0; seed < 8; ++seed) {
    CounterRng rng(seed);
    const std::size_t n = 10 + rng.below(40);
    const std::size_t k = 2 + rng.below(4);
    Matrix e(static_cast<Eigen::Index>(n), 3);
    std::vector<int> labels;
    std::vector<oracle::Vec> pts;
    for (std::size_t i = 0; i < n; ++i) {
      // Arbitrary label ids, including a singleton cluster sometimes.
      labels.push_back(static_cast<int>(i < k ? i : rng.below(k)) * 7 - 3);
      oracle::Vec p;
      for (int d = 0; d < 3; ++d) {
        e(static_cast<Eigen::Index>(i), d) = rng.normal() + labels.back();
        p.push_back(e(static_cast<Eigen::Index>(i), d));
      }
      pts.push_back(p);
    }
    EXPECT_NEAR(silhouette(e, labels), oracle::silhouette(pts, labels), 1e-12) << seed;
  }
}

TEST(Silhouette, SeparatedClustersScoreNearOne) {
  Matrix e(4, 1);
  e << 0, 0.01, 100, 100.01;
  const double s = silhouette(e, std::vector<int>{0, 0, 1, 1});
  EXPECT_GT(s, 0.99);
  EXPECT_LE(s, 1.0);
}

TEST(Silhouette, SingletonsScoreZeroAndOneClusterIsUndefined) {
  Matrix e(3, 1);
  e << 0, 1, 5;
  // Point 2 is alone; points 0 and 1: a = 1, b = 5 and 4.
  const double expected = ((5.0 - 1.0) / 5.0 + (4.0 - 1.0) / 4.0) / 3.0;
  EXPECT_NEAR(silhouette(e, std::vector<int>{0, 0, 1}), expected, 1e-12);
  EXPECT_THROW(silhouette(e, std::vector<int>{4, 4, 4}), UndefinedSilhouetteError);
}

TEST(Silhouette, BoundedOnRealEmbeddings) {
  const auto ds = synth_blobs(3000, 5, 4, 1.0, 2);
  const double s = silhouette(ds.features, ds.labels, 1);
  EXPECT_GE(s, -1.0);
  EXPECT_LE(s, 1.0);
  EXPECT_EQ(s, silhouette(ds.features, ds.labels, 1));
}

TEST(Embeddings, RoundTrip) {
  test::TempDir d;
  Matrix e(3, 2);
  e << 1.5, -2, 0.25, 1e-300, 7, 8;
  export_embeddings(d.path() / "emb.bin", e, std::vector<int>{0, 1, 0});
  EXPECT_TRUE(read_embeddings(d.path() / "emb.bin") == e);
  EXPECT_EQ(std::filesystem::file_size(d.path() / "emb.bin"), 16u + 6u * 8u);
  EXPECT_TRUE(std::filesystem::exists(d.path() / "emb.bin.labels"));
}
