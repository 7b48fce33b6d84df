#include <gtest/gtest.h>

#include <cmath>
#include <limits>

#include "gradcheck.hpp"
#include "hpmkd/nn.hpp"
#include "hpmkd/rng.hpp"
#include "oracles.hpp"

using namespace hpmkd;

TEST(ParamCount, HandCounts) {
  // (20*256+256) + (256*128+128) + (128*64+64) + (64*10+10)
  EXPECT_EQ(param_count(std::vector<std::size_t>{20, 256, 128, 64, 10}), 47178u);
  // (20*64+64) + (64*32+32) + (32*10+10)
  EXPECT_EQ(param_count(std::vector<std::size_t>{20, 64, 32, 10}), 3754u);
  EXPECT_EQ(param_count(std::vector<std::size_t>{10, 100, 10}), 2110u);
  EXPECT_EQ(param_count(std::vector<std::size_t>{1, 1}), 2u);
}

TEST(CreateModel, RejectsBadSpecs) {
  EXPECT_THROW(create_model({5}, 1), InvalidSpecError);
  EXPECT_THROW(create_model({5, 0, 3}, 1), InvalidSpecError);
}

TEST(CreateModel, SeededAndGlorotBounded) {
  const auto a = create_model({6, 5, 3}, 42);
  const auto b = create_model({6, 5, 3}, 42);
  const auto c = create_model({6, 5, 3}, 43);
  EXPECT_TRUE(a == b);
  EXPECT_FALSE(a == c);
  EXPECT_EQ(a.weights[0].rows(), 5);
  EXPECT_EQ(a.weights[0].cols(), 6);
  const double limit0 = std::sqrt(6.0 / 11.0);
  EXPECT_LE(a.weights[0].cwiseAbs().maxCoeff(), limit0);
  EXPECT_TRUE(a.biases[0].isZero());
  EXPECT_TRUE(a.biases[1].isZero());
}

TEST(Forward, MatchesLoopOracle) {
  const auto m = create_model({4, 7, 5, 3}, 9);
  CounterRng rng(1);
  Matrix x(5, 4);
  for (Eigen::Index i = 0; i < x.size(); ++i) x.data()[i] = rng.normal();
  const Matrix z = forward(m, x);
  ASSERT_EQ(z.rows(), 5);
  ASSERT_EQ(z.cols(), 3);
  for (Eigen::Index r = 0; r < 5; ++r) {
    oracle::Vec row(x.row(r).data(), x.row(r).data() + 4);
    const auto ref = oracle::mlp(m, row);
    for (Eigen::Index c = 0; c < 3; ++c) EXPECT_NEAR(z(r, c), ref[static_cast<std::size_t>(c)], 1e-12);
  }
  EXPECT_THROW(forward(m, Matrix::Zero(2, 3)), ShapeError);
}

TEST(Forward, EmbeddingIsPenultimateLayer) {
  const auto m = create_model({3, 6, 4, 2}, 3);
  Matrix x = Matrix::Ones(2, 3);
  const Matrix e = embed(m, x);
  EXPECT_EQ(e.cols(), 4);
  EXPECT_GE(e.minCoeff(), 0.0);
}

TEST(Softmax, IdentitiesAndErrors) {
  for (double t : {0.5, 1.0, 4.0}) {
    const auto p = softmax_temp(std::vector<double>{0.0, 0.0}, t);
    EXPECT_DOUBLE_EQ(p[0], 0.5);
    EXPECT_DOUBLE_EQ(p[1], 0.5);
  }
  const auto q = softmax_temp(std::vector<double>{1000.0, 0.0, -1000.0}, 1.0);
  EXPECT_NEAR(q.sum(), 1.0, 1e-15);
  EXPECT_TRUE(q.allFinite());
  const auto r = softmax_temp(std::vector<double>{1.0, 2.0, 3.0}, 2.0);
  const auto ref = oracle::softmax({1.0, 2.0, 3.0}, 2.0);
  for (int i = 0; i < 3; ++i) EXPECT_NEAR(r[i], ref[static_cast<std::size_t>(i)], 1e-15);
  EXPECT_THROW(softmax_temp(std::vector<double>{1.0}, 0.0), InvalidTemperatureError);
  EXPECT_THROW(softmax_temp(std::vector<double>{1.0}, -2.0), InvalidTemperatureError);
}

TEST(Softmax, HigherTemperatureRaisesEntropy) {
  const std::vector<double> z{3.0, 1.0, 0.2, -1.0};
  double prev = -1.0;
  for (double t : {0.5, 1.0, 2.0, 4.0, 8.0}) {
    const auto p = softmax_temp(z, t);
    const double h = oracle::entropy(oracle::Vec(p.data(), p.data() + p.size()));
    EXPECT_GT(h, prev);
    prev = h;
  }
}

TEST(Backward, CrossEntropyGradientMatchesFiniteDifferences) {
  for (std::uint64_t seed = 0; seed < 5; ++seed) {
    auto p = gradcheck::random_problem(seed);
    ForwardTrace trace;
    const Matrix logits = forward(p.model, p.features, &trace);
    Matrix teacher = Matrix::Constant(logits.rows(), logits.cols(), 1.0 / static_cast<double>(p.classes));
    const auto l = kd_loss(logits, teacher, p.labels, 1.0, 1.0);
    const auto g = backward(p.model, trace, l.grad);
    auto f = [&] {
      std::vector<oracle::Vec> z;
      for (const auto& row : p.x) z.push_back(oracle::mlp(p.model, row));
      double s = 0.0;
      for (std::size_t r = 0; r < z.size(); ++r) s -= std::log(oracle::softmax(z[r], 1.0)[static_cast<std::size_t>(p.labels[r])]);
      return s / static_cast<double>(z.size());
    };
    const auto params = gradcheck::model_params(p.model);
    const auto slots = gradcheck::gradient_slots(g);
    for (std::size_t i = 0; i < params.size(); ++i) {
      EXPECT_LT(oracle::rel_err(*slots[i], oracle::central_diff(f, *params[i], 1e-5)), 1e-5);
    }
  }
}

TEST(Optimizer, ZeroGradientIsFixedPoint) {
  auto m = create_model({3, 4, 2}, 5);
  const auto before = m;
  auto opt = make_opt_state(m, 0.1, 0.9);
  apply_gradients(m, opt, Gradients::zeros_like(m));
  EXPECT_TRUE(m == before);
  for (const auto& v : opt.velocity_w) EXPECT_TRUE(v.isZero());
}

TEST(Optimizer, MomentumUpdateByHand) {
  auto m = create_model({1, 1}, 5);
  m.weights[0](0, 0) = 1.0;
  auto opt = make_opt_state(m, 0.5, 0.9);
  auto g = Gradients::zeros_like(m);
  g.weights[0](0, 0) = 2.0;
  apply_gradients(m, opt, g);  // v = 2, w = 1 - 0.5 * 2 = 0
  EXPECT_DOUBLE_EQ(m.weights[0](0, 0), 0.0);
  apply_gradients(m, opt, g);  // v = 0.9 * 2 + 2 = 3.8, w = -1.9
  EXPECT_DOUBLE_EQ(m.weights[0](0, 0), -1.9);
}

TEST(Optimizer, NonFiniteGradientNamesLayer) {
  auto m = create_model({3, 4, 2}, 5);
  auto opt = make_opt_state(m, 0.1, 0.9);
  auto g = Gradients::zeros_like(m);
  g.weights[1](0, 0) = std::numeric_limits<double>::quiet_NaN();
  try {
    apply_gradients(m, opt, g);
    FAIL() << "expected NumericalError";
  } catch (const NumericalError& e) {
    EXPECT_EQ(e.layer(), 1u);
  }
  EXPECT_THROW(make_opt_state(m, 0.0, 0.9), InvalidParameterError);
  EXPECT_THROW(make_opt_state(m, 0.1, 1.0), InvalidParameterError);
}

TEST(TrainStep, ReducesLossOnSeparableData) {
  auto m = create_model({2, 8, 2}, 7);
  Matrix x(4, 2);
  x << 1, 1, 1, 0.8, -1, -1, -0.8, -1;
  std::vector<int> y{0, 0, 1, 1};
  auto opt = make_opt_state(m, 0.1, 0.9);
  const double before = ce_loss(forward(m, x), y).loss;
  for (int i = 0; i < 50; ++i) train_step(m, opt, {x, y}, ce_loss(forward(m, x), y).grad);
  EXPECT_LT(ce_loss(forward(m, x), y).loss, 0.5 * before);
}

TEST(Serialization, RoundTripIsExact) {
  auto m = create_model({5, 7, 3}, 11);
  m.biases[0][2] = -0.125;
  const auto bytes = serialize_model(m);
  EXPECT_EQ(bytes.substr(0, 8), "HPMKDMDL");
  const auto back = deserialize_model(bytes);
  EXPECT_TRUE(back == m);
  EXPECT_EQ(back.seed, m.seed);
}

TEST(Serialization, RejectsCorruption) {
  const auto bytes = serialize_model(create_model({5, 7, 3}, 11));
  EXPECT_THROW(deserialize_model(bytes.substr(0, bytes.size() - 3)), IntegrityError);
  auto bad = bytes;
  bad[0] = 'X';
  EXPECT_THROW(deserialize_model(bad), IntegrityError);
  EXPECT_THROW(deserialize_model(bytes + "x"), IntegrityError);
}

TEST(Argmax, TiesGoToLowestIndex) {
  Matrix m(2, 3);
  m << 1, 3, 3, 2, 2, 2;
  EXPECT_EQ(argmax_row(m, 0), 1);
  EXPECT_EQ(argmax_row(m, 1), 0);
}

TEST(Rng, DeterministicAndInRange) {
  CounterRng a(5), b(5);
  for (int i = 0; i < 100; ++i) EXPECT_EQ(a.next(), b.next());
  CounterRng c(9);
  for (int i = 0; i < 1000; ++i) {
    const double u = c.uniform();
    EXPECT_GE(u, 0.0);
    EXPECT_LT(u, 1.0);
    EXPECT_LT(c.below(7), 7u);
  }
  EXPECT_NE(derive_seed(1, 0), derive_seed(1, 1));
  EXPECT_NE(derive_seed(1, 0), derive_seed(2, 0));
  auto idx = shuffled_indices(50, 3);
  std::sort(idx.begin(), idx.end());
  for (std::size_t i = 0; i < 50; ++i) EXPECT_EQ(idx[i], i);
}

TEST(Rng, NormalMoments) {
  CounterRng r(21);
  double s = 0.0, ss = 0.0;
  const int n = 200000;
  for (int i = 0; i < n; ++i) {
    const double z = r.normal();
    s += z;
    ss += z * z;
  }
  EXPECT_NEAR(s / n, 0.0, 0.01);
  EXPECT_NEAR(ss / n, 1.0, 0.02);
}
