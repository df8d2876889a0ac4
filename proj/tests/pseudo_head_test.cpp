#include "esmc/pseudo_head.hpp"

#include <cmath>

#include <gtest/gtest.h>

#include "esmc/error.hpp"
#include "esmc/metrics.hpp"
#include "testkit.hpp"

namespace esmc {
namespace {

using testkit::TempDir;

Matrix from_rows(std::size_t cols, std::vector<double> values) {
  const std::size_t n = values.size() / cols;
  return Matrix(n, cols, std::move(values));
}

HeadParams random_head(std::size_t v, std::size_t h, std::size_t k, SplitMix64& rng) {
  HeadParams p = zero_head(v, h, k);
  for (double& w : p.w1.data()) w = testkit::normal(rng);
  for (double& w : p.b1) w = testkit::normal(rng);
  for (double& w : p.w2.data()) w = testkit::normal(rng);
  for (double& w : p.b2) w = testkit::normal(rng);
  return p;
}

// One cluster, points on a line at distances 1..10 from a centroid at 0.
ClusterModel line_cluster(Matrix& x) {
  x = Matrix(10, 1);
  for (std::size_t i = 0; i < 10; ++i) x(i, 0) = std::sqrt(static_cast<double>(10 - i));
  ClusterModel m;
  m.k = 1;
  m.centroids = Matrix(1, 1);
  m.assignments.assign(10, 0);
  return m;
}

TEST(Quota, Formula) {
  EXPECT_EQ(pseudo_label_quota(0.3, 10), 3u);
  EXPECT_EQ(pseudo_label_quota(1.0, 10), 10u);
  EXPECT_EQ(pseudo_label_quota(0.1, 2), 1u);
  EXPECT_EQ(pseudo_label_quota(0.05, 1), 1u);
  EXPECT_EQ(pseudo_label_quota(0.31, 10), 4u);
}

TEST(SelectPseudoLabels, NearestFirst) {
  Matrix x;
  const auto m = line_cluster(x);
  const auto s = select_pseudo_labels(x, m, 0.3);
  EXPECT_EQ(s.indices, (std::vector<std::size_t>{9, 8, 7}));
  EXPECT_EQ(s.labels, (std::vector<std::size_t>{0, 0, 0}));
  EXPECT_EQ(select_pseudo_labels(x, m, 1.0).size(), 10u);
  EXPECT_THROW(select_pseudo_labels(x, m, 0.0), ValidationError);
  EXPECT_THROW(select_pseudo_labels(x, m, 1.5), ValidationError);
}

TEST(SelectPseudoLabels, SmallClusterKeepsCloser) {
  const auto x = from_rows(1, {0.0, 3.0, 1.0, 10.0});
  ClusterModel m;
  m.k = 2;
  m.centroids = from_rows(1, {0.5, 10.0});
  m.assignments = {0, 0, 0, 1};
  const auto s = select_pseudo_labels(x, m, 0.1);
  EXPECT_EQ(s.indices, (std::vector<std::size_t>{0, 3}));
  EXPECT_EQ(s.labels, (std::vector<std::size_t>{0, 1}));
}

TEST(SelectPseudoLabels, AlphaOneReproducesAssignments) {
  const auto data = testkit::gaussian_blobs(60, 3, 3, 0.3, 3.0, 3.0, 4);
  const auto m = kmeans_fit(data.x, 3, 0);
  const auto s = select_pseudo_labels(data.x, m, 1.0);
  ASSERT_EQ(s.size(), 60u);
  std::vector<bool> seen(60, false);
  for (std::size_t i = 0; i < s.size(); ++i) {
    EXPECT_FALSE(seen[s.indices[i]]);
    seen[s.indices[i]] = true;
    EXPECT_EQ(s.labels[i], m.assignments[s.indices[i]]);
  }
}

TEST(SelectPseudoLabels, CountsAndMembershipOnRandomModels) {
  SplitMix64 rng(6);
  for (int trial = 0; trial < 30; ++trial) {
    const auto data = testkit::gaussian_blobs(30 + rng.below(40), 2, 1 + rng.below(4), 1.0, 2.0, 0.0, trial);
    const std::size_t k = 1 + rng.below(5);
    const auto m = kmeans_fit(data.x, k, trial);
    const double alpha = 0.01 + 0.99 * rng.uniform();
    const auto s = select_pseudo_labels(data.x, m, alpha);
    const auto d = sq_distances(data.x, m.centroids);

    std::vector<std::size_t> sizes(k, 0), picked(k, 0);
    for (auto a : m.assignments) ++sizes[a];
    std::vector<bool> chosen(data.x.rows(), false);
    for (std::size_t i = 0; i < s.size(); ++i) {
      ASSERT_FALSE(chosen[s.indices[i]]);
      chosen[s.indices[i]] = true;
      ++picked[s.labels[i]];
    }
    for (std::size_t j = 0; j < k; ++j) EXPECT_EQ(picked[j], pseudo_label_quota(alpha, sizes[j]));
    // Every unpicked member is at least as far as every picked member of its cluster.
    for (std::size_t i = 0; i < s.size(); ++i) {
      const auto j = s.labels[i];
      for (std::size_t r = 0; r < data.x.rows(); ++r) {
        if (m.assignments[r] == j && !chosen[r]) EXPECT_GE(d(r, j), d(s.indices[i], j));
      }
    }
  }
}

TEST(HeadForward, HandSetWeights) {
  HeadParams p = zero_head(2, 1, 2);
  p.w1(0, 0) = 1;
  p.w2(0, 0) = 2;
  p.w2(1, 0) = -2;
  EXPECT_EQ(head_forward(p, std::vector<double>{3, 9}), (std::vector<double>{6, -6}));
  EXPECT_THROW(head_forward(p, std::vector<double>{3}), ValidationError);
}

TEST(HeadForward, ZeroAndDeadUnits) {
  EXPECT_EQ(head_forward(zero_head(3, 4, 2), std::vector<double>{1, 2, 3}), (std::vector<double>{0, 0}));

  SplitMix64 rng(1);
  auto p = random_head(3, 5, 3, rng);
  for (double& b : p.b1) b = -100.0;
  const auto scores = head_forward(p, std::vector<double>{0.1, 0.2, 0.3});
  EXPECT_EQ(scores, p.b2);
}

TEST(HeadLoss, UniformIsLogK) {
  const auto x = from_rows(2, {1, 2, 3, 4});
  const PseudoLabelSet batch{{0, 1}, {0, 3}, 1.0};
  EXPECT_NEAR(head_loss(zero_head(2, 3, 4), x, batch), std::log(4.0), 1e-15);
}

TEST(HeadLoss, ConfidentCorrectIsNearZero) {
  HeadParams p = zero_head(1, 1, 2);
  p.b2 = {50.0, 0.0};
  const auto x = from_rows(1, {1});
  EXPECT_LT(head_loss(p, x, {{0}, {0}, 1.0}), 1e-20);
  EXPECT_NEAR(head_loss(p, x, {{0}, {1}, 1.0}), 50.0, 1e-12);
}

TEST(HeadLoss, MatchesFrozenHighPrecisionValue) {
  // 40-digit evaluation of the same three-sample toy.
  const double frozen = 5.012803958540936268183208;
  HeadParams p = zero_head(2, 2, 2);
  p.w1 = from_rows(2, {1, -1, 0.5, 2});
  p.b1 = {0.1, -0.2};
  p.w2 = from_rows(2, {1, 0.5, -1, 2});
  p.b2 = {0, 0.3};
  const auto x = from_rows(2, {1, 2, -1, 0.5, 3, -1});
  const PseudoLabelSet batch{{0, 1, 2}, {0, 1, 1}, 1.0};
  EXPECT_NEAR(head_loss(p, x, batch), frozen, 1e-10);
  EXPECT_NEAR(testkit::head_loss_oracle(p, x, batch), frozen, 1e-14);
}

TEST(HeadLoss, AgreesWithOracleOnRandomParams) {
  SplitMix64 rng(31);
  for (int trial = 0; trial < 20; ++trial) {
    const auto p = random_head(6, 4, 3, rng);
    Matrix x(5, 6);
    for (double& v : x.data()) v = testkit::normal(rng);
    const PseudoLabelSet batch{{0, 1, 2, 3, 4}, {0, 1, 2, 0, 1}, 1.0};
    EXPECT_NEAR(head_loss(p, x, batch), testkit::head_loss_oracle(p, x, batch), 1e-10);
  }
}

TEST(HeadGrad, MatchesCentralDifferences) {
  SplitMix64 rng(17);
  for (int trial = 0; trial < 20; ++trial) {
    const auto p = random_head(6, 4, 3, rng);
    Matrix x(5, 6);
    for (double& v : x.data()) v = testkit::normal(rng);
    PseudoLabelSet batch{{0, 1, 2, 3, 4}, {}, 1.0};
    for (int i = 0; i < 5; ++i) batch.labels.push_back(rng.below(3));

    const auto analytic = testkit::flatten(head_grad(p, x, batch));
    const auto numeric = testkit::finite_difference_grad(p, x, batch, 1e-5);
    ASSERT_EQ(analytic.size(), numeric.size());
    for (std::size_t i = 0; i < analytic.size(); ++i) {
      const double scale = std::max({std::abs(analytic[i]), std::abs(numeric[i]), 1e-3});
      EXPECT_LE(std::abs(analytic[i] - numeric[i]) / scale, 1e-4) << "trial " << trial << " coord " << i;
    }
  }
}

TEST(HeadGrad, LossAndGradAgree) {
  SplitMix64 rng(2);
  const auto p = random_head(3, 4, 2, rng);
  Matrix x(3, 3);
  for (double& v : x.data()) v = testkit::normal(rng);
  const PseudoLabelSet batch{{0, 1, 2}, {0, 1, 1}, 1.0};
  const auto lg = head_loss_and_grad(p, x, batch);
  EXPECT_EQ(lg.loss, head_loss(p, x, batch));
  EXPECT_EQ(lg.grad, head_grad(p, x, batch));
}

TEST(HeadGrad, DuplicatedBatchSameMean) {
  SplitMix64 rng(3);
  const auto p = random_head(4, 3, 3, rng);
  Matrix x(4, 4);
  for (double& v : x.data()) v = testkit::normal(rng);
  const PseudoLabelSet once{{0, 1, 2, 3}, {0, 1, 2, 1}, 1.0};
  const PseudoLabelSet twice{{0, 1, 2, 3, 0, 1, 2, 3}, {0, 1, 2, 1, 0, 1, 2, 1}, 1.0};
  const auto a = testkit::flatten(head_grad(p, x, once));
  const auto b = testkit::flatten(head_grad(p, x, twice));
  for (std::size_t i = 0; i < a.size(); ++i) EXPECT_NEAR(a[i], b[i], 1e-14);
}

TEST(HeadGrad, BalancedZeroInputStationaryBias) {
  // Zero inputs and equal class scores: with one sample per class the output
  // bias gradient (softmax minus one-hot, averaged) vanishes.
  SplitMix64 rng(4);
  HeadParams p = random_head(3, 4, 3, rng);
  p.w2 = Matrix(3, 4);
  p.b2 = {0.7, 0.7, 0.7};
  const Matrix x(3, 3);
  const PseudoLabelSet batch{{0, 1, 2}, {0, 1, 2}, 1.0};
  const auto g = head_grad(p, x, batch);
  for (double v : g.b2) EXPECT_NEAR(v, 0.0, 1e-15);
  for (double v : g.w2.data()) EXPECT_NEAR(v, 0.0, 1e-15);
  const auto numeric = testkit::finite_difference_grad(p, x, batch, 1e-5);
  for (double v : numeric) EXPECT_NEAR(v, 0.0, 1e-9);
}

Matrix separable_toy(PseudoLabelSet& batch) {
  SplitMix64 rng(5);
  Matrix x(20, 4);
  batch = {{}, {}, 1.0};
  for (std::size_t i = 0; i < 20; ++i) {
    const std::size_t c = i % 2;
    for (std::size_t d = 0; d < 4; ++d) x(i, d) = 0.1 * testkit::normal(rng);
    x(i, c) += 1.0;
    batch.indices.push_back(i);
    batch.labels.push_back(c);
  }
  return x;
}

TEST(TrainHead, SeparableToyLossDrops) {
  PseudoLabelSet batch;
  const auto x = separable_toy(batch);
  const auto r = train_head(x, batch, 2, TrainConfig{});
  ASSERT_EQ(r.loss_history.size(), kDefaultEpochs);
  EXPECT_LT(r.final_loss, 0.1 * r.loss_history.front());
  EXPECT_EQ(head_predict(r.params, x), batch.labels);
}

TEST(TrainHead, RejectsBadConfig) {
  PseudoLabelSet batch;
  const auto x = separable_toy(batch);
  TrainConfig cfg;
  cfg.epochs = 0;
  EXPECT_THROW(train_head(x, batch, 2, cfg), ValidationError);
  cfg = {};
  cfg.learning_rate = 0.0;
  EXPECT_THROW(train_head(x, batch, 2, cfg), ValidationError);
  EXPECT_THROW(train_head(x, PseudoLabelSet{}, 2, TrainConfig{}), ValidationError);
}

TEST(TrainHead, DivergenceIsReported) {
  PseudoLabelSet batch;
  auto x = separable_toy(batch);
  for (double& v : x.data()) v *= 1e3;
  TrainConfig cfg;
  cfg.learning_rate = 1e150;
  cfg.epochs = 50;
  try {
    train_head(x, batch, 2, cfg);
    FAIL() << "expected divergence";
  } catch (const NumericError& e) {
    EXPECT_NE(std::string(e.what()).find("learning rate"), std::string::npos);
  }
}

TEST(TrainHead, SeedDeterminism) {
  PseudoLabelSet batch;
  const auto x = separable_toy(batch);
  TrainConfig cfg;
  cfg.seed = 9;
  const auto a = train_head(x, batch, 2, cfg);
  const auto b = train_head(x, batch, 2, cfg);
  EXPECT_EQ(a.params, b.params);
  EXPECT_EQ(a.loss_history, b.loss_history);
  cfg.seed = 10;
  EXPECT_NE(train_head(x, batch, 2, cfg).params, a.params);
}

TEST(InitHead, RangeAndShapes) {
  const auto p = init_head(16, 8, 3, 1);
  EXPECT_EQ(p.input_dim(), 16u);
  EXPECT_EQ(p.hidden(), 8u);
  EXPECT_EQ(p.classes(), 3u);
  for (double w : p.w1.data()) EXPECT_LE(std::abs(w), 0.25);
  for (double w : p.w2.data()) EXPECT_LE(std::abs(w), 1.0 / std::sqrt(8.0));
}

TEST(HeadPredict, TiesGoLow) {
  HeadParams p = zero_head(2, 2, 3);
  p.b2 = {1.0, 2.0, 2.0};
  EXPECT_EQ(head_predict(p, from_rows(2, {0, 0, 1, 1})), (std::vector<std::size_t>{1, 1}));
}

TEST(Pipeline, RecoversGaussianBlobs) {
  const auto data = testkit::gaussian_blobs(200, 200, 4, 0.05, 1.0, 0.5, 11);
  PipelineConfig cfg;
  cfg.seed = 3;
  cfg.train.seed = 3;
  const auto r = cluster_pipeline(data.x, 4, 0.3, cfg);
  ASSERT_EQ(r.labels.size(), 200u);
  EXPECT_GE(nmi(to_labels(r.labels), data.labels), 0.95);
  EXPECT_GE(rand_index(to_labels(r.labels), data.labels), 0.95);
  ASSERT_TRUE(r.training.has_value());
  EXPECT_EQ(r.training->loss_history.size(), kDefaultEpochs);

  std::size_t agree = 0;
  for (std::size_t i = 0; i < r.pseudo.size(); ++i) agree += r.labels[r.pseudo.indices[i]] == r.pseudo.labels[i];
  EXPECT_GE(static_cast<double>(agree), 0.99 * static_cast<double>(r.pseudo.size()));
}

TEST(Pipeline, FullAlphaMatchesKMeans) {
  const auto data = testkit::gaussian_blobs(90, 5, 3, 0.2, 3.0, 3.0, 12);
  PipelineConfig cfg;
  cfg.train.epochs = 400;
  cfg.train.hidden = 32;
  const auto r = cluster_pipeline(data.x, 3, 1.0, cfg);
  EXPECT_TRUE(testkit::same_partition(r.labels, r.kmeans.assignments));
}

TEST(Pipeline, SingleClusterAndSkipHead) {
  const auto data = testkit::gaussian_blobs(20, 3, 2, 0.2, 3.0, 3.0, 1);
  const auto one = cluster_pipeline(data.x, 1, 0.3, {});
  EXPECT_EQ(one.labels, std::vector<std::size_t>(20, 0));

  PipelineConfig cfg;
  cfg.skip_head = true;
  const auto r = cluster_pipeline(data.x, 2, 0.3, cfg);
  EXPECT_EQ(r.labels, r.kmeans.assignments);
  EXPECT_FALSE(r.training.has_value());
}

TEST(HeadFiles, RoundTrip) {
  TempDir tmp;
  const auto p = init_head(7, 5, 3, 4);
  write_head(p, tmp / "head");
  const auto back = read_head(tmp / "head");
  // Stored as f32.
  ASSERT_EQ(back.w1.rows(), 5u);
  for (std::size_t i = 0; i < p.w1.data().size(); ++i)
    EXPECT_EQ(back.w1.data()[i], static_cast<double>(static_cast<float>(p.w1.data()[i])));
  EXPECT_EQ(back.b2.size(), 3u);
  write_head(back, tmp / "again");
  EXPECT_EQ(read_head(tmp / "again"), back);
}

}  // namespace
}  // namespace esmc
