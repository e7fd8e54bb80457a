#include <gtest/gtest.h>

#include <cmath>
#include <sstream>

#include "quantod/config.hpp"
#include "quantod/synthetic.hpp"

using namespace quantod;

TEST(Synthetic, StandardNormalMoments) {
  const FeatureSet s = sample(standard_normal_spec(8, 1), 20000);
  const Eigen::RowVectorXd mean = s.data.colwise().mean();
  const RowMatrix centered = s.data.rowwise() - mean;
  const Eigen::MatrixXd cov = centered.transpose() * centered / 20000.0;
  EXPECT_LT(mean.cwiseAbs().maxCoeff(), 0.05);
  EXPECT_LT((cov - Eigen::MatrixXd::Identity(8, 8)).cwiseAbs().maxCoeff(), 0.1);
}

TEST(Synthetic, MixtureMeanMatchesWeights) {
  DistSpec spec;
  spec.kind = DistKind::kMixture;
  spec.dim = 2;
  spec.seed = 4;
  spec.components = {{Eigen::Vector2d(3, 3), Eigen::Vector2d(0.1, 0.1), 0.25, 0.0},
                     {Eigen::Vector2d(-1, -1), Eigen::Vector2d(0.1, 0.1), 0.75, 0.0}};
  const FeatureSet s = sample(spec, 20000);
  EXPECT_NEAR(s.data.col(0).mean(), 0.25 * 3 - 0.75, 0.05);
}

TEST(Synthetic, DeterministicAndSizeZero) {
  const auto spec = standard_normal_spec(4, 9);
  EXPECT_EQ(sample(spec, 50), sample(spec, 50));
  EXPECT_FALSE(sample(spec, 50) == sample(standard_normal_spec(4, 10), 50));
  EXPECT_EQ(sample(spec, 0).count(), 0u);
}

TEST(Synthetic, AnalyticLogProbValues) {
  const auto normal = standard_normal_spec(2, 0);
  EXPECT_NEAR(analytic_log_prob(normal, Eigen::Vector2d(0, 0)), -1.8378770664093453, 1e-12);

  DistSpec box;
  box.kind = DistKind::kUniformBox;
  box.dim = 2;
  box.lo = Eigen::Vector2d(0, 0);
  box.hi = Eigen::Vector2d(2, 4);
  EXPECT_NEAR(analytic_log_prob(box, Eigen::Vector2d(1, 1)), -std::log(8.0), 1e-15);
  EXPECT_EQ(analytic_log_prob(box, Eigen::Vector2d(3, 1)), -std::numeric_limits<double>::infinity());

  // Univariate Student-t with 1 dof is Cauchy: log(1 / (pi (1 + x^2))).
  DistSpec t;
  t.kind = DistKind::kStudentT;
  t.dim = 1;
  t.dof = 1.0;
  t.scale = Eigen::VectorXd::Ones(1);
  EXPECT_NEAR(analytic_log_prob(t, Eigen::VectorXd::Constant(1, 2.0)), -std::log(M_PI * 5.0), 1e-12);
}

TEST(Synthetic, BoxSamplesStayInside) {
  DistSpec box;
  box.kind = DistKind::kUniformBox;
  box.dim = 4;
  box.seed = 2;
  box.lo = Eigen::VectorXd::Constant(4, -1.0);
  box.hi = Eigen::VectorXd::Constant(4, 5.0);
  const FeatureSet s = sample(box, 1000);
  EXPECT_GE(s.data.minCoeff(), -1.0);
  EXPECT_LE(s.data.maxCoeff(), 5.0);
  for (Eigen::Index i = 0; i < 10; ++i) {
    EXPECT_TRUE(std::isfinite(analytic_log_prob(box, s.data.row(i).transpose())));
  }
}

TEST(Synthetic, HeavyTailTaskLayout) {
  const auto task = heavy_tail_task(8, 3);
  EXPECT_NO_THROW(task.inliers.validate());
  EXPECT_NO_THROW(task.outliers.validate());
  // Nominal support [-2.5, 2.5], so the outlier box is [-7.5, 7.5].
  EXPECT_NEAR(task.outliers.lo[0], -7.5, 1e-12);
  EXPECT_NEAR(task.outliers.hi[0], 7.5, 1e-12);
  const FeatureSet in = sample(task.inliers, 5000);
  // Heavier tail than a Gaussian: some coordinates land far outside.
  EXPECT_GT(in.data.cwiseAbs().maxCoeff(), 4.0);
}

TEST(Synthetic, InvalidSpecsRejected) {
  DistSpec spec;
  spec.kind = DistKind::kMixture;
  spec.dim = 2;
  EXPECT_THROW(sample(spec, 1), ShapeError);
  spec.components = {{Eigen::Vector2d(0, 0), Eigen::Vector2d(1, 1), 0.5, 0.0}};
  EXPECT_THROW(spec.validate(), ShapeError);
}

TEST(Config, ParseOverrideAndRoundTrip) {
  std::istringstream in("# comment\nq = 0.1\nepochs=3  # trailing\n\nloss = mean\nq = 0.2\n");
  KeyValueConfig kv = KeyValueConfig::parse(in);
  const TrainConfig cfg = train_config_from(kv);
  EXPECT_EQ(cfg.q, 0.2);
  EXPECT_EQ(cfg.epochs, 3u);
  EXPECT_EQ(cfg.loss_kind, LossKind::kMean);
  EXPECT_EQ(cfg.batch_size, 128u);

  KeyValueConfig dumped;
  put_train_config(cfg, dumped);
  std::ostringstream text;
  dumped.write(text);
  std::istringstream back(text.str());
  const TrainConfig again = train_config_from(KeyValueConfig::parse(back));
  EXPECT_EQ(again.q, cfg.q);
  EXPECT_EQ(again.epochs, cfg.epochs);
  EXPECT_EQ(again.learning_rate, cfg.learning_rate);
  EXPECT_EQ(again.loss_kind, cfg.loss_kind);
  EXPECT_EQ(again.fc_neurons, cfg.fc_neurons);
}

TEST(Config, BadValuesAreShapeErrors) {
  std::istringstream in("epochs = -1\n");
  EXPECT_THROW(train_config_from(KeyValueConfig::parse(in)), ShapeError);
  std::istringstream in2("q = abc\n");
  EXPECT_THROW(train_config_from(KeyValueConfig::parse(in2)), ShapeError);
  std::istringstream in3("no equals sign\n");
  EXPECT_THROW(KeyValueConfig::parse(in3), InputError);
}

TEST(Config, DistSpecRoundTrip) {
  const auto task = heavy_tail_task(4, 12);
  for (const DistSpec& spec : {task.inliers, task.outliers, standard_normal_spec(6, 2)}) {
    KeyValueConfig kv;
    put_dist_spec(spec, kv);
    const DistSpec back = dist_spec_from(kv);
    EXPECT_EQ(sample(back, 20), sample(spec, 20));
  }
}
