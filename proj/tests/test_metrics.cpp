#include <gtest/gtest.h>

#include <algorithm>
#include <numeric>
#include <random>

#include "quantod/metrics.hpp"
#include "quantod/synthetic.hpp"
#include "test_util.hpp"

using namespace quantod;

namespace {

double pairwise_auroc(const std::vector<double>& in, const std::vector<double>& out) {
  double s = 0.0;
  for (double a : in) {
    for (double b : out) s += a > b ? 1.0 : (a == b ? 0.5 : 0.0);
  }
  return s / static_cast<double>(in.size() * out.size());
}

// Step-wise precision/recall sweep over every distinct threshold.
double sweep_average_precision(const std::vector<double>& in, const std::vector<double>& out) {
  std::vector<double> levels(in);
  levels.insert(levels.end(), out.begin(), out.end());
  std::sort(levels.begin(), levels.end(), std::greater<>());
  levels.erase(std::unique(levels.begin(), levels.end()), levels.end());
  double ap = 0.0;
  double prev_recall = 0.0;
  for (double t : levels) {
    const double tp = static_cast<double>(std::count_if(in.begin(), in.end(), [&](double s) { return s >= t; }));
    const double fp = static_cast<double>(std::count_if(out.begin(), out.end(), [&](double s) { return s >= t; }));
    const double recall = tp / static_cast<double>(in.size());
    if (tp + fp > 0) ap += (recall - prev_recall) * tp / (tp + fp);
    prev_recall = recall;
  }
  return ap;
}

std::vector<double> draw(std::size_t n, double mean, std::uint64_t seed, bool coarse) {
  SplitMix64 rng(seed);
  std::normal_distribution<double> normal(mean, 1.0);
  std::vector<double> v(n);
  for (auto& x : v) x = coarse ? std::round(normal(rng) * 2) / 2 : normal(rng);
  return v;
}

}  // namespace

TEST(Auroc, MatchesPairwiseOracle) {
  for (std::uint64_t seed = 1; seed <= 30; ++seed) {
    const bool coarse = seed % 2 == 0;
    const auto in = draw(20 + seed * 3, 1.0, seed, coarse);
    const auto out = draw(15 + seed, 0.0, seed + 1000, coarse);
    EXPECT_NEAR(auroc(in, out), pairwise_auroc(in, out), 1e-12) << "seed " << seed;
  }
}

TEST(Auroc, PerfectChanceAndSwap) {
  const std::vector<double> hi{5, 6, 7};
  const std::vector<double> lo{1, 2};
  EXPECT_EQ(auroc(hi, lo), 1.0);
  EXPECT_EQ(auroc(lo, hi), 0.0);
  const std::vector<double> same(10, 3.0);
  EXPECT_EQ(auroc(same, same), 0.5);
  const auto in = draw(50, 0.3, 1, false);
  const auto out = draw(40, 0.0, 2, false);
  EXPECT_NEAR(auroc(in, out) + auroc(out, in), 1.0, 1e-12);
}

TEST(Aupr, MatchesSweepOracle) {
  for (std::uint64_t seed = 1; seed <= 30; ++seed) {
    const bool coarse = seed % 3 == 0;
    const auto in = draw(25 + seed, 0.8, seed, coarse);
    const auto out = draw(30, 0.0, seed + 500, coarse);
    EXPECT_NEAR(aupr(in, out), sweep_average_precision(in, out), 1e-12) << "seed " << seed;
  }
}

TEST(Aupr, PerfectAndAllEqual) {
  EXPECT_EQ(aupr(std::vector<double>{5, 6}, std::vector<double>{1, 2, 3}), 1.0);
  // All scores tied: precision is the inlier share everywhere.
  EXPECT_NEAR(aupr(std::vector<double>(3, 1.0), std::vector<double>(7, 1.0)), 0.3, 1e-15);
}

TEST(FprAtTpr, ClassicExample) {
  std::vector<double> in(100);
  std::iota(in.begin(), in.end(), 1.0);
  EXPECT_EQ(fpr_at_tpr(in, std::vector<double>{5.95, 5.94}), 0.5);
}

TEST(FprAtTpr, PerfectSeparationAndReversal) {
  const auto in = draw(100, 10.0, 1, false);
  const auto out = draw(100, -10.0, 2, false);
  EXPECT_EQ(fpr_at_tpr(in, out), 0.0);
  EXPECT_EQ(fpr_at_tpr(out, in), 1.0);
}

TEST(FprAtTpr, IdenticalMultisetsAcceptAboutBeta) {
  // Outliers drawn from the inlier scores pass the TPR-beta threshold at
  // the same rate as the inliers.
  const auto in = draw(200, 0.0, 7, false);
  const double fpr = fpr_at_tpr(in, in);
  EXPECT_GE(fpr, 0.95);
  EXPECT_LE(fpr, 0.95 + 1.0 / 200);
}

TEST(Metrics, RejectEmptySides) {
  const std::vector<double> some{1.0};
  EXPECT_THROW(auroc(some, {}), ShapeError);
  EXPECT_THROW(aupr({}, some), ShapeError);
  EXPECT_THROW(fpr_at_tpr({}, some), ShapeError);
}

TEST(Metrics, OperatingPointsEndAtOne) {
  const auto in = draw(30, 1.0, 3, true);
  const auto out = draw(20, 0.0, 4, true);
  const auto pts = operating_points(in, out);
  ASSERT_FALSE(pts.empty());
  EXPECT_EQ(pts.back().tpr, 1.0);
  EXPECT_EQ(pts.back().fpr, 1.0);
  for (std::size_t i = 1; i < pts.size(); ++i) {
    EXPECT_LT(pts[i].threshold, pts[i - 1].threshold);
    EXPECT_GE(pts[i].tpr, pts[i - 1].tpr);
  }
}

TEST(Evaluate, ComposesScoringThresholdAndMetrics) {
  const FlowModel model(FlowShape{4, 1, 1, 4, 3.0});
  const FeatureSet in = sample(standard_normal_spec(4, 1), 300);
  FeatureSet out = sample(standard_normal_spec(4, 2), 200);
  out.data *= 3.0;
  const Evaluation e = evaluate_detailed(model, in, out);
  const auto& r = e.report;
  EXPECT_EQ(r.n_in, 300u);
  EXPECT_EQ(r.n_out, 200u);
  EXPECT_EQ(r.tau, select_threshold(e.inlier_scores.scores, 0.95).tau);
  EXPECT_EQ(r.fpr95, fpr_at_tpr(e.inlier_scores.scores, e.outlier_scores.scores));
  EXPECT_EQ(r.auroc, auroc(e.inlier_scores.scores, e.outlier_scores.scores));
  EXPECT_EQ(r.aupr, aupr(e.inlier_scores.scores, e.outlier_scores.scores));
  EXPECT_GT(r.auroc, 0.8);
  EXPECT_GE(r.runtime_seconds, 0.0);

  std::ostringstream machine;
  r.write_machine(machine);
  for (const char* key : {"fpr95=", "auroc=", "aupr=", "tau=", "n_in=300", "n_out=200", "runtime_seconds="}) {
    EXPECT_NE(machine.str().find(key), std::string::npos) << key;
  }
  std::ostringstream table;
  r.write_table(table);
  EXPECT_NE(table.str().find("AUROC (%)"), std::string::npos);
}
