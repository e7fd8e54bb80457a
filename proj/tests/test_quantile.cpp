#include <gtest/gtest.h>

#include <algorithm>
#include <cmath>
#include <numeric>
#include <random>

#include "quantod/quantile.hpp"
#include "quantod/rng.hpp"

using namespace quantod;

namespace {

// Independent oracle: sort a copy and interpolate between neighbours.
double sorted_quantile(std::vector<double> v, double q) {
  std::sort(v.begin(), v.end());
  const double pos = q * static_cast<double>(v.size() - 1);
  const auto k = static_cast<std::size_t>(pos);
  const double w = pos - static_cast<double>(k);
  if (k + 1 >= v.size()) return v[k];
  return (1 - w) * v[k] + w * v[k + 1];
}

}  // namespace

TEST(Quantile, SingleElement) {
  const std::vector<double> v{7.0};
  for (double q : {0.0, 0.05, 0.5, 0.99}) {
    const auto r = quantile(v, q);
    EXPECT_EQ(r.value, 7.0);
    EXPECT_EQ(r.lo_index, 0u);
  }
  const auto loss = qnll_loss(v, {0.05});
  EXPECT_EQ(loss.value, -7.0);
  EXPECT_EQ(loss.upstream, std::vector<double>{-1.0});
}

TEST(Quantile, Interpolates) {
  const std::vector<double> v{10.0, 0.0};
  const auto r = quantile(v, 0.25);
  EXPECT_DOUBLE_EQ(r.value, 2.5);
  EXPECT_EQ(r.lo_index, 1u);
  EXPECT_EQ(r.hi_index, 0u);
  EXPECT_DOUBLE_EQ(r.weight, 0.25);
}

TEST(Quantile, MatchesSortOracle) {
  SplitMix64 rng(5);
  std::normal_distribution<double> normal;
  for (int trial = 0; trial < 500; ++trial) {
    const std::size_t n = 1 + rng() % 300;
    std::vector<double> v(n);
    for (auto& x : v) x = normal(rng);
    if (trial % 3 == 0) {
      for (auto& x : v) x = std::round(x * 2);  // heavy ties
    }
    const double q = (trial % 5 == 0) ? 0.05 : rng.uniform() * 0.999;
    EXPECT_NEAR(quantile(v, q).value, sorted_quantile(v, q), 1e-12);
  }
}

TEST(Quantile, ZeroLevelIsMinimum) {
  const std::vector<double> v{3, -1, 4, -1, 5};
  const auto r = quantile(v, 0.0);
  EXPECT_EQ(r.value, -1.0);
  EXPECT_EQ(r.lo_index, 1u);  // stable: first of the tied minima
  EXPECT_EQ(r.weight, 0.0);
}

TEST(Quantile, RejectsBadLevelsAndEmpty) {
  const std::vector<double> v{1, 2};
  EXPECT_THROW(quantile(v, 1.0), ShapeError);
  EXPECT_THROW(quantile(v, -0.01), ShapeError);
  EXPECT_THROW(quantile(v, std::nan("")), ShapeError);
  EXPECT_THROW(quantile(std::vector<double>{}, 0.5), ShapeError);
  EXPECT_THROW(mean_nll_loss(std::vector<double>{}), ShapeError);
}

TEST(Quantile, ConstantBatch) {
  const std::vector<double> v(17, -4.25);
  const auto loss = qnll_loss(v, {0.05});
  EXPECT_EQ(loss.value, 4.25);
  EXPECT_DOUBLE_EQ(std::accumulate(loss.upstream.begin(), loss.upstream.end(), 0.0), -1.0);
}

TEST(QnllLoss, RoutesGradientToOrderStatistics) {
  const std::vector<double> v{-3.0, -10.0, -1.0, -7.0, -2.0};
  // q = 0.3 over 5 elements: p = 1.2 -> between sorted[1] = -7 and sorted[2] = -3
  const auto loss = qnll_loss(v, {0.3});
  EXPECT_NEAR(loss.value, -(0.8 * -7.0 + 0.2 * -3.0), 1e-12);
  ASSERT_EQ(loss.active_indices.size(), 2u);
  EXPECT_EQ(loss.active_indices[0], 3u);
  EXPECT_EQ(loss.active_indices[1], 0u);
  EXPECT_NEAR(loss.upstream[3], -0.8, 1e-12);
  EXPECT_NEAR(loss.upstream[0], -0.2, 1e-12);
  EXPECT_EQ(loss.upstream[1], 0.0);
  EXPECT_EQ(loss.upstream[2], 0.0);
  EXPECT_EQ(loss.upstream[4], 0.0);
}

TEST(QnllLoss, UpstreamMatchesFiniteDifference) {
  SplitMix64 rng(17);
  std::normal_distribution<double> normal;
  for (int trial = 0; trial < 50; ++trial) {
    std::vector<double> v(2 + rng() % 64);
    for (auto& x : v) x = normal(rng) * 10;
    const QuantileSpec spec{rng.uniform() * 0.9};
    const auto loss = qnll_loss(v, spec);
    for (std::size_t i = 0; i < v.size(); ++i) {
      auto up = v, down = v;
      up[i] += 1e-7;
      down[i] -= 1e-7;
      const double fd = (qnll_loss(up, spec).value - qnll_loss(down, spec).value) / 2e-7;
      EXPECT_NEAR(loss.upstream[i], fd, 1e-6) << "trial " << trial << " index " << i;
    }
  }
}

TEST(QnllLoss, MonotoneInLevel) {
  const std::vector<double> v{-5, -1, -9, -3, -2, -8};
  double prev = qnll_loss(v, {0.0}).value;
  for (double q = 0.05; q < 1.0; q += 0.05) {
    const double cur = qnll_loss(v, {q}).value;
    EXPECT_LE(cur, prev + 1e-12);
    prev = cur;
  }
}

TEST(QnllLoss, PermutationInvariant) {
  std::vector<double> v{-1.5, -0.2, -7.1, -3.3, -2.2, -0.9, -4.4};
  const double ref = qnll_loss(v, {0.05}).value;
  std::mt19937 gen(3);
  for (int i = 0; i < 20; ++i) {
    std::shuffle(v.begin(), v.end(), gen);
    EXPECT_EQ(qnll_loss(v, {0.05}).value, ref);
  }
}

TEST(MeanLoss, Values) {
  EXPECT_EQ(mean_nll_loss(std::vector<double>{-2.0}).value, 2.0);
  const auto loss = mean_nll_loss(std::vector<double>{-1.0, -3.0});
  EXPECT_EQ(loss.value, 2.0);
  EXPECT_EQ(loss.upstream, (std::vector<double>{-0.5, -0.5}));
}
