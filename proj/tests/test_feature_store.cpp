#include <gtest/gtest.h>

#include <cmath>
#include <fstream>
#include <limits>
#include <set>

#include "quantod/binary_io.hpp"
#include "quantod/feature_store.hpp"
#include "test_util.hpp"

using namespace quantod;
using quantod::testing::TempDir;

namespace {

FeatureSet random_set(std::size_t n, std::size_t m, std::uint64_t seed) {
  // float-representable values so the 32-bit file round trip is exact
  SplitMix64 rng(seed);
  FeatureSet s(RowMatrix(static_cast<Eigen::Index>(n), static_cast<Eigen::Index>(m)), "random");
  for (Eigen::Index i = 0; i < s.data.size(); ++i) {
    s.data.data()[i] = static_cast<float>(8.0 * rng.uniform() - 4.0);
  }
  return s;
}

void write_raw(const std::string& path, const detail::ByteWriter& w) { w.write_file(path); }

detail::ByteWriter header(std::uint32_t version, std::uint32_t n, std::uint32_t m, bool labels) {
  detail::ByteWriter w;
  w.magic("QODF");
  w.u32(version);
  w.u32(n);
  w.u32(m);
  w.u8(labels ? 1 : 0);
  w.pad(3);
  return w;
}

FormatErrc load_error(const std::string& path) {
  try {
    load_features(path);
  } catch (const FormatError& e) {
    return e.errc();
  }
  ADD_FAILURE() << "expected a FormatError for " << path;
  return FormatErrc::kBadMagic;
}

}  // namespace

TEST(FeatureStore, LoadsHeaderCountAndDim) {
  TempDir dir;
  auto w = header(1, 3, 4, false);
  for (int i = 0; i < 12; ++i) w.f32(static_cast<float>(i) * 0.5f);
  write_raw(dir.file("a.qodf"), w);
  const FeatureSet s = load_features(dir.file("a.qodf"));
  EXPECT_EQ(s.count(), 3u);
  EXPECT_EQ(s.dim(), 4u);
  EXPECT_EQ(s.data(2, 3), 5.5);
  EXPECT_FALSE(s.labels.has_value());
}

TEST(FeatureStore, RejectsOddDimension) {
  TempDir dir;
  auto w = header(1, 1, 5, false);
  for (int i = 0; i < 5; ++i) w.f32(1.0f);
  write_raw(dir.file("odd.qodf"), w);
  EXPECT_EQ(load_error(dir.file("odd.qodf")), FormatErrc::kOddDimension);
  try {
    load_features(dir.file("odd.qodf"));
  } catch (const FormatError& e) {
    EXPECT_NE(std::string(e.what()).find("odd feature dimension"), std::string::npos);
  }
}

TEST(FeatureStore, DistinctErrorsForMalformedFiles) {
  TempDir dir;
  {
    detail::ByteWriter w;
    w.magic("XXXX");
    w.u32(1);
    write_raw(dir.file("magic"), w);
  }
  EXPECT_EQ(load_error(dir.file("magic")), FormatErrc::kBadMagic);

  write_raw(dir.file("version"), header(2, 0, 4, false));
  EXPECT_EQ(load_error(dir.file("version")), FormatErrc::kVersionMismatch);

  {
    auto w = header(1, 2, 4, false);
    for (int i = 0; i < 7; ++i) w.f32(0.0f);  // one value short
    write_raw(dir.file("short"), w);
  }
  EXPECT_EQ(load_error(dir.file("short")), FormatErrc::kTruncated);

  {
    auto w = header(1, 1, 2, true);
    w.f32(0.0f);
    w.f32(0.0f);  // labels missing
    write_raw(dir.file("nolabels"), w);
  }
  EXPECT_EQ(load_error(dir.file("nolabels")), FormatErrc::kTruncated);

  {
    auto w = header(1, 1, 2, false);
    w.f32(0.0f);
    w.f32(std::numeric_limits<float>::quiet_NaN());
    write_raw(dir.file("nan"), w);
  }
  EXPECT_EQ(load_error(dir.file("nan")), FormatErrc::kNonFinite);

  {
    auto w = header(1, 1, 2, false);
    for (int i = 0; i < 3; ++i) w.f32(0.0f);
    write_raw(dir.file("long"), w);
  }
  EXPECT_EQ(load_error(dir.file("long")), FormatErrc::kTrailingBytes);

  EXPECT_THROW(load_features(dir.file("missing")), InputError);
}

TEST(FeatureStore, RoundTripIsBitwise) {
  TempDir dir;
  FeatureSet s = random_set(100, 128, 42);
  s.labels = std::vector<std::uint32_t>(100);
  for (std::uint32_t i = 0; i < 100; ++i) (*s.labels)[i] = i % 10;
  save_features(s, dir.file("rt.qodf"));
  const FeatureSet back = load_features(dir.file("rt.qodf"));
  EXPECT_EQ(back, s);
  EXPECT_EQ(std::memcmp(back.data.data(), s.data.data(), sizeof(double) * 100 * 128), 0);
}

TEST(FeatureStore, RoundTripProperty) {
  TempDir dir;
  for (std::uint64_t seed = 1; seed <= 20; ++seed) {
    SplitMix64 rng(seed);
    const std::size_t n = rng() % 50;
    const std::size_t m = 2 * (1 + rng() % 16);
    const FeatureSet s = random_set(n, m, seed);
    save_features(s, dir.file("p.qodf"));
    EXPECT_EQ(load_features(dir.file("p.qodf")), s) << "seed " << seed;
  }
}

TEST(FeatureStore, EmptySetRoundTrips) {
  TempDir dir;
  const FeatureSet s(RowMatrix(0, 128), "empty");
  save_features(s, dir.file("e.qodf"));
  const FeatureSet back = load_features(dir.file("e.qodf"));
  EXPECT_EQ(back.count(), 0u);
  EXPECT_EQ(back.dim(), 128u);
}

TEST(FeatureStore, SaveRejectsNaNBeforeWriting) {
  TempDir dir;
  FeatureSet s = random_set(3, 4, 1);
  s.data(1, 2) = std::nan("");
  EXPECT_THROW(save_features(s, dir.file("nan.qodf")), FormatError);
  EXPECT_FALSE(std::filesystem::exists(dir.file("nan.qodf")));
}

TEST(FeatureStore, SaveRejectsUnwritablePath) {
  const FeatureSet s = random_set(2, 2, 1);
  EXPECT_THROW(save_features(s, "/nonexistent-dir/x.qodf"), InputError);
}

TEST(FeatureStore, CsvIngestion) {
  TempDir dir;
  {
    std::ofstream out(dir.file("a.csv"));
    out << "0.5,1.5,2,3,7\n-1,-2,-3,-4,2\n\n";
  }
  const FeatureSet s = load_csv(dir.file("a.csv"), true);
  EXPECT_EQ(s.count(), 2u);
  EXPECT_EQ(s.dim(), 4u);
  EXPECT_EQ(s.data(0, 1), 1.5);
  ASSERT_TRUE(s.labels);
  EXPECT_EQ((*s.labels)[0], 7u);
  EXPECT_EQ((*s.labels)[1], 2u);

  EXPECT_THROW(load_csv(dir.file("a.csv"), false), FormatError);  // 5 feature columns is odd

  save_csv(s, dir.file("b.csv"));
  EXPECT_EQ(load_csv(dir.file("b.csv"), true), s);

  {
    std::ofstream out(dir.file("ragged.csv"));
    out << "1,2\n1,2,3,4\n";
  }
  EXPECT_THROW(load_csv(dir.file("ragged.csv"), false), InputError);
}

TEST(Batching, SizesForTenByThree) {
  const auto batches = make_batches(10, BatchPlan{3, 7, false});
  ASSERT_EQ(batches.size(), 4u);
  EXPECT_EQ(batches[0].size(), 3u);
  EXPECT_EQ(batches[1].size(), 3u);
  EXPECT_EQ(batches[2].size(), 3u);
  EXPECT_EQ(batches[3].size(), 1u);
  EXPECT_EQ(make_batches(10, BatchPlan{3, 7, true}).size(), 3u);
}

TEST(Batching, DeterministicPerSeed) {
  const BatchPlan plan{16, 1234, false};
  EXPECT_EQ(make_batches(100, plan), make_batches(100, plan));
  EXPECT_EQ(make_batches(100, plan, 3), make_batches(100, plan, 3));
  EXPECT_NE(make_batches(100, plan, 0), make_batches(100, plan, 1));
  EXPECT_NE(make_batches(100, plan), make_batches(100, BatchPlan{16, 1235, false}));
}

TEST(Batching, CoversEveryIndexOnce) {
  SplitMix64 rng(99);
  for (int trial = 0; trial < 50; ++trial) {
    const std::size_t n = 1 + rng() % 500;
    const std::size_t b = 1 + rng() % n;
    const auto batches = make_batches(n, BatchPlan{b, rng(), false});
    std::multiset<std::size_t> seen;
    for (const auto& batch : batches) seen.insert(batch.begin(), batch.end());
    ASSERT_EQ(seen.size(), n);
    std::size_t expect = 0;
    for (auto i : seen) EXPECT_EQ(i, expect++);

    const auto dropped = make_batches(n, BatchPlan{b, 5, true});
    std::set<std::size_t> unique;
    for (const auto& batch : dropped) {
      EXPECT_EQ(batch.size(), b);
      unique.insert(batch.begin(), batch.end());
    }
    EXPECT_EQ(unique.size(), (n / b) * b);
  }
}

TEST(Batching, RejectsOversizedBatch) {
  EXPECT_THROW(make_batches(10, BatchPlan{11, 0, false}), ShapeError);
  EXPECT_THROW(make_batches(10, BatchPlan{0, 0, false}), ShapeError);
}
