#pragma once

// Feature matrices, the QODF on-disk format, CSV ingestion and batch plans.
//
// QODF layout (little-endian):
//   "QODF" | u32 version=1 | u32 count N | u32 dim m | u8 has_labels | 3 pad
//   | N*m float32 row-major | (has_labels) N u32 labels

#include <Eigen/Dense>

#include <algorithm>
#include <cmath>
#include <cstdint>
#include <fstream>
#include <numeric>
#include <optional>
#include <sstream>
#include <string>
#include <vector>

#include "quantod/binary_io.hpp"
#include "quantod/error.hpp"
#include "quantod/rng.hpp"

namespace quantod {

/// Row-major N x m matrix; row i is sample i.
using RowMatrix = Eigen::Matrix<double, Eigen::Dynamic, Eigen::Dynamic, Eigen::RowMajor>;

inline constexpr std::uint32_t kFeatureFormatVersion = 1;

struct FeatureSet {
  RowMatrix data;
  std::optional<std::vector<std::uint32_t>> labels;
  std::string name;

  FeatureSet() = default;
  FeatureSet(RowMatrix d, std::string n = {}) : data(std::move(d)), name(std::move(n)) {}

  std::size_t count() const { return static_cast<std::size_t>(data.rows()); }
  std::size_t dim() const { return static_cast<std::size_t>(data.cols()); }

  /// Samples as columns (m x N), the layout the flow consumes.
  auto columns() const { return data.transpose(); }

  /// Copies the given rows into an m x B column matrix.
  Eigen::MatrixXd gather(const std::vector<std::size_t>& idx) const {
    Eigen::MatrixXd out(data.cols(), static_cast<Eigen::Index>(idx.size()));
    for (std::size_t j = 0; j < idx.size(); ++j) {
      out.col(static_cast<Eigen::Index>(j)) =
          data.row(static_cast<Eigen::Index>(idx[j])).transpose();
    }
    return out;
  }

  /// Throws FormatError / ShapeError when an invariant is broken.
  void validate() const {
    if (dim() < 2 || dim() % 2 != 0) {
      throw FormatError(FormatErrc::kOddDimension,
                        "dimension " + std::to_string(dim()) + " must be even and >= 2");
    }
    if (!data.allFinite()) {
      for (Eigen::Index i = 0; i < data.rows(); ++i) {
        for (Eigen::Index j = 0; j < data.cols(); ++j) {
          if (!std::isfinite(data(i, j))) {
            throw FormatError(FormatErrc::kNonFinite,
                              "row " + std::to_string(i) + " column " + std::to_string(j));
          }
        }
      }
    }
    if (labels && labels->size() != count()) {
      throw ShapeError("label count " + std::to_string(labels->size()) +
                       " does not match sample count " + std::to_string(count()));
    }
  }

  bool operator==(const FeatureSet& other) const {
    return data.rows() == other.data.rows() && data.cols() == other.data.cols() &&
           data == other.data && labels == other.labels;
  }
};

inline FeatureSet load_features(const std::string& path) {
  auto in = detail::ByteReader::from_file(path);
  if (!in.magic("QODF")) throw FormatError(FormatErrc::kBadMagic, path);
  const std::uint32_t version = in.u32();
  if (version != kFeatureFormatVersion) {
    throw FormatError(FormatErrc::kVersionMismatch,
                      path + " has version " + std::to_string(version));
  }
  const std::uint32_t n = in.u32();
  const std::uint32_t m = in.u32();
  const bool has_labels = in.u8() != 0;
  in.skip(3);
  if (m < 2 || m % 2 != 0) {
    throw FormatError(FormatErrc::kOddDimension, path + " declares dim " + std::to_string(m));
  }
  const std::size_t payload = std::size_t{n} * m * 4 + (has_labels ? std::size_t{n} * 4 : 0);
  in.need(payload);
  if (in.remaining() != payload) {
    throw FormatError(FormatErrc::kTrailingBytes,
                      path + " has " + std::to_string(in.remaining() - payload) + " extra bytes");
  }

  FeatureSet set(RowMatrix(n, m), path);
  for (std::uint32_t i = 0; i < n; ++i) {
    for (std::uint32_t j = 0; j < m; ++j) set.data(i, j) = in.f32();
  }
  if (has_labels) {
    set.labels.emplace(n);
    for (auto& l : *set.labels) l = in.u32();
  }
  set.validate();
  return set;
}

inline void save_features(const FeatureSet& set, const std::string& path) {
  set.validate();
  detail::ByteWriter out;
  out.magic("QODF");
  out.u32(kFeatureFormatVersion);
  out.u32(static_cast<std::uint32_t>(set.count()));
  out.u32(static_cast<std::uint32_t>(set.dim()));
  out.u8(set.labels ? 1 : 0);
  out.pad(3);
  for (Eigen::Index i = 0; i < set.data.rows(); ++i) {
    for (Eigen::Index j = 0; j < set.data.cols(); ++j) {
      out.f32(static_cast<float>(set.data(i, j)));
    }
  }
  if (set.labels) {
    for (auto l : *set.labels) out.u32(l);
  }
  out.write_file(path);
}

/// Headerless CSV: one sample per line, comma separated. When `has_labels`
/// the final column is an integer class id.
inline FeatureSet load_csv(const std::string& path, bool has_labels) {
  std::ifstream in(path);
  if (!in) throw InputError("cannot open: " + path);
  std::vector<std::vector<double>> rows;
  std::vector<std::uint32_t> labels;
  std::string line;
  std::size_t line_no = 0;
  while (std::getline(in, line)) {
    ++line_no;
    if (line.find_first_not_of(" \t\r") == std::string::npos) continue;
    std::vector<double> row;
    std::stringstream ss(line);
    std::string cell;
    while (std::getline(ss, cell, ',')) {
      try {
        std::size_t used = 0;
        row.push_back(std::stod(cell, &used));
      } catch (const std::exception&) {
        throw InputError(path + ":" + std::to_string(line_no) + ": bad number '" + cell + "'");
      }
    }
    if (has_labels) {
      if (row.empty()) throw InputError(path + ":" + std::to_string(line_no) + ": empty row");
      const double l = row.back();
      if (l < 0 || l != std::floor(l)) {
        throw InputError(path + ":" + std::to_string(line_no) + ": label is not a non-negative integer");
      }
      labels.push_back(static_cast<std::uint32_t>(l));
      row.pop_back();
    }
    if (!rows.empty() && row.size() != rows.front().size()) {
      throw InputError(path + ":" + std::to_string(line_no) + ": ragged row");
    }
    rows.push_back(std::move(row));
  }
  const std::size_t m = rows.empty() ? 0 : rows.front().size();
  FeatureSet set(RowMatrix(static_cast<Eigen::Index>(rows.size()), static_cast<Eigen::Index>(m)), path);
  for (std::size_t i = 0; i < rows.size(); ++i) {
    for (std::size_t j = 0; j < m; ++j) {
      set.data(static_cast<Eigen::Index>(i), static_cast<Eigen::Index>(j)) = rows[i][j];
    }
  }
  if (has_labels) set.labels = std::move(labels);
  set.validate();
  return set;
}

inline void save_csv(const FeatureSet& set, const std::string& path) {
  std::ofstream out(path);
  if (!out) throw InputError("cannot open for writing: " + path);
  out.precision(9);
  for (Eigen::Index i = 0; i < set.data.rows(); ++i) {
    for (Eigen::Index j = 0; j < set.data.cols(); ++j) {
      if (j) out << ',';
      out << static_cast<float>(set.data(i, j));
    }
    if (set.labels) out << ',' << (*set.labels)[static_cast<std::size_t>(i)];
    out << '\n';
  }
}

struct BatchPlan {
  std::size_t batch_size = 128;
  std::uint64_t shuffle_seed = 0;
  bool drop_last = false;
};

/// Batches for one epoch. `epoch` selects an independent permutation so that
/// every epoch reshuffles while the whole sequence stays a function of
/// (N, plan, epoch).
inline std::vector<std::vector<std::size_t>> make_batches(std::size_t n, const BatchPlan& plan,
                                                          std::uint64_t epoch = 0) {
  if (plan.batch_size == 0) throw ShapeError("batch size must be positive");
  if (plan.batch_size > n) {
    throw ShapeError("batch size " + std::to_string(plan.batch_size) + " exceeds sample count " +
                     std::to_string(n));
  }
  std::vector<std::size_t> order(n);
  std::iota(order.begin(), order.end(), std::size_t{0});
  auto rng = derive_stream(plan.shuffle_seed, 0x5348554646ULL + epoch);
  // Fisher-Yates with an explicit draw so the permutation does not depend on
  // the standard library's shuffle implementation.
  for (std::size_t i = n; i > 1; --i) {
    const std::size_t j = static_cast<std::size_t>(rng() % i);
    std::swap(order[i - 1], order[j]);
  }
  std::vector<std::vector<std::size_t>> batches;
  for (std::size_t start = 0; start < n; start += plan.batch_size) {
    const std::size_t end = std::min(n, start + plan.batch_size);
    if (plan.drop_last && end - start < plan.batch_size) break;
    batches.emplace_back(order.begin() + static_cast<std::ptrdiff_t>(start),
                         order.begin() + static_cast<std::ptrdiff_t>(end));
  }
  return batches;
}

inline std::vector<std::vector<std::size_t>> make_batches(const FeatureSet& set,
                                                          const BatchPlan& plan,
                                                          std::uint64_t epoch = 0) {
  return make_batches(set.count(), plan, epoch);
}

}  // namespace quantod
