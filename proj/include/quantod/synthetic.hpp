#pragma once

// Seeded generators for controlled feature distributions with closed-form
// log-densities.

#include <Eigen/Dense>

#include <algorithm>
#include <cmath>
#include <cstdint>
#include <limits>
#include <numeric>
#include <random>
#include <string>
#include <vector>

#include "quantod/error.hpp"
#include "quantod/feature_store.hpp"
#include "quantod/flow.hpp"
#include "quantod/rng.hpp"

namespace quantod {

enum class DistKind { kStandardNormal, kMixture, kUniformBox, kStudentT };

inline const char* to_string(DistKind k) {
  switch (k) {
    case DistKind::kStandardNormal: return "standard-normal";
    case DistKind::kMixture: return "mixture";
    case DistKind::kUniformBox: return "uniform-box";
    case DistKind::kStudentT: return "student-t";
  }
  return "?";
}

/// One mixture component with diagonal scale. dof == 0 means Gaussian;
/// dof > 0 means a multivariate Student-t with that many degrees of freedom.
struct MixtureComponent {
  Eigen::VectorXd mean;
  Eigen::VectorXd scale;
  double weight = 1.0;
  double dof = 0.0;
};

struct DistSpec {
  DistKind kind = DistKind::kStandardNormal;
  std::uint32_t dim = 2;
  std::uint64_t seed = 0;
  std::vector<MixtureComponent> components;  // kMixture
  Eigen::VectorXd lo, hi;                    // kUniformBox
  double dof = 4.0;                          // kStudentT
  Eigen::VectorXd scale;                     // kStudentT, centred at 0

  void validate() const {
    const auto m = static_cast<Eigen::Index>(dim);
    if (dim < 1) throw ShapeError("distribution dimension must be positive");
    switch (kind) {
      case DistKind::kStandardNormal: break;
      case DistKind::kMixture: {
        if (components.empty()) throw ShapeError("mixture needs at least one component");
        double total = 0.0;
        for (const auto& c : components) {
          if (!(c.weight > 0)) throw ShapeError("mixture weights must be positive");
          if (c.mean.size() != m || c.scale.size() != m) throw ShapeError("mixture component dimension mismatch");
          if (!(c.scale.array() > 0).all()) throw ShapeError("mixture scales must be positive");
          if (c.dof < 0) throw ShapeError("component dof must be >= 0");
          total += c.weight;
        }
        if (std::abs(total - 1.0) > 1e-9) throw ShapeError("mixture weights must sum to 1");
        break;
      }
      case DistKind::kUniformBox:
        if (lo.size() != m || hi.size() != m) throw ShapeError("box bounds dimension mismatch");
        if (!(lo.array() < hi.array()).all()) throw ShapeError("box needs lo < hi in every dimension");
        break;
      case DistKind::kStudentT:
        if (!(dof > 0)) throw ShapeError("student-t dof must be positive");
        if (scale.size() != m || !(scale.array() > 0).all()) throw ShapeError("student-t scale invalid");
        break;
    }
  }
};

namespace detail {

inline Eigen::VectorXd draw_component(const MixtureComponent& c, SplitMix64& rng,
                                      std::normal_distribution<double>& normal) {
  Eigen::VectorXd g(c.mean.size());
  for (auto& v : g) v = normal(rng);
  if (c.dof > 0) {
    std::chi_squared_distribution<double> chi2(c.dof);
    g /= std::sqrt(chi2(rng) / c.dof);
  }
  return c.mean + c.scale.cwiseProduct(g);
}

inline double component_log_prob(const MixtureComponent& c, const Eigen::VectorXd& r) {
  const double m = static_cast<double>(r.size());
  const double delta2 = ((r - c.mean).array() / c.scale.array()).square().sum();
  const double log_scale = c.scale.array().log().sum();
  if (c.dof == 0.0) return -0.5 * (m * kLog2Pi + delta2) - log_scale;
  const double nu = c.dof;
  return std::lgamma(0.5 * (nu + m)) - std::lgamma(0.5 * nu) - 0.5 * m * std::log(nu * M_PI) - log_scale -
         0.5 * (nu + m) * std::log1p(delta2 / nu);
}

}  // namespace detail

/// n draws, a pure function of (spec, n).
inline FeatureSet sample(const DistSpec& spec, std::size_t n) {
  spec.validate();
  const auto m = static_cast<Eigen::Index>(spec.dim);
  FeatureSet set(RowMatrix(static_cast<Eigen::Index>(n), m), std::string("synthetic:") + to_string(spec.kind));
  auto rng = derive_stream(spec.seed, 0x53594e54ULL);
  std::normal_distribution<double> normal(0.0, 1.0);
  for (std::size_t i = 0; i < n; ++i) {
    Eigen::VectorXd x(m);
    switch (spec.kind) {
      case DistKind::kStandardNormal:
        for (auto& v : x) v = normal(rng);
        break;
      case DistKind::kMixture: {
        const double u = rng.uniform();
        double acc = 0.0;
        std::size_t k = 0;
        for (; k + 1 < spec.components.size(); ++k) {
          acc += spec.components[k].weight;
          if (u < acc) break;
        }
        x = detail::draw_component(spec.components[k], rng, normal);
        break;
      }
      case DistKind::kUniformBox:
        for (Eigen::Index j = 0; j < m; ++j) x[j] = spec.lo[j] + (spec.hi[j] - spec.lo[j]) * rng.uniform();
        break;
      case DistKind::kStudentT:
        x = detail::draw_component({Eigen::VectorXd::Zero(m), spec.scale, 1.0, spec.dof}, rng, normal);
        break;
    }
    set.data.row(static_cast<Eigen::Index>(i)) = x.transpose();
  }
  return set;
}

/// Exact log-density; -infinity outside a uniform box.
inline double analytic_log_prob(const DistSpec& spec, const Eigen::VectorXd& r) {
  spec.validate();
  if (r.size() != static_cast<Eigen::Index>(spec.dim)) throw ShapeError("point dimension mismatch");
  switch (spec.kind) {
    case DistKind::kStandardNormal:
      return -0.5 * (static_cast<double>(spec.dim) * kLog2Pi + r.squaredNorm());
    case DistKind::kMixture: {
      std::vector<double> terms;
      for (const auto& c : spec.components) terms.push_back(std::log(c.weight) + detail::component_log_prob(c, r));
      const double top = *std::max_element(terms.begin(), terms.end());
      double s = 0.0;
      for (double t : terms) s += std::exp(t - top);
      return top + std::log(s);
    }
    case DistKind::kUniformBox:
      if ((r.array() < spec.lo.array()).any() || (r.array() > spec.hi.array()).any()) {
        return -std::numeric_limits<double>::infinity();
      }
      return -(spec.hi - spec.lo).array().log().sum();
    case DistKind::kStudentT:
      return detail::component_log_prob({Eigen::VectorXd::Zero(r.size()), spec.scale, 1.0, spec.dof}, r);
  }
  throw ShapeError("unsupported distribution kind");
}

inline DistSpec standard_normal_spec(std::uint32_t dim, std::uint64_t seed) {
  DistSpec s;
  s.kind = DistKind::kStandardNormal;
  s.dim = dim;
  s.seed = seed;
  return s;
}

/// Inlier/outlier pair used by the loss ablation: inliers are a Gaussian
/// majority plus a heavy-tailed Student-t (dof 4) minority; outliers are
/// uniform over a box three times as wide as the inliers' nominal support
/// (component means +/- 3 scales), sharing its centre.
struct HeavyTailTask {
  DistSpec inliers;
  DistSpec outliers;
};

inline HeavyTailTask heavy_tail_task(std::uint32_t dim, std::uint64_t seed) {
  const auto m = static_cast<Eigen::Index>(dim);
  HeavyTailTask task;
  task.inliers.kind = DistKind::kMixture;
  task.inliers.dim = dim;
  task.inliers.seed = seed;
  task.inliers.components = {
      {Eigen::VectorXd::Constant(m, 1.0), Eigen::VectorXd::Constant(m, 0.5), 0.7, 0.0},
      {Eigen::VectorXd::Constant(m, -1.0), Eigen::VectorXd::Constant(m, 0.5), 0.3, 4.0},
  };
  Eigen::VectorXd lo = Eigen::VectorXd::Constant(m, std::numeric_limits<double>::infinity());
  Eigen::VectorXd hi = -lo;
  for (const auto& c : task.inliers.components) {
    lo = lo.cwiseMin(c.mean - 3.0 * c.scale);
    hi = hi.cwiseMax(c.mean + 3.0 * c.scale);
  }
  const Eigen::VectorXd centre = 0.5 * (lo + hi);
  const Eigen::VectorXd half_width = 1.5 * (hi - lo);
  task.outliers.kind = DistKind::kUniformBox;
  task.outliers.dim = dim;
  task.outliers.seed = seed ^ 0x9e3779b97f4a7c15ULL;
  task.outliers.lo = centre - half_width;
  task.outliers.hi = centre + half_width;
  return task;
}

}  // namespace quantod
