#pragma once

// Test-only oracles: finite differences, dense Jacobians, brute-force
// references. Nothing here calls into the code paths it is used to check
// beyond the public forward/log_prob entry points.

#include <Eigen/Dense>

#include <cmath>
#include <filesystem>
#include <random>
#include <unistd.h>
#include <string>

#include "quantod/flow.hpp"
#include "quantod/rng.hpp"

namespace quantod::testing {

/// Every parameter random: hidden layers He-scaled, output layers with std
/// `gain / sqrt(fan_in)`, biases with std `0.1 gain`, mixing matrices orthogonal plus a Gaussian
/// perturbation of spectral norm about 0.6, so they stay well conditioned.
inline FlowModel random_model(const FlowShape& shape, std::uint64_t seed, double gain = 0.5) {
  FlowModel model = FlowModel::initialized(shape, seed);
  SplitMix64 rng(seed * 7919 + 17);
  std::normal_distribution<double> normal(0.0, 1.0);
  for (std::size_t b = 0; b < model.block_count(); ++b) {
    for (Net net : {Net::kA, Net::kB}) {
      const auto& layers = model.layers(b, net);
      for (std::size_t k = 0; k < layers.size(); ++k) {
        auto w = model.weight(layers[k]);
        if (k + 1 == layers.size()) {
          const double std_dev = gain / std::sqrt(static_cast<double>(layers[k].cols));
          for (Eigen::Index i = 0; i < w.size(); ++i) w.data()[i] = std_dev * normal(rng);
        }
        auto bias = model.bias(layers[k]);
        for (auto& v : bias) v = 0.1 * gain * normal(rng);
      }
    }
    auto w = model.mixing(b);
    const double spread = 0.1 / std::sqrt(static_cast<double>(shape.dim));
    for (Eigen::Index i = 0; i < w.size(); ++i) w.data()[i] += spread * normal(rng);
  }
  return model;
}

inline Eigen::MatrixXd random_inputs(Eigen::Index dim, Eigen::Index n, std::uint64_t seed) {
  SplitMix64 rng(seed);
  std::normal_distribution<double> normal(0.0, 1.0);
  Eigen::MatrixXd x(dim, n);
  for (Eigen::Index i = 0; i < x.size(); ++i) x.data()[i] = normal(rng);
  return x;
}

/// Central-difference Jacobian of z = f(r) at a single point.
inline Eigen::MatrixXd fd_jacobian(const FlowModel& model, const Eigen::VectorXd& r, double h = 1e-7) {
  const auto m = r.size();
  Eigen::MatrixXd jac(m, m);
  for (Eigen::Index j = 0; j < m; ++j) {
    Eigen::VectorXd plus = r, minus = r;
    plus[j] += h;
    minus[j] -= h;
    jac.col(j) = (forward(model, Eigen::MatrixXd(plus)).z - forward(model, Eigen::MatrixXd(minus)).z) / (2 * h);
  }
  return jac;
}

inline double log_abs_det(const Eigen::MatrixXd& a) {
  return std::log(std::abs(Eigen::FullPivLU<Eigen::MatrixXd>(a).determinant()));
}

/// |a - n| <= rel * max(|a|, |n|), or both within `abs_floor` of each other.
inline bool grad_close(double analytic, double numeric, double rel, double abs_floor) {
  const double diff = std::abs(analytic - numeric);
  return diff <= abs_floor || diff <= rel * std::max(std::abs(analytic), std::abs(numeric));
}

class TempDir {
 public:
  TempDir() {
    static int counter = 0;
    path_ = std::filesystem::temp_directory_path() /
            ("quantod_test_" + std::to_string(::getpid()) + "_" + std::to_string(counter++));
    std::filesystem::create_directories(path_);
  }
  ~TempDir() {
    std::error_code ec;
    std::filesystem::remove_all(path_, ec);
  }
  std::string file(const std::string& name) const { return (path_ / name).string(); }
  const std::filesystem::path& path() const { return path_; }

 private:
  std::filesystem::path path_;
};

}  // namespace quantod::testing
