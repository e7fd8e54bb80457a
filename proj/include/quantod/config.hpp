#pragma once

// Line-based "key = value" configuration. '#' starts a comment. A key may
// repeat (mixture components); scalar lookups take the last occurrence.

#include <charconv>
#include <cstdint>
#include <fstream>
#include <optional>
#include <sstream>
#include <string>
#include <utility>
#include <vector>

#include "quantod/error.hpp"
#include "quantod/synthetic.hpp"
#include "quantod/trainer.hpp"

namespace quantod {

class KeyValueConfig {
 public:
  static KeyValueConfig parse(std::istream& in, const std::string& origin = "<config>") {
    KeyValueConfig cfg;
    std::string line;
    std::size_t line_no = 0;
    while (std::getline(in, line)) {
      ++line_no;
      if (const auto hash = line.find('#'); hash != std::string::npos) line.erase(hash);
      if (trim(line).empty()) continue;
      const auto eq = line.find('=');
      if (eq == std::string::npos) {
        throw InputError(origin + ":" + std::to_string(line_no) + ": expected 'key = value'");
      }
      const std::string key = trim(line.substr(0, eq));
      if (key.empty()) throw InputError(origin + ":" + std::to_string(line_no) + ": empty key");
      cfg.add(key, trim(line.substr(eq + 1)));
    }
    return cfg;
  }

  static KeyValueConfig load(const std::string& path) {
    std::ifstream in(path);
    if (!in) throw InputError("cannot open config: " + path);
    return parse(in, path);
  }

  void add(const std::string& key, const std::string& value) { entries_.emplace_back(key, value); }

  void set(const std::string& key, const std::string& value) {
    erase(key);
    add(key, value);
  }

  void erase(const std::string& key) {
    std::erase_if(entries_, [&](const auto& e) { return e.first == key; });
  }

  bool contains(const std::string& key) const { return get(key).has_value(); }

  std::optional<std::string> get(const std::string& key) const {
    for (auto it = entries_.rbegin(); it != entries_.rend(); ++it) {
      if (it->first == key) return it->second;
    }
    return std::nullopt;
  }

  std::vector<std::string> get_all(const std::string& key) const {
    std::vector<std::string> out;
    for (const auto& [k, v] : entries_) {
      if (k == key) out.push_back(v);
    }
    return out;
  }

  double get_double(const std::string& key, double fallback) const {
    const auto v = get(key);
    return v ? to_double(key, *v) : fallback;
  }

  std::uint64_t get_uint(const std::string& key, std::uint64_t fallback) const {
    const auto v = get(key);
    if (!v) return fallback;
    try {
      std::size_t used = 0;
      if (!v->empty() && v->front() == '-') throw std::invalid_argument("negative");
      const auto r = std::stoull(*v, &used);
      if (used != v->size()) throw std::invalid_argument("trailing");
      return r;
    } catch (const std::exception&) {
      throw ShapeError("config key '" + key + "' expects a non-negative integer, got '" + *v + "'");
    }
  }

  bool get_bool(const std::string& key, bool fallback) const {
    const auto v = get(key);
    if (!v) return fallback;
    if (*v == "true" || *v == "1" || *v == "yes") return true;
    if (*v == "false" || *v == "0" || *v == "no") return false;
    throw ShapeError("config key '" + key + "' expects a boolean, got '" + *v + "'");
  }

  const std::vector<std::pair<std::string, std::string>>& entries() const { return entries_; }

  void write(std::ostream& out) const {
    for (const auto& [k, v] : entries_) out << k << " = " << v << '\n';
  }

  void save(const std::string& path) const {
    std::ofstream out(path);
    if (!out) throw InputError("cannot open for writing: " + path);
    write(out);
  }

  static double to_double(const std::string& key, const std::string& v) {
    try {
      std::size_t used = 0;
      const double r = std::stod(v, &used);
      if (used != v.size()) throw std::invalid_argument("trailing");
      return r;
    } catch (const std::exception&) {
      throw ShapeError("config key '" + key + "' expects a number, got '" + v + "'");
    }
  }

  static std::string trim(const std::string& s) {
    const auto b = s.find_first_not_of(" \t\r\n");
    if (b == std::string::npos) return {};
    const auto e = s.find_last_not_of(" \t\r\n");
    return s.substr(b, e - b + 1);
  }

 private:
  std::vector<std::pair<std::string, std::string>> entries_;
};

/// Shortest text that parses back to exactly `v`.
inline std::string format_double(double v) {
  char buf[32];
  const auto r = std::to_chars(buf, buf + sizeof buf, v);
  return std::string(buf, r.ptr);
}

inline LossKind parse_loss_kind(const std::string& s) {
  if (s == "quantile") return LossKind::kQuantile;
  if (s == "mean") return LossKind::kMean;
  throw ShapeError("loss must be 'quantile' or 'mean', got '" + s + "'");
}

inline TrainConfig train_config_from(const KeyValueConfig& kv, TrainConfig cfg = {}) {
  auto u32 = [&](const char* key, std::uint32_t fallback) {
    const auto v = kv.get_uint(key, fallback);
    if (v > 0xffffffffULL) throw ShapeError(std::string("config key '") + key + "' out of range");
    return static_cast<std::uint32_t>(v);
  };
  cfg.q = kv.get_double("q", cfg.q);
  cfg.epochs = u32("epochs", cfg.epochs);
  cfg.batch_size = u32("batch_size", cfg.batch_size);
  cfg.learning_rate = kv.get_double("learning_rate", cfg.learning_rate);
  cfg.weight_decay = kv.get_double("weight_decay", cfg.weight_decay);
  cfg.dropout = kv.get_double("dropout", cfg.dropout);
  cfg.blocks = u32("blocks", cfg.blocks);
  cfg.fc_layers = u32("fc_layers", cfg.fc_layers);
  cfg.fc_neurons = u32("fc_neurons", cfg.fc_neurons);
  cfg.clamp = kv.get_double("clamp", cfg.clamp);
  cfg.seed = kv.get_uint("seed", cfg.seed);
  cfg.standardize = kv.get_bool("standardize", cfg.standardize);
  if (const auto loss = kv.get("loss")) cfg.loss_kind = parse_loss_kind(*loss);
  return cfg;
}

inline void put_train_config(const TrainConfig& cfg, KeyValueConfig& kv) {
  kv.set("q", format_double(cfg.q));
  kv.set("epochs", std::to_string(cfg.epochs));
  kv.set("batch_size", std::to_string(cfg.batch_size));
  kv.set("learning_rate", format_double(cfg.learning_rate));
  kv.set("weight_decay", format_double(cfg.weight_decay));
  kv.set("dropout", format_double(cfg.dropout));
  kv.set("blocks", std::to_string(cfg.blocks));
  kv.set("fc_layers", std::to_string(cfg.fc_layers));
  kv.set("fc_neurons", std::to_string(cfg.fc_neurons));
  kv.set("clamp", format_double(cfg.clamp));
  kv.set("seed", std::to_string(cfg.seed));
  kv.set("standardize", cfg.standardize ? "true" : "false");
  kv.set("loss", to_string(cfg.loss_kind));
}

namespace detail {

/// "v" (broadcast) or "v1,v2,...,vm".
inline Eigen::VectorXd parse_vector(const std::string& key, const std::string& text, std::uint32_t dim) {
  std::vector<double> vals;
  std::stringstream ss(text);
  std::string cell;
  while (std::getline(ss, cell, ',')) vals.push_back(KeyValueConfig::to_double(key, KeyValueConfig::trim(cell)));
  if (vals.size() == 1) return Eigen::VectorXd::Constant(dim, vals.front());
  if (vals.size() != dim) {
    throw ShapeError("config key '" + key + "' has " + std::to_string(vals.size()) + " entries, expected 1 or " +
                     std::to_string(dim));
  }
  return Eigen::Map<Eigen::VectorXd>(vals.data(), static_cast<Eigen::Index>(vals.size()));
}

inline std::string format_vector(const Eigen::VectorXd& v) {
  std::string out;
  for (Eigen::Index i = 0; i < v.size(); ++i) {
    if (i) out += ',';
    out += format_double(v[i]);
  }
  return out;
}

}  // namespace detail

/// Keys: dist, dim, seed; mixture: repeated
/// "component = weight=W dof=D mean=... scale=..."; uniform-box: lo, hi;
/// student-t: dof, scale.
inline DistSpec dist_spec_from(const KeyValueConfig& kv) {
  DistSpec spec;
  const std::string kind = kv.get("dist").value_or("standard-normal");
  const auto dim = kv.get_uint("dim", 2);
  if (dim == 0 || dim > 0xffffffffULL) throw ShapeError("dim out of range");
  spec.dim = static_cast<std::uint32_t>(dim);
  spec.seed = kv.get_uint("seed", 0);
  if (kind == "standard-normal") {
    spec.kind = DistKind::kStandardNormal;
  } else if (kind == "mixture") {
    spec.kind = DistKind::kMixture;
    for (const auto& text : kv.get_all("component")) {
      MixtureComponent c;
      c.mean = Eigen::VectorXd::Zero(spec.dim);
      c.scale = Eigen::VectorXd::Ones(spec.dim);
      std::istringstream fields(text);
      std::string field;
      while (fields >> field) {
        const auto eq = field.find('=');
        if (eq == std::string::npos) throw ShapeError("component field '" + field + "' is not key=value");
        const std::string k = field.substr(0, eq);
        const std::string v = field.substr(eq + 1);
        if (k == "weight") c.weight = KeyValueConfig::to_double("component.weight", v);
        else if (k == "dof") c.dof = KeyValueConfig::to_double("component.dof", v);
        else if (k == "mean") c.mean = detail::parse_vector("component.mean", v, spec.dim);
        else if (k == "scale") c.scale = detail::parse_vector("component.scale", v, spec.dim);
        else throw ShapeError("unknown component field '" + k + "'");
      }
      spec.components.push_back(std::move(c));
    }
  } else if (kind == "uniform-box") {
    spec.kind = DistKind::kUniformBox;
    spec.lo = detail::parse_vector("lo", kv.get("lo").value_or("-1"), spec.dim);
    spec.hi = detail::parse_vector("hi", kv.get("hi").value_or("1"), spec.dim);
  } else if (kind == "student-t") {
    spec.kind = DistKind::kStudentT;
    spec.dof = kv.get_double("dof", 4.0);
    spec.scale = detail::parse_vector("scale", kv.get("scale").value_or("1"), spec.dim);
  } else {
    throw ShapeError("unknown dist '" + kind + "'");
  }
  spec.validate();
  return spec;
}

inline void put_dist_spec(const DistSpec& spec, KeyValueConfig& kv) {
  kv.set("dist", to_string(spec.kind));
  kv.set("dim", std::to_string(spec.dim));
  kv.set("seed", std::to_string(spec.seed));
  kv.erase("component");
  switch (spec.kind) {
    case DistKind::kStandardNormal: break;
    case DistKind::kMixture:
      for (const auto& c : spec.components) {
        kv.add("component", "weight=" + format_double(c.weight) + " dof=" + format_double(c.dof) +
                                " mean=" + detail::format_vector(c.mean) + " scale=" + detail::format_vector(c.scale));
      }
      break;
    case DistKind::kUniformBox:
      kv.set("lo", detail::format_vector(spec.lo));
      kv.set("hi", detail::format_vector(spec.hi));
      break;
    case DistKind::kStudentT:
      kv.set("dof", format_double(spec.dof));
      kv.set("scale", detail::format_vector(spec.scale));
      break;
  }
}

}  // namespace quantod
