#pragma once

// Flat experiment configuration: one `dotted.key = value` per line, `#`
// starts a comment. Every key has a default; unknown keys are errors.

#include <charconv>
#include <cstdint>
#include <map>
#include <numbers>
#include <sstream>
#include <stdexcept>
#include <string>

#include <boost/crc.hpp>

#include "mflow/io/csv.hpp"
#include "mflow/models/builder.hpp"
#include "mflow/training/plan.hpp"

namespace mflow::cli {

class ConfigError : public std::runtime_error {
 public:
  using std::runtime_error::runtime_error;
};

using KeyValues = std::map<std::string, std::string>;

inline std::string trim(const std::string& s) {
  const auto b = s.find_first_not_of(" \t\r");
  if (b == std::string::npos) return "";
  return s.substr(b, s.find_last_not_of(" \t\r") - b + 1);
}

inline KeyValues parse_key_values(const std::string& text) {
  KeyValues out;
  std::istringstream is(text);
  std::string line;
  int lineno = 0;
  while (std::getline(is, line)) {
    ++lineno;
    if (const auto hash = line.find('#'); hash != std::string::npos) line.erase(hash);
    line = trim(line);
    if (line.empty()) continue;
    const auto eq = line.find('=');
    if (eq == std::string::npos) throw ConfigError("config line " + std::to_string(lineno) + ": expected key = value");
    const auto key = trim(line.substr(0, eq)), value = trim(line.substr(eq + 1));
    if (key.empty()) throw ConfigError("config line " + std::to_string(lineno) + ": empty key");
    if (!out.emplace(key, value).second) throw ConfigError("config line " + std::to_string(lineno) + ": duplicate key '" + key + "'");
  }
  return out;
}

// "key=value" from the command line.
inline std::pair<std::string, std::string> parse_override(const std::string& s) {
  const auto eq = s.find('=');
  if (eq == std::string::npos || trim(s.substr(0, eq)).empty()) {
    throw ConfigError("override '" + s + "' is not of the form key=value");
  }
  return {trim(s.substr(0, eq)), trim(s.substr(eq + 1))};
}

struct DatasetConfig {
  std::string id = "circle";  // circle | surface | lorenz | line
  long train = 10000;
  long test = 1000;
  int lorenz_trajectories = 100;
  double lorenz_t_end = 1000.0;
  double lorenz_warmup = 50.0;
  double line_alpha = std::numbers::pi / 2;
  double line_sigma = 1.0;

  Eigen::Index dim() const { return id == "circle" || id == "line" ? 2 : 3; }
  Eigen::Index context_dim() const { return id == "surface" ? 1 : 0; }
};

struct EvalConfig {
  long generated = 1000;
  double ood_sigma = 0.1;
  bool distance = true;
  bool reconstruction = true;
  bool auc = true;
  bool mmd = false;
  double theta = 0.0;  // conditioning value for generated samples
};

struct McmcConfig {
  long steps = 5000;
  double step_size = 0.15;
  long burn_in = 100;
  long observed = 10;
  double theta_star = 0.0;
  double kde_bandwidth = 0.1;
  bool reference = true;  // also run a chain on the exact likelihood and report the MMD
};

struct LandscapeConfig {
  long points = 10000;
  double alpha_min = 0.01, alpha_max = std::numbers::pi / 2;
  double sigma_min = 0.01, sigma_max = 2.0;
  int alpha_steps = 50, sigma_steps = 50;
  double lambda = 1.0;
};

struct ExperimentConfig {
  std::uint64_t seed = 0;
  std::string out = "out";
  DatasetConfig data;
  models::ModelConfig model;
  bool conditional = false;  // condition on the dataset's θ
  train::TrainPlan plan;
  EvalConfig eval;
  McmcConfig mcmc;
  LandscapeConfig landscape;

  ExperimentConfig() {
    model.d = 0;  // 0: take the dataset's dimension
    model.outer.net = {100, 2};
    model.inner.net = {100, 2};
  }

  // Applies `fn(key, field)` to every configurable field, in canonical order.
  template <class Self, class Fn>
  static void visit(Self& c, Fn&& fn) {
    fn("seed", c.seed);
    fn("out", c.out);
    fn("data.id", c.data.id);
    fn("data.train", c.data.train);
    fn("data.test", c.data.test);
    fn("data.lorenz.trajectories", c.data.lorenz_trajectories);
    fn("data.lorenz.t_end", c.data.lorenz_t_end);
    fn("data.lorenz.warmup", c.data.lorenz_warmup);
    fn("data.line.alpha", c.data.line_alpha);
    fn("data.line.sigma", c.data.line_sigma);
    fn("model.variant", c.model.variant);
    fn("model.n", c.model.n);
    fn("model.d", c.model.d);
    fn("model.conditional", c.conditional);
    fn("model.manifold_conditional", c.model.manifold_conditional);
    fn("model.epsilon", c.model.epsilon);
    fn("model.outer.layers", c.model.outer.layers);
    fn("model.outer.coupling", c.model.outer.coupling);
    fn("model.outer.bins", c.model.outer.spline.bins);
    fn("model.outer.bound", c.model.outer.spline.bound);
    fn("model.outer.hidden", c.model.outer.net.hidden);
    fn("model.outer.blocks", c.model.outer.net.blocks);
    fn("model.outer.permutations", c.model.outer.permutations);
    fn("model.outer.lu_linear", c.model.outer.lu_linear);
    fn("model.inner.layers", c.model.inner.layers);
    fn("model.inner.coupling", c.model.inner.coupling);
    fn("model.inner.bins", c.model.inner.spline.bins);
    fn("model.inner.bound", c.model.inner.spline.bound);
    fn("model.inner.hidden", c.model.inner.net.hidden);
    fn("model.inner.blocks", c.model.inner.net.blocks);
    fn("model.inner.permutations", c.model.inner.permutations);
    fn("model.inner.lu_linear", c.model.inner.lu_linear);
    fn("model.encoder.hidden", c.model.encoder.hidden);
    fn("model.encoder.blocks", c.model.encoder.blocks);
    fn("train.schedule", c.plan.schedule);
    fn("train.epochs", c.plan.epochs);
    fn("train.batch_m", c.plan.batch_m);
    fn("train.batch_d", c.plan.batch_d);
    fn("train.batch_ot", c.plan.batch_ot);
    fn("train.lambda_m", c.plan.lambda_m);
    fn("train.recon_loss", c.plan.recon_loss);
    fn("train.lambda_d", c.plan.lambda_d);
    fn("train.s_nll_weight", c.plan.s_nll_weight);
    fn("train.s_recon_weight", c.plan.s_recon_weight);
    fn("train.s_pre_fraction", c.plan.s_pre_fraction);
    fn("train.s_post_fraction", c.plan.s_post_fraction);
    fn("train.ot_weight", c.plan.ot_weight);
    fn("train.sinkhorn_epsilon", c.plan.sinkhorn_epsilon);
    fn("train.sinkhorn_max_iterations", c.plan.sinkhorn_max_iterations);
    fn("train.sinkhorn_tolerance", c.plan.sinkhorn_tolerance);
    fn("train.sinkhorn_strict", c.plan.sinkhorn_strict);
    fn("train.learning_rate", c.plan.learning_rate);
    fn("train.weight_decay", c.plan.weight_decay);
    fn("train.validation_fraction", c.plan.validation_fraction);
    fn("train.clip_norm", c.plan.clip_norm);
    fn("eval.generated", c.eval.generated);
    fn("eval.ood_sigma", c.eval.ood_sigma);
    fn("eval.distance", c.eval.distance);
    fn("eval.reconstruction", c.eval.reconstruction);
    fn("eval.auc", c.eval.auc);
    fn("eval.mmd", c.eval.mmd);
    fn("eval.theta", c.eval.theta);
    fn("mcmc.steps", c.mcmc.steps);
    fn("mcmc.step_size", c.mcmc.step_size);
    fn("mcmc.burn_in", c.mcmc.burn_in);
    fn("mcmc.observed", c.mcmc.observed);
    fn("mcmc.theta_star", c.mcmc.theta_star);
    fn("mcmc.kde_bandwidth", c.mcmc.kde_bandwidth);
    fn("mcmc.reference", c.mcmc.reference);
    fn("landscape.points", c.landscape.points);
    fn("landscape.alpha_min", c.landscape.alpha_min);
    fn("landscape.alpha_max", c.landscape.alpha_max);
    fn("landscape.sigma_min", c.landscape.sigma_min);
    fn("landscape.sigma_max", c.landscape.sigma_max);
    fn("landscape.alpha_steps", c.landscape.alpha_steps);
    fn("landscape.sigma_steps", c.landscape.sigma_steps);
    fn("landscape.lambda", c.landscape.lambda);
  }

  static ExperimentConfig from_map(const KeyValues& kv) {
    ExperimentConfig c;
    std::size_t used = 0;
    visit(c, [&](const char* key, auto& field) {
      const auto it = kv.find(key);
      if (it == kv.end()) return;
      ++used;
      try {
        parse_value(it->second, field);
      } catch (const std::exception& e) {
        throw ConfigError(std::string("config key '") + key + "': " + e.what());
      }
    });
    if (used != kv.size()) {
      for (const auto& [k, v] : kv)
        if (!has_key(k)) throw ConfigError("unknown config key '" + k + "'");
    }
    c.resolve();
    return c;
  }

  static ExperimentConfig from_text(const std::string& text) { return from_map(parse_key_values(text)); }

  static bool has_key(const std::string& key) {
    bool found = false;
    ExperimentConfig c;
    visit(c, [&](const char* k, auto&) { found = found || key == k; });
    return found;
  }

  KeyValues to_map() const {
    KeyValues kv;
    visit(*this, [&](const char* key, const auto& field) { kv[key] = format_value(field); });
    return kv;
  }

  // Canonical text in visit order; the output directory is not part of it.
  std::string canonical() const {
    std::string s;
    visit(*this, [&](const char* key, const auto& field) {
      if (std::string_view(key) != "out") s += std::string(key) + " = " + format_value(field) + "\n";
    });
    return s;
  }

  std::string hash() const {
    boost::crc_32_type crc;
    const auto text = canonical();
    crc.process_bytes(text.data(), text.size());
    char buf[9];
    std::snprintf(buf, sizeof buf, "%08x", crc.checksum());
    return buf;
  }

  // Fills derived fields and checks cross-field invariants.
  void resolve() {
    if (data.id != "circle" && data.id != "surface" && data.id != "lorenz" && data.id != "line") {
      throw ConfigError("unknown dataset '" + data.id + "' (expected circle, surface, lorenz or line)");
    }
    if (model.d == 0) model.d = data.dim();
    if (model.d != data.dim()) {
      throw ConfigError("model.d = " + std::to_string(model.d) + " does not match dataset '" + data.id + "' (" +
                        std::to_string(data.dim()) + ")");
    }
    if (model.n < 1 || model.n > model.d) throw ConfigError("model.n must satisfy 1 <= n <= d");
    if (conditional && data.context_dim() == 0) throw ConfigError("dataset '" + data.id + "' has no conditioning value");
    model.context_dim = conditional ? data.context_dim() : 0;
    if (model.manifold_conditional && !conditional) throw ConfigError("model.manifold_conditional requires model.conditional");
    if (model.variant == models::Variant::AF) model.n = model.d;
    if (model.variant == models::Variant::FOM && data.id != "circle" && data.id != "surface") {
      throw ConfigError("the fom variant needs a dataset with a known chart (circle or surface)");
    }
    model.seed = seed;
    if (data.train < 2 || data.test < 1) throw ConfigError("data.train must be >= 2 and data.test >= 1");
    try {
      plan.validate();
    } catch (const ContractViolation& e) {
      throw ConfigError(e.what());
    }
  }

  // ---- value codecs ----
  static void parse_value(const std::string& s, std::string& v) { v = s; }
  static void parse_value(const std::string& s, bool& v) {
    if (s == "true" || s == "1") {
      v = true;
    } else if (s == "false" || s == "0") {
      v = false;
    } else {
      throw ConfigError("expected true or false, got '" + s + "'");
    }
  }
  template <class T>
    requires std::is_arithmetic_v<T>
  static void parse_value(const std::string& s, T& v) {
    T out{};
    const auto r = std::from_chars(s.data(), s.data() + s.size(), out);
    if (r.ec != std::errc() || r.ptr != s.data() + s.size()) throw ConfigError("bad number '" + s + "'");
    v = out;
  }
  static void parse_value(const std::string& s, models::Variant& v) {
    try {
      v = models::parse_variant(s);
    } catch (const ContractViolation& e) {
      throw ConfigError(e.what());
    }
  }
  static void parse_value(const std::string& s, train::Schedule& v) {
    try {
      v = train::parse_schedule(s);
    } catch (const ContractViolation& e) {
      throw ConfigError(e.what());
    }
  }
  static void parse_value(const std::string& s, train::ReconLoss& v) {
    try {
      v = train::parse_recon_loss(s);
    } catch (const ContractViolation& e) {
      throw ConfigError(e.what());
    }
  }
  static void parse_value(const std::string& s, tf::CouplingType& v) {
    if (s == "rq-spline") {
      v = tf::CouplingType::RQSpline;
    } else if (s == "affine") {
      v = tf::CouplingType::Affine;
    } else {
      throw ConfigError("unknown coupling '" + s + "' (expected rq-spline or affine)");
    }
  }

  static std::string format_value(const std::string& v) { return v; }
  static std::string format_value(bool v) { return v ? "true" : "false"; }
  template <class T>
    requires std::is_arithmetic_v<T>
  static std::string format_value(T v) {
    if constexpr (std::is_floating_point_v<T>) {
      return io::format_double(v);
    } else {
      return std::to_string(v);
    }
  }
  static std::string format_value(models::Variant v) { return models::to_string(v); }
  static std::string format_value(train::Schedule v) { return train::to_string(v); }
  static std::string format_value(train::ReconLoss v) { return train::to_string(v); }
  static std::string format_value(tf::CouplingType v) { return v == tf::CouplingType::RQSpline ? "rq-spline" : "affine"; }
};

}  // namespace mflow::cli
