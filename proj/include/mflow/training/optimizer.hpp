#pragma once

#include <cmath>
#include <map>
#include <numbers>
#include <string>
#include <vector>

#include "mflow/errors.hpp"
#include "mflow/ndiff/param_store.hpp"

namespace mflow::train {

using nd::Array;

// α_t = ½ α (1 + cos(π t / T)) for t in [0, T); reaches ≈ α π² / (4 T²) at the last step.
inline double cosine_lr(double base, long step, long total) {
  if (total <= 0) return base;
  const double t = static_cast<double>(std::min(step, total)) / static_cast<double>(total);
  return 0.5 * base * (1.0 + std::cos(std::numbers::pi * t));
}

struct AdamWConfig {
  double lr = 3e-4;
  double beta1 = 0.9;
  double beta2 = 0.999;
  double eps = 1e-8;
  double weight_decay = 0.0;
};

struct AdamState {
  Array m;
  Array v;
  long t = 0;  // updates applied so far
};

// One decoupled-weight-decay Adam update of a single parameter:
//   p ← p (1 − α_t λ) − α_t m̂ / (√v̂ + eps).
inline void optimizer_step(Array& param, const Array& grad, AdamState& state, double lr_t, double weight_decay,
                           const AdamWConfig& cfg = {}) {
  if (state.m.size() == 0) {
    state.m = Array::Zero(param.rows(), param.cols());
    state.v = Array::Zero(param.rows(), param.cols());
  }
  if (grad.rows() != param.rows() || grad.cols() != param.cols() || state.m.rows() != param.rows() ||
      state.m.cols() != param.cols()) {
    throw ContractViolation("optimizer_step: state, gradient and parameter shapes differ");
  }
  ++state.t;
  state.m = cfg.beta1 * state.m + (1.0 - cfg.beta1) * grad;
  state.v = cfg.beta2 * state.v + (1.0 - cfg.beta2) * grad.cwiseProduct(grad);
  const double c1 = 1.0 - std::pow(cfg.beta1, static_cast<double>(state.t));
  const double c2 = 1.0 - std::pow(cfg.beta2, static_cast<double>(state.t));
  if (weight_decay != 0.0) param *= (1.0 - lr_t * weight_decay);
  param.array() -= lr_t * (state.m.array() / c1) / ((state.v.array() / c2).sqrt() + cfg.eps);
}

// Rescales the listed gradients so their joint L2 norm is at most max_norm.
// Returns the norm before clipping.
inline double clip_grad_norm(std::map<std::string, Array>& grads, const std::vector<std::string>& names,
                             double max_norm) {
  double sq = 0.0;
  for (const auto& n : names) sq += grads.at(n).squaredNorm();
  const double norm = std::sqrt(sq);
  if (max_norm > 0 && norm > max_norm) {
    const double s = max_norm / norm;
    for (const auto& n : names) grads.at(n) *= s;
  }
  return norm;
}

// AdamW over a ParamStore with a per-parameter cosine schedule: each
// parameter anneals over its own planned number of updates, so parameters
// trained only in some phases still sweep the full schedule.
class AdamW {
 public:
  explicit AdamW(AdamWConfig cfg = {}) : cfg_(cfg) {}

  void plan_updates(const std::string& name, long total) { planned_[name] = total; }

  double lr_for(const std::string& name) const {
    const auto s = state_.find(name);
    const long t = s == state_.end() ? 0 : s->second.t;
    const auto p = planned_.find(name);
    return p == planned_.end() ? cfg_.lr : cosine_lr(cfg_.lr, t, p->second);
  }

  void step(nd::ParamStore& params, const std::map<std::string, Array>& grads,
            const std::vector<std::string>& targets) {
    for (const auto& name : targets) {
      const double lr = lr_for(name);
      optimizer_step(params.get(name).mutable_param_value(), grads.at(name), state_[name], lr, cfg_.weight_decay,
                     cfg_);
    }
  }

  const std::map<std::string, AdamState>& state() const { return state_; }
  const AdamWConfig& config() const { return cfg_; }

 private:
  AdamWConfig cfg_;
  std::map<std::string, AdamState> state_;
  std::map<std::string, long> planned_;
};

}  // namespace mflow::train
