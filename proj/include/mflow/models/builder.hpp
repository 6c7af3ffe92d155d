#pragma once

#include <cstdint>
#include <memory>
#include <random>

#include "mflow/models/model.hpp"
#include "mflow/transforms/builder.hpp"

namespace mflow::models {

struct ModelConfig {
  Variant variant = Variant::MFLOW;
  Eigen::Index n = 1;
  Eigen::Index d = 2;
  Eigen::Index context_dim = 0;
  bool manifold_conditional = false;
  double epsilon = 1.0;
  tf::FlowArchitecture outer;  // f
  tf::FlowArchitecture inner;  // h
  tf::ResidualNetConfig encoder;
  std::uint64_t seed = 0;
};

// Parameters are named "f.*" (outer flow), "h.*" (inner flow) and "e.*"
// (encoder). Construction is deterministic in the config, including the
// random permutations, so a checkpoint only needs to store parameter values.
inline std::unique_ptr<ManifoldFlowModel> build_model(const ModelConfig& cfg, ChartPtr chart = nullptr) {
  nd::ParamStore params;
  std::mt19937_64 rng(cfg.seed);
  ModelParts parts;
  parts.variant = cfg.variant;
  parts.n = cfg.n;
  parts.d = cfg.d;
  parts.context_dim = cfg.context_dim;
  parts.manifold_conditional = cfg.manifold_conditional;
  parts.epsilon = cfg.variant == Variant::AF ? 1.0 : cfg.epsilon;
  if (cfg.n < 1 || cfg.n > cfg.d) throw ContractViolation("model: need 1 <= n <= d");

  // The ambient flow is conditional through f alone.
  if (cfg.variant == Variant::AF && cfg.context_dim > 0) parts.manifold_conditional = true;
  const Eigen::Index f_ctx = parts.manifold_conditional ? cfg.context_dim : 0;
  if (cfg.variant == Variant::FOM) {
    parts.chart = std::move(chart);
  } else {
    parts.f = tf::build_flow(params, "f", cfg.d, f_ctx, cfg.outer, rng);
  }
  if (cfg.variant != Variant::AF) parts.h = tf::build_flow(params, "h", cfg.n, cfg.context_dim, cfg.inner, rng);
  if (cfg.variant == Variant::MEFLOW) {
    parts.encoder = std::make_unique<tf::ResidualNet>(params, "e", cfg.d + f_ctx, cfg.n, cfg.encoder, rng,
                                                      /*zero_output=*/false);
  }
  return std::make_unique<ManifoldFlowModel>(std::move(params), std::move(parts));
}

}  // namespace mflow::models
