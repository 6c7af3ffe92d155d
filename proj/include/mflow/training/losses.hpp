#pragma once

#include "mflow/models/model.hpp"
#include "mflow/training/plan.hpp"
#include "mflow/training/sinkhorn.hpp"

namespace mflow::train {

using models::ManifoldFlowModel;

inline void require_batch(const Tensor& x, const char* where) {
  if (!x.defined() || x.rows() == 0) throw ContractViolation(std::string(where) + ": empty batch");
}

// Per-row ‖x − x'‖², differentiable everywhere (unlike the norm at 0).
inline Tensor squared_recon(const Tensor& x, const Tensor& x_rec) { return nd::sum_cols(nd::square(x - x_rec)); }

// Per-row ‖x − x'‖, smoothed by 1e-12 under the root so the gradient is
// bounded by 1 and defined at zero error.
inline Tensor norm_recon(const Tensor& x, const Tensor& x_rec) { return nd::sqrt(squared_recon(x, x_rec) + 1e-12); }

// λ_m · mean ‖x − g(g⁻¹(x))‖², or the mean plain norm. The norm keeps a few
// far-off-manifold points from dominating the batch gradient.
inline Tensor loss_recon(const ManifoldFlowModel& model, const Tensor& x, const Tensor& context = Tensor(),
                         double lambda_m = 1.0, ReconLoss kind = ReconLoss::Squared) {
  require_batch(x, "loss_recon");
  const auto p = model.project(x, context);
  return nd::mean(kind == ReconLoss::Squared ? squared_recon(x, p.x_rec) : norm_recon(x, p.x_rec)) * lambda_m;
}

// −λ_d · mean log p(x). For M-flows the density is that of the projected
// point; include_gram = false drops the Gram term, which has no φ_h gradient.
inline Tensor loss_nll(const ManifoldFlowModel& model, const Tensor& x, const Tensor& context = Tensor(),
                       bool include_gram = true, double lambda_d = 1.0) {
  require_batch(x, "loss_nll");
  const Tensor logp = model.learns_manifold() ? model.mflow_log_prob(x, context, {include_gram}).log_prob
                                              : model.log_prob(x, context);
  return nd::mean(logp) * (-lambda_d);
}

// mean(−w_nll · log p_M(x) + w_recon · ‖x − x'‖²) with the full Gram term.
inline Tensor loss_simultaneous(const ManifoldFlowModel& model, const Tensor& x, const Tensor& context = Tensor(),
                                double nll_weight = 1.0, double recon_weight = 1.0) {
  require_batch(x, "loss_simultaneous");
  if (!model.learns_manifold()) throw UnsupportedConfiguration("loss_simultaneous: needs an mflow or meflow model");
  const auto d = model.mflow_log_prob(x, context);
  return nd::mean(d.log_prob * (-nll_weight) + squared_recon(x, d.x_rec) * recon_weight);
}

// weight · S_ε(data, g(h(ũ))) with base draws ũ; gradients flow through the
// generative path into φ_f and φ_h.
inline Tensor loss_ot(const ManifoldFlowModel& model, const Tensor& x, const Array& base,
                      const Tensor& context = Tensor(), const SinkhornOptions& opt = {}, double weight = 1.0) {
  require_batch(x, "loss_ot");
  return sinkhorn_divergence(x, model.generate(base, context), opt) * weight;
}

}  // namespace mflow::train
