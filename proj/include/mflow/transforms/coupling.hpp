#pragma once

#include <memory>
#include <random>
#include <string>
#include <vector>

#include "mflow/ndiff/param_store.hpp"
#include "mflow/transforms/resnet.hpp"
#include "mflow/transforms/spline.hpp"
#include "mflow/transforms/transform.hpp"

namespace mflow::tf {

// Which coordinates a coupling layer transforms. Parity p transforms the
// coordinates j with j % 2 == p; a one-dimensional layer always transforms its
// only coordinate (its conditioner then sees the context alone).
struct CouplingMask {
  std::vector<Eigen::Index> identity;
  std::vector<Eigen::Index> transformed;

  static CouplingMask alternating(Eigen::Index dim, int parity) {
    CouplingMask m;
    if (dim == 1) {
      m.transformed = {0};
      return m;
    }
    for (Eigen::Index j = 0; j < dim; ++j) (j % 2 == parity ? m.transformed : m.identity).push_back(j);
    return m;
  }
};

// Shared plumbing: split into pass-through / transformed halves, run the
// conditioner on (pass-through, context), reassemble.
class CouplingBase : public Transform {
 public:
  CouplingBase(Eigen::Index dim, Eigen::Index context_dim, CouplingMask mask)
      : dim_(dim), context_dim_(context_dim), mask_(std::move(mask)) {
    if (mask_.transformed.empty()) throw ContractViolation("coupling: nothing to transform");
    for (auto j : mask_.identity) split_.push_back(j);
    for (auto j : mask_.transformed) split_.push_back(j);
    merge_.assign(split_.size(), 0);
    for (std::size_t i = 0; i < split_.size(); ++i) merge_[static_cast<std::size_t>(split_[i])] = static_cast<Eigen::Index>(i);
  }

  Eigen::Index dim() const override { return dim_; }
  Eigen::Index context_dim() const override { return context_dim_; }
  const CouplingMask& mask() const { return mask_; }

 protected:
  // Elementwise map on the transformed half given conditioner output.
  virtual FlowResult transform_half(const Tensor& half, const Tensor& cond, bool inverse) const = 0;
  virtual const ResidualNet& conditioner() const = 0;

  Eigen::Index transformed_count() const { return static_cast<Eigen::Index>(mask_.transformed.size()); }

  FlowResult do_forward(const Tensor& z, const Tensor& context) const override { return apply(z, context, false); }
  FlowResult do_inverse(const Tensor& x, const Tensor& context) const override { return apply(x, context, true); }

 private:
  FlowResult apply(const Tensor& in, const Tensor& context, bool inverse) const {
    const auto nid = static_cast<Eigen::Index>(mask_.identity.size());
    const auto ntr = transformed_count();
    const Tensor split = nd::permute_cols(in, split_);
    const Tensor ident = nid > 0 ? nd::slice_cols(split, 0, nid) : Tensor();
    const Tensor half = nd::slice_cols(split, nid, ntr);

    std::vector<Tensor> cond_parts;
    if (ident.defined()) cond_parts.push_back(ident);
    if (context.defined()) cond_parts.push_back(context);
    const Tensor cond_in = cond_parts.empty() ? nd::constant(in.rows(), 0, 0.0) : nd::concat_cols(cond_parts);
    const Tensor cond = conditioner()(cond_in);

    FlowResult r = transform_half(half, cond, inverse);
    const Tensor joined = ident.defined() ? nd::concat_cols({ident, r.out}) : r.out;
    return {nd::permute_cols(joined, merge_), r.logabsdet};
  }

  Eigen::Index dim_;
  Eigen::Index context_dim_;
  CouplingMask mask_;
  std::vector<Eigen::Index> split_, merge_;
};

// x_t = z_t * exp(s) + t with (s, t) from the conditioner.
class AffineCoupling final : public CouplingBase {
 public:
  AffineCoupling(nd::ParamStore& params, const std::string& prefix, Eigen::Index dim, Eigen::Index context_dim,
                 CouplingMask mask, const ResidualNetConfig& net, std::mt19937_64& rng)
      : CouplingBase(dim, context_dim, std::move(mask)),
        net_(params, prefix + ".net", static_cast<Eigen::Index>(this->mask().identity.size()) + context_dim,
             2 * static_cast<Eigen::Index>(this->mask().transformed.size()), net, rng) {}

  std::string kind() const override { return "affine-coupling"; }

 protected:
  const ResidualNet& conditioner() const override { return net_; }

  FlowResult transform_half(const Tensor& half, const Tensor& cond, bool inverse) const override {
    const auto m = transformed_count();
    const Tensor log_scale = nd::slice_cols(cond, 0, m);
    const Tensor shift = nd::slice_cols(cond, m, m);
    if (!inverse) return {half * nd::exp(log_scale) + shift, nd::sum_cols(log_scale)};
    return {(half - shift) * nd::exp(-log_scale), -nd::sum_cols(log_scale)};
  }

 private:
  ResidualNet net_;
};

// Transformed coordinates pass through a monotonic rational-quadratic spline
// whose knots come from the conditioner.
class RQSplineCoupling final : public CouplingBase {
 public:
  RQSplineCoupling(nd::ParamStore& params, const std::string& prefix, Eigen::Index dim, Eigen::Index context_dim,
                   CouplingMask mask, const SplineConfig& spline, const ResidualNetConfig& net, std::mt19937_64& rng)
      : CouplingBase(dim, context_dim, std::move(mask)),
        spline_(spline),
        net_(params, prefix + ".net", static_cast<Eigen::Index>(this->mask().identity.size()) + context_dim,
             static_cast<Eigen::Index>(this->mask().transformed.size()) * spline.raw_size(), net, rng) {}

  std::string kind() const override { return "rq-spline-coupling"; }
  const SplineConfig& spline() const { return spline_; }

 protected:
  const ResidualNet& conditioner() const override { return net_; }

  FlowResult transform_half(const Tensor& half, const Tensor& cond, bool inverse) const override {
    const auto rows = half.rows();
    const auto m = transformed_count();
    const Tensor raw = nd::reshape(cond, rows * m, spline_.raw_size());
    const SplineKnots knots = knots_from_raw(raw, spline_);
    FlowResult r = rq_spline(nd::reshape(half, rows * m, 1), knots, inverse);
    return {nd::reshape(r.out, rows, m), nd::sum_cols(nd::reshape(r.logabsdet, rows, m))};
  }

 private:
  SplineConfig spline_;
  ResidualNet net_;
};

}  // namespace mflow::tf
