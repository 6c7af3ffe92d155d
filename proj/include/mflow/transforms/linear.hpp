#pragma once

#include <algorithm>
#include <numeric>
#include <random>
#include <string>
#include <vector>

#include "mflow/ndiff/param_store.hpp"
#include "mflow/transforms/transform.hpp"

namespace mflow::tf {

// Fixed feature permutation: out(:, j) = in(:, perm[j]).
class Permutation final : public Transform {
 public:
  explicit Permutation(std::vector<Eigen::Index> perm) : perm_(std::move(perm)) {
    std::vector<Eigen::Index> check = perm_;
    std::sort(check.begin(), check.end());
    for (std::size_t i = 0; i < check.size(); ++i)
      if (check[i] != static_cast<Eigen::Index>(i)) throw ContractViolation("permutation: not a permutation");
    inverse_.assign(perm_.size(), 0);
    for (std::size_t j = 0; j < perm_.size(); ++j) inverse_[static_cast<std::size_t>(perm_[j])] = static_cast<Eigen::Index>(j);
  }

  // Drawn once from the seeded generator.
  static std::vector<Eigen::Index> random(Eigen::Index dim, std::mt19937_64& rng) {
    std::vector<Eigen::Index> p(static_cast<std::size_t>(dim));
    std::iota(p.begin(), p.end(), Eigen::Index{0});
    // Fisher-Yates with our own index draws; std::shuffle's algorithm is unspecified.
    for (std::size_t i = p.size(); i > 1; --i) {
      std::uniform_int_distribution<std::size_t> pick(0, i - 1);
      std::swap(p[i - 1], p[pick(rng)]);
    }
    return p;
  }

  Eigen::Index dim() const override { return static_cast<Eigen::Index>(perm_.size()); }
  std::string kind() const override { return "permutation"; }
  const std::vector<Eigen::Index>& indices() const { return perm_; }

 protected:
  FlowResult do_forward(const Tensor& z, const Tensor&) const override {
    return {nd::permute_cols(z, perm_), zero_logdet(z.rows())};
  }
  FlowResult do_inverse(const Tensor& x, const Tensor&) const override {
    return {nd::permute_cols(x, inverse_), zero_logdet(x.rows())};
  }

 private:
  std::vector<Eigen::Index> perm_, inverse_;
};

// x = z W^T + b with W = L U, L unit lower triangular, U upper triangular with
// positive diagonal exp(log_diag). Starts at the identity.
class LULinear final : public Transform {
 public:
  LULinear(nd::ParamStore& params, const std::string& prefix, Eigen::Index dim) : dim_(dim) {
    lower_ = params.add(prefix + ".lower", Array::Zero(dim, dim));
    upper_ = params.add(prefix + ".upper", Array::Zero(dim, dim));
    log_diag_ = params.add(prefix + ".log_diag", Array::Zero(1, dim));
    bias_ = params.add(prefix + ".bias", Array::Zero(1, dim));
    lower_mask_ = Array::Zero(dim, dim);
    upper_mask_ = Array::Zero(dim, dim);
    for (Eigen::Index i = 0; i < dim; ++i)
      for (Eigen::Index j = 0; j < dim; ++j) {
        if (j < i) lower_mask_(i, j) = 1.0;
        if (j > i) upper_mask_(i, j) = 1.0;
      }
  }

  Eigen::Index dim() const override { return dim_; }
  std::string kind() const override { return "lu-linear"; }

  Tensor weight() const {
    const Tensor eye = nd::constant(Array::Identity(dim_, dim_));
    const Tensor l = lower_ * nd::constant(lower_mask_) + eye;
    const Tensor u = upper_ * nd::constant(upper_mask_) + eye * nd::broadcast_to(nd::exp(log_diag_), dim_, dim_);
    return nd::matmul(l, u);
  }

 protected:
  FlowResult do_forward(const Tensor& z, const Tensor&) const override {
    const Tensor out = nd::matmul(z, nd::transpose(weight())) + bias_;
    return {out, nd::broadcast_to(nd::sum(log_diag_), z.rows(), 1)};
  }
  FlowResult do_inverse(const Tensor& x, const Tensor&) const override {
    const Tensor out = nd::matmul(x - bias_, nd::transpose(nd::matinv(weight())));
    return {out, nd::broadcast_to(-nd::sum(log_diag_), x.rows(), 1)};
  }

 private:
  Eigen::Index dim_;
  Tensor lower_, upper_, log_diag_, bias_;
  Array lower_mask_, upper_mask_;
};

// x = z * exp(log_scale) + shift, per coordinate. With a standard normal base
// this is a Gaussian with learnable mean and variance.
class ElementwiseAffine final : public Transform {
 public:
  ElementwiseAffine(nd::ParamStore& params, const std::string& prefix, Eigen::Index dim) : dim_(dim) {
    shift_ = params.add(prefix + ".shift", Array::Zero(1, dim));
    log_scale_ = params.add(prefix + ".log_scale", Array::Zero(1, dim));
  }

  Eigen::Index dim() const override { return dim_; }
  std::string kind() const override { return "elementwise-affine"; }

 protected:
  FlowResult do_forward(const Tensor& z, const Tensor&) const override {
    return {z * nd::exp(log_scale_) + shift_, nd::broadcast_to(nd::sum(log_scale_), z.rows(), 1)};
  }
  FlowResult do_inverse(const Tensor& x, const Tensor&) const override {
    return {(x - shift_) * nd::exp(-log_scale_), nd::broadcast_to(-nd::sum(log_scale_), x.rows(), 1)};
  }

 private:
  Eigen::Index dim_;
  Tensor shift_, log_scale_;
};

}  // namespace mflow::tf
