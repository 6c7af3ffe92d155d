#pragma once

#include <algorithm>
#include <memory>
#include <string>
#include <utility>
#include <vector>

#include "mflow/ndiff/tensor.hpp"

namespace mflow::tf {

using nd::Array;
using nd::Tensor;

// Batch output of a transform: one row per sample, logabsdet is rows x 1.
struct FlowResult {
  Tensor out;
  Tensor logabsdet;
};

// An invertible map on R^dim, optionally conditioned on a context vector.
// Inputs are batches (rows = samples). The public entry points validate shapes
// and reject non-finite outputs; subclasses implement the map itself.
class Transform {
 public:
  virtual ~Transform() = default;

  virtual Eigen::Index dim() const = 0;
  virtual Eigen::Index context_dim() const { return 0; }
  virtual std::string kind() const = 0;

  FlowResult forward(const Tensor& z, const Tensor& context = Tensor()) const {
    check_inputs(z, context, "forward");
    FlowResult r = do_forward(z, context_dim() > 0 ? context : Tensor());
    check_finite(r, "forward");
    return r;
  }

  FlowResult inverse(const Tensor& x, const Tensor& context = Tensor()) const {
    check_inputs(x, context, "inverse");
    FlowResult r = do_inverse(x, context_dim() > 0 ? context : Tensor());
    check_finite(r, "inverse");
    return r;
  }

 protected:
  virtual FlowResult do_forward(const Tensor& z, const Tensor& context) const = 0;
  virtual FlowResult do_inverse(const Tensor& x, const Tensor& context) const = 0;

 private:
  void check_inputs(const Tensor& v, const Tensor& context, const char* where) const {
    if (v.cols() != dim()) {
      throw ContractViolation(kind() + "::" + where + ": expected " + std::to_string(dim()) + " columns, got " +
                              std::to_string(v.cols()));
    }
    if (context_dim() > 0) {
      if (!context.defined() || context.cols() != context_dim() || context.rows() != v.rows()) {
        throw ContractViolation(kind() + "::" + where + ": context of width " + std::to_string(context_dim()) +
                                " required");
      }
    }
  }

  void check_finite(const FlowResult& r, const char* where) const {
    if (!r.out.value().allFinite() || !r.logabsdet.value().allFinite()) {
      throw NumericalError(kind() + "::" + where + ": non-finite output (parameters exploded?)");
    }
  }
};

using TransformPtr = std::unique_ptr<Transform>;

inline Tensor zero_logdet(Eigen::Index rows) { return nd::constant(rows, 1, 0.0); }

// Applies its members in order; log-determinants add.
class CompositeTransform final : public Transform {
 public:
  explicit CompositeTransform(Eigen::Index dim) : dim_(dim) {}

  explicit CompositeTransform(std::vector<TransformPtr> parts) : dim_(parts.empty() ? 0 : parts.front()->dim()) {
    for (auto& p : parts) append(std::move(p));
  }

  void append(TransformPtr t) {
    if (!t) throw ContractViolation("compose: null transform");
    if (!parts_.empty() || dim_ != 0) {
      if (t->dim() != dim_) throw ContractViolation("compose: dimension chain mismatch");
    } else {
      dim_ = t->dim();
    }
    context_dim_ = std::max(context_dim_, t->context_dim());
    if (t->context_dim() > 0 && t->context_dim() != context_dim_) {
      throw ContractViolation("compose: inconsistent context widths");
    }
    parts_.push_back(std::move(t));
  }

  Eigen::Index dim() const override { return dim_; }
  Eigen::Index context_dim() const override { return context_dim_; }
  std::string kind() const override { return "composite"; }
  std::size_t size() const { return parts_.size(); }
  const Transform& at(std::size_t i) const { return *parts_.at(i); }

 protected:
  FlowResult do_forward(const Tensor& z, const Tensor& context) const override {
    Tensor cur = z;
    Tensor lad = zero_logdet(z.rows());
    for (const auto& p : parts_) {
      auto r = p->forward(cur, p->context_dim() > 0 ? context : Tensor());
      cur = r.out;
      lad = lad + r.logabsdet;
    }
    return {cur, lad};
  }

  FlowResult do_inverse(const Tensor& x, const Tensor& context) const override {
    Tensor cur = x;
    Tensor lad = zero_logdet(x.rows());
    for (auto it = parts_.rbegin(); it != parts_.rend(); ++it) {
      auto r = (*it)->inverse(cur, (*it)->context_dim() > 0 ? context : Tensor());
      cur = r.out;
      lad = lad + r.logabsdet;
    }
    return {cur, lad};
  }

 private:
  Eigen::Index dim_ = 0;
  Eigen::Index context_dim_ = 0;
  std::vector<TransformPtr> parts_;
};

inline std::unique_ptr<CompositeTransform> compose(std::vector<TransformPtr> ts) {
  if (ts.empty()) throw ContractViolation("compose: empty sequence");
  return std::make_unique<CompositeTransform>(std::move(ts));
}

// Swaps the roles of forward and inverse of an owned transform.
class InvertedTransform final : public Transform {
 public:
  explicit InvertedTransform(TransformPtr inner) : inner_(std::move(inner)) {
    if (!inner_) throw ContractViolation("InvertedTransform: null transform");
  }
  Eigen::Index dim() const override { return inner_->dim(); }
  Eigen::Index context_dim() const override { return inner_->context_dim(); }
  std::string kind() const override { return "inverse(" + inner_->kind() + ")"; }

 protected:
  FlowResult do_forward(const Tensor& z, const Tensor& context) const override { return inner_->inverse(z, context); }
  FlowResult do_inverse(const Tensor& x, const Tensor& context) const override { return inner_->forward(x, context); }

 private:
  TransformPtr inner_;
};

// Zero padding U -> U x V and projection U x V -> U, the level-set plumbing.
inline Tensor pad(const Tensor& u, Eigen::Index d) {
  if (u.cols() > d) throw ContractViolation("pad: latent dimension exceeds ambient dimension");
  if (u.cols() == d) return u;
  if (u.cols() == 0) return nd::constant(u.rows(), d, 0.0);
  return nd::concat_cols({u, nd::constant(u.rows(), d - u.cols(), 0.0)});
}

inline Tensor proj(const Tensor& z, Eigen::Index n) {
  if (n > z.cols()) throw ContractViolation("proj: manifold dimension exceeds ambient dimension");
  if (n == z.cols()) return z;
  return nd::slice_cols(z, 0, n);
}

inline Eigen::VectorXd pad(const Eigen::VectorXd& u, Eigen::Index d) {
  if (u.size() > d) throw ContractViolation("pad: latent dimension exceeds ambient dimension");
  Eigen::VectorXd out = Eigen::VectorXd::Zero(d);
  out.head(u.size()) = u;
  return out;
}

inline Eigen::VectorXd proj(const Eigen::VectorXd& z, Eigen::Index n) {
  if (n > z.size()) throw ContractViolation("proj: manifold dimension exceeds ambient dimension");
  return z.head(n);
}

}  // namespace mflow::tf
