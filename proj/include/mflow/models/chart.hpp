#pragma once

#include <Eigen/Dense>

#include <cmath>
#include <memory>
#include <string>

#include "mflow/errors.hpp"

namespace mflow::models {

// Closed-form embedding g*: U -> X of a known manifold, with its analytic
// Jacobian and a left inverse valid on the manifold.
class PrescribedChart {
 public:
  virtual ~PrescribedChart() = default;
  virtual Eigen::Index latent_dim() const = 0;
  virtual Eigen::Index ambient_dim() const = 0;
  virtual std::string name() const = 0;

  virtual Eigen::VectorXd embed(const Eigen::VectorXd& u) const = 0;
  // d x n.
  virtual Eigen::MatrixXd jacobian(const Eigen::VectorXd& u) const = 0;
  // Coordinates of the manifold point nearest to x (exact on the manifold).
  virtual Eigen::VectorXd coordinates(const Eigen::VectorXd& x) const = 0;
};

// (cos phi, sin phi); JᵀJ = 1.
class UnitCircleChart final : public PrescribedChart {
 public:
  Eigen::Index latent_dim() const override { return 1; }
  Eigen::Index ambient_dim() const override { return 2; }
  std::string name() const override { return "unit-circle"; }

  Eigen::VectorXd embed(const Eigen::VectorXd& u) const override {
    return Eigen::Vector2d(std::cos(u(0)), std::sin(u(0)));
  }
  Eigen::MatrixXd jacobian(const Eigen::VectorXd& u) const override {
    return Eigen::Vector2d(-std::sin(u(0)), std::cos(u(0)));
  }
  Eigen::VectorXd coordinates(const Eigen::VectorXd& x) const override {
    return Eigen::VectorXd::Constant(1, std::atan2(x(1), x(0)));
  }
};

// Affine subspace x = offset + A u with A of full column rank.
class LinearChart final : public PrescribedChart {
 public:
  LinearChart(Eigen::MatrixXd basis, Eigen::VectorXd offset) : basis_(std::move(basis)), offset_(std::move(offset)) {
    if (offset_.size() != basis_.rows()) throw ContractViolation("LinearChart: offset size mismatch");
    Eigen::MatrixXd gram = basis_.transpose() * basis_;
    Eigen::LLT<Eigen::MatrixXd> llt(gram);
    if (basis_.cols() == 0 || llt.info() != Eigen::Success) {
      throw ContractViolation("LinearChart: basis must have full column rank");
    }
    pseudo_inverse_ = llt.solve(basis_.transpose());
  }
  explicit LinearChart(Eigen::MatrixXd basis)
      : LinearChart(basis, Eigen::VectorXd::Zero(basis.rows())) {}

  Eigen::Index latent_dim() const override { return basis_.cols(); }
  Eigen::Index ambient_dim() const override { return basis_.rows(); }
  std::string name() const override { return "linear"; }

  Eigen::VectorXd embed(const Eigen::VectorXd& u) const override { return offset_ + basis_ * u; }
  Eigen::MatrixXd jacobian(const Eigen::VectorXd&) const override { return basis_; }
  Eigen::VectorXd coordinates(const Eigen::VectorXd& x) const override { return pseudo_inverse_ * (x - offset_); }

 private:
  Eigen::MatrixXd basis_;
  Eigen::VectorXd offset_;
  Eigen::MatrixXd pseudo_inverse_;
};

using ChartPtr = std::shared_ptr<const PrescribedChart>;

}  // namespace mflow::models
