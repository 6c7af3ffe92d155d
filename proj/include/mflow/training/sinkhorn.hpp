#pragma once

#include <algorithm>
#include <cmath>
#include <string>

#include "mflow/errors.hpp"
#include "mflow/ndiff/tensor.hpp"

namespace mflow::train {

using nd::Array;
using nd::Tensor;

struct SinkhornOptions {
  double epsilon = 0.05;  // entropic regularization, cost ½‖x−y‖²
  int max_iterations = 200;
  double tolerance = 1e-6;  // L1 marginal residual
  double scaling = 0.5;     // ε-annealing ratio per iteration, from the largest cost down to ε
  double relaxation = 1.7;  // over-relaxation of the potential updates at the target ε
  // Non-strict solves return the last iterate instead of throwing; the
  // envelope gradient is then approximate.
  bool strict = true;
};

// Dual potentials of entropic OT between uniform measures on the rows of X and Y.
struct SinkhornSolution {
  Eigen::VectorXd f, g;
  Array plan;  // N x M transport plan (sums to 1)
  double value = 0.0;  // OT_ε = <a, f> + <b, g>
  double residual = 0.0;
  int iterations = 0;
  bool converged = false;
};

namespace detail {

inline Array half_sq_cost(const Array& x, const Array& y) {
  const Eigen::VectorXd xn = x.rowwise().squaredNorm();
  const Eigen::VectorXd yn = y.rowwise().squaredNorm();
  Array c = -(x * y.transpose());
  c.colwise() += 0.5 * xn;
  c.rowwise() += 0.5 * yn.transpose();
  return c.cwiseMax(0.0);
}

// out_i = −ε log Σ_j w_j exp((h_j − C_ij)/ε)
inline Eigen::VectorXd softmin_rows(const Array& c, const Eigen::VectorXd& h, double log_w, double eps) {
  Eigen::VectorXd out(c.rows());
  for (Eigen::Index i = 0; i < c.rows(); ++i) {
    const Eigen::RowVectorXd z = (h.transpose() - c.row(i)) / eps;
    const double m = z.maxCoeff();
    out(i) = -eps * (m + log_w + std::log((z.array() - m).exp().sum()));
  }
  return out;
}

inline Array plan_from(const Array& c, const Eigen::VectorXd& f, const Eigen::VectorXd& g, double eps) {
  const double log_ab = -std::log(static_cast<double>(c.rows())) - std::log(static_cast<double>(c.cols()));
  Array z = -c;
  z.colwise() += f;
  z.rowwise() += g.transpose();
  return ((z.array() / eps) + log_ab).exp().matrix();
}

inline double row_residual(const Array& plan) {
  const double a = 1.0 / static_cast<double>(plan.rows());
  return (plan.rowwise().sum().array() - a).abs().sum();
}

}  // namespace detail

// Log-domain Sinkhorn with ε-annealing. OT(X, X) uses a single averaged
// potential, which converges in a few dozen iterations where alternating
// updates stall; other pairs use over-relaxed alternating updates. Throws
// SolverError if the marginal residual at the target ε is above tolerance
// after max_iterations (strict mode).
inline SinkhornSolution sinkhorn(const Array& x, const Array& y, const SinkhornOptions& opt) {
  if (x.rows() == 0 || y.rows() == 0) throw ContractViolation("sinkhorn: empty sample set");
  if (x.cols() != y.cols()) throw ContractViolation("sinkhorn: dimension mismatch");
  if (!(opt.epsilon > 0) || opt.max_iterations < 1 || !(opt.scaling > 0 && opt.scaling < 1) ||
      !(opt.relaxation > 0 && opt.relaxation < 2)) {
    throw ContractViolation("sinkhorn: invalid options");
  }
  const bool symmetric = x.rows() == y.rows() && x == y;
  const Array c = detail::half_sq_cost(x, y);
  const double log_a = -std::log(static_cast<double>(x.rows()));
  const double log_b = -std::log(static_cast<double>(y.rows()));
  double eps = std::max(opt.epsilon, c.maxCoeff());

  SinkhornSolution s;
  s.f = Eigen::VectorXd::Zero(x.rows());
  s.g = Eigen::VectorXd::Zero(y.rows());
  s.residual = INFINITY;
  for (int it = 1; it <= opt.max_iterations; ++it) {
    if (symmetric) {
      s.f = 0.5 * (s.f + detail::softmin_rows(c, s.f, log_b, eps));
      s.g = s.f;
    } else {
      const double w = eps > opt.epsilon ? 1.0 : opt.relaxation;
      s.f = (1.0 - w) * s.f + w * detail::softmin_rows(c, s.g, log_b, eps);
      s.g = (1.0 - w) * s.g + w * detail::softmin_rows(c.transpose(), s.f, log_a, eps);
    }
    s.iterations = it;
    if (eps > opt.epsilon) {
      eps = std::max(opt.epsilon, eps * opt.scaling);
      continue;
    }
    s.plan = detail::plan_from(c, s.f, s.g, eps);
    s.residual = detail::row_residual(s.plan);
    if (s.residual < opt.tolerance) break;
  }
  if (s.plan.size() == 0) s.plan = detail::plan_from(c, s.f, s.g, eps);
  s.converged = s.residual < opt.tolerance;
  if (!s.converged && opt.strict) {
    throw SolverError("sinkhorn: no convergence after " + std::to_string(opt.max_iterations) +
                          " iterations (marginal residual " + std::to_string(s.residual) + ")",
                      s.residual);
  }
  s.value = s.f.mean() + s.g.mean();
  return s;
}

// Debiased S_ε(X, Y) = OT_ε(X,Y) − ½OT_ε(X,X) − ½OT_ε(Y,Y). Gradients use the
// optimal plans (envelope theorem), so no iterate is differentiated:
//   ∂S/∂x_i = Σ_j π^{XY}_ij (x_i − y_j) − Σ_j π^{XX}_ij (x_i − x_j).
inline Tensor sinkhorn_divergence(const Tensor& x, const Tensor& y, const SinkhornOptions& opt = {}) {
  const Array& xv = x.value();
  const Array& yv = y.value();
  const auto xy = sinkhorn(xv, yv, opt);
  const auto xx = sinkhorn(xv, xv, opt);
  const auto yy = sinkhorn(yv, yv, opt);
  const double value = xy.value - 0.5 * xx.value - 0.5 * yy.value;

  auto transport_grad = [](const Array& p, const Array& from, const Array& to) -> Array {
    return (from.array().colwise() * p.rowwise().sum().array()).matrix() - p * to;
  };
  const Array gx = transport_grad(xy.plan, xv, yv) - transport_grad(xx.plan, xv, xv);
  const Array gy = transport_grad(xy.plan.transpose(), yv, xv) - transport_grad(yy.plan, yv, yv);

  return nd::detail::make(
      "sinkhorn_divergence", Array::Constant(1, 1, value), {x, y},
      [gx, gy](const nd::Node&, const Array& g, std::span<Array* const> gr) {
        if (gr[0]) *gr[0] += g(0, 0) * gx;
        if (gr[1]) *gr[1] += g(0, 0) * gy;
      },
      [gx, gy](const Tensor&, std::span<const Tensor> t) -> Tensor {
        // First-order tangent with the plans held fixed.
        Tensor out = nd::scalar(0.0);
        if (t[0].defined()) out = out + nd::sum(t[0] * nd::constant(gx));
        if (t[1].defined()) out = out + nd::sum(t[1] * nd::constant(gy));
        return out;
      });
}

}  // namespace mflow::train
