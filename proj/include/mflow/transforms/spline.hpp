#pragma once

// Monotonic rational-quadratic splines on (-B, B) with identity tails.
//
// Knot layout for one element with K bins: K+1 knot abscissae running from -B
// to B, K+1 ordinates over the same range, and K+1 knot derivatives (the two
// boundary derivatives are 1 when the spline is built from unconstrained
// conditioner output, which makes the map C1 at the tails).

#include <algorithm>
#include <cmath>
#include <vector>

#include "mflow/ndiff/tensor.hpp"
#include "mflow/transforms/transform.hpp"

namespace mflow::tf {

struct SplineConfig {
  int bins = 10;
  double bound = 6.0;
  double min_bin_width = 1e-3;
  double min_bin_height = 1e-3;
  double min_derivative = 1e-3;

  // Unconstrained parameters per transformed element.
  Eigen::Index raw_size() const { return 3 * bins - 1; }
};

// Knot data per element (one row per element, K+1 columns each).
struct SplineKnots {
  Tensor xs;           // cumulative widths, -B .. B
  Tensor ys;           // cumulative heights, -B .. B
  Tensor derivatives;  // positive
  double bound = 0.0;
};

// Unconstrained (E x (3K-1)) conditioner output -> normalized knots.
// All-zero input yields equal bins with unit derivatives, i.e. the identity.
inline SplineKnots knots_from_raw(const Tensor& raw, const SplineConfig& cfg) {
  const Eigen::Index k = cfg.bins;
  if (raw.cols() != cfg.raw_size()) throw ContractViolation("spline: raw parameter width mismatch");
  const Eigen::Index e = raw.rows();
  const double b = cfg.bound;

  auto cumulative = [&](const Tensor& unnorm, double min_size) {
    Tensor sizes = nd::softmax_cols(unnorm) * (1.0 - min_size * static_cast<double>(k)) + min_size;
    Tensor inner = nd::cumsum_cols(sizes) * (2.0 * b) - b;
    // Interior knots from the running sum; endpoints pinned exactly.
    std::vector<Tensor> parts{nd::constant(e, 1, -b)};
    if (k > 1) parts.push_back(nd::slice_cols(inner, 0, k - 1));
    parts.push_back(nd::constant(e, 1, b));
    return nd::concat_cols(parts);
  };

  SplineKnots knots;
  knots.bound = b;
  knots.xs = cumulative(nd::slice_cols(raw, 0, k), cfg.min_bin_width);
  knots.ys = cumulative(nd::slice_cols(raw, k, k), cfg.min_bin_height);
  // Offset so that zero raw input gives derivative exactly 1.
  const double offset = std::log(std::expm1(1.0 - cfg.min_derivative));
  std::vector<Tensor> d{nd::constant(e, 1, 1.0)};
  if (k > 1) d.push_back(nd::softplus(nd::slice_cols(raw, 2 * k, k - 1) + offset) + cfg.min_derivative);
  d.push_back(nd::constant(e, 1, 1.0));
  knots.derivatives = nd::concat_cols(d);
  return knots;
}

// Elementwise spline on an E x 1 column. Returns the image and the log of the
// derivative of the map that was applied (forward or inverse).
inline FlowResult rq_spline(const Tensor& x, const SplineKnots& knots, bool inverse) {
  const Eigen::Index e = x.rows();
  if (x.cols() != 1) throw ContractViolation("rq_spline: expects a single column");
  const Eigen::Index k = knots.xs.cols() - 1;
  const double b = knots.bound;

  nd::Array inside(e, 1);
  for (Eigen::Index i = 0; i < e; ++i) {
    const double v = x.value()(i, 0);
    inside(i, 0) = (v >= -b && v <= b) ? 1.0 : 0.0;
  }
  const Tensor xin = nd::select(inside, x, nd::zeros_like(x));

  // Bin lookup on the side of the map we are given.
  const nd::Array& grid = inverse ? knots.ys.value() : knots.xs.value();
  nd::IndexArray lo(e, 1), hi(e, 1);
  for (Eigen::Index i = 0; i < e; ++i) {
    const double v = xin.value()(i, 0);
    Eigen::Index bin = 0;
    for (Eigen::Index j = 1; j < k; ++j)
      if (grid(i, j) <= v) bin = j;
    lo(i, 0) = bin;
    hi(i, 0) = bin + 1;
  }
  const Tensor x_k = nd::gather_cols(knots.xs, lo);
  const Tensor w_k = nd::gather_cols(knots.xs, hi) - x_k;
  const Tensor y_k = nd::gather_cols(knots.ys, lo);
  const Tensor h_k = nd::gather_cols(knots.ys, hi) - y_k;
  const Tensor d_k = nd::gather_cols(knots.derivatives, lo);
  const Tensor d_k1 = nd::gather_cols(knots.derivatives, hi);
  const Tensor delta = h_k / w_k;
  const Tensor curv = d_k + d_k1 - delta * 2.0;

  Tensor out, lad;
  if (!inverse) {
    const Tensor theta = (xin - x_k) / w_k;
    const Tensor t1 = theta * (1.0 - theta);
    const Tensor num = h_k * (delta * nd::square(theta) + d_k * t1);
    const Tensor den = delta + curv * t1;
    out = y_k + num / den;
    const Tensor dnum = nd::square(delta) * (d_k1 * nd::square(theta) + delta * t1 * 2.0 + d_k * nd::square(1.0 - theta));
    lad = nd::log(dnum) - nd::log(den) * 2.0;
  } else {
    const Tensor rel = xin - y_k;
    const Tensor a = h_k * (delta - d_k) + rel * curv;
    const Tensor bq = h_k * d_k - rel * curv;
    const Tensor c = -(delta * rel);
    nd::Array disc_v = (bq.value().array().square() - 4.0 * a.value().array() * c.value().array()).matrix();
    if ((disc_v.array() < 0.0).any()) throw NumericalError("rq_spline: negative discriminant in inverse");
    const Tensor disc = nd::square(bq) - a * c * 4.0;
    const Tensor root = (c * 2.0) / (-bq - nd::sqrt(disc));
    out = root * w_k + x_k;
    const Tensor t1 = root * (1.0 - root);
    const Tensor den = delta + curv * t1;
    const Tensor dnum = nd::square(delta) * (d_k1 * nd::square(root) + delta * t1 * 2.0 + d_k * nd::square(1.0 - root));
    lad = -(nd::log(dnum) - nd::log(den) * 2.0);
  }
  return {nd::select(inside, out, x), nd::select(inside, lad, nd::zeros_like(lad))};
}

// Explicit knot description for a single scalar spline.
struct SplineParams {
  double bound = 1.0;
  std::vector<double> widths;       // K positive values summing to 2B
  std::vector<double> heights;      // K positive values summing to 2B
  std::vector<double> derivatives;  // K+1 positive values

  void validate() const {
    const std::size_t k = widths.size();
    if (k == 0 || heights.size() != k || derivatives.size() != k + 1) {
      throw ParameterValidationError("spline knots: need K widths, K heights and K+1 derivatives");
    }
    if (!(bound > 0)) throw ParameterValidationError("spline knots: bound must be positive");
    double sw = 0, sh = 0;
    for (std::size_t i = 0; i < k; ++i) {
      if (!(widths[i] > 0) || !(heights[i] > 0)) {
        throw ParameterValidationError("spline knots: widths and heights must be positive (monotonicity)");
      }
      sw += widths[i];
      sh += heights[i];
    }
    for (double d : derivatives)
      if (!(d > 0)) throw ParameterValidationError("spline knots: derivatives must be positive (monotonicity)");
    const double tol = 1e-9 * 2.0 * bound;
    if (std::abs(sw - 2 * bound) > tol || std::abs(sh - 2 * bound) > tol) {
      throw ParameterValidationError("spline knots: widths and heights must each sum to 2B");
    }
  }

  SplineKnots knots() const {
    validate();
    const auto k = static_cast<Eigen::Index>(widths.size());
    nd::Array xs(1, k + 1), ys(1, k + 1), ds(1, k + 1);
    xs(0, 0) = ys(0, 0) = -bound;
    for (Eigen::Index i = 0; i < k; ++i) {
      xs(0, i + 1) = xs(0, i) + widths[static_cast<std::size_t>(i)];
      ys(0, i + 1) = ys(0, i) + heights[static_cast<std::size_t>(i)];
      ds(0, i) = derivatives[static_cast<std::size_t>(i)];
    }
    ds(0, k) = derivatives.back();
    xs(0, k) = ys(0, k) = bound;
    return {nd::constant(xs), nd::constant(ys), nd::constant(ds), bound};
  }
};

struct ScalarSplineResult {
  double out = 0.0;
  double logderiv = 0.0;
};

inline ScalarSplineResult rq_spline_elementwise(double value, const SplineParams& params, bool inverse = false) {
  auto r = rq_spline(nd::constant(nd::Array::Constant(1, 1, value)), params.knots(), inverse);
  return {r.out.item(), r.logabsdet.item()};
}

}  // namespace mflow::tf
