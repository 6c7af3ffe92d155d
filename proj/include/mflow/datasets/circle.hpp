#pragma once

#include <cmath>
#include <numbers>
#include <random>

#include "mflow/errors.hpp"
#include "mflow/ndiff/tensor.hpp"

namespace mflow::data {

using nd::Array;

struct CircleConfig {
  double angle_mean = std::numbers::pi / 2;
  double angle_std = std::numbers::pi / 4;
  double radius_mean = 1.0;
  double radius_std = 0.01;
};

// Gaussian angle on a slightly noisy unit circle. Column 0/1 are x, the
// optional `angles` output receives phi.
inline Array sample_circle(Eigen::Index count, std::mt19937_64& rng, const CircleConfig& cfg = {},
                           Array* angles = nullptr) {
  if (count <= 0) throw ContractViolation("sample_circle: count must be positive");
  std::normal_distribution<double> phi_d(cfg.angle_mean, cfg.angle_std), r_d(cfg.radius_mean, cfg.radius_std);
  Array x(count, 2);
  if (angles) angles->resize(count, 1);
  for (Eigen::Index i = 0; i < count; ++i) {
    const double phi = phi_d(rng);
    const double r = r_d(rng);
    x(i, 0) = r * std::cos(phi);
    x(i, 1) = r * std::sin(phi);
    if (angles) (*angles)(i, 0) = phi;
  }
  return x;
}

// Density of the generating process in the plane: p_phi(phi) p_r(r) / r, with
// phi the principal angle (the Gaussian tails wrapping past ±pi are ignored).
inline double circle_density(double x0, double x1, const CircleConfig& cfg = {}) {
  const double r = std::hypot(x0, x1);
  const double phi = std::atan2(x1, x0);
  auto normal = [](double v, double mu, double s) {
    return std::exp(-0.5 * (v - mu) * (v - mu) / (s * s)) / (std::sqrt(2 * std::numbers::pi) * s);
  };
  return normal(phi, cfg.angle_mean, cfg.angle_std) * normal(r, cfg.radius_mean, cfg.radius_std) / r;
}

}  // namespace mflow::data
