#pragma once

#include <cmath>
#include <numbers>
#include <random>
#include <vector>

#include "mflow/errors.hpp"
#include "mflow/ndiff/tensor.hpp"

namespace mflow::data {

using nd::Array;

// A line through the origin at angle alpha carrying N(0, sigma²) along it.
struct LineToyValue {
  double naive_loglik = 0.0;
  double recon = 0.0;
};

inline LineToyValue line_toy(double alpha, double sigma, double x0, double x1) {
  if (!(sigma > 0)) throw ContractViolation("line_toy: sigma must be positive");
  const double c = std::cos(alpha), s = std::sin(alpha);
  const double u = x0 * c + x1 * s;
  const double loglik = -0.5 * std::log(2 * std::numbers::pi) - std::log(sigma) - 0.5 * u * u / (sigma * sigma);
  return {loglik, std::hypot(x0 - u * c, x1 - u * s)};
}

inline Array sample_line_toy(Eigen::Index count, double alpha, double sigma, std::mt19937_64& rng) {
  std::normal_distribution<double> n(0.0, sigma);
  Array x(count, 2);
  for (Eigen::Index i = 0; i < count; ++i) {
    const double u = n(rng);
    x(i, 0) = u * std::cos(alpha);
    x(i, 1) = u * std::sin(alpha);
  }
  return x;
}

struct LandscapeGrid {
  double alpha_min = 0.01, alpha_max = std::numbers::pi / 2;
  double sigma_min = 0.01, sigma_max = 2.0;
  int alpha_steps = 50, sigma_steps = 50;
  double lambda = 1.0;  // weight of the reconstruction term in the combined loss
};

struct LandscapePoint {
  double alpha, sigma, naive_loglik, recon, combined;
};

// Data-averaged loss surfaces on a linear (alpha, sigma) grid, alpha-major.
// combined = -mean loglik + lambda * mean recon.
inline std::vector<LandscapePoint> line_landscape(const Array& data, const LandscapeGrid& g) {
  if (g.alpha_steps < 2 || g.sigma_steps < 2 || !(g.sigma_min > 0) || !(g.alpha_max > g.alpha_min) ||
      !(g.sigma_max > g.sigma_min)) {
    throw ContractViolation("landscape: invalid grid");
  }
  if (data.cols() != 2 || data.rows() == 0) throw ContractViolation("landscape: data must be N x 2");
  std::vector<LandscapePoint> out;
  out.reserve(static_cast<std::size_t>(g.alpha_steps * g.sigma_steps));
  const auto n = static_cast<double>(data.rows());
  for (int i = 0; i < g.alpha_steps; ++i) {
    const double alpha = g.alpha_min + (g.alpha_max - g.alpha_min) * i / (g.alpha_steps - 1);
    for (int j = 0; j < g.sigma_steps; ++j) {
      const double sigma = g.sigma_min + (g.sigma_max - g.sigma_min) * j / (g.sigma_steps - 1);
      double ll = 0, rc = 0;
      for (Eigen::Index k = 0; k < data.rows(); ++k) {
        const auto v = line_toy(alpha, sigma, data(k, 0), data(k, 1));
        ll += v.naive_loglik;
        rc += v.recon;
      }
      ll /= n;
      rc /= n;
      out.push_back({alpha, sigma, ll, rc, -ll + g.lambda * rc});
    }
  }
  return out;
}

}  // namespace mflow::data
