#pragma once

// Two-dimensional polynomial surface in R^3 with a conditional Gaussian mixture
// on its coordinates:
//   x = R (z0, z1, f(z)),  f(z) = exp(-0.1 |z|) sum a_ij z0^i z1^j
//   p(z|θ) = 0.6 N(z; (1,-1), 2² I) + 0.4 N(z; (-1,1), (0.6 + 0.4 θ)² I)

#include <Eigen/Dense>

#include <array>
#include <cmath>
#include <numbers>
#include <random>
#include <vector>

#include "mflow/errors.hpp"
#include "mflow/ndiff/tensor.hpp"

namespace mflow::data {

using nd::Array;

struct SurfaceTerm {
  int i, j;  // powers of z0, z1
  double a;
};

struct SurfaceSpec {
  std::vector<SurfaceTerm> terms;
  Eigen::Matrix3d printed_rotation;  // three-decimal values as published
  Eigen::Matrix3d rotation;          // nearest orthogonal matrix to the above
  double damping = 0.1;

  static SurfaceSpec standard() {
    SurfaceSpec s;
    s.terms = {{0, 0, -1.217}, {1, 0, 1.522},  {0, 1, -1.214}, {2, 0, 0.057},  {1, 1, -0.024}, {0, 2, -0.047},
               {3, 0, -0.056}, {2, 1, -0.008}, {1, 2, -0.057}, {0, 3, -0.052}, {4, 0, 0.014},  {3, 1, 0.000},
               {2, 2, -0.007}, {1, 3, -0.007}, {0, 4, 0.003},  {5, 0, -0.008}, {4, 1, -0.011}, {3, 2, 0.004},
               {2, 3, -0.005}, {1, 4, -0.009}, {0, 5, 0.012}};
    s.printed_rotation << 0.974, -0.227, -0.009, 0.227, 0.973, 0.040, 0.000, -0.041, 0.999;
    s.rotation = nearest_rotation(s.printed_rotation);
    return s;
  }

  // Polar factor of the SVD: the orthogonal matrix closest in Frobenius norm.
  static Eigen::Matrix3d nearest_rotation(const Eigen::Matrix3d& m) {
    Eigen::JacobiSVD<Eigen::Matrix3d> svd(m, Eigen::ComputeFullU | Eigen::ComputeFullV);
    Eigen::Matrix3d q = svd.matrixU() * svd.matrixV().transpose();
    if (q.determinant() < 0) throw ContractViolation("surface: rotation has negative determinant");
    return q;
  }

  double polynomial(double z0, double z1) const {
    double p = 0;
    for (const auto& t : terms) p += t.a * std::pow(z0, t.i) * std::pow(z1, t.j);
    return p;
  }

  double height(double z0, double z1) const { return std::exp(-damping * std::hypot(z0, z1)) * polynomial(z0, z1); }

  // ∇f; the damping factor's gradient is taken as 0 at the origin.
  Eigen::Vector2d height_gradient(double z0, double z1) const {
    Eigen::Vector2d dp(0, 0);
    for (const auto& t : terms) {
      if (t.i > 0) dp(0) += t.a * t.i * std::pow(z0, t.i - 1) * std::pow(z1, t.j);
      if (t.j > 0) dp(1) += t.a * t.j * std::pow(z0, t.i) * std::pow(z1, t.j - 1);
    }
    const double r = std::hypot(z0, z1);
    const double damp = std::exp(-damping * r);
    Eigen::Vector2d g = damp * dp;
    if (r > 0) g -= damp * damping * polynomial(z0, z1) * Eigen::Vector2d(z0, z1) / r;
    return g;
  }

  Eigen::Vector3d chart(double z0, double z1) const { return rotation * Eigen::Vector3d(z0, z1, height(z0, z1)); }

  // |f(z'0, z'1) - z'2| with z' = Rᵀ x.
  double distance(const Eigen::Vector3d& x) const {
    const Eigen::Vector3d zp = rotation.transpose() * x;
    return std::abs(height(zp(0), zp(1)) - zp(2));
  }

  // Coordinates of x after undoing the rotation (exact on the surface).
  Eigen::Vector2d coordinates(const Eigen::Vector3d& x) const { return (rotation.transpose() * x).head<2>(); }

  // ½ log det(JᵀJ) of the chart; R drops out, leaving 1 + |∇f|².
  double half_log_gram(double z0, double z1) const { return 0.5 * std::log1p(height_gradient(z0, z1).squaredNorm()); }
};

inline void check_theta(double theta) {
  if (!(theta >= -1.0 && theta <= 1.0)) throw ParameterValidationError("surface: θ must lie in [-1, 1]");
}

inline double mixture_density(double z0, double z1, double theta) {
  check_theta(theta);
  auto iso = [](double a, double b, double mu0, double mu1, double s) {
    const double r2 = (a - mu0) * (a - mu0) + (b - mu1) * (b - mu1);
    return std::exp(-0.5 * r2 / (s * s)) / (2 * std::numbers::pi * s * s);
  };
  return 0.6 * iso(z0, z1, 1, -1, 2.0) + 0.4 * iso(z0, z1, -1, 1, 0.6 + 0.4 * theta);
}

struct SurfaceSample {
  Array x;          // N x 3
  Array z;          // N x 2
  Array theta;      // N x 1
  std::vector<int> component;  // 0: broad, 1: θ-dependent
};

// θ per row; draws the mixture component, then z, then maps through the chart.
inline SurfaceSample sample_surface(const Array& theta, std::mt19937_64& rng,
                                    const SurfaceSpec& spec = SurfaceSpec::standard()) {
  const Eigen::Index count = theta.rows();
  if (count <= 0) throw ContractViolation("sample_surface: count must be positive");
  SurfaceSample s{Array(count, 3), Array(count, 2), theta, std::vector<int>(static_cast<std::size_t>(count))};
  std::bernoulli_distribution second(0.4);
  std::normal_distribution<double> n01;
  for (Eigen::Index k = 0; k < count; ++k) {
    const double th = theta(k, 0);
    check_theta(th);
    const bool c = second(rng);
    const double mu0 = c ? -1 : 1, mu1 = c ? 1 : -1, sd = c ? 0.6 + 0.4 * th : 2.0;
    const double z0 = mu0 + sd * n01(rng), z1 = mu1 + sd * n01(rng);
    s.component[static_cast<std::size_t>(k)] = c ? 1 : 0;
    s.z(k, 0) = z0;
    s.z(k, 1) = z1;
    s.x.row(k) = spec.chart(z0, z1).transpose();
  }
  return s;
}

inline SurfaceSample sample_surface(Eigen::Index count, double theta, std::mt19937_64& rng,
                                    const SurfaceSpec& spec = SurfaceSpec::standard()) {
  check_theta(theta);
  return sample_surface(Array::Constant(count, 1, theta), rng, spec);
}

// Training set: θ ~ Uniform(-1, 1) per sample.
inline SurfaceSample sample_surface_training(Eigen::Index count, std::mt19937_64& rng,
                                             const SurfaceSpec& spec = SurfaceSpec::standard()) {
  std::uniform_real_distribution<double> u(-1.0, 1.0);
  Array theta(count, 1);
  for (Eigen::Index k = 0; k < count; ++k) theta(k, 0) = u(rng);
  return sample_surface(theta, rng, spec);
}

// Exact log p(x|θ) of a point on the surface: mixture density of its
// coordinates over the chart's volume factor.
inline double surface_log_likelihood(const Eigen::Vector3d& x, double theta,
                                     const SurfaceSpec& spec = SurfaceSpec::standard()) {
  const Eigen::Vector2d z = spec.coordinates(x);
  return std::log(mixture_density(z(0), z(1), theta)) - spec.half_log_gram(z(0), z(1));
}

// Off-manifold test set: isotropic Gaussian noise added to every feature.
inline Array add_noise(const Array& x, double sigma, std::mt19937_64& rng) {
  std::normal_distribution<double> n(0.0, sigma);
  Array out = x;
  for (Eigen::Index i = 0; i < out.size(); ++i) out.data()[i] += n(rng);
  return out;
}

}  // namespace mflow::data
