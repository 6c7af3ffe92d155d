#pragma once

#include <algorithm>
#include <cmath>
#include <functional>
#include <numbers>
#include <utility>
#include <vector>

#include <Eigen/Dense>

#include "mflow/errors.hpp"
#include "mflow/eval/mcmc.hpp"

namespace mflow::eval {

namespace detail {

inline Eigen::MatrixXd sq_dists(const Eigen::MatrixXd& a, const Eigen::MatrixXd& b) {
  Eigen::MatrixXd d = -2.0 * a * b.transpose();
  d.colwise() += a.rowwise().squaredNorm();
  d.rowwise() += b.rowwise().squaredNorm().transpose();
  return d.cwiseMax(0.0);
}

}  // namespace detail

// Median of pairwise Euclidean distances over the pooled set (distinct pairs).
// Pools larger than max_points are thinned to an even stride first.
inline double median_heuristic(const Eigen::MatrixXd& a, const Eigen::MatrixXd& b, Eigen::Index max_points = 2000) {
  const Eigen::Index total = a.rows() + b.rows();
  const Eigen::Index stride = std::max<Eigen::Index>(1, (total + max_points - 1) / max_points);
  std::vector<Eigen::VectorXd> pts;
  for (Eigen::Index i = 0; i < total; i += stride) {
    pts.push_back(i < a.rows() ? Eigen::VectorXd(a.row(i).transpose()) : Eigen::VectorXd(b.row(i - a.rows()).transpose()));
  }
  std::vector<double> v;
  v.reserve(pts.size() * (pts.size() - 1) / 2);
  for (std::size_t i = 0; i < pts.size(); ++i)
    for (std::size_t j = i + 1; j < pts.size(); ++j) v.push_back((pts[i] - pts[j]).norm());
  if (v.empty()) return 1.0;
  auto mid = v.begin() + static_cast<std::ptrdiff_t>(v.size() / 2);
  std::nth_element(v.begin(), mid, v.end());
  return *mid > 0 ? *mid : 1.0;
}

// Biased (V-statistic) MMD² with kernel exp(−‖a−b‖²/(2 h²)). A nonpositive
// bandwidth selects the median heuristic.
inline double mmd(const Eigen::MatrixXd& a, const Eigen::MatrixXd& b, double bandwidth = 0.0) {
  if (a.rows() == 0 || b.rows() == 0) throw ContractViolation("mmd: empty sample set");
  if (a.cols() != b.cols()) throw ContractViolation("mmd: dimension mismatch");
  const double h = bandwidth > 0 ? bandwidth : median_heuristic(a, b);
  const double s = -0.5 / (h * h);
  // Row blocks keep the kernel matrix out of memory.
  auto kmean = [&](const Eigen::MatrixXd& x, const Eigen::MatrixXd& y) {
    const Eigen::Index block = 256;
    double sum = 0.0;
    for (Eigen::Index r = 0; r < x.rows(); r += block) {
      const Eigen::Index rows = std::min(block, x.rows() - r);
      sum += (detail::sq_dists(x.middleRows(r, rows), y).array() * s).exp().sum();
    }
    return sum / (static_cast<double>(x.rows()) * static_cast<double>(y.rows()));
  };
  return std::max(0.0, kmean(a, a) + kmean(b, b) - 2.0 * kmean(a, b));
}

// P(out > in) + ½ P(out = in) over all pairs.
inline double ood_auc(const Eigen::VectorXd& scores_in, const Eigen::VectorXd& scores_out) {
  if (scores_in.size() == 0 || scores_out.size() == 0) throw ContractViolation("ood_auc: empty score set");
  std::vector<double> in(scores_in.data(), scores_in.data() + scores_in.size());
  std::sort(in.begin(), in.end());
  double wins = 0.0;
  for (Eigen::Index k = 0; k < scores_out.size(); ++k) {
    const double s = scores_out(k);
    const auto lo = std::lower_bound(in.begin(), in.end(), s);
    const auto hi = std::upper_bound(lo, in.end(), s);
    wins += static_cast<double>(lo - in.begin()) + 0.5 * static_cast<double>(hi - lo);
  }
  return wins / (static_cast<double>(in.size()) * static_cast<double>(scores_out.size()));
}

struct OodResult {
  double auc_log_likelihood = 0.0;  // low likelihood flags outliers
  double auc_reconstruction = 0.0;  // high reconstruction error flags outliers
  double best() const { return std::max(auc_log_likelihood, auc_reconstruction); }
};

inline OodResult ood_auc_both(const Eigen::VectorXd& loglik_in, const Eigen::VectorXd& loglik_out,
                              const Eigen::VectorXd& recon_in, const Eigen::VectorXd& recon_out) {
  return {ood_auc(-loglik_in, -loglik_out), ood_auc(recon_in, recon_out)};
}

// log of the Gaussian-kernel density estimate at θ*.
inline double kde_log_posterior(const Eigen::MatrixXd& samples, const Eigen::VectorXd& theta_star,
                                double bandwidth = 0.1) {
  if (samples.rows() == 0) throw ContractViolation("kde: empty chain");
  if (samples.cols() != theta_star.size()) throw ContractViolation("kde: dimension mismatch");
  if (!(bandwidth > 0)) throw ContractViolation("kde: bandwidth must be positive");
  const auto dim = static_cast<double>(samples.cols());
  const Eigen::ArrayXd z =
      -0.5 * (samples.rowwise() - theta_star.transpose()).rowwise().squaredNorm().array() / (bandwidth * bandwidth);
  const double m = z.maxCoeff();
  return m + std::log((z - m).exp().mean()) - 0.5 * dim * std::log(2 * std::numbers::pi * bandwidth * bandwidth);
}

inline double kde_log_posterior(const Chain& chain, const Eigen::VectorXd& theta_star, double bandwidth = 0.1) {
  return kde_log_posterior(chain.samples, theta_star, bandwidth);
}

// Midpoint-rule integral of exp(logprob) over an axis-aligned box of up to
// three dimensions. logprob maps a batch (rows x dim) to rows log densities.
inline double grid_normalization(const std::function<Eigen::VectorXd(const Eigen::MatrixXd&)>& logprob,
                                 const std::vector<std::pair<double, double>>& bounds, int resolution) {
  const auto dim = static_cast<Eigen::Index>(bounds.size());
  if (dim < 1 || dim > 3) throw ContractViolation("grid_normalization: dimension must be 1 to 3");
  if (resolution < 1) throw ContractViolation("grid_normalization: resolution must be positive");
  std::vector<double> width(static_cast<std::size_t>(dim));
  double cell = 1.0;
  for (Eigen::Index k = 0; k < dim; ++k) {
    const auto [lo, hi] = bounds[static_cast<std::size_t>(k)];
    if (!(hi > lo)) throw ContractViolation("grid_normalization: empty interval");
    width[static_cast<std::size_t>(k)] = (hi - lo) / resolution;
    cell *= width[static_cast<std::size_t>(k)];
  }
  long total = 1;
  for (Eigen::Index k = 0; k < dim; ++k) total *= resolution;
  const long chunk = 20000;
  double sum = 0.0;
  for (long start = 0; start < total; start += chunk) {
    const long rows = std::min(chunk, total - start);
    Eigen::MatrixXd pts(rows, dim);
    for (long r = 0; r < rows; ++r) {
      long idx = start + r;
      for (Eigen::Index k = dim - 1; k >= 0; --k) {
        const long i = idx % resolution;
        idx /= resolution;
        pts(r, k) = bounds[static_cast<std::size_t>(k)].first + (static_cast<double>(i) + 0.5) * width[static_cast<std::size_t>(k)];
      }
    }
    sum += logprob(pts).array().exp().sum();
  }
  return sum * cell;
}

}  // namespace mflow::eval
