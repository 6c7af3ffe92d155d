#pragma once

#include <cmath>
#include <functional>
#include <random>

#include <Eigen/Dense>

#include "mflow/errors.hpp"

namespace mflow::eval {

using LogDensity = std::function<double(const Eigen::VectorXd&)>;

struct Chain {
  Eigen::MatrixXd samples;  // (steps − burn_in) x dim, burn-in already dropped
  long proposed = 0;        // every step, burn-in included
  long accepted = 0;
  long outside_support = 0;  // proposals with log prior = −inf
  double step_size = 0.0;
  long burn_in = 0;

  double acceptance_rate() const { return proposed ? static_cast<double>(accepted) / static_cast<double>(proposed) : 0.0; }
};

struct MetropolisOptions {
  long steps = 5000;
  double step_size = 0.15;  // std of the isotropic Gaussian proposal
  long burn_in = 100;
};

// Random-walk Metropolis-Hastings on log_likelihood + log_prior. A log prior
// of −inf marks points outside the support; they are never accepted.
inline Chain metropolis_hastings(const LogDensity& log_likelihood, const LogDensity& log_prior,
                                 const Eigen::VectorXd& theta_init, const MetropolisOptions& opt,
                                 std::mt19937_64& rng) {
  if (opt.steps <= opt.burn_in || opt.burn_in < 0) throw ContractViolation("mcmc: need steps > burn_in >= 0");
  if (!(opt.step_size > 0)) throw ContractViolation("mcmc: step size must be positive");
  const double lp0 = log_prior(theta_init);
  const double ll0 = std::isfinite(lp0) ? log_likelihood(theta_init) : lp0;
  if (!std::isfinite(lp0) || !std::isfinite(ll0)) {
    throw NumericalError("mcmc: log density at the initial point is not finite");
  }

  Chain c;
  c.step_size = opt.step_size;
  c.burn_in = opt.burn_in;
  c.samples.resize(opt.steps - opt.burn_in, theta_init.size());
  std::normal_distribution<double> normal;
  std::uniform_real_distribution<double> uniform;

  Eigen::VectorXd theta = theta_init;
  double current = lp0 + ll0;
  for (long s = 0; s < opt.steps; ++s) {
    Eigen::VectorXd prop = theta;
    for (Eigen::Index k = 0; k < prop.size(); ++k) prop(k) += opt.step_size * normal(rng);
    ++c.proposed;
    const double lp = log_prior(prop);
    if (std::isfinite(lp)) {
      const double target = lp + log_likelihood(prop);
      // Accept with probability min(1, exp(Δ)); NaN targets are rejected.
      if (target >= current || uniform(rng) < std::exp(target - current)) {
        theta = prop;
        current = target;
        ++c.accepted;
      }
    } else {
      ++c.outside_support;
    }
    if (s >= opt.burn_in) c.samples.row(s - opt.burn_in) = theta.transpose();
  }
  return c;
}

// log of a uniform density on the box [lo, hi]^dim; −inf outside.
inline LogDensity uniform_box_prior(double lo, double hi, Eigen::Index dim) {
  if (!(hi > lo)) throw ContractViolation("uniform prior: need hi > lo");
  const double logp = -static_cast<double>(dim) * std::log(hi - lo);
  return [=](const Eigen::VectorXd& t) {
    if (t.size() != dim) throw ContractViolation("uniform prior: dimension mismatch");
    return ((t.array() >= lo) && (t.array() <= hi)).all() ? logp : -INFINITY;
  };
}

}  // namespace mflow::eval
