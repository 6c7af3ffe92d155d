#pragma once

#include <Eigen/Dense>

#include <algorithm>
#include <array>
#include <numeric>
#include <random>
#include <string>
#include <vector>

#include <boost/numeric/odeint.hpp>

#include "mflow/errors.hpp"
#include "mflow/ndiff/tensor.hpp"

namespace mflow::data {

using nd::Array;

struct LorenzConfig {
  double sigma = 10.0;
  double beta = 8.0 / 3.0;
  double rho = 28.0;
  int trajectories = 100;
  double t_end = 1000.0;
  double warmup = 50.0;
  double seed_spread = 0.1;  // initial states ~ N((1,1,1), spread² I)
  double rel_tol = 1e-8;
  double abs_tol = 1e-10;

  void validate() const {
    if (!(warmup >= 0 && warmup < t_end)) throw ContractViolation("lorenz: need 0 <= warm-up < t_end");
    if (trajectories < 1) throw ContractViolation("lorenz: need at least one trajectory");
  }
};

using LorenzState = std::array<double, 3>;

inline LorenzState lorenz_rhs(const LorenzState& x, const LorenzConfig& c = {}) {
  return {c.sigma * (x[1] - x[0]), x[0] * (c.rho - x[2]) - x[1], x[0] * x[1] - c.beta * x[2]};
}

// Per-feature affine standardization; stats are kept with the data.
struct Standardization {
  Eigen::RowVectorXd mean;
  Eigen::RowVectorXd std;

  static Standardization fit(const Array& x) {
    Standardization s;
    s.mean = x.colwise().mean();
    s.std = ((x.rowwise() - s.mean).array().square().colwise().mean()).sqrt().matrix();
    if ((s.std.array() <= 0).any()) throw NumericalError("standardization: a feature has zero variance");
    return s;
  }
  Array apply(const Array& x) const {
    return ((x.rowwise() - mean).array().rowwise() / std.array()).matrix();
  }
  Array invert(const Array& x) const {
    return ((x.array().rowwise() * std.array()).matrix().rowwise() + mean);
  }
};

struct LorenzSample {
  Array x;    // standardized, N x 3
  Array raw;  // before standardization
  Standardization stats;
  std::vector<int> trajectory;
  std::vector<double> time;
};

// Uniform draws over (trajectory, t in [warm-up, t_end]); states come from the
// dense output of an adaptive Dormand-Prince 5(4) integration of each seed.
inline LorenzSample sample_lorenz(Eigen::Index count, const LorenzConfig& cfg, std::mt19937_64& rng) {
  namespace ode = boost::numeric::odeint;
  if (count <= 0) throw ContractViolation("sample_lorenz: count must be positive");
  cfg.validate();

  std::normal_distribution<double> spread(1.0, cfg.seed_spread);
  std::vector<LorenzState> seeds(static_cast<std::size_t>(cfg.trajectories));
  for (auto& s : seeds) s = {spread(rng), spread(rng), spread(rng)};

  LorenzSample out;
  out.trajectory.resize(static_cast<std::size_t>(count));
  out.time.resize(static_cast<std::size_t>(count));
  std::uniform_int_distribution<int> pick(0, cfg.trajectories - 1);
  std::uniform_real_distribution<double> when(cfg.warmup, cfg.t_end);
  for (Eigen::Index k = 0; k < count; ++k) {
    out.trajectory[static_cast<std::size_t>(k)] = pick(rng);
    out.time[static_cast<std::size_t>(k)] = when(rng);
  }

  std::vector<std::vector<Eigen::Index>> by_traj(static_cast<std::size_t>(cfg.trajectories));
  for (Eigen::Index k = 0; k < count; ++k) by_traj[static_cast<std::size_t>(out.trajectory[static_cast<std::size_t>(k)])].push_back(k);

  out.raw.resize(count, 3);
  auto system = [&cfg](const LorenzState& x, LorenzState& dxdt, double) { dxdt = lorenz_rhs(x, cfg); };
  for (int tr = 0; tr < cfg.trajectories; ++tr) {
    auto& idx = by_traj[static_cast<std::size_t>(tr)];
    if (idx.empty()) continue;
    std::sort(idx.begin(), idx.end(), [&](Eigen::Index a, Eigen::Index b) {
      return out.time[static_cast<std::size_t>(a)] < out.time[static_cast<std::size_t>(b)];
    });
    std::vector<double> times{0.0};
    for (auto k : idx) times.push_back(out.time[static_cast<std::size_t>(k)]);
    LorenzState state = seeds[static_cast<std::size_t>(tr)];
    std::size_t seen = 0;
    auto observer = [&](const LorenzState& x, double) {
      if (seen > 0) {
        const auto k = idx[seen - 1];
        out.raw.row(k) << x[0], x[1], x[2];
      }
      ++seen;
    };
    try {
      auto stepper = ode::make_dense_output(cfg.abs_tol, cfg.rel_tol, ode::runge_kutta_dopri5<LorenzState>());
      ode::integrate_times(stepper, system, state, times.begin(), times.end(), 1e-3, observer,
                           ode::max_step_checker(10'000'000));
    } catch (const std::exception& e) {
      throw SolverError("lorenz: integration failed on trajectory " + std::to_string(tr) + ": " + e.what(), 0.0);
    }
    if (seen != times.size()) {
      throw SolverError("lorenz: trajectory " + std::to_string(tr) + " stopped early", 0.0);
    }
  }
  if (!out.raw.allFinite()) throw SolverError("lorenz: non-finite state", 0.0);
  out.stats = Standardization::fit(out.raw);
  out.x = out.stats.apply(out.raw);
  return out;
}

}  // namespace mflow::data
