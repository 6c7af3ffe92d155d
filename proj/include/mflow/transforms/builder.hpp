#pragma once

#include <memory>
#include <numeric>
#include <random>
#include <string>
#include <vector>

#include "mflow/transforms/coupling.hpp"
#include "mflow/transforms/linear.hpp"
#include "mflow/transforms/transform.hpp"

namespace mflow::tf {

enum class CouplingType { RQSpline, Affine };

struct FlowArchitecture {
  int layers = 5;
  CouplingType coupling = CouplingType::RQSpline;
  SplineConfig spline;
  ResidualNetConfig net;
  bool permutations = true;  // random permutation after every coupling
  bool lu_linear = false;    // LU linear layer after every coupling instead
};

// Coupling layers interspersed with random permutations (or LU-linear layers).
// Parameters live under `prefix`. Each coupling takes the parity whose
// transformed half holds the input coordinates transformed least recently, so
// the alternation is over input coordinates rather than slots. Alternating
// slots after random permutations can transform the same coordinate in every
// layer, which in 2-D restricts the learnable manifolds to graphs over one axis.
inline std::unique_ptr<CompositeTransform> build_flow(nd::ParamStore& params, const std::string& prefix,
                                                      Eigen::Index dim, Eigen::Index context_dim,
                                                      const FlowArchitecture& arch, std::mt19937_64& rng) {
  auto flow = std::make_unique<CompositeTransform>(dim);
  std::vector<Eigen::Index> origin(static_cast<std::size_t>(dim));  // input coordinate held by each slot
  std::iota(origin.begin(), origin.end(), Eigen::Index{0});
  std::vector<long> last(static_cast<std::size_t>(dim), -1L - arch.layers);  // layer that last transformed each input coordinate
  const auto staleness = [&](const CouplingMask& m, long layer) {
    double k = 0;
    for (auto j : m.transformed) k += static_cast<double>(layer - last[static_cast<std::size_t>(origin[static_cast<std::size_t>(j)])]);
    return k / static_cast<double>(m.transformed.size());
  };
  for (int i = 0; i < arch.layers; ++i) {
    const std::string p = prefix + "." + std::to_string(i);
    auto mask = CouplingMask::alternating(dim, i % 2);
    if (const auto other = CouplingMask::alternating(dim, 1 - i % 2); staleness(other, i) > staleness(mask, i)) mask = other;
    for (auto j : mask.transformed) last[static_cast<std::size_t>(origin[static_cast<std::size_t>(j)])] = i;
    if (arch.coupling == CouplingType::RQSpline) {
      flow->append(std::make_unique<RQSplineCoupling>(params, p, dim, context_dim, mask, arch.spline, arch.net, rng));
    } else {
      flow->append(std::make_unique<AffineCoupling>(params, p, dim, context_dim, mask, arch.net, rng));
    }
    if (dim > 1 && arch.lu_linear) {
      flow->append(std::make_unique<LULinear>(params, p + ".lu", dim));
    } else if (dim > 1 && arch.permutations) {
      auto perm = Permutation::random(dim, rng);
      std::vector<Eigen::Index> moved(origin.size());
      for (std::size_t j = 0; j < perm.size(); ++j) moved[j] = origin[static_cast<std::size_t>(perm[j])];
      origin = std::move(moved);
      flow->append(std::make_unique<Permutation>(std::move(perm)));
    }
  }
  return flow;
}

// Structure of a flow as text: layer kinds, coupling masks and permutations.
// Two flows with equal layouts and equal parameters compute the same map.
inline std::string layout(const Transform& t) {
  const auto indices = [](const std::vector<Eigen::Index>& v) {
    std::string s;
    for (auto j : v) s += (s.empty() ? "" : ",") + std::to_string(j);
    return "[" + s + "]";
  };
  if (const auto* c = dynamic_cast<const CompositeTransform*>(&t)) {
    std::string s;
    for (std::size_t i = 0; i < c->size(); ++i) s += (i ? " " : "") + layout(c->at(i));
    return s;
  }
  if (const auto* c = dynamic_cast<const CouplingBase*>(&t)) return t.kind() + indices(c->mask().transformed);
  if (const auto* p = dynamic_cast<const Permutation*>(&t)) return t.kind() + indices(p->indices());
  return t.kind();
}

}  // namespace mflow::tf
