#pragma once

#include <algorithm>
#include <cmath>
#include <functional>
#include <map>
#include <string>
#include <unordered_map>
#include <unordered_set>
#include <vector>

#include "mflow/ndiff/param_store.hpp"
#include "mflow/ndiff/tensor.hpp"

namespace mflow::nd {

namespace detail {

// Tracked nodes reachable from `root`, parents before children.
inline std::vector<Tensor> topo_order(const Tensor& root) {
  std::vector<Tensor> order;
  if (!root.tracked()) return order;
  std::unordered_set<const Node*> seen;
  std::vector<std::pair<Tensor, std::size_t>> stack;
  stack.emplace_back(root, 0);
  seen.insert(root.node());
  while (!stack.empty()) {
    auto& [t, next] = stack.back();
    const auto& parents = t.parents();
    if (next < parents.size()) {
      const Tensor& p = parents[next++];
      if (p.tracked() && seen.insert(p.node()).second) stack.emplace_back(p, 0);
    } else {
      order.push_back(std::move(t));
      stack.pop_back();
    }
  }
  return order;
}

}  // namespace detail

using GradTable = std::unordered_map<const Node*, Array>;

// Reverse sweep from a scalar loss. Every node is visited once, after all of
// its consumers; shared subexpressions accumulate additively.
inline GradTable backward(const Tensor& loss) {
  if (!loss.defined() || loss.rows() != 1 || loss.cols() != 1) {
    throw ContractViolation("backward: loss must be a 1x1 scalar");
  }
  GradTable grads;
  const auto order = detail::topo_order(loss);
  if (order.empty()) return grads;
  grads[loss.node()] = Array::Ones(1, 1);
  std::vector<Array*> slots;
  for (auto it = order.rbegin(); it != order.rend(); ++it) {
    const Node* node = it->node();
    auto g = grads.find(node);
    if (g == grads.end() || !node->op) continue;
    // References into an unordered_map survive rehashing; iterators do not.
    const Array& gout = g->second;
    slots.assign(node->parents.size(), nullptr);
    for (std::size_t i = 0; i < node->parents.size(); ++i) {
      const Tensor& p = node->parents[i];
      if (!p.tracked()) continue;
      auto [slot, inserted] = grads.try_emplace(p.node());
      if (inserted) slot->second = Array::Zero(p.rows(), p.cols());
      slots[i] = &slot->second;
    }
    node->op->backward(*node, gout, slots);
  }
  return grads;
}

// d(loss)/d(param) for every parameter in the store; zero where the parameter
// does not participate.
inline std::map<std::string, Array> grad(const Tensor& loss, const ParamStore& params) {
  const GradTable table = backward(loss);
  std::map<std::string, Array> out;
  for (const auto& [name, t] : params) {
    auto it = table.find(t.node());
    out.emplace(name, it == table.end() ? Array::Zero(t.rows(), t.cols()) : it->second);
  }
  return out;
}

// Gradients of `loss` with respect to arbitrary tensors (e.g. variables).
inline std::vector<Array> grad(const Tensor& loss, const std::vector<Tensor>& wrt) {
  const GradTable table = backward(loss);
  std::vector<Array> out;
  for (const auto& t : wrt) {
    auto it = table.find(t.node());
    out.push_back(it == table.end() ? Array::Zero(t.rows(), t.cols()) : it->second);
  }
  return out;
}

using TensorMap = std::function<Tensor(const Tensor&)>;

// Jacobian-vector products of `func` at `point` for several tangent directions.
// `func` is evaluated once. Each returned tangent is a graph node, so reverse
// mode through it yields second derivatives (w.r.t. parameters and w.r.t. the
// upstream of `point`).
struct JvpResult {
  Tensor value;
  std::vector<Tensor> tangents;
};

inline JvpResult jvp_with_value(const TensorMap& func, const Tensor& point, const std::vector<Array>& tangents) {
  for (const auto& t : tangents) {
    if (t.rows() != point.rows() || t.cols() != point.cols()) {
      throw ContractViolation("jvp: tangent shape does not match point");
    }
  }
  const Tensor seed = tracked_identity(point);
  const Tensor out = func(seed);
  const auto order = detail::topo_order(out);

  std::vector<Tensor> results;
  results.reserve(tangents.size());
  std::unordered_map<const Node*, Tensor> tan;
  std::vector<Tensor> parent_tangents;
  for (const auto& t : tangents) {
    tan.clear();
    tan[seed.node()] = constant(t);
    for (const Tensor& self : order) {
      const Node* node = self.node();
      if (node == seed.node() || !node->op) continue;
      bool any = false;
      parent_tangents.assign(node->parents.size(), Tensor());
      for (std::size_t i = 0; i < node->parents.size(); ++i) {
        auto it = tan.find(node->parents[i].node());
        if (it != tan.end()) {
          parent_tangents[i] = it->second;
          any = true;
        }
      }
      if (!any) continue;
      tan[node] = node->op->jvp(self, parent_tangents);
    }
    auto it = tan.find(out.node());
    results.push_back(it == tan.end() ? zeros_like(out) : it->second);
  }
  return {out, std::move(results)};
}

inline std::vector<Tensor> jvp(const TensorMap& func, const Tensor& point, const std::vector<Array>& tangents) {
  return jvp_with_value(func, point, tangents).tangents;
}

inline Tensor jvp(const TensorMap& func, const Tensor& point, const Array& tangent) {
  return jvp(func, point, std::vector<Array>{tangent}).front();
}

// Result of comparing analytic gradients against central differences.
struct GradientCheckReport {
  bool passed = false;
  double max_relative_error = 0.0;
  std::string worst_parameter;
  Eigen::Index worst_index = -1;
  std::size_t checked = 0;
};

// Central differences with step `step` on every scalar of every parameter.
// Relative error uses max(|analytic|, |numeric|, floor) as denominator, where
// floor = 1e-6 * max(1, max |analytic|) absorbs entries that are zero up to
// rounding.
inline GradientCheckReport gradient_check(const std::function<Tensor()>& loss_fn, ParamStore& params,
                                          double tolerance, double step = 1e-5) {
  GradientCheckReport report;
  const auto analytic = grad(loss_fn(), params);
  double gmax = 1.0;
  for (const auto& [_, g] : analytic)
    if (g.size() > 0) gmax = std::max(gmax, g.cwiseAbs().maxCoeff());
  const double floor = 1e-6 * gmax;

  NoGradGuard no_grad;
  for (auto& [name, tensor] : params) {
    Array& value = tensor.mutable_param_value();
    const Array& ga = analytic.at(name);
    for (Eigen::Index k = 0; k < value.size(); ++k) {
      const double orig = value.data()[k];
      value.data()[k] = orig + step;
      const double up = loss_fn().item();
      value.data()[k] = orig - step;
      const double down = loss_fn().item();
      value.data()[k] = orig;
      const double numeric = (up - down) / (2.0 * step);
      const double a = ga.data()[k];
      const double rel = std::abs(a - numeric) / std::max({std::abs(a), std::abs(numeric), floor});
      ++report.checked;
      if (!(rel <= report.max_relative_error)) {
        report.max_relative_error = std::isfinite(rel) ? rel : INFINITY;
        report.worst_parameter = name;
        report.worst_index = k;
      }
    }
  }
  report.passed = report.max_relative_error < tolerance;
  return report;
}

}  // namespace mflow::nd
