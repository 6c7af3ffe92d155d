#pragma once

// Dense float64 arrays on a reverse-mode tape.
//
// Every Tensor is a handle to an immutable graph node. Nodes that depend on a
// tracked leaf (a parameter or a variable) remember their parents and the
// operation that produced them; everything else is a constant. Each operation
// knows two derivative rules:
//   * backward: numeric vector-Jacobian product used by reverse mode;
//   * jvp: the output tangent expressed with other graph operations, so that a
//     tangent built by forward propagation is itself differentiable.
// Reverse mode over those tangents gives the second-order quantities needed by
// losses that contain Jacobian columns.

#include <Eigen/Dense>

#include <algorithm>
#include <atomic>
#include <cmath>
#include <functional>
#include <memory>
#include <span>
#include <string>
#include <utility>
#include <vector>

#include "mflow/errors.hpp"

namespace mflow::nd {

using Array = Eigen::Matrix<double, Eigen::Dynamic, Eigen::Dynamic, Eigen::RowMajor>;
using IndexArray = Eigen::Matrix<Eigen::Index, Eigen::Dynamic, Eigen::Dynamic, Eigen::RowMajor>;

class Tensor;
struct Node;

struct Op {
  virtual ~Op() = default;
  virtual const char* name() const = 0;
  // grads[i] is null when parent i does not need a gradient.
  virtual void backward(const Node& self, const Array& gout, std::span<Array* const> grads) const = 0;
  // tangents[i] may be undefined, meaning a zero tangent for parent i.
  virtual Tensor jvp(const Tensor& self, std::span<const Tensor> tangents) const = 0;
};

struct Node {
  Array value;
  std::vector<Tensor> parents;
  std::unique_ptr<Op> op;
  bool tracked = false;
  bool is_param = false;
};

namespace detail {
inline thread_local int no_grad_depth = 0;
}  // namespace detail

// Parameters read inside this scope behave as constants. Variables created with
// variable() and jvp seeds stay tracked, so tangent propagation still works.
class NoGradGuard {
 public:
  NoGradGuard() { ++detail::no_grad_depth; }
  ~NoGradGuard() { --detail::no_grad_depth; }
  NoGradGuard(const NoGradGuard&) = delete;
  NoGradGuard& operator=(const NoGradGuard&) = delete;
};

inline bool grad_enabled() { return detail::no_grad_depth == 0; }

class Tensor {
 public:
  Tensor() = default;
  explicit Tensor(std::shared_ptr<Node> node) : node_(std::move(node)) {}

  bool defined() const { return static_cast<bool>(node_); }
  const Array& value() const { return node_->value; }
  Eigen::Index rows() const { return node_->value.rows(); }
  Eigen::Index cols() const { return node_->value.cols(); }
  double item() const {
    if (rows() != 1 || cols() != 1) throw ContractViolation("item() on non-scalar tensor");
    return node_->value(0, 0);
  }
  bool tracked() const {
    return node_ && node_->tracked && !(node_->is_param && !grad_enabled());
  }
  bool is_param() const { return node_ && node_->is_param; }
  const Node* node() const { return node_.get(); }
  const std::shared_ptr<Node>& shared() const { return node_; }
  const std::vector<Tensor>& parents() const { return node_->parents; }

  // Parameters are the only nodes whose value may change, and only between steps.
  Array& mutable_param_value() {
    if (!is_param()) throw ContractViolation("only parameters are mutable");
    return node_->value;
  }

 private:
  std::shared_ptr<Node> node_;
};

inline Tensor constant(Array value) {
  auto n = std::make_shared<Node>();
  n->value = std::move(value);
  return Tensor(std::move(n));
}

inline Tensor constant(Eigen::Index rows, Eigen::Index cols, double fill) {
  return constant(Array::Constant(rows, cols, fill));
}

inline Tensor scalar(double v) { return constant(Array::Constant(1, 1, v)); }

inline Tensor parameter(Array value) {
  auto n = std::make_shared<Node>();
  n->value = std::move(value);
  n->tracked = true;
  n->is_param = true;
  return Tensor(std::move(n));
}

// A tracked non-parameter leaf (inputs we want derivatives with respect to).
inline Tensor variable(Array value) {
  auto n = std::make_shared<Node>();
  n->value = std::move(value);
  n->tracked = true;
  return Tensor(std::move(n));
}

namespace detail {

template <class Backward, class Jvp>
struct LambdaOp final : Op {
  const char* op_name;
  Backward bw;
  Jvp jv;
  LambdaOp(const char* n, Backward b, Jvp j) : op_name(n), bw(std::move(b)), jv(std::move(j)) {}
  const char* name() const override { return op_name; }
  void backward(const Node& self, const Array& g, std::span<Array* const> grads) const override {
    bw(self, g, grads);
  }
  Tensor jvp(const Tensor& self, std::span<const Tensor> t) const override { return jv(self, t); }
};

template <class Backward, class Jvp>
Tensor make(const char* name, Array value, std::vector<Tensor> parents, Backward bw, Jvp jv,
            bool force_tracked = false) {
  auto n = std::make_shared<Node>();
  n->value = std::move(value);
  bool tracked = force_tracked;
  for (const auto& p : parents) tracked = tracked || p.tracked();
  if (tracked) {
    n->tracked = true;
    n->parents = std::move(parents);
    n->op = std::make_unique<LambdaOp<Backward, Jvp>>(name, std::move(bw), std::move(jv));
  }
  return Tensor(std::move(n));
}

inline void require_same_shape(const Tensor& a, const Tensor& b, const char* where) {
  if (a.rows() != b.rows() || a.cols() != b.cols()) {
    throw ContractViolation(std::string(where) + ": shape mismatch (" + std::to_string(a.rows()) +
                            "x" + std::to_string(a.cols()) + " vs " + std::to_string(b.rows()) +
                            "x" + std::to_string(b.cols()) + ")");
  }
}

}  // namespace detail

// ---------------------------------------------------------------------------
// Shape plumbing

inline Tensor broadcast_to(const Tensor& a, Eigen::Index rows, Eigen::Index cols) {
  if (a.rows() == rows && a.cols() == cols) return a;
  if ((a.rows() != rows && a.rows() != 1) || (a.cols() != cols && a.cols() != 1)) {
    throw ContractViolation("broadcast_to: incompatible shapes");
  }
  Array v = a.value().replicate(rows / a.rows(), cols / a.cols());
  return detail::make(
      "broadcast", std::move(v), {a},
      [](const Node& self, const Array& g, std::span<Array* const> gr) {
        if (!gr[0]) return;
        const Array& src = self.parents[0].value();
        if (src.rows() == 1 && src.cols() == 1) {
          (*gr[0])(0, 0) += g.sum();
        } else if (src.rows() == 1) {
          *gr[0] += g.colwise().sum();
        } else {
          *gr[0] += g.rowwise().sum();
        }
      },
      [rows, cols](const Tensor&, std::span<const Tensor> t) { return broadcast_to(t[0], rows, cols); });
}

namespace detail {
inline std::pair<Tensor, Tensor> broadcast_pair(const Tensor& a, const Tensor& b) {
  const auto r = std::max(a.rows(), b.rows());
  const auto c = std::max(a.cols(), b.cols());
  return {broadcast_to(a, r, c), broadcast_to(b, r, c)};
}
}  // namespace detail

Tensor operator+(const Tensor& a, const Tensor& b);
Tensor operator-(const Tensor& a, const Tensor& b);
Tensor operator*(const Tensor& a, const Tensor& b);
Tensor operator/(const Tensor& a, const Tensor& b);
Tensor operator-(const Tensor& a);
Tensor operator*(const Tensor& a, double s);
Tensor operator+(const Tensor& a, double s);

namespace detail {
// Sum of possibly-undefined tangents; undefined if all are.
inline Tensor tangent_sum(const Tensor& a, const Tensor& b) {
  if (a.defined() && b.defined()) return a + b;
  return a.defined() ? a : b;
}
}  // namespace detail

inline Tensor zeros_like(const Tensor& a) { return constant(a.rows(), a.cols(), 0.0); }

// ---------------------------------------------------------------------------
// Elementwise arithmetic

inline Tensor operator+(const Tensor& a0, const Tensor& b0) {
  auto [a, b] = detail::broadcast_pair(a0, b0);
  return detail::make(
      "add", a.value() + b.value(), {a, b},
      [](const Node&, const Array& g, std::span<Array* const> gr) {
        if (gr[0]) *gr[0] += g;
        if (gr[1]) *gr[1] += g;
      },
      [](const Tensor&, std::span<const Tensor> t) { return detail::tangent_sum(t[0], t[1]); });
}

inline Tensor operator-(const Tensor& a) {
  return detail::make(
      "neg", -a.value(), {a},
      [](const Node&, const Array& g, std::span<Array* const> gr) {
        if (gr[0]) *gr[0] -= g;
      },
      [](const Tensor&, std::span<const Tensor> t) { return -t[0]; });
}

inline Tensor operator-(const Tensor& a0, const Tensor& b0) {
  auto [a, b] = detail::broadcast_pair(a0, b0);
  return detail::make(
      "sub", a.value() - b.value(), {a, b},
      [](const Node&, const Array& g, std::span<Array* const> gr) {
        if (gr[0]) *gr[0] += g;
        if (gr[1]) *gr[1] -= g;
      },
      [](const Tensor&, std::span<const Tensor> t) {
        if (t[0].defined() && t[1].defined()) return t[0] - t[1];
        return t[0].defined() ? t[0] : -t[1];
      });
}

inline Tensor operator*(const Tensor& a0, const Tensor& b0) {
  auto [a, b] = detail::broadcast_pair(a0, b0);
  Array v = a.value().cwiseProduct(b.value());
  return detail::make(
      "mul", std::move(v), {a, b},
      [](const Node& self, const Array& g, std::span<Array* const> gr) {
        if (gr[0]) *gr[0] += g.cwiseProduct(self.parents[1].value());
        if (gr[1]) *gr[1] += g.cwiseProduct(self.parents[0].value());
      },
      [](const Tensor& self, std::span<const Tensor> t) {
        const auto& p = self.parents();
        Tensor lhs = t[0].defined() ? t[0] * p[1] : Tensor();
        Tensor rhs = t[1].defined() ? p[0] * t[1] : Tensor();
        return detail::tangent_sum(lhs, rhs);
      });
}

inline Tensor operator/(const Tensor& a0, const Tensor& b0) {
  auto [a, b] = detail::broadcast_pair(a0, b0);
  Array v = a.value().cwiseQuotient(b.value());
  return detail::make(
      "div", std::move(v), {a, b},
      [](const Node& self, const Array& g, std::span<Array* const> gr) {
        const Array& den = self.parents[1].value();
        if (gr[0]) *gr[0] += g.cwiseQuotient(den);
        if (gr[1]) *gr[1] -= g.cwiseProduct(self.value).cwiseQuotient(den);
      },
      [](const Tensor& self, std::span<const Tensor> t) {
        const auto& p = self.parents();
        Tensor lhs = t[0].defined() ? t[0] / p[1] : Tensor();
        Tensor rhs = t[1].defined() ? -(self * t[1] / p[1]) : Tensor();
        return detail::tangent_sum(lhs, rhs);
      });
}

inline Tensor operator*(const Tensor& a, double s) {
  return detail::make(
      "scale", a.value() * s, {a},
      [s](const Node&, const Array& g, std::span<Array* const> gr) {
        if (gr[0]) *gr[0] += g * s;
      },
      [s](const Tensor&, std::span<const Tensor> t) { return t[0] * s; });
}
inline Tensor operator*(double s, const Tensor& a) { return a * s; }
inline Tensor operator/(const Tensor& a, double s) { return a * (1.0 / s); }

inline Tensor operator+(const Tensor& a, double s) {
  Array v = a.value().array() + s;
  return detail::make(
      "shift", std::move(v), {a},
      [](const Node&, const Array& g, std::span<Array* const> gr) {
        if (gr[0]) *gr[0] += g;
      },
      [](const Tensor&, std::span<const Tensor> t) { return t[0]; });
}
inline Tensor operator+(double s, const Tensor& a) { return a + s; }
inline Tensor operator-(const Tensor& a, double s) { return a + (-s); }
inline Tensor operator-(double s, const Tensor& a) { return (-a) + s; }
inline Tensor operator/(double s, const Tensor& a) { return broadcast_to(scalar(s), a.rows(), a.cols()) / a; }

// ---------------------------------------------------------------------------
// Elementwise functions

inline Tensor exp(const Tensor& a) {
  Array v = a.value().array().exp();
  return detail::make(
      "exp", std::move(v), {a},
      [](const Node& self, const Array& g, std::span<Array* const> gr) {
        if (gr[0]) *gr[0] += g.cwiseProduct(self.value);
      },
      [](const Tensor& self, std::span<const Tensor> t) { return t[0] * self; });
}

inline Tensor log(const Tensor& a) {
  Array v = a.value().array().log();
  return detail::make(
      "log", std::move(v), {a},
      [](const Node& self, const Array& g, std::span<Array* const> gr) {
        if (gr[0]) *gr[0] += g.cwiseQuotient(self.parents[0].value());
      },
      [](const Tensor& self, std::span<const Tensor> t) { return t[0] / self.parents()[0]; });
}

inline Tensor sqrt(const Tensor& a) {
  Array v = a.value().array().sqrt();
  return detail::make(
      "sqrt", std::move(v), {a},
      [](const Node& self, const Array& g, std::span<Array* const> gr) {
        if (gr[0]) *gr[0] += (0.5 * g.array() / self.value.array()).matrix();
      },
      [](const Tensor& self, std::span<const Tensor> t) { return t[0] / (self * 2.0); });
}

inline Tensor square(const Tensor& a) {
  Array v = a.value().array().square();
  return detail::make(
      "square", std::move(v), {a},
      [](const Node& self, const Array& g, std::span<Array* const> gr) {
        if (gr[0]) *gr[0] += 2.0 * g.cwiseProduct(self.parents[0].value());
      },
      [](const Tensor& self, std::span<const Tensor> t) { return t[0] * self.parents()[0] * 2.0; });
}

inline Tensor relu(const Tensor& a) {
  Array v = a.value().cwiseMax(0.0);
  return detail::make(
      "relu", std::move(v), {a},
      [](const Node& self, const Array& g, std::span<Array* const> gr) {
        if (gr[0]) *gr[0] += (self.parents[0].value().array() > 0.0).select(g, 0.0).matrix();
      },
      [](const Tensor& self, std::span<const Tensor> t) {
        Array mask = (self.parents()[0].value().array() > 0.0).cast<double>().matrix();
        return t[0] * constant(std::move(mask));
      });
}

inline Tensor sigmoid(const Tensor& a) {
  Array v = (1.0 / (1.0 + (-a.value().array()).exp())).matrix();
  return detail::make(
      "sigmoid", std::move(v), {a},
      [](const Node& self, const Array& g, std::span<Array* const> gr) {
        if (gr[0]) *gr[0] += (g.array() * self.value.array() * (1.0 - self.value.array())).matrix();
      },
      [](const Tensor& self, std::span<const Tensor> t) { return t[0] * self * (1.0 - self); });
}

inline Tensor softplus(const Tensor& a) {
  const auto x = a.value().array();
  Array v = (x.max(0.0) + (-x.abs()).exp().log1p()).matrix();
  return detail::make(
      "softplus", std::move(v), {a},
      [](const Node& self, const Array& g, std::span<Array* const> gr) {
        if (!gr[0]) return;
        const auto s = 1.0 / (1.0 + (-self.parents[0].value().array()).exp());
        *gr[0] += (g.array() * s).matrix();
      },
      [](const Tensor& self, std::span<const Tensor> t) { return t[0] * sigmoid(self.parents()[0]); });
}

inline Tensor tanh(const Tensor& a) {
  Array v = a.value().array().tanh().matrix();
  return detail::make(
      "tanh", std::move(v), {a},
      [](const Node& self, const Array& g, std::span<Array* const> gr) {
        if (gr[0]) *gr[0] += (g.array() * (1.0 - self.value.array().square())).matrix();
      },
      [](const Tensor& self, std::span<const Tensor> t) { return t[0] * (1.0 - square(self)); });
}

Tensor sin(const Tensor& a);
Tensor cos(const Tensor& a);

inline Tensor sin(const Tensor& a) {
  Array v = a.value().array().sin().matrix();
  return detail::make(
      "sin", std::move(v), {a},
      [](const Node& self, const Array& g, std::span<Array* const> gr) {
        if (gr[0]) *gr[0] += (g.array() * self.parents[0].value().array().cos()).matrix();
      },
      [](const Tensor& self, std::span<const Tensor> t) { return t[0] * cos(self.parents()[0]); });
}

inline Tensor cos(const Tensor& a) {
  Array v = a.value().array().cos().matrix();
  return detail::make(
      "cos", std::move(v), {a},
      [](const Node& self, const Array& g, std::span<Array* const> gr) {
        if (gr[0]) *gr[0] -= (g.array() * self.parents[0].value().array().sin()).matrix();
      },
      [](const Tensor& self, std::span<const Tensor> t) { return -(t[0] * sin(self.parents()[0])); });
}

inline Tensor atan2(const Tensor& y0, const Tensor& x0) {
  auto [y, x] = detail::broadcast_pair(y0, x0);
  Array v(y.rows(), y.cols());
  for (Eigen::Index i = 0; i < v.size(); ++i) v.data()[i] = std::atan2(y.value().data()[i], x.value().data()[i]);
  return detail::make(
      "atan2", std::move(v), {y, x},
      [](const Node& self, const Array& g, std::span<Array* const> gr) {
        const auto yv = self.parents[0].value().array();
        const auto xv = self.parents[1].value().array();
        const auto r2 = xv.square() + yv.square();
        if (gr[0]) *gr[0] += (g.array() * xv / r2).matrix();
        if (gr[1]) *gr[1] -= (g.array() * yv / r2).matrix();
      },
      [](const Tensor& self, std::span<const Tensor> t) {
        const auto& p = self.parents();
        const Tensor r2 = square(p[0]) + square(p[1]);
        Tensor a = t[0].defined() ? p[1] * t[0] : Tensor();
        Tensor b = t[1].defined() ? -(p[0] * t[1]) : Tensor();
        return detail::tangent_sum(a, b) / r2;
      });
}

// out = mask ? a : b, mask fixed (no derivative through the selection).
inline Tensor select(const Array& mask, const Tensor& a, const Tensor& b) {
  detail::require_same_shape(a, b, "select");
  if (mask.rows() != a.rows() || mask.cols() != a.cols()) throw ContractViolation("select: mask shape");
  Array v = (mask.array() != 0.0).select(a.value(), b.value());
  return detail::make(
      "select", std::move(v), {a, b},
      [mask](const Node&, const Array& g, std::span<Array* const> gr) {
        if (gr[0]) *gr[0] += (mask.array() != 0.0).select(g, 0.0).matrix();
        if (gr[1]) *gr[1] += (mask.array() != 0.0).select(0.0, g).matrix();
      },
      [mask](const Tensor& self, std::span<const Tensor> t) {
        const auto& p = self.parents();
        return select(mask, t[0].defined() ? t[0] : zeros_like(p[0]), t[1].defined() ? t[1] : zeros_like(p[1]));
      });
}

// ---------------------------------------------------------------------------
// Linear algebra and reductions

Tensor matmul(const Tensor& a, const Tensor& b);
Tensor transpose(const Tensor& a);

inline Tensor matmul(const Tensor& a, const Tensor& b) {
  if (a.cols() != b.rows()) throw ContractViolation("matmul: inner dimensions differ");
  Array v = a.value() * b.value();
  return detail::make(
      "matmul", std::move(v), {a, b},
      [](const Node& self, const Array& g, std::span<Array* const> gr) {
        if (gr[0]) gr[0]->noalias() += g * self.parents[1].value().transpose();
        if (gr[1]) gr[1]->noalias() += self.parents[0].value().transpose() * g;
      },
      [](const Tensor& self, std::span<const Tensor> t) {
        const auto& p = self.parents();
        Tensor lhs = t[0].defined() ? matmul(t[0], p[1]) : Tensor();
        Tensor rhs = t[1].defined() ? matmul(p[0], t[1]) : Tensor();
        return detail::tangent_sum(lhs, rhs);
      });
}

inline Tensor transpose(const Tensor& a) {
  Array v = a.value().transpose();
  return detail::make(
      "transpose", std::move(v), {a},
      [](const Node&, const Array& g, std::span<Array* const> gr) {
        if (gr[0]) *gr[0] += g.transpose();
      },
      [](const Tensor&, std::span<const Tensor> t) { return transpose(t[0]); });
}

inline Tensor sum(const Tensor& a) {
  return detail::make(
      "sum", Array::Constant(1, 1, a.value().sum()), {a},
      [](const Node&, const Array& g, std::span<Array* const> gr) {
        if (gr[0]) gr[0]->array() += g(0, 0);
      },
      [](const Tensor&, std::span<const Tensor> t) { return sum(t[0]); });
}

inline Tensor mean(const Tensor& a) { return sum(a) * (1.0 / static_cast<double>(a.value().size())); }

// Per-row sum across columns: r x c -> r x 1.
inline Tensor sum_cols(const Tensor& a) {
  Array v = a.value().rowwise().sum();
  return detail::make(
      "sum_cols", std::move(v), {a},
      [](const Node&, const Array& g, std::span<Array* const> gr) {
        if (gr[0]) *gr[0] += g.replicate(1, gr[0]->cols());
      },
      [](const Tensor&, std::span<const Tensor> t) { return sum_cols(t[0]); });
}

// Per-column sum across rows: r x c -> 1 x c.
inline Tensor sum_rows(const Tensor& a) {
  Array v = a.value().colwise().sum();
  return detail::make(
      "sum_rows", std::move(v), {a},
      [](const Node&, const Array& g, std::span<Array* const> gr) {
        if (gr[0]) *gr[0] += g.replicate(gr[0]->rows(), 1);
      },
      [](const Tensor&, std::span<const Tensor> t) { return sum_rows(t[0]); });
}

inline Tensor slice_cols(const Tensor& a, Eigen::Index start, Eigen::Index count) {
  if (start < 0 || count < 0 || start + count > a.cols()) throw ContractViolation("slice_cols: out of range");
  Array v = a.value().middleCols(start, count);
  return detail::make(
      "slice_cols", std::move(v), {a},
      [start, count](const Node&, const Array& g, std::span<Array* const> gr) {
        if (gr[0]) gr[0]->middleCols(start, count) += g;
      },
      [start, count](const Tensor&, std::span<const Tensor> t) { return slice_cols(t[0], start, count); });
}

inline Tensor concat_cols(const std::vector<Tensor>& parts) {
  if (parts.empty()) throw ContractViolation("concat_cols: no inputs");
  const auto rows = parts.front().rows();
  Eigen::Index total = 0;
  for (const auto& p : parts) {
    if (p.rows() != rows) throw ContractViolation("concat_cols: row count mismatch");
    total += p.cols();
  }
  Array v(rows, total);
  Eigen::Index off = 0;
  for (const auto& p : parts) {
    v.middleCols(off, p.cols()) = p.value();
    off += p.cols();
  }
  return detail::make(
      "concat_cols", std::move(v), parts,
      [](const Node& self, const Array& g, std::span<Array* const> gr) {
        Eigen::Index o = 0;
        for (std::size_t i = 0; i < self.parents.size(); ++i) {
          const auto c = self.parents[i].cols();
          if (gr[i]) *gr[i] += g.middleCols(o, c);
          o += c;
        }
      },
      [](const Tensor& self, std::span<const Tensor> t) {
        std::vector<Tensor> tp;
        const auto& p = self.parents();
        for (std::size_t i = 0; i < p.size(); ++i) tp.push_back(t[i].defined() ? t[i] : zeros_like(p[i]));
        return concat_cols(tp);
      });
}

// out(:, j) = a(:, perm[j]).
inline Tensor permute_cols(const Tensor& a, const std::vector<Eigen::Index>& perm) {
  if (static_cast<Eigen::Index>(perm.size()) != a.cols()) throw ContractViolation("permute_cols: size");
  Array v(a.rows(), a.cols());
  for (std::size_t j = 0; j < perm.size(); ++j) v.col(static_cast<Eigen::Index>(j)) = a.value().col(perm[j]);
  return detail::make(
      "permute_cols", std::move(v), {a},
      [perm](const Node&, const Array& g, std::span<Array* const> gr) {
        if (!gr[0]) return;
        for (std::size_t j = 0; j < perm.size(); ++j) gr[0]->col(perm[j]) += g.col(static_cast<Eigen::Index>(j));
      },
      [perm](const Tensor&, std::span<const Tensor> t) { return permute_cols(t[0], perm); });
}

// out(i, j) = a(i, index(i, j)).
inline Tensor gather_cols(const Tensor& a, const IndexArray& index) {
  if (index.rows() != a.rows()) throw ContractViolation("gather_cols: row count mismatch");
  Array v(index.rows(), index.cols());
  for (Eigen::Index i = 0; i < index.rows(); ++i)
    for (Eigen::Index j = 0; j < index.cols(); ++j) v(i, j) = a.value()(i, index(i, j));
  return detail::make(
      "gather_cols", std::move(v), {a},
      [index](const Node&, const Array& g, std::span<Array* const> gr) {
        if (!gr[0]) return;
        for (Eigen::Index i = 0; i < index.rows(); ++i)
          for (Eigen::Index j = 0; j < index.cols(); ++j) (*gr[0])(i, index(i, j)) += g(i, j);
      },
      [index](const Tensor&, std::span<const Tensor> t) { return gather_cols(t[0], index); });
}

// Row-major reinterpretation.
inline Tensor reshape(const Tensor& a, Eigen::Index rows, Eigen::Index cols) {
  if (rows * cols != a.value().size()) throw ContractViolation("reshape: size mismatch");
  if (rows == a.rows() && cols == a.cols()) return a;
  Array v = Eigen::Map<const Array>(a.value().data(), rows, cols);
  const auto r0 = a.rows();
  const auto c0 = a.cols();
  return detail::make(
      "reshape", std::move(v), {a},
      [r0, c0](const Node&, const Array& g, std::span<Array* const> gr) {
        if (gr[0]) *gr[0] += Eigen::Map<const Array>(g.data(), r0, c0);
      },
      [rows, cols](const Tensor&, std::span<const Tensor> t) { return reshape(t[0], rows, cols); });
}

// Running sum along columns: out(:, j) = sum_{k <= j} a(:, k).
inline Tensor cumsum_cols(const Tensor& a) {
  Array v = a.value();
  for (Eigen::Index j = 1; j < v.cols(); ++j) v.col(j) += v.col(j - 1);
  return detail::make(
      "cumsum_cols", std::move(v), {a},
      [](const Node&, const Array& g, std::span<Array* const> gr) {
        if (!gr[0]) return;
        Array acc = g;
        for (Eigen::Index j = acc.cols() - 2; j >= 0; --j) acc.col(j) += acc.col(j + 1);
        *gr[0] += acc;
      },
      [](const Tensor&, std::span<const Tensor> t) { return cumsum_cols(t[0]); });
}

inline Tensor softmax_cols(const Tensor& a) {
  Array shift = a.value().rowwise().maxCoeff();
  const Tensor e = exp(a - constant(std::move(shift)));
  return e / sum_cols(e);
}

// Inverse of a square matrix.
inline Tensor matinv(const Tensor& a) {
  if (a.rows() != a.cols()) throw ContractViolation("matinv: matrix not square");
  Eigen::PartialPivLU<Array> lu(a.value());
  Array v = lu.inverse();
  if (!v.allFinite()) throw NumericalError("matinv: singular matrix");
  return detail::make(
      "matinv", std::move(v), {a},
      [](const Node& self, const Array& g, std::span<Array* const> gr) {
        if (gr[0]) gr[0]->noalias() -= self.value.transpose() * g * self.value.transpose();
      },
      [](const Tensor& self, std::span<const Tensor> t) { return -matmul(matmul(self, t[0]), self); });
}

namespace detail {
inline std::atomic<long>& gram_counter() {
  static std::atomic<long> counter{0};
  return counter;
}
}  // namespace detail

// Number of per-row Gram log-determinants evaluated since process start.
inline long gram_evaluations() { return detail::gram_counter().load(); }

// Row i of `gram` holds a row-major n x n symmetric positive-definite matrix.
// Returns log det per row (r x 1). First-order differentiable only.
inline Tensor logdet_spd_rows(const Tensor& gram, Eigen::Index n) {
  if (gram.cols() != n * n) throw ContractViolation("logdet_spd_rows: expected n*n columns");
  const auto rows = gram.rows();
  Array v(rows, 1);
  Array inverses(rows, n * n);
  using Mat = Eigen::Matrix<double, Eigen::Dynamic, Eigen::Dynamic, Eigen::RowMajor>;
  for (Eigen::Index i = 0; i < rows; ++i) {
    Mat g = Eigen::Map<const Mat>(gram.value().row(i).data(), n, n);
    Eigen::LLT<Mat> llt(g);
    if (llt.info() != Eigen::Success) {
      throw GramDegenerateError("Gram matrix is not positive definite (row " + std::to_string(i) + ")");
    }
    v(i, 0) = 2.0 * llt.matrixLLT().diagonal().array().log().sum();
    Mat inv = llt.solve(Mat::Identity(n, n));
    Eigen::Map<Mat>(inverses.row(i).data(), n, n) = inv;
  }
  detail::gram_counter() += rows;
  if (!v.allFinite()) throw GramDegenerateError("Gram log-determinant is not finite");
  return detail::make(
      "logdet_spd_rows", std::move(v), {gram},
      [inverses](const Node&, const Array& g, std::span<Array* const> gr) {
        if (gr[0]) *gr[0] += (inverses.array().colwise() * g.col(0).array()).matrix();
      },
      [](const Tensor&, std::span<const Tensor>) -> Tensor {
        throw ContractViolation("logdet_spd_rows: forward tangents are not supported");
      });
}

// Pass-through node that is always tracked; seeds tangent propagation.
inline Tensor tracked_identity(const Tensor& a) {
  return detail::make(
      "identity", a.value(), {a},
      [](const Node&, const Array& g, std::span<Array* const> gr) {
        if (gr[0]) *gr[0] += g;
      },
      [](const Tensor&, std::span<const Tensor> t) { return t[0]; }, /*force_tracked=*/true);
}

}  // namespace mflow::nd
