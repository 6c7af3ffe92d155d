#pragma once

#include <array>
#include <cmath>
#include <random>
#include <string>
#include <vector>

#include "mflow/ndiff/param_store.hpp"
#include "mflow/ndiff/tensor.hpp"

namespace mflow::tf {

struct ResidualNetConfig {
  int hidden = 100;
  int blocks = 2;  // each block: relu, linear, relu, linear, plus skip
};

// Residual multilayer perceptron. The output layer starts at zero so a
// conditioner built from it makes its transform the identity at init.
class ResidualNet {
 public:
  ResidualNet(nd::ParamStore& params, const std::string& prefix, Eigen::Index in, Eigen::Index out,
              const ResidualNetConfig& cfg, std::mt19937_64& rng, bool zero_output = true)
      : in_(in), out_(out), blocks_(cfg.blocks) {
    const Eigen::Index h = cfg.hidden;
    in_w_ = params.add(prefix + ".in.w", uniform(rng, in, h, in));
    in_b_ = params.add(prefix + ".in.b", uniform(rng, 1, h, in));
    for (int b = 0; b < blocks_; ++b) {
      const std::string p = prefix + ".block" + std::to_string(b);
      block_w_.push_back({params.add(p + ".0.w", uniform(rng, h, h, h)), params.add(p + ".1.w", uniform(rng, h, h, h))});
      block_b_.push_back({params.add(p + ".0.b", uniform(rng, 1, h, h)), params.add(p + ".1.b", uniform(rng, 1, h, h))});
    }
    out_w_ = params.add(prefix + ".out.w", zero_output ? nd::Array::Zero(h, out) : uniform(rng, h, out, h));
    out_b_ = params.add(prefix + ".out.b", zero_output ? nd::Array::Zero(1, out) : uniform(rng, 1, out, h));
  }

  Eigen::Index in_dim() const { return in_; }
  Eigen::Index out_dim() const { return out_; }

  nd::Tensor operator()(const nd::Tensor& x) const {
    if (x.cols() != in_) throw ContractViolation("ResidualNet: input width mismatch");
    nd::Tensor h = nd::matmul(x, in_w_) + in_b_;
    for (int b = 0; b < blocks_; ++b) {
      nd::Tensor t = nd::matmul(nd::relu(h), block_w_[b][0]) + block_b_[b][0];
      t = nd::matmul(nd::relu(t), block_w_[b][1]) + block_b_[b][1];
      h = h + t;
    }
    return nd::matmul(nd::relu(h), out_w_) + out_b_;
  }

 private:
  // U(-1/sqrt(fan_in), 1/sqrt(fan_in)); fan_in 0 gives zeros.
  static nd::Array uniform(std::mt19937_64& rng, Eigen::Index r, Eigen::Index c, Eigen::Index fan_in) {
    const double bound = fan_in > 0 ? 1.0 / std::sqrt(static_cast<double>(fan_in)) : 0.0;
    std::uniform_real_distribution<double> u(-bound, bound);
    nd::Array a(r, c);
    for (Eigen::Index i = 0; i < a.size(); ++i) a.data()[i] = bound > 0 ? u(rng) : 0.0;
    return a;
  }

  Eigen::Index in_, out_;
  int blocks_;
  nd::Tensor in_w_, in_b_, out_w_, out_b_;
  std::vector<std::array<nd::Tensor, 2>> block_w_, block_b_;
};

}  // namespace mflow::tf
