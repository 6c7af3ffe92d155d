#pragma once

// Flow models over data x in R^d with a learned (or prescribed) n-dimensional
// manifold. Conventions:
//   f : R^d -> R^d, the outer flow, z = (u, v) -> x
//   g = f ∘ Pad : R^n -> R^d, the manifold embedding
//   h : R^n -> R^n, the inner flow, ũ -> u, with base N(0, I) over ũ
// All batch operations take one sample per row and return rows x 1 columns.

#include <cmath>
#include <memory>
#include <numbers>
#include <random>
#include <string>
#include <tuple>
#include <vector>

#include "mflow/errors.hpp"
#include "mflow/models/chart.hpp"
#include "mflow/ndiff/grad.hpp"
#include "mflow/ndiff/param_store.hpp"
#include "mflow/transforms/resnet.hpp"
#include "mflow/transforms/transform.hpp"

namespace mflow::models {

using nd::Array;
using nd::Tensor;

enum class Variant { AF, FOM, PIE, MFLOW, MEFLOW };

inline std::string to_string(Variant v) {
  switch (v) {
    case Variant::AF: return "af";
    case Variant::FOM: return "fom";
    case Variant::PIE: return "pie";
    case Variant::MFLOW: return "mflow";
    case Variant::MEFLOW: return "meflow";
  }
  return "?";
}

inline Variant parse_variant(const std::string& s) {
  for (Variant v : {Variant::AF, Variant::FOM, Variant::PIE, Variant::MFLOW, Variant::MEFLOW})
    if (to_string(v) == s) return v;
  throw ContractViolation("unknown model variant '" + s + "' (expected af, fom, pie, mflow or meflow)");
}

inline constexpr double kLogTwoPi = 1.8378770664093453;

// Row-wise log N(z; 0, sigma² I) summed over columns.
inline Tensor gaussian_log_prob(const Tensor& z, double sigma = 1.0) {
  const auto k = static_cast<double>(z.cols());
  if (z.cols() == 0) return nd::constant(z.rows(), 1, 0.0);
  return nd::sum_cols(nd::square(z)) * (-0.5 / (sigma * sigma)) - k * (0.5 * kLogTwoPi + std::log(sigma));
}

inline double bits_per_dim(double log_prob_nats, Eigen::Index d) {
  return -log_prob_nats / (static_cast<double>(d) * std::numbers::ln2);
}

struct ModelParts {
  Variant variant = Variant::MFLOW;
  Eigen::Index n = 1;
  Eigen::Index d = 2;
  Eigen::Index context_dim = 0;
  bool manifold_conditional = false;  // f (or the encoder) receives θ
  double epsilon = 1.0;               // off-manifold base scale (AF, PIE)
  tf::TransformPtr f;                 // absent for FOM
  tf::TransformPtr h;                 // absent means identity
  std::unique_ptr<tf::ResidualNet> encoder;  // MEFLOW only
  ChartPtr chart;                             // FOM only
};

struct Projection {
  Tensor u;      // rows x n
  Tensor x_rec;  // rows x d, g(u)
  Tensor recon;  // rows x 1, ||x - g(u)||
};

struct ManifoldDensity {
  Tensor log_prob;  // rows x 1, density of the projected point
  Tensor recon;     // rows x 1
  Tensor u;
  Tensor x_rec;
};

struct DensityOptions {
  bool include_gram = true;
};

enum class SampleMode {
  Full,      // generative density of the model
  Manifold,  // PIE only: v fixed to 0
};

class ManifoldFlowModel {
 public:
  ManifoldFlowModel(nd::ParamStore params, ModelParts parts) : params_(std::move(params)), p_(std::move(parts)) {
    validate();
  }
  ManifoldFlowModel(const ManifoldFlowModel&) = delete;
  ManifoldFlowModel& operator=(const ManifoldFlowModel&) = delete;

  Variant variant() const { return p_.variant; }
  Eigen::Index latent_dim() const { return p_.n; }
  Eigen::Index ambient_dim() const { return p_.d; }
  Eigen::Index context_dim() const { return p_.context_dim; }
  bool manifold_conditional() const { return p_.manifold_conditional; }
  double epsilon() const { return p_.epsilon; }
  bool has_manifold() const { return p_.variant != Variant::AF; }
  bool learns_manifold() const { return p_.variant == Variant::MFLOW || p_.variant == Variant::MEFLOW; }

  nd::ParamStore& params() { return params_; }
  const nd::ParamStore& params() const { return params_; }
  const tf::Transform* outer() const { return p_.f.get(); }
  const tf::Transform* inner() const { return p_.h.get(); }
  const PrescribedChart* chart() const { return p_.chart.get(); }

  // log p_u(u) = log N(h⁻¹(u)) + log|det J_{h⁻¹}|.
  Tensor latent_log_prob(const Tensor& u, const Tensor& context = Tensor()) const {
    require_cols(u, p_.n, "latent_log_prob");
    if (!p_.h) return gaussian_log_prob(u);
    auto r = p_.h->inverse(u, h_context(context, u.rows()));
    return gaussian_log_prob(r.out) + r.logabsdet;
  }

  Tensor af_log_prob(const Tensor& x, const Tensor& context = Tensor()) const {
    require_variant(p_.variant == Variant::AF, "af_log_prob", "af");
    return ambient_log_prob(x, context);
  }

  Tensor pie_log_prob(const Tensor& x, const Tensor& context = Tensor()) const {
    require_variant(p_.variant == Variant::PIE, "pie_log_prob", "pie");
    return ambient_log_prob(x, context);
  }

  // log p_x(f(u, 0)); unnormalized as a density on the manifold.
  Tensor slice_pie_unnorm_log_prob(const Tensor& u, const Tensor& context = Tensor()) const {
    require_variant(p_.variant == Variant::PIE, "slice_pie_unnorm_log_prob", "pie");
    require_cols(u, p_.n, "slice_pie_unnorm_log_prob");
    auto fwd = p_.f->forward(tf::pad(u, p_.d), f_context(context, u.rows()));
    const Tensor v0 = nd::constant(u.rows(), p_.d - p_.n, 0.0);
    return latent_log_prob(u, context) + gaussian_log_prob(v0, p_.epsilon) - fwd.logabsdet;
  }

  Projection project(const Tensor& x, const Tensor& context = Tensor()) const {
    require_cols(x, p_.d, "project");
    Tensor u = encode(x, context);
    Tensor x_rec = decode(u, context);
    return {u, x_rec, recon_norm(x, x_rec)};
  }

  Tensor encode(const Tensor& x, const Tensor& context = Tensor()) const {
    require_cols(x, p_.d, "encode");
    switch (p_.variant) {
      case Variant::MFLOW:
      case Variant::PIE:
        return tf::proj(p_.f->inverse(x, f_context(context, x.rows())).out, p_.n);
      case Variant::MEFLOW: {
        Tensor in = x;
        if (p_.manifold_conditional) in = nd::concat_cols({x, expand_context(context, x.rows())});
        Tensor u = (*p_.encoder)(in);
        if (!u.value().allFinite()) throw NumericalError("encoder produced non-finite output");
        return u;
      }
      case Variant::FOM: return nd::constant(chart_coordinates(x.value()));
      case Variant::AF: break;
    }
    throw UnsupportedConfiguration("encode: the ambient flow has no manifold");
  }

  Tensor decode(const Tensor& u, const Tensor& context = Tensor()) const {
    require_cols(u, p_.n, "decode");
    if (p_.variant == Variant::AF) throw UnsupportedConfiguration("decode: the ambient flow has no manifold");
    if (p_.variant == Variant::FOM) {
      Array x(u.rows(), p_.d);
      for (Eigen::Index i = 0; i < u.rows(); ++i) x.row(i) = p_.chart->embed(u.value().row(i).transpose()).transpose();
      return nd::constant(x);
    }
    return p_.f->forward(tf::pad(u, p_.d), f_context(context, u.rows())).out;
  }

  // −½ log det(J_gᵀ J_g) at u.
  Tensor gram_logdet(const Tensor& u, const Tensor& context = Tensor()) const {
    require_variant(learns_manifold(), "gram_logdet", "mflow or meflow");
    require_cols(u, p_.n, "gram_logdet");
    return decode_with_gram(u, context).second;
  }

  ManifoldDensity mflow_log_prob(const Tensor& x, const Tensor& context = Tensor(),
                                 const DensityOptions& opt = {}) const {
    require_variant(learns_manifold(), "mflow_log_prob", "mflow or meflow");
    require_cols(x, p_.d, "mflow_log_prob");
    const Tensor u = encode(x, context);
    Tensor x_rec, gram;
    if (opt.include_gram) {
      std::tie(x_rec, gram) = decode_with_gram(u, context);
    } else {
      x_rec = decode(u, context);
    }
    Tensor logp = latent_log_prob(u, context);
    if (opt.include_gram) logp = logp + gram;
    return {logp, recon_norm(x, x_rec), u, x_rec};
  }

  Tensor fom_log_prob(const Tensor& x, const Tensor& context = Tensor()) const {
    require_variant(p_.variant == Variant::FOM, "fom_log_prob", "fom");
    require_cols(x, p_.d, "fom_log_prob");
    const Array u = chart_coordinates(x.value());
    Array gram(x.rows(), 1);
    for (Eigen::Index i = 0; i < x.rows(); ++i) {
      const Eigen::MatrixXd j = p_.chart->jacobian(u.row(i).transpose());
      Eigen::LLT<Eigen::MatrixXd> llt(j.transpose() * j);
      if (llt.info() != Eigen::Success) throw GramDegenerateError("chart Jacobian is rank deficient");
      gram(i, 0) = -llt.matrixLLT().diagonal().array().log().sum();
    }
    return latent_log_prob(nd::constant(u), context) + nd::constant(gram);
  }

  // Model density in nats by variant: ambient for AF/PIE, on-manifold density
  // of the projected point for M-flows, chart density for FOM.
  Tensor log_prob(const Tensor& x, const Tensor& context = Tensor()) const {
    switch (p_.variant) {
      case Variant::AF:
      case Variant::PIE: return ambient_log_prob(x, context);
      case Variant::FOM: return fom_log_prob(x, context);
      case Variant::MFLOW:
      case Variant::MEFLOW: return mflow_log_prob(x, context).log_prob;
    }
    return {};
  }

  // log p(x|θ0) − log p(x|θ1) for a θ-independent manifold. The Gram term and
  // the projection are shared, so only the inner flow is evaluated twice.
  Tensor conditional_log_ratio(const Tensor& x, const Tensor& theta0, const Tensor& theta1) const {
    require_variant(learns_manifold(), "conditional_log_ratio", "mflow or meflow");
    if (p_.manifold_conditional) {
      throw UnsupportedConfiguration("conditional_log_ratio: the manifold depends on θ, Jacobian terms do not cancel");
    }
    if (p_.context_dim == 0) throw UnsupportedConfiguration("conditional_log_ratio: model is unconditional");
    const Tensor u = encode(x);
    return latent_log_prob(u, theta0) - latent_log_prob(u, theta1);
  }

  // Draws from the generative process. `context` is 1 x c (shared) or
  // count x c; empty for unconditional models.
  Array sample(Eigen::Index count, std::mt19937_64& rng, const Array& context = Array(),
               SampleMode mode = SampleMode::Full) const {
    if (mode == SampleMode::Manifold && p_.variant != Variant::PIE) {
      throw UnsupportedConfiguration("manifold-mode sampling applies to PIE only");
    }
    nd::NoGradGuard no_grad;
    const Tensor ctx = context.size() ? expand_context(nd::constant(context), count) : Tensor();
    if (p_.context_dim > 0 && !ctx.defined()) throw ContractViolation("sample: context required");
    std::normal_distribution<double> normal;
    auto draw = [&](Eigen::Index cols, double scale) {
      Array a(count, cols);
      for (Eigen::Index i = 0; i < a.size(); ++i) a.data()[i] = scale * normal(rng);
      return a;
    };
    const Tensor ut = nd::constant(draw(p_.n, 1.0));
    const Tensor u = p_.h ? p_.h->forward(ut, h_context(ctx, count)).out : ut;
    switch (p_.variant) {
      case Variant::AF: return p_.f->forward(u, f_context(ctx, count)).out.value();
      case Variant::PIE: {
        const double scale = mode == SampleMode::Manifold ? 0.0 : p_.epsilon;
        const Tensor z = nd::concat_cols({u, nd::constant(draw(p_.d - p_.n, scale))});
        return p_.f->forward(z, f_context(ctx, count)).out.value();
      }
      default: return decode(u, ctx).value();
    }
  }

  // Differentiable generative path for M-flows: x = g(h(ũ)) with base draws ũ
  // (rows x n) supplied by the caller.
  Tensor generate(const Array& base, const Tensor& context = Tensor()) const {
    require_variant(learns_manifold(), "generate", "mflow or meflow");
    if (base.cols() != p_.n) throw ContractViolation("generate: base draws must have n columns");
    const Tensor ctx = expand_context(context, base.rows());
    const Tensor ut = nd::constant(base);
    const Tensor u = p_.h ? p_.h->forward(ut, h_context(ctx, base.rows())).out : ut;
    return decode(u, ctx);
  }

  Tensor expand_context(const Tensor& context, Eigen::Index rows) const {
    if (p_.context_dim == 0) return Tensor();
    if (!context.defined() || context.cols() != p_.context_dim) {
      throw ContractViolation("context of width " + std::to_string(p_.context_dim) + " required");
    }
    if (context.rows() == rows) return context;
    if (context.rows() == 1) return nd::broadcast_to(context, rows, p_.context_dim);
    throw ContractViolation("context rows must be 1 or match the batch");
  }

 private:
  void validate() const {
    const auto& p = p_;
    if (p.n < 1 || p.n > p.d) throw ContractViolation("model: need 1 <= n <= d");
    if (p.manifold_conditional && p.context_dim == 0) {
      throw ContractViolation("model: manifold_conditional requires a context");
    }
    if (p.variant == Variant::AF && (p.n != p.d || p.epsilon != 1.0)) {
      throw ContractViolation("model: the ambient flow needs n = d and epsilon = 1");
    }
    if (p.variant == Variant::PIE && !(p.epsilon > 0.0 && p.epsilon <= 1.0)) {
      throw ContractViolation("model: PIE needs 0 < epsilon <= 1");
    }
    if (p.variant == Variant::FOM) {
      if (!p.chart || p.chart->latent_dim() != p.n || p.chart->ambient_dim() != p.d) {
        throw ContractViolation("model: FOM needs a chart matching (n, d)");
      }
      if (p.manifold_conditional) throw UnsupportedConfiguration("model: FOM charts are not conditional");
    } else {
      if (!p.f || p.f->dim() != p.d) throw ContractViolation("model: outer flow must act on R^d");
      const Eigen::Index want = p.manifold_conditional ? p.context_dim : 0;
      if (p.f->context_dim() != 0 && p.f->context_dim() != want) {
        throw ContractViolation("model: outer flow context width mismatch");
      }
    }
    if (p.h) {
      if (p.h->dim() != p.n) throw ContractViolation("model: inner flow must act on R^n");
      if (p.h->context_dim() != 0 && p.h->context_dim() != p.context_dim) {
        throw ContractViolation("model: inner flow context width mismatch");
      }
    }
    if (p.variant == Variant::MEFLOW) {
      const Eigen::Index in = p.d + (p.manifold_conditional ? p.context_dim : 0);
      if (!p.encoder || p.encoder->in_dim() != in || p.encoder->out_dim() != p.n) {
        throw ContractViolation("model: Me-flow encoder must map the data (and θ if conditional) to R^n");
      }
    }
  }

  static void require_cols(const Tensor& t, Eigen::Index cols, const char* where) {
    if (t.cols() != cols) {
      throw ContractViolation(std::string(where) + ": expected " + std::to_string(cols) + " columns, got " +
                              std::to_string(t.cols()));
    }
  }

  void require_variant(bool ok, const char* where, const char* expected) const {
    if (!ok) {
      throw UnsupportedConfiguration(std::string(where) + " requires variant " + expected + ", model is " +
                                     to_string(p_.variant));
    }
  }

  Tensor f_context(const Tensor& context, Eigen::Index rows) const {
    if (!p_.f || p_.f->context_dim() == 0) return Tensor();
    return expand_context(context, rows);
  }

  Tensor h_context(const Tensor& context, Eigen::Index rows) const {
    if (!p_.h || p_.h->context_dim() == 0) return Tensor();
    return expand_context(context, rows);
  }

  Tensor ambient_log_prob(const Tensor& x, const Tensor& context) const {
    require_cols(x, p_.d, "log_prob");
    auto r = p_.f->inverse(x, f_context(context, x.rows()));
    const Tensor u = tf::proj(r.out, p_.n);
    Tensor logp = latent_log_prob(u, context) + r.logabsdet;
    if (p_.n < p_.d) logp = logp + gaussian_log_prob(nd::slice_cols(r.out, p_.n, p_.d - p_.n), p_.epsilon);
    return logp;
  }

  // g(u) and −½ log det(J_gᵀ J_g), with J_g from n tangent passes through f ∘ Pad.
  std::pair<Tensor, Tensor> decode_with_gram(const Tensor& u, const Tensor& context) const {
    const Eigen::Index n = p_.n, rows = u.rows();
    const Tensor ctx = f_context(context, rows);
    std::vector<Array> basis;
    for (Eigen::Index k = 0; k < n; ++k) {
      Array e = Array::Zero(rows, n);
      e.col(k).setOnes();
      basis.push_back(std::move(e));
    }
    auto g = [&](const Tensor& z) { return p_.f->forward(tf::pad(z, p_.d), ctx).out; };
    auto jr = nd::jvp_with_value(g, u, basis);
    std::vector<Tensor> entries;
    entries.reserve(static_cast<std::size_t>(n * n));
    for (Eigen::Index a = 0; a < n; ++a)
      for (Eigen::Index b = 0; b < n; ++b)
        entries.push_back(nd::sum_cols(jr.tangents[static_cast<std::size_t>(a)] * jr.tangents[static_cast<std::size_t>(b)]));
    const Tensor gram = n == 1 ? entries.front() : nd::concat_cols(entries);
    return {jr.value, nd::logdet_spd_rows(gram, n) * -0.5};
  }

  Array chart_coordinates(const Array& x) const {
    constexpr double kTolerance = 1e-6;
    Array u(x.rows(), p_.n);
    for (Eigen::Index i = 0; i < x.rows(); ++i) {
      const Eigen::VectorXd xi = x.row(i).transpose();
      const Eigen::VectorXd ui = p_.chart->coordinates(xi);
      const double dist = (p_.chart->embed(ui) - xi).norm();
      if (!(dist <= kTolerance)) {
        throw OffManifoldError("fom: point " + std::to_string(i) + " lies " + std::to_string(dist) +
                               " from the prescribed manifold");
      }
      u.row(i) = ui.transpose();
    }
    return u;
  }

  static Tensor recon_norm(const Tensor& x, const Tensor& x_rec) {
    // sqrt is not differentiable at 0; training uses the squared norm.
    return nd::constant(((x.value() - x_rec.value()).rowwise().norm()).eval());
  }

  nd::ParamStore params_;
  ModelParts p_;
};

}  // namespace mflow::models
