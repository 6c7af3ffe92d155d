// Acceptance suite. Each criterion prints one line:
//
//   criterion N: PASS|FAIL <measurements> (<seconds> s, budget <seconds> s)
//
// Usage: acceptance [N ...]   (no arguments runs every criterion)
// Exit status is nonzero when any selected criterion fails.

#include <chrono>
#include <cmath>
#include <cstdlib>
#include <filesystem>
#include <functional>
#include <iomanip>
#include <iostream>
#include <map>
#include <numbers>
#include <random>
#include <sstream>
#include <string>
#include <vector>

#include "mflow/cli/commands.hpp"
#include "mflow/datasets/line_toy.hpp"
#include "mflow/eval/metrics.hpp"
#include "mflow/models/builder.hpp"
#include "mflow/ndiff/grad.hpp"
#include "mflow/training/losses.hpp"
#include "mflow/training/sinkhorn.hpp"
#include "test_util.hpp"

using namespace mflow;
using models::ManifoldFlowModel;
using models::ModelParts;
using models::Variant;
using nd::Array;
using nd::Tensor;
using mflow::testing::max_abs;
using mflow::testing::perturb_parameters;
using mflow::testing::random_array;
namespace fs = std::filesystem;

namespace {

constexpr double kPi = std::numbers::pi;

struct Outcome {
  bool pass = false;
  std::string detail;
};

struct Criterion {
  double budget_seconds;
  std::function<Outcome(const fs::path&)> run;
};

std::string fmt(double v) {
  std::ostringstream os;
  os << std::setprecision(4) << v;
  return os.str();
}

fs::path scratch(int id) {
  const auto p = fs::temp_directory_path() / "mflow_acceptance" / ("criterion" + std::to_string(id));
  fs::remove_all(p);
  fs::create_directories(p);
  return p;
}

cli::ExperimentConfig config(const std::string& text, const fs::path& out) {
  return cli::ExperimentConfig::from_text("out = " + out.string() + "\n" + text);
}

tf::FlowArchitecture arch(int layers, int hidden = 8) {
  tf::FlowArchitecture a;
  a.layers = layers;
  a.net = {hidden, 1};
  return a;
}

models::ModelConfig small_model(Eigen::Index n, Eigen::Index d, Eigen::Index ctx = 0, std::uint64_t seed = 23) {
  models::ModelConfig c;
  c.variant = Variant::MFLOW;
  c.n = n;
  c.d = d;
  c.context_dim = ctx;
  c.outer = arch(3);
  c.inner = arch(3);
  c.seed = seed;
  return c;
}

Array row(std::initializer_list<double> v) {
  Array a(1, static_cast<Eigen::Index>(v.size()));
  Eigen::Index i = 0;
  for (double x : v) a(0, i++) = x;
  return a;
}

// ---- 1: gradients of every loss ----

Outcome gradient_suite(const fs::path&) {
  double worst = 0.0;
  std::string where = "none";
  for (Eigen::Index d = 1; d <= 3; ++d) {
    const Eigen::Index n = d == 1 ? 1 : d - 1;
    auto m = models::build_model(small_model(n, d));
    std::mt19937_64 rng(5 + static_cast<std::uint64_t>(d));
    perturb_parameters(m->params(), rng, 0.1);
    const Tensor x = nd::constant(random_array(rng, 6, d, -1.5, 1.5));
    std::normal_distribution<double> normal;
    Array base(6, n);
    for (Eigen::Index i = 0; i < base.size(); ++i) base.data()[i] = normal(rng);
    train::SinkhornOptions ot;
    ot.epsilon = 0.2;  // converges to the tolerance below within the iteration cap
    ot.tolerance = 1e-12;
    ot.max_iterations = 20000;
    ot.strict = true;

    struct Case {
      std::string name;
      std::function<Tensor()> fn;
      double step;
    };
    const std::vector<Case> cases = {
        {"recon", [&] { return train::loss_recon(*m, x, {}, 1.0); }, 1e-5},
        {"recon_norm", [&] { return train::loss_recon(*m, x, {}, 1.0, train::ReconLoss::Norm); }, 1e-5},
        {"nll_gram", [&] { return train::loss_nll(*m, x, {}, true); }, 1e-5},
        {"nll_no_gram", [&] { return train::loss_nll(*m, x, {}, false); }, 1e-5},
        {"simultaneous", [&] { return train::loss_simultaneous(*m, x, {}, 0.1, 10.0); }, 1e-5},
        {"sinkhorn", [&] { return train::loss_ot(*m, x, base, {}, ot, 1.0); }, 1e-5},
    };
    for (const auto& c : cases) {
      const auto r = nd::gradient_check(c.fn, m->params(), 1e-4, c.step);
      if (!(r.max_relative_error <= worst)) {
        worst = r.max_relative_error;
        where = c.name + "@d=" + std::to_string(d);
      }
    }
  }
  return {worst < 1e-4, "max relative error " + fmt(worst) + " (" + where + ")"};
}

// ---- 2: square case against the ambient flow ----

Outcome square_case(const fs::path&) {
  double worst = 0.0;
  for (Eigen::Index d = 1; d <= 3; ++d) {
    // The same f and h twice: once as the manifold flow, once composed h then f.
    nd::ParamStore pm, pa;
    std::mt19937_64 rm(40 + static_cast<std::uint64_t>(d)), ra(40 + static_cast<std::uint64_t>(d));
    auto fm = tf::build_flow(pm, "f", d, 0, arch(3), rm);
    auto hm = tf::build_flow(pm, "h", d, 0, arch(3), rm);
    auto fa = tf::build_flow(pa, "f", d, 0, arch(3), ra);
    auto ha = tf::build_flow(pa, "h", d, 0, arch(3), ra);
    std::mt19937_64 noise(d);
    perturb_parameters(pm, noise, 0.1);
    pa.restore(pm.snapshot());

    ModelParts mp;
    mp.variant = Variant::MFLOW;
    mp.n = mp.d = d;
    mp.f = std::move(fm);
    mp.h = std::move(hm);
    ManifoldFlowModel mflow_model(std::move(pm), std::move(mp));

    std::vector<tf::TransformPtr> chain;
    chain.push_back(std::move(ha));
    chain.push_back(std::move(fa));
    ModelParts ap;
    ap.variant = Variant::AF;
    ap.n = ap.d = d;
    ap.f = std::make_unique<tf::CompositeTransform>(std::move(chain));
    ManifoldFlowModel ambient(std::move(pa), std::move(ap));

    std::mt19937_64 rng(100 + static_cast<std::uint64_t>(d));
    const Tensor x = nd::constant(random_array(rng, 1000, d, -2.5, 2.5));
    nd::NoGradGuard g;
    worst = std::max(worst, max_abs(mflow_model.mflow_log_prob(x).log_prob.value() - ambient.af_log_prob(x).value()));
  }
  return {worst < 1e-8, "max |mflow - af| " + fmt(worst) + " over n = d in {1,2,3}"};
}

// ---- 3: line toy loss landscape ----

Outcome landscape(const fs::path& dir) {
  const auto c = config("data.id = line\n", dir);
  std::ostringstream log;
  const auto grid = cli::run_landscape(c, log);
  const auto& best = *std::min_element(grid.begin(), grid.end(),
                                       [](const auto& a, const auto& b) { return a.recon < b.recon; });
  double nearest = grid.front().alpha;
  for (const auto& p : grid)
    if (std::abs(p.alpha - kPi / 2) < std::abs(nearest - kPi / 2)) nearest = p.alpha;

  // The landscape's own data, re-drawn from the same stream.
  auto rng = cli::rng_for(c.seed, cli::Stream::Landscape);
  const Array pts = data::sample_line_toy(c.landscape.points, c.data.line_alpha, c.data.line_sigma, rng);
  auto mean_loglik = [&](double alpha, double sigma) {
    double s = 0.0;
    for (Eigen::Index i = 0; i < pts.rows(); ++i) s += data::line_toy(alpha, sigma, pts(i, 0), pts(i, 1)).naive_loglik;
    return s / static_cast<double>(pts.rows());
  };
  const double pathological = mean_loglik(0.01, 0.01), truth = mean_loglik(kPi / 2, 1.0);
  const bool a = best.alpha == nearest, b = pathological > truth;
  return {a && b, "(a) recon argmin alpha " + fmt(best.alpha) + " vs nearest " + fmt(nearest) + "; (b) loglik " +
                      fmt(pathological) + " at (0.01, 0.01) vs " + fmt(truth) + " at (pi/2, 1)"};
}

// ---- 4: circle ----

Outcome circle(const fs::path& dir) {
  const auto c = config(
      "data.id = circle\nmodel.n = 1\nmodel.outer.layers = 5\nmodel.inner.layers = 5\n"
      "train.schedule = MD-sequential\ntrain.epochs = 40\nseed = 1\n",
      dir);
  std::ostringstream log;
  const auto r = cli::run_train(c, log);
  const auto loaded = cli::load_for(c, r.checkpoint.string());
  const auto& model = *loaded.model;

  std::mt19937_64 rng(2024);
  Array angles;
  const Array test = data::sample_circle(4000, rng, {}, &angles);
  std::vector<Eigen::Index> keep;
  for (Eigen::Index i = 0; i < test.rows(); ++i)
    if (std::abs(angles(i, 0) - kPi / 2) < kPi / 2) keep.push_back(i);
  Array arc(static_cast<Eigen::Index>(keep.size()), 2);
  for (std::size_t k = 0; k < keep.size(); ++k) arc.row(static_cast<Eigen::Index>(k)) = test.row(keep[k]);
  const double recon = eval::mean_reconstruction_error(model, arc);

  // Projection of unit-circle probes onto the learned curve.
  Array probes(20, 2);
  for (int k = 0; k < 20; ++k) {
    const double phi = (k + 0.5) * kPi / 20;
    probes(k, 0) = std::cos(phi);
    probes(k, 1) = std::sin(phi);
  }
  nd::NoGradGuard g;
  const Array projected = model.project(nd::constant(probes)).x_rec.value();
  const double radius_err = (projected.rowwise().norm().array() - 1.0).abs().maxCoeff();
  return {recon < 0.05 && radius_err < 0.05, "arc recon " + fmt(recon) + " on " + std::to_string(keep.size()) +
                                                 " points; max |radius - 1| " + fmt(radius_err) + " at 20 probes"};
}

// ---- 5: mixture surface ----

std::string mixture_text() {
  return "data.id = surface\nmodel.n = 2\ndata.train = 20000\ntrain.schedule = MD-alternating\ntrain.epochs = 20\n"
         "train.recon_loss = norm\n";
}

Outcome mixture(const fs::path& dir) {
  const auto c = config(mixture_text(), dir);
  std::ostringstream log;
  const auto r = cli::run_train(c, log);
  const auto report = cli::run_eval(c, r.checkpoint.string(), log);
  const auto loaded = cli::load_for(c, r.checkpoint.string());
  std::mt19937_64 rng(77);
  const Array gen = loaded.model->sample(1000, rng);
  const double self_recon = eval::score_points(*loaded.model, gen).reconstruction.maxCoeff();
  const double dist = report.mean_manifold_distance.value_or(INFINITY);
  const double recon = report.mean_reconstruction_error.value_or(INFINITY);
  const double auc = report.auc.value_or(0.0);
  const bool a = dist < 0.05, b = recon < 0.05, cc = self_recon < 1e-6, d = auc > 0.8;
  auto mark = [](bool ok) { return ok ? "ok" : "miss"; };
  return {a && b && cc && d, "(a) distance " + fmt(dist) + " " + mark(a) + "; (b) recon " + fmt(recon) + " " + mark(b) +
                                 "; (c) max self-recon " + fmt(self_recon) + " " + mark(cc) + "; (d) AUC " + fmt(auc) +
                                 " " + mark(d)};
}

// ---- 6: posterior inference ----

Outcome inference(const fs::path& dir) {
  const auto c = config(
      "data.id = surface\nmodel.n = 2\nmodel.conditional = true\ndata.train = 10000\n"
      "train.schedule = MD-alternating\ntrain.epochs = 10\nmcmc.steps = 5000\nmcmc.step_size = 0.15\n"
      "mcmc.burn_in = 100\nmcmc.reference = true\n",
      dir);
  std::ostringstream log;
  const auto r = cli::run_train(c, log);
  const auto res = cli::run_mcmc(c, r.checkpoint.string(), log);
  const Eigen::MatrixXd model_post = cli::thin_to(res.chain.samples, 1000);
  const Eigen::MatrixXd true_post = cli::thin_to(res.reference->samples, 1000);
  std::mt19937_64 rng(5);
  std::uniform_real_distribution<double> prior(-1.0, 1.0);
  Eigen::MatrixXd prior_draws(1000, 1);
  for (Eigen::Index i = 0; i < prior_draws.rows(); ++i) prior_draws(i, 0) = prior(rng);
  const double model_mmd = eval::mmd(model_post, true_post);
  const double prior_mmd = eval::mmd(true_post, prior_draws);
  return {model_mmd < prior_mmd, "MMD(model, true posterior) " + fmt(model_mmd) + " vs MMD(true posterior, prior) " +
                                     fmt(prior_mmd) + "; acceptance rate " + fmt(res.chain.acceptance_rate())};
}

// ---- 7: likelihood ratio without the Gram term ----

Outcome ratio(const fs::path&) {
  auto m = models::build_model(small_model(2, 3, 1, 31));
  std::mt19937_64 rng(16);
  perturb_parameters(m->params(), rng, 0.1);
  const Tensor x = nd::constant(random_array(rng, 1000, 3, -2, 2));
  const Tensor t0 = nd::constant(random_array(rng, 1000, 1)), t1 = nd::constant(random_array(rng, 1000, 1));
  nd::NoGradGuard g;
  const long before = nd::gram_evaluations();
  const Array r = m->conditional_log_ratio(x, t0, t1).value();
  const long grams = nd::gram_evaluations() - before;
  const Array full = (m->mflow_log_prob(x, t0).log_prob - m->mflow_log_prob(x, t1).log_prob).value();
  const double err = max_abs(r - full);
  return {err < 1e-10 && grams == 0, "max |ratio - density difference| " + fmt(err) + "; Gram evaluations " +
                                         std::to_string(grams)};
}

// ---- 8: Lorenz ----

Outcome lorenz(const fs::path& dir) {
  data::LorenzConfig lc;
  std::mt19937_64 rng(6);
  const auto s = data::sample_lorenz(20000, lc, rng);
  const Eigen::RowVectorXd mean = s.x.colwise().mean();
  const Eigen::RowVectorXd sd = (s.x.rowwise() - mean).array().square().colwise().mean().sqrt().matrix();
  double lag1 = 0.0;
  for (int j = 0; j < 3; ++j) {
    const Eigen::VectorXd v = s.x.col(j);
    lag1 = std::max(lag1, std::abs((v.head(v.size() - 1).array() * v.tail(v.size() - 1).array()).mean()));
  }
  const double moment_err = std::max(mean.cwiseAbs().maxCoeff(), (sd.array() - 1.0).abs().maxCoeff());
  const double bound = s.raw.cwiseAbs().maxCoeff();
  const bool sampler = moment_err < 1e-12 && bound < 100.0 && lag1 < 0.05;

  const auto c = config(
      "data.id = lorenz\nmodel.n = 2\nmodel.outer.layers = 5\nmodel.inner.layers = 5\ntrain.epochs = 20\n", dir);
  std::ostringstream log;
  const auto r = cli::run_train(c, log);
  const auto loaded = cli::load_for(c, r.checkpoint.string());
  const auto d = cli::make_data(c);
  const auto scores = eval::score_points(*loaded.model, d.test.x);
  const bool finite = scores.log_likelihood.allFinite();
  const double recon = scores.reconstruction.mean();
  return {sampler && finite && recon < 0.2,
          "sampler: moments " + fmt(moment_err) + ", max |raw| " + fmt(bound) + ", max |lag-1 autocorrelation| " +
              fmt(lag1) + "; log-densities " + (finite ? "finite" : "NOT finite") + "; test recon " + fmt(recon)};
}

// ---- 9: polar coordinates ----

// (r, phi) -> (r cos phi, r sin phi). The manifold phi = 0 is the positive x axis.
class Polar final : public tf::Transform {
 public:
  Eigen::Index dim() const override { return 2; }
  std::string kind() const override { return "polar"; }

 protected:
  tf::FlowResult do_forward(const Tensor& z, const Tensor&) const override {
    const Tensor r = nd::slice_cols(z, 0, 1), phi = nd::slice_cols(z, 1, 1);
    return {nd::concat_cols({r * nd::cos(phi), r * nd::sin(phi)}), nd::log(r)};
  }
  tf::FlowResult do_inverse(const Tensor& x, const Tensor&) const override {
    const Tensor a = nd::slice_cols(x, 0, 1), b = nd::slice_cols(x, 1, 1);
    const Tensor r = nd::sqrt(nd::square(a) + nd::square(b));
    return {nd::concat_cols({r, nd::atan2(b, a)}), -nd::log(r)};
  }
};

Outcome polar(const fs::path&) {
  auto assemble = [](Variant v, double eps) {
    ModelParts p;
    p.variant = v;
    p.n = 1;
    p.d = 2;
    p.epsilon = eps;
    p.f = std::make_unique<Polar>();
    return std::make_unique<ManifoldFlowModel>(nd::ParamStore{}, std::move(p));
  };
  const double eps = 0.3;
  auto pie = assemble(Variant::PIE, eps);
  auto mf = assemble(Variant::MFLOW, 1.0);
  const double log_pv0 = -0.5 * std::log(2 * kPi) - std::log(eps);
  double worst = 0.0;
  for (double r : {0.5, 1.0, 2.0}) {
    const double sliced = pie->slice_pie_unnorm_log_prob(nd::constant(row({r}))).item() - log_pv0;
    const double on_manifold = mf->mflow_log_prob(nd::constant(row({r, 0.0}))).log_prob.item();
    worst = std::max(worst, std::abs(std::exp(sliced - on_manifold) - 1.0 / r));
  }
  return {worst < 1e-6, "max |density ratio - 1/r| " + fmt(worst) + " at r in {0.5, 1, 2}"};
}

// ---- 10: metric closed forms ----

Outcome closed_forms(const fs::path&) {
  using Eigen::MatrixXd;
  using Eigen::VectorXd;
  std::vector<std::pair<std::string, double>> errors;  // name, error relative to its tolerance

  // MMD of two singletons at unit bandwidth: 2 - 2 exp(-1/2).
  errors.emplace_back("mmd singleton",
                      std::abs(eval::mmd(MatrixXd::Zero(1, 1), MatrixXd::Ones(1, 1), 1.0) - (2 - 2 * std::exp(-0.5))) / 1e-12);
  std::mt19937_64 rng(12);
  const MatrixXd a = random_array(rng, 40, 2), b = random_array(rng, 35, 2, -0.5, 1.5);
  double brute = 0.0;
  auto k = [](const VectorXd& x, const VectorXd& y) { return std::exp(-(x - y).squaredNorm() / (2 * 0.5 * 0.5)); };
  for (Eigen::Index i = 0; i < a.rows(); ++i)
    for (Eigen::Index j = 0; j < a.rows(); ++j) brute += k(a.row(i), a.row(j)) / (40.0 * 40.0);
  for (Eigen::Index i = 0; i < b.rows(); ++i)
    for (Eigen::Index j = 0; j < b.rows(); ++j) brute += k(b.row(i), b.row(j)) / (35.0 * 35.0);
  for (Eigen::Index i = 0; i < a.rows(); ++i)
    for (Eigen::Index j = 0; j < b.rows(); ++j) brute -= 2 * k(a.row(i), b.row(j)) / (40.0 * 35.0);
  errors.emplace_back("mmd brute force", std::abs(eval::mmd(a, b, 0.5) - brute) / 1e-12);

  // One kernel at the target: log N(0; 0, h²) with h = 0.1.
  errors.emplace_back("kde single kernel",
                      std::abs(eval::kde_log_posterior(MatrixXd::Constant(1, 1, 0.3), VectorXd::Constant(1, 0.3), 0.1) +
                               0.5 * std::log(2 * kPi * 0.01)) / 1e-12);
  double kde = 0.0;
  const VectorXd t = VectorXd::Constant(2, 0.1);
  for (Eigen::Index i = 0; i < a.rows(); ++i)
    kde += std::exp(-(a.row(i).transpose() - t).squaredNorm() / (2 * 0.01)) / (2 * kPi * 0.01);
  errors.emplace_back("kde brute force", std::abs(eval::kde_log_posterior(a, t, 0.1) - std::log(kde / 40.0)) / 1e-12);

  const VectorXd in = random_array(rng, 60, 1).col(0);
  VectorXd out = random_array(rng, 45, 1, -0.5, 1.5).col(0);
  out(0) = in(3);
  double wins = 0.0;
  for (Eigen::Index i = 0; i < in.size(); ++i)
    for (Eigen::Index j = 0; j < out.size(); ++j) wins += out(j) > in(i) ? 1.0 : out(j) == in(i) ? 0.5 : 0.0;
  errors.emplace_back("auc brute force", std::abs(eval::ood_auc(in, out) - wins / (60.0 * 45.0)) / 1e-12);

  // Sinkhorn divergence of two single atoms is the transport cost ½‖a − b‖².
  const Array x = row({0.5, -1.0, 2.0}), y = row({-0.25, 0.5, 1.0});
  errors.emplace_back("sinkhorn single atom",
                      std::abs(train::sinkhorn_divergence(nd::constant(x), nd::constant(y)).item() - 0.5 * (x - y).squaredNorm()) /
                          1e-6);

  std::string detail;
  double worst = 0.0;
  for (const auto& [name, e] : errors) {
    worst = std::max(worst, e);
    if (!detail.empty()) detail += ", ";
    detail += name + " " + fmt(e);
  }
  return {worst < 1.0, "errors in units of tolerance: " + detail};
}

}  // namespace

int main(int argc, char** argv) {
  const std::map<int, Criterion> criteria = {
      {1, {60, gradient_suite}}, {2, {10, square_case}}, {3, {60, landscape}},    {4, {600, circle}},
      {5, {1800, mixture}},      {6, {900, inference}},  {7, {10, ratio}},        {8, {1800, lorenz}},
      {9, {10, polar}},          {10, {10, closed_forms}},
  };
  std::vector<int> selected;
  for (int i = 1; i < argc; ++i) {
    char* end = nullptr;
    const long id = std::strtol(argv[i], &end, 10);
    if (*end != '\0' || !criteria.count(static_cast<int>(id))) {
      std::cerr << "unknown criterion '" << argv[i] << "'\n";
      return 2;
    }
    selected.push_back(static_cast<int>(id));
  }
  if (selected.empty())
    for (const auto& [id, _] : criteria) selected.push_back(id);

  bool all = true;
  for (int id : selected) {
    const auto& c = criteria.at(id);
    const auto start = std::chrono::steady_clock::now();
    Outcome o;
    try {
      o = c.run(scratch(id));
    } catch (const std::exception& e) {
      o = {false, std::string("exception: ") + e.what()};
    }
    const double secs = std::chrono::duration<double>(std::chrono::steady_clock::now() - start).count();
    const bool in_time = secs <= c.budget_seconds;
    const bool pass = o.pass && in_time;
    all = all && pass;
    std::cout << "criterion " << id << ": " << (pass ? "PASS " : "FAIL ") << o.detail << " (" << fmt(secs)
              << " s, budget " << c.budget_seconds << " s" << (in_time ? "" : ", over budget") << ")" << std::endl;
  }
  return all ? 0 : 1;
}
