#include <gtest/gtest.h>

#include <cmath>
#include <numbers>
#include <sstream>

#include "mflow/datasets/circle.hpp"
#include "mflow/datasets/surface.hpp"
#include "mflow/eval/metrics.hpp"
#include "mflow/eval/report.hpp"
#include "mflow/models/builder.hpp"
#include "mflow/training/trainer.hpp"
#include "test_util.hpp"

using namespace mflow;
using mflow::testing::random_array;
using Eigen::MatrixXd;
using Eigen::VectorXd;

namespace {

// O(N²) oracles, written independently of the library.
double brute_mmd(const MatrixXd& a, const MatrixXd& b, double h) {
  auto k = [h](const VectorXd& x, const VectorXd& y) { return std::exp(-(x - y).squaredNorm() / (2 * h * h)); };
  double aa = 0, bb = 0, ab = 0;
  for (Eigen::Index i = 0; i < a.rows(); ++i)
    for (Eigen::Index j = 0; j < a.rows(); ++j) aa += k(a.row(i), a.row(j));
  for (Eigen::Index i = 0; i < b.rows(); ++i)
    for (Eigen::Index j = 0; j < b.rows(); ++j) bb += k(b.row(i), b.row(j));
  for (Eigen::Index i = 0; i < a.rows(); ++i)
    for (Eigen::Index j = 0; j < b.rows(); ++j) ab += k(a.row(i), b.row(j));
  const double na = static_cast<double>(a.rows()), nb = static_cast<double>(b.rows());
  return aa / (na * na) + bb / (nb * nb) - 2 * ab / (na * nb);
}

double brute_auc(const VectorXd& in, const VectorXd& out) {
  double wins = 0;
  for (Eigen::Index i = 0; i < in.size(); ++i)
    for (Eigen::Index j = 0; j < out.size(); ++j) wins += out(j) > in(i) ? 1.0 : out(j) == in(i) ? 0.5 : 0.0;
  return wins / static_cast<double>(in.size() * out.size());
}

double brute_kde(const MatrixXd& s, const VectorXd& t, double h) {
  double sum = 0;
  const double norm = std::pow(2 * std::numbers::pi * h * h, -0.5 * static_cast<double>(t.size()));
  for (Eigen::Index i = 0; i < s.rows(); ++i) sum += norm * std::exp(-(s.row(i).transpose() - t).squaredNorm() / (2 * h * h));
  return std::log(sum / static_cast<double>(s.rows()));
}

VectorXd vec(std::initializer_list<double> v) {
  VectorXd out(static_cast<Eigen::Index>(v.size()));
  Eigen::Index i = 0;
  for (double x : v) out(i++) = x;
  return out;
}

}  // namespace

// ---- Metropolis-Hastings ----

TEST(EvalMcmc, FlatTargetAcceptsEveryInSupportProposal) {
  std::mt19937_64 rng(1);
  const auto chain = eval::metropolis_hastings([](const VectorXd&) { return 0.0; }, eval::uniform_box_prior(-1, 1, 1),
                                               VectorXd::Zero(1), {2000, 0.5, 100}, rng);
  EXPECT_GT(chain.outside_support, 0);
  EXPECT_EQ(chain.accepted, chain.proposed - chain.outside_support);
  EXPECT_EQ(chain.samples.rows(), 1900);
  EXPECT_TRUE((chain.samples.array().abs() <= 1.0).all());
}

TEST(EvalMcmc, StandardNormalMoments) {
  std::mt19937_64 rng(2);
  const auto log_normal = [](const VectorXd& t) { return -0.5 * t.squaredNorm(); };
  const auto flat = [](const VectorXd&) { return 0.0; };
  // A step near 2.4σ keeps the autocorrelation short enough for the bounds.
  const auto chain = eval::metropolis_hastings(log_normal, flat, VectorXd::Zero(1), {50000, 2.4, 100}, rng);
  const VectorXd s = chain.samples.col(0);
  const double mean = s.mean();
  const double var = (s.array() - mean).square().mean();
  EXPECT_NEAR(mean, 0.0, 0.02);
  EXPECT_NEAR(var, 1.0, 0.05);
  EXPECT_GT(chain.acceptance_rate(), 0.3);
  EXPECT_LT(chain.acceptance_rate(), 0.6);
}

TEST(EvalMcmc, ChainLengthAndDeterminism) {
  const auto ll = [](const VectorXd& t) { return -t.squaredNorm(); };
  std::mt19937_64 a(3), b(3);
  const auto c1 = eval::metropolis_hastings(ll, eval::uniform_box_prior(-2, 2, 2), VectorXd::Zero(2), {777, 0.15, 100}, a);
  const auto c2 = eval::metropolis_hastings(ll, eval::uniform_box_prior(-2, 2, 2), VectorXd::Zero(2), {777, 0.15, 100}, b);
  EXPECT_EQ(c1.samples.rows(), 677);
  EXPECT_EQ(c1.samples.cols(), 2);
  EXPECT_EQ(c1.proposed, 777);
  EXPECT_EQ(c1.samples, c2.samples);
}

TEST(EvalMcmc, Preconditions) {
  std::mt19937_64 rng(4);
  const auto flat = [](const VectorXd&) { return 0.0; };
  const auto bad = [](const VectorXd&) { return std::nan(""); };
  EXPECT_THROW(eval::metropolis_hastings(bad, flat, VectorXd::Zero(1), {}, rng), NumericalError);
  EXPECT_THROW(eval::metropolis_hastings(flat, eval::uniform_box_prior(-1, 1, 1), VectorXd::Constant(1, 3.0), {}, rng),
               NumericalError);
  EXPECT_THROW(eval::metropolis_hastings(flat, flat, VectorXd::Zero(1), {100, 0.15, 100}, rng), ContractViolation);
  EXPECT_THROW(eval::metropolis_hastings(flat, flat, VectorXd::Zero(1), {200, 0.0, 100}, rng), ContractViolation);
}

// ---- MMD ----

TEST(EvalMmd, IdenticalSetsGiveZero) {
  std::mt19937_64 rng(5);
  const MatrixXd a = random_array(rng, 30, 2);
  EXPECT_NEAR(eval::mmd(a, a, 0.7), 0.0, 1e-15);
  EXPECT_NEAR(eval::mmd(a, a), 0.0, 1e-15);
}

TEST(EvalMmd, SingletonClosedForm) {
  const MatrixXd a = MatrixXd::Zero(1, 1), b = MatrixXd::Ones(1, 1);
  EXPECT_NEAR(eval::mmd(a, b, 1.0), 0.7869386805747332, 1e-12);
}

TEST(EvalMmd, MatchesBruteForce) {
  std::mt19937_64 rng(6);
  for (int rep = 0; rep < 5; ++rep) {
    const MatrixXd a = random_array(rng, 50, 3);
    const MatrixXd b = random_array(rng, 50, 3, -0.5, 1.5);
    const double h = 0.3 + 0.2 * rep;
    EXPECT_NEAR(eval::mmd(a, b, h), brute_mmd(a, b, h), 1e-12);
  }
}

TEST(EvalMmd, MedianHeuristicAndBlocks) {
  std::mt19937_64 rng(7);
  // More rows than one kernel block, so the blocked sums are exercised.
  const MatrixXd a = random_array(rng, 300, 1), b = random_array(rng, 280, 1, 0, 2);
  const double h = eval::median_heuristic(a, b);
  EXPECT_GT(h, 0.0);
  EXPECT_NEAR(eval::mmd(a, b), brute_mmd(a, b, h), 1e-12);
  EXPECT_THROW(eval::mmd(MatrixXd(0, 1), b), ContractViolation);
}

// ---- OOD AUC ----

TEST(EvalAuc, SeparatedAndIdentical) {
  EXPECT_EQ(eval::ood_auc(vec({1, 2, 3}), vec({4, 5})), 1.0);
  EXPECT_EQ(eval::ood_auc(vec({1, 2, 3}), vec({1, 2, 3})), 0.5);
}

TEST(EvalAuc, ExhaustivePairCount) {
  // 2.5 beats two in-scores and 3.5 beats three: 5 of 6 pairs.
  EXPECT_NEAR(eval::ood_auc(vec({1, 2, 3}), vec({2.5, 3.5})), 0.8333333333333334, 1e-15);
  EXPECT_NEAR(eval::ood_auc(vec({1, 2, 3}), vec({2, 3.5})), brute_auc(vec({1, 2, 3}), vec({2, 3.5})), 1e-15);
}

TEST(EvalAuc, MatchesBruteForceAndMonotoneInvariant) {
  std::mt19937_64 rng(8);
  const VectorXd in = random_array(rng, 60, 1, -1, 1).col(0);
  VectorXd out = random_array(rng, 45, 1, -0.5, 1.5).col(0);
  out(0) = in(3);  // a tie
  const double auc = eval::ood_auc(in, out);
  EXPECT_NEAR(auc, brute_auc(in, out), 1e-12);
  const auto warp = [](const VectorXd& v) { return VectorXd((3 * v.array()).exp() + v.array()); };
  EXPECT_EQ(eval::ood_auc(warp(in), warp(out)), auc);
}

TEST(EvalAuc, BothScoresReportLarger) {
  // Out-of-distribution points have lower likelihood but reconstruct equally well.
  const auto r = eval::ood_auc_both(vec({0, 0.1}), vec({-5, -6}), vec({1, 2}), vec({1, 2}));
  EXPECT_EQ(r.auc_log_likelihood, 1.0);
  EXPECT_EQ(r.auc_reconstruction, 0.5);
  EXPECT_EQ(r.best(), 1.0);
}

// ---- KDE ----

TEST(EvalKde, SingleKernelClosedForm) {
  EXPECT_NEAR(eval::kde_log_posterior(MatrixXd::Constant(1, 1, 0.3), VectorXd::Constant(1, 0.3), 0.1),
              1.383646559789373, 1e-12);
}

TEST(EvalKde, TranslationInvarianceAndBruteForce) {
  std::mt19937_64 rng(9);
  const MatrixXd s = random_array(rng, 200, 2, -0.3, 0.3);
  const VectorXd t = vec({0.05, -0.1});
  const double v = eval::kde_log_posterior(s, t);
  EXPECT_NEAR(v, brute_kde(s, t, 0.1), 1e-12);
  const VectorXd shift = vec({4.0, -2.5});
  const MatrixXd moved = s.rowwise() + shift.transpose();
  EXPECT_NEAR(eval::kde_log_posterior(moved, t + shift), v, 1e-12);
  eval::Chain c;
  c.samples = s;
  EXPECT_EQ(eval::kde_log_posterior(c, t), v);
}

// ---- grid normalization ----

TEST(EvalGrid, StandardNormal2d) {
  const auto logp = [](const MatrixXd& x) {
    return VectorXd(-0.5 * x.rowwise().squaredNorm().array() - std::log(2 * std::numbers::pi));
  };
  EXPECT_NEAR(eval::grid_normalization(logp, {{-6, 6}, {-6, 6}}, 400), 1.0, 0.005);
}

TEST(EvalGrid, UniformIsExact) {
  const auto logp = [](const MatrixXd& x) { return VectorXd::Constant(x.rows(), -std::log(2.0 * 3.0 * 0.5)); };
  EXPECT_NEAR(eval::grid_normalization(logp, {{-1, 1}, {0, 3}, {2, 2.5}}, 37), 1.0, 1e-12);
  EXPECT_THROW(eval::grid_normalization(logp, {}, 10), ContractViolation);
}

TEST(EvalGrid, TrainedAmbientFlowOnCircle) {
  models::ModelConfig cfg;
  cfg.variant = models::Variant::AF;
  cfg.n = 2;
  cfg.d = 2;
  cfg.outer.layers = 3;
  cfg.outer.net = {16, 1};
  cfg.seed = 10;
  auto m = models::build_model(cfg);
  std::mt19937_64 rng(11);
  const data::Dataset circle{data::sample_circle(1000, rng), nd::Array(1000, 0), nd::Array(1000, 0)};
  train::TrainPlan plan;
  plan.epochs = 3;
  plan.batch_d = 50;
  plan.learning_rate = 3e-3;
  const auto log = train::train(*m, circle, plan, rng);
  ASSERT_LT(log.epochs.back().val_loss, log.epochs.front().train_loss + 1.0);
  const auto logp = [&](const MatrixXd& x) {
    nd::NoGradGuard g;
    return VectorXd(m->log_prob(nd::constant(x)).value().col(0));
  };
  EXPECT_NEAR(eval::grid_normalization(logp, {{-6, 6}, {-6, 6}}, 300), 1.0, 0.02);
}

// ---- reports and model metrics ----

TEST(EvalReport, TextRoundTripAndCsv) {
  eval::MetricReport r;
  r.dataset = "surface";
  r.checkpoint = "0x1234abcd";
  r.config_hash = "00ff00ff";
  r.seed = 42;
  r.mean_reconstruction_error = 0.1 + 0.2;
  r.auc = 0.75;
  r.counts["test_points"] = 1000;
  const auto back = eval::MetricReport::from_text(r.to_text());
  EXPECT_EQ(back.dataset, r.dataset);
  EXPECT_EQ(back.checkpoint, r.checkpoint);
  EXPECT_EQ(back.config_hash, r.config_hash);
  EXPECT_EQ(back.seed, 42u);
  EXPECT_EQ(back.mean_reconstruction_error, r.mean_reconstruction_error);
  EXPECT_EQ(back.auc, 0.75);
  EXPECT_FALSE(back.mmd.has_value());
  EXPECT_EQ(back.counts.at("test_points"), 1000);
  EXPECT_EQ(eval::MetricReport::csv_header(),
            "dataset,checkpoint,config_hash,seed,mean_manifold_distance,mean_reconstruction_error,mmd,auc,log_posterior");
  EXPECT_EQ(r.csv_row(), "surface,0x1234abcd,00ff00ff,42,,0.30000000000000004,,0.75,");
  EXPECT_THROW(eval::MetricReport::from_text("auc=abc\n"), io::FormatError);
  EXPECT_THROW(eval::MetricReport::from_text("bogus=1\n"), io::FormatError);
}

TEST(EvalReport, ChainCsvRoundTrip) {
  std::mt19937_64 rng(12);
  const auto chain = eval::metropolis_hastings([](const VectorXd& t) { return -t.squaredNorm(); },
                                               eval::uniform_box_prior(-1, 1, 2), VectorXd::Zero(2), {300, 0.15, 100}, rng);
  std::stringstream ss;
  io::write_csv(ss, eval::chain_table(chain));
  const auto t = io::read_csv(ss, eval::kChainSchema);
  EXPECT_EQ(t.meta.at("burn_in"), "100");
  EXPECT_EQ(eval::chain_samples(t), chain.samples);
}

TEST(EvalReport, ReconstructionAndManifoldDistance) {
  // Untrained and unpermuted, the M-flow is the identity and its manifold is the first axis.
  models::ModelConfig cfg;
  cfg.n = 1;
  cfg.d = 2;
  cfg.outer.permutations = false;
  cfg.outer.layers = 2;
  cfg.inner.layers = 2;
  cfg.outer.net = cfg.inner.net = {8, 1};
  auto m = models::build_model(cfg);
  nd::Array x(3, 2);
  x << 0.5, 0.0, -1.0, 0.25, 2.0, -0.75;
  EXPECT_NEAR(eval::mean_reconstruction_error(*m, x), (0.0 + 0.25 + 0.75) / 3, 1e-12);
  const auto scores = eval::score_points(*m, x, {}, 2);
  EXPECT_NEAR(scores.reconstruction(2), 0.75, 1e-12);
  EXPECT_TRUE(scores.log_likelihood.allFinite());
  EXPECT_NEAR(eval::mean_manifold_distance(x, [](const VectorXd& p) { return std::abs(p(1)); }), 1.0 / 3, 1e-15);
}

// ---- posterior pipeline ----

TEST(EvalPosterior, TrueLikelihoodChainsAgreeMoreThanWrongOne) {
  const auto spec = data::SurfaceSpec::standard();
  std::mt19937_64 rng(13);
  const auto observed = data::sample_surface(10, 0.0, rng, spec).x;
  const auto true_ll = [&](const VectorXd& t) {
    double s = 0;
    for (Eigen::Index i = 0; i < observed.rows(); ++i) s += data::surface_log_likelihood(observed.row(i).transpose(), t(0), spec);
    return s;
  };
  // The θ-dependent width frozen: the likelihood no longer sees θ.
  const auto wrong_ll = [&](const VectorXd&) { return true_ll(VectorXd::Constant(1, 1.0)); };
  const auto prior = eval::uniform_box_prior(-1, 1, 1);
  const eval::MetropolisOptions opt;  // 5000 steps, step 0.15, burn-in 100
  std::mt19937_64 r1(14), r2(15), r3(16);
  const auto thin = [](const MatrixXd& s) {
    MatrixXd out(s.rows() / 10, s.cols());
    for (Eigen::Index i = 0; i < out.rows(); ++i) out.row(i) = s.row(10 * i);
    return out;
  };
  const MatrixXd a = thin(eval::metropolis_hastings(true_ll, prior, VectorXd::Zero(1), opt, r1).samples);
  const MatrixXd b = thin(eval::metropolis_hastings(true_ll, prior, VectorXd::Zero(1), opt, r2).samples);
  const MatrixXd w = thin(eval::metropolis_hastings(wrong_ll, prior, VectorXd::Zero(1), opt, r3).samples);
  EXPECT_LT(eval::mmd(a, b), eval::mmd(a, w));
}
