#pragma once

#include <filesystem>
#include <memory>
#include <optional>
#include <ostream>
#include <random>
#include <sstream>
#include <string>

#include "mflow/cli/checkpoint.hpp"
#include "mflow/cli/config.hpp"
#include "mflow/datasets/circle.hpp"
#include "mflow/datasets/io.hpp"
#include "mflow/datasets/line_toy.hpp"
#include "mflow/datasets/lorenz.hpp"
#include "mflow/datasets/surface.hpp"
#include "mflow/eval/mcmc.hpp"
#include "mflow/eval/metrics.hpp"
#include "mflow/eval/report.hpp"
#include "mflow/models/builder.hpp"
#include "mflow/models/chart.hpp"
#include "mflow/training/trainer.hpp"

namespace mflow::cli {

using nd::Array;

enum ExitCode : int { kSuccess = 0, kFailure = 1, kConfigError = 2, kNumericalAbort = 3 };

inline constexpr const char* kTrainLogSchema = "mflow.trainlog.v1";
inline constexpr const char* kSamplesSchema = "mflow.samples.v1";
inline constexpr const char* kLandscapeSchema = "mflow.landscape.v1";

// Independent generator per purpose, so adding draws to one stage never
// shifts another.
enum class Stream : std::uint32_t { Data = 1, Training, Sampling, Evaluation, Observed, Chain, ReferenceChain, Landscape };

inline std::mt19937_64 rng_for(std::uint64_t seed, Stream s) {
  std::seed_seq seq{static_cast<std::uint32_t>(seed), static_cast<std::uint32_t>(seed >> 32), static_cast<std::uint32_t>(s)};
  return std::mt19937_64(seq);
}

// Graph chart of the mixture surface: z ↦ R (z0, z1, f(z0, z1)).
class SurfaceChart final : public models::PrescribedChart {
 public:
  explicit SurfaceChart(data::SurfaceSpec spec = data::SurfaceSpec::standard()) : spec_(std::move(spec)) {}
  Eigen::Index latent_dim() const override { return 2; }
  Eigen::Index ambient_dim() const override { return 3; }
  std::string name() const override { return "surface"; }
  Eigen::VectorXd embed(const Eigen::VectorXd& u) const override { return spec_.chart(u(0), u(1)); }
  Eigen::MatrixXd jacobian(const Eigen::VectorXd& u) const override {
    Eigen::Matrix<double, 3, 2> j;
    j.topRows<2>().setIdentity();
    j.row(2) = spec_.height_gradient(u(0), u(1)).transpose();
    return spec_.rotation * j;
  }
  Eigen::VectorXd coordinates(const Eigen::VectorXd& x) const override { return spec_.coordinates(x); }

 private:
  data::SurfaceSpec spec_;
};

struct ExperimentData {
  data::Dataset train, test;
  std::optional<data::Standardization> stats;  // lorenz only
};

inline ExperimentData make_data(const ExperimentConfig& c) {
  auto rng = rng_for(c.seed, Stream::Data);
  const auto& d = c.data;
  ExperimentData out;
  const auto plain = [](Array x) { return data::Dataset{std::move(x), Array(), Array()}; };
  if (d.id == "circle") {
    out.train = plain(data::sample_circle(d.train, rng));
    out.test = plain(data::sample_circle(d.test, rng));
  } else if (d.id == "surface") {
    auto tr = data::sample_surface_training(d.train, rng);
    auto te = data::sample_surface_training(d.test, rng);
    out.train = {tr.x, tr.theta, tr.z};
    out.test = {te.x, te.theta, te.z};
  } else if (d.id == "lorenz") {
    data::LorenzConfig lc;
    lc.trajectories = d.lorenz_trajectories;
    lc.t_end = d.lorenz_t_end;
    lc.warmup = d.lorenz_warmup;
    const auto s = data::sample_lorenz(d.train + d.test, lc, rng);
    out.train = plain(s.x.topRows(d.train));
    out.test = plain(s.x.bottomRows(d.test));
    out.stats = s.stats;
  } else {
    out.train = plain(data::sample_line_toy(d.train, d.line_alpha, d.line_sigma, rng));
    out.test = plain(data::sample_line_toy(d.test, d.line_alpha, d.line_sigma, rng));
  }
  return out;
}

// Euclidean distance to the true data manifold, where one is known.
inline std::optional<std::function<double(const Eigen::VectorXd&)>> manifold_distance(const ExperimentConfig& c) {
  if (c.data.id == "circle") return [](const Eigen::VectorXd& x) { return std::abs(x.norm() - 1.0); };
  if (c.data.id == "line") {
    const double a = c.data.line_alpha;
    return [a](const Eigen::VectorXd& x) { return std::abs(-std::sin(a) * x(0) + std::cos(a) * x(1)); };
  }
  if (c.data.id == "surface") {
    const auto spec = data::SurfaceSpec::standard();
    return [spec](const Eigen::VectorXd& x) { return spec.distance(x); };
  }
  return std::nullopt;
}

inline std::unique_ptr<models::ManifoldFlowModel> build(const ExperimentConfig& c) {
  models::ChartPtr chart;
  if (c.model.variant == models::Variant::FOM) {
    if (c.data.id == "circle") {
      chart = std::make_shared<models::UnitCircleChart>();
    } else {
      chart = std::make_shared<SurfaceChart>();
    }
  }
  return models::build_model(c.model, chart);
}

// ---- checkpoints ----

inline std::string format_row(const Eigen::RowVectorXd& v) {
  std::string s;
  for (Eigen::Index i = 0; i < v.size(); ++i) s += (i ? "," : "") + io::format_double(v(i));
  return s;
}

inline Eigen::RowVectorXd parse_row(const std::string& s) {
  const auto cells = io::split(s, ',');
  Eigen::RowVectorXd v(static_cast<Eigen::Index>(cells.size()));
  for (std::size_t i = 0; i < cells.size(); ++i) {
    ExperimentConfig::parse_value(cells[i], v(static_cast<Eigen::Index>(i)));
  }
  return v;
}

inline Checkpoint make_checkpoint(const ExperimentConfig& c, const models::ManifoldFlowModel& model,
                                  const std::optional<data::Standardization>& stats, const std::mt19937_64& rng) {
  Checkpoint ck;
  for (const auto& [k, v] : c.to_map())
    if (k != "out") ck.meta["config." + k] = v;
  ck.meta["config_hash"] = c.hash();
  ck.meta["variant"] = models::to_string(c.model.variant);
  if (stats) {
    ck.meta["standardization.mean"] = format_row(stats->mean);
    ck.meta["standardization.std"] = format_row(stats->std);
  }
  if (model.outer()) ck.meta["layout.f"] = tf::layout(*model.outer());
  if (model.inner()) ck.meta["layout.h"] = tf::layout(*model.inner());
  std::ostringstream rs;
  rs << rng;
  ck.meta["rng_state"] = rs.str();
  for (const auto& [name, t] : model.params()) ck.arrays[name] = t.value();
  return ck;
}

struct LoadedModel {
  ExperimentConfig config;
  std::unique_ptr<models::ManifoldFlowModel> model;
  std::optional<data::Standardization> stats;
  std::mt19937_64 rng;  // training generator state at save time
};

inline LoadedModel restore(const Checkpoint& ck) {
  KeyValues kv;
  for (const auto& [k, v] : ck.meta)
    if (k.rfind("config.", 0) == 0) kv[k.substr(7)] = v;
  LoadedModel out{ExperimentConfig::from_map(kv), nullptr, std::nullopt, {}};
  out.model = build(out.config);
  // Parameter names and shapes do not pin down masks and permutations.
  const std::pair<const char*, const tf::Transform*> flows[] = {{"layout.f", out.model->outer()},
                                                                {"layout.h", out.model->inner()}};
  for (const auto& [key, flow] : flows) {
    const auto it = ck.meta.find(key);
    if ((it == ck.meta.end()) != (flow == nullptr) || (flow && it->second != tf::layout(*flow))) {
      throw CheckpointError(std::string("checkpoint: ") + key + " differs from the layout this build constructs");
    }
  }
  auto& params = out.model->params();
  if (params.size() != ck.arrays.size()) throw CheckpointError("checkpoint: parameter count does not match the model");
  for (const auto& [name, a] : ck.arrays) {
    if (!params.contains(name)) throw CheckpointError("checkpoint: unknown parameter '" + name + "'");
    try {
      params.set_value(name, a);
    } catch (const ContractViolation& e) {
      throw CheckpointError(std::string("checkpoint: ") + e.what());
    }
  }
  if (ck.meta.count("standardization.mean")) {
    out.stats = data::Standardization{parse_row(ck.meta.at("standardization.mean")), parse_row(ck.meta.at("standardization.std"))};
  }
  if (const auto it = ck.meta.find("rng_state"); it != ck.meta.end()) {
    std::istringstream is(it->second);
    if (!(is >> out.rng)) throw CheckpointError("checkpoint: malformed rng_state");
  }
  return out;
}

// The run config must describe the checkpoint's model and dataset.
inline void require_compatible(const ExperimentConfig& run, const ExperimentConfig& trained) {
  const auto a = run.to_map(), b = trained.to_map();
  for (const auto& [k, v] : b) {
    if ((k.rfind("model.", 0) == 0 || k == "data.id") && a.at(k) != v) {
      throw ConfigError("checkpoint was trained with " + k + " = " + v + " but the config says " + a.at(k));
    }
  }
}

inline LoadedModel load_for(const ExperimentConfig& run, const std::string& checkpoint_path) {
  if (!std::filesystem::exists(checkpoint_path)) throw CheckpointError("checkpoint '" + checkpoint_path + "' does not exist");
  auto loaded = restore(load_checkpoint(checkpoint_path));
  require_compatible(run, loaded.config);
  return loaded;
}

// ---- artifacts ----

inline std::filesystem::path out_dir(const ExperimentConfig& c) {
  std::filesystem::path p(c.out);
  std::filesystem::create_directories(p);
  return p;
}

inline io::CsvTable tagged_table(const ExperimentConfig& c, const char* schema) {
  io::CsvTable t;
  t.schema = schema;
  t.meta = {{"config_hash", c.hash()}, {"seed", std::to_string(c.seed)}};
  return t;
}

inline void write_text(const std::filesystem::path& p, const std::string& s) { write_file(p.string(), s); }

// ---- subcommands ----

struct TrainResult {
  train::PhaseLog log;
  std::filesystem::path checkpoint;
  std::filesystem::path loss_csv;
};

inline io::CsvTable phase_log_table(const ExperimentConfig& c, const train::PhaseLog& log) {
  auto t = tagged_table(c, kTrainLogSchema);
  t.meta["phase_codes"] = "m:0;d:1;s:2;t:3";
  t.columns = {"epoch", "phase", "train_loss", "val_loss", "selection_loss", "snapshot"};
  for (const auto& e : log.epochs) {
    const std::string codes = "mdst";
    const double phase = static_cast<double>(codes.find(train::phase_label(e.phase)));
    t.rows.push_back({static_cast<double>(e.epoch), phase, e.train_loss, e.val_loss, e.selection_loss,
                      static_cast<double>(e.snapshot)});
  }
  return t;
}

// Trains from scratch and writes checkpoint.bin, train_log.csv and config.txt.
// A numerical abort still leaves aborted.bin with the last finite parameters.
inline TrainResult run_train(const ExperimentConfig& c, std::ostream& log) {
  const auto dir = out_dir(c);
  write_text(dir / "config.txt", "# config_hash=" + c.hash() + "\nout = " + c.out + "\n" + c.canonical());
  const auto d = make_data(c);
  auto model = build(c);
  auto rng = rng_for(c.seed, Stream::Training);
  log << "train: " << models::to_string(c.model.variant) << " on " << c.data.id << " (" << d.train.size()
      << " points, " << c.plan.epochs << " epochs, schedule " << train::to_string(c.plan.schedule) << ")\n";
  train::TrainHooks hooks;
  hooks.on_epoch = [&log](const train::EpochRecord& e) {
    log << "  epoch " << e.epoch << " [" << train::phase_label(e.phase) << "] train " << e.train_loss << " val "
        << e.val_loss << " (" << e.seconds << " s)\n";
  };
  TrainResult r;
  try {
    r.log = train::train(*model, d.train, c.plan, rng, hooks);
  } catch (const train::TrainingAborted& e) {
    model->params().restore(e.snapshot());
    save_checkpoint((dir / "aborted.bin").string(), make_checkpoint(c, *model, d.stats, rng));
    throw;
  }
  r.checkpoint = dir / "checkpoint.bin";
  r.loss_csv = dir / "train_log.csv";
  save_checkpoint(r.checkpoint.string(), make_checkpoint(c, *model, d.stats, rng));
  io::write_csv(r.loss_csv.string(), phase_log_table(c, r.log));
  return r;
}

inline Array context_row(const ExperimentConfig& c, double theta) {
  return c.model.context_dim > 0 ? Array::Constant(1, c.model.context_dim, theta) : Array();
}

// Draws `count` samples (conditioned on eval.theta) into samples.csv.
inline Array run_sample(const ExperimentConfig& c, const std::string& checkpoint, long count, std::ostream& log) {
  if (count < 1) throw ConfigError("sample count must be positive");
  const auto loaded = load_for(c, checkpoint);
  auto rng = rng_for(c.seed, Stream::Sampling);
  const Array x = loaded.model->sample(count, rng, context_row(c, c.eval.theta));
  auto t = tagged_table(c, kSamplesSchema);
  t.meta["checkpoint"] = checkpoint_hash(checkpoint);
  for (Eigen::Index k = 0; k < x.cols(); ++k) t.columns.push_back("x" + std::to_string(k));
  for (Eigen::Index i = 0; i < x.rows(); ++i) t.rows.emplace_back(x.row(i).data(), x.row(i).data() + x.cols());
  io::write_csv((out_dir(c) / "samples.csv").string(), t);
  log << "sample: wrote " << count << " samples\n";
  return x;
}

inline eval::MetricReport base_report(const ExperimentConfig& c, const std::string& checkpoint) {
  eval::MetricReport r;
  r.dataset = c.data.id;
  r.checkpoint = checkpoint_hash(checkpoint);
  r.config_hash = c.hash();
  r.seed = c.seed;
  return r;
}

inline void write_report(const std::filesystem::path& stem, const eval::MetricReport& r) {
  write_text(stem.string() + ".txt", r.to_text());
  write_text(stem.string() + ".csv", eval::MetricReport::csv_header() + "\n" + r.csv_row() + "\n");
}

// Sample-quality, reconstruction and OOD metrics into report.txt / report.csv.
inline eval::MetricReport run_eval(const ExperimentConfig& c, const std::string& checkpoint, std::ostream& log) {
  const auto loaded = load_for(c, checkpoint);
  const auto& model = *loaded.model;
  const auto d = make_data(c);
  auto rng = rng_for(c.seed, Stream::Evaluation);
  auto r = base_report(c, checkpoint);
  const Array test_ctx = c.model.context_dim > 0 ? d.test.theta : Array();
  r.counts["test_points"] = static_cast<long>(d.test.size());

  const auto distance = manifold_distance(c);
  if (c.eval.distance && distance) {
    const Array gen = model.sample(c.eval.generated, rng, context_row(c, c.eval.theta));
    r.mean_manifold_distance = eval::mean_manifold_distance(gen, *distance);
    r.counts["generated"] = c.eval.generated;
  }
  if (c.eval.reconstruction && model.has_manifold()) {
    r.mean_reconstruction_error = eval::mean_reconstruction_error(model, d.test.x, test_ctx);
  }
  if (c.eval.auc) {
    const Array ood = data::add_noise(d.test.x, c.eval.ood_sigma, rng);
    const auto in = eval::score_points(model, d.test.x, test_ctx);
    const auto out = eval::score_points(model, ood, test_ctx);
    const auto auc = eval::ood_auc_both(in.log_likelihood, out.log_likelihood, in.reconstruction, out.reconstruction);
    log << "eval: AUC log-likelihood " << auc.auc_log_likelihood << ", reconstruction " << auc.auc_reconstruction << '\n';
    r.auc = auc.best();
    r.counts["ood_points"] = static_cast<long>(ood.rows());
  }
  if (c.eval.mmd) {
    // Generated points share the test set's conditioning values.
    const Array gen = c.model.context_dim > 0 ? model.sample(d.test.size(), rng, test_ctx) : model.sample(d.test.size(), rng);
    r.mmd = eval::mmd(gen, d.test.x);
  }
  write_report(out_dir(c) / "report", r);
  log << r.to_text();
  return r;
}

struct McmcResult {
  eval::Chain chain;
  std::optional<eval::Chain> reference;
  eval::MetricReport report;
};

inline Eigen::MatrixXd thin_to(const Eigen::MatrixXd& s, Eigen::Index max_rows) {
  const Eigen::Index stride = std::max<Eigen::Index>(1, (s.rows() + max_rows - 1) / max_rows);
  Eigen::MatrixXd out((s.rows() + stride - 1) / stride, s.cols());
  for (Eigen::Index i = 0; i < out.rows(); ++i) out.row(i) = s.row(i * stride);
  return out;
}

// Posterior over θ for observed surface points at mcmc.theta_star, with the
// model's conditional density as likelihood.
inline McmcResult run_mcmc(const ExperimentConfig& c, const std::string& checkpoint, std::ostream& log) {
  if (c.data.id != "surface" || c.model.context_dim != 1) {
    throw ConfigError("mcmc needs a model conditioned on θ of the surface dataset (data.id = surface, model.conditional = true)");
  }
  data::check_theta(c.mcmc.theta_star);
  const auto loaded = load_for(c, checkpoint);
  const auto& model = *loaded.model;
  auto obs_rng = rng_for(c.seed, Stream::Observed);
  const Array observed = data::sample_surface(c.mcmc.observed, c.mcmc.theta_star, obs_rng).x;
  const nd::Tensor xo = nd::constant(observed);
  const eval::LogDensity model_ll = [&](const Eigen::VectorXd& theta) {
    nd::NoGradGuard g;
    return model.log_prob(xo, nd::constant(Array::Constant(1, 1, theta(0)))).value().sum();
  };
  const auto prior = eval::uniform_box_prior(-1.0, 1.0, 1);
  const eval::MetropolisOptions opt{c.mcmc.steps, c.mcmc.step_size, c.mcmc.burn_in};
  const Eigen::VectorXd init = Eigen::VectorXd::Zero(1);

  McmcResult res;
  auto chain_rng = rng_for(c.seed, Stream::Chain);
  res.chain = eval::metropolis_hastings(model_ll, prior, init, opt, chain_rng);
  const auto dir = out_dir(c);
  auto tag = [&](io::CsvTable t) {
    t.meta["config_hash"] = c.hash();
    t.meta["seed"] = std::to_string(c.seed);
    t.meta["checkpoint"] = checkpoint_hash(checkpoint);
    return t;
  };
  io::write_csv((dir / "chain.csv").string(), tag(eval::chain_table(res.chain)));

  res.report = base_report(c, checkpoint);
  res.report.dataset = "surface-posterior";
  res.report.log_posterior = eval::kde_log_posterior(res.chain, Eigen::VectorXd::Constant(1, c.mcmc.theta_star), c.mcmc.kde_bandwidth);
  res.report.counts["observed"] = c.mcmc.observed;
  res.report.counts["chain_length"] = static_cast<long>(res.chain.samples.rows());
  res.report.counts["accepted"] = res.chain.accepted;
  if (c.mcmc.reference) {
    const auto spec = data::SurfaceSpec::standard();
    const eval::LogDensity true_ll = [&](const Eigen::VectorXd& theta) {
      double s = 0.0;
      for (Eigen::Index i = 0; i < observed.rows(); ++i) s += data::surface_log_likelihood(observed.row(i).transpose(), theta(0), spec);
      return s;
    };
    auto ref_rng = rng_for(c.seed, Stream::ReferenceChain);
    res.reference = eval::metropolis_hastings(true_ll, prior, init, opt, ref_rng);
    io::write_csv((dir / "reference_chain.csv").string(), tag(eval::chain_table(*res.reference)));
    res.report.mmd = eval::mmd(thin_to(res.chain.samples, 1000), thin_to(res.reference->samples, 1000));
  }
  write_report(dir / "mcmc_report", res.report);
  log << "mcmc: acceptance " << res.chain.acceptance_rate() << '\n' << res.report.to_text();
  return res;
}

// Loss surfaces of the line toy model over an (α, σ) grid into landscape.csv.
inline std::vector<data::LandscapePoint> run_landscape(const ExperimentConfig& c, std::ostream& log) {
  const auto& l = c.landscape;
  if (l.points < 1) throw ConfigError("landscape.points must be positive");
  if (!(c.data.line_sigma > 0)) throw ConfigError("data.line.sigma must be positive");
  auto rng = rng_for(c.seed, Stream::Landscape);
  const Array pts = data::sample_line_toy(l.points, c.data.line_alpha, c.data.line_sigma, rng);
  const data::LandscapeGrid g{l.alpha_min, l.alpha_max, l.sigma_min, l.sigma_max, l.alpha_steps, l.sigma_steps, l.lambda};
  std::vector<data::LandscapePoint> grid;
  try {
    grid = data::line_landscape(pts, g);
  } catch (const ContractViolation& e) {
    throw ConfigError(e.what());
  }
  auto t = tagged_table(c, kLandscapeSchema);
  t.columns = {"alpha", "sigma", "naive_loglik", "recon", "combined"};
  for (const auto& p : grid) t.rows.push_back({p.alpha, p.sigma, p.naive_loglik, p.recon, p.combined});
  io::write_csv((out_dir(c) / "landscape.csv").string(), t);
  log << "landscape: " << grid.size() << " grid points\n";
  return grid;
}

}  // namespace mflow::cli
