#pragma once

#include <algorithm>
#include <chrono>
#include <functional>
#include <numeric>
#include <random>
#include <string>
#include <vector>

#include "mflow/datasets/io.hpp"
#include "mflow/training/losses.hpp"
#include "mflow/training/optimizer.hpp"
#include "mflow/training/plan.hpp"

namespace mflow::train {

// Non-finite loss or a numerical failure inside an update. Carries the
// parameters as they were before the failing step.
class TrainingAborted : public NumericalError {
 public:
  TrainingAborted(const std::string& what, nd::ParamStore::Snapshot snapshot, int epoch, long step, Phase phase)
      : NumericalError(what), snapshot_(std::move(snapshot)), epoch_(epoch), step_(step), phase_(phase) {}
  const nd::ParamStore::Snapshot& snapshot() const { return snapshot_; }
  int epoch() const { return epoch_; }
  long step() const { return step_; }
  Phase phase() const { return phase_; }

 private:
  nd::ParamStore::Snapshot snapshot_;
  int epoch_;
  long step_;
  Phase phase_;
};

struct TrainHooks {
  std::function<void(const EpochRecord&)> on_epoch;
};

namespace detail {

inline std::vector<std::string> targets_for(const ManifoldFlowModel& m, Phase phase) {
  const auto& p = m.params();
  if (!m.learns_manifold()) return p.names();
  switch (phase) {
    case Phase::Manifold: {
      auto out = p.names_with_prefix("f.");
      const auto e = p.names_with_prefix("e.");
      out.insert(out.end(), e.begin(), e.end());
      return out;
    }
    case Phase::Density: return p.names_with_prefix("h.");
    case Phase::Simultaneous:
    case Phase::Transport: return p.names();
  }
  return {};
}

inline long batch_size_for(const TrainPlan& plan, Phase phase) {
  switch (phase) {
    case Phase::Manifold:
    case Phase::Simultaneous: return plan.batch_m;
    case Phase::Density: return plan.batch_d;
    case Phase::Transport: return plan.batch_ot;
  }
  return plan.batch_m;
}

inline long batches_per_epoch(long n, long batch) { return (n + batch - 1) / batch; }

// Runs of equal phases form stages, except for interleaved schedules, which
// are one stage selected on the sum of both phase losses.
inline bool interleaved(const TrainPlan& plan, bool learns_manifold) {
  return learns_manifold && (plan.schedule == Schedule::MDAlternating || plan.schedule == Schedule::OTD);
}

inline std::string stage_name(Phase p) {
  switch (p) {
    case Phase::Manifold: return "manifold";
    case Phase::Density: return "density";
    case Phase::Simultaneous: return "simultaneous";
    case Phase::Transport: return "transport";
  }
  return "?";
}

class Runner {
 public:
  Runner(ManifoldFlowModel& model, const data::Dataset& data, const TrainPlan& plan, std::mt19937_64& rng)
      : model_(model), plan_(plan), rng_(rng), opt_(AdamWConfig{plan.learning_rate, 0.9, 0.999, 1e-8, plan.weight_decay}) {
    plan.validate();
    if (data.size() < 2) throw ContractViolation("train: need at least two samples");
    if (data.dim() != model.ambient_dim()) throw ContractViolation("train: data width does not match the model");
    if (model.context_dim() > 0 && data.context_dim() != model.context_dim()) {
      throw ContractViolation("train: data context width does not match the model");
    }
    sinkhorn_.epsilon = plan.sinkhorn_epsilon;
    sinkhorn_.max_iterations = plan.sinkhorn_max_iterations;
    sinkhorn_.tolerance = plan.sinkhorn_tolerance;
    sinkhorn_.strict = plan.sinkhorn_strict;

    std::vector<Eigen::Index> idx(static_cast<std::size_t>(data.size()));
    std::iota(idx.begin(), idx.end(), Eigen::Index{0});
    std::shuffle(idx.begin(), idx.end(), rng_);
    const auto n_val = std::clamp<Eigen::Index>(
        static_cast<Eigen::Index>(std::ceil(plan.validation_fraction * static_cast<double>(data.size()))), 1,
        data.size() - 1);
    val_ = data.rows({idx.begin(), idx.begin() + n_val});
    train_ = data.rows({idx.begin() + n_val, idx.end()});
    phases_ = epoch_phases(plan, model.learns_manifold());

    const bool uses_ot = std::find(phases_.begin(), phases_.end(), Phase::Transport) != phases_.end();
    if (uses_ot) {
      const Eigen::Index rows = std::min<Eigen::Index>(val_.size(), plan.batch_ot);
      val_ot_base_ = normal(rows, model.latent_dim());
    }

    // Each parameter anneals over the updates it will actually receive.
    std::map<std::string, long> planned;
    for (Phase ph : phases_) {
      const long steps = batches_per_epoch(train_.size(), batch_size_for(plan, ph));
      for (const auto& n : targets_for(model, ph)) planned[n] += steps;
    }
    for (const auto& [n, t] : planned) opt_.plan_updates(n, t);
  }

  PhaseLog run(const TrainHooks& hooks) {
    PhaseLog log;
    log.train_size = static_cast<long>(train_.size());
    log.validation_size = static_cast<long>(val_.size());
    const bool inter = interleaved(plan_, model_.learns_manifold());

    StageSummary stage;
    nd::ParamStore::Snapshot best;
    auto close_stage = [&](int last) {
      stage.last_epoch = last;
      model_.params().restore(best);
      for (auto& r : log.epochs)
        if (r.epoch >= stage.first_epoch && r.epoch <= last) r.snapshot = stage.best_epoch;
      log.stages.push_back(stage);
    };

    std::map<Phase, double> latest_val;
    for (int e = 0; e < static_cast<int>(phases_.size()); ++e) {
      const Phase ph = phases_[static_cast<std::size_t>(e)];
      const bool new_stage = e == 0 || (!inter && ph != phases_[static_cast<std::size_t>(e - 1)]);
      if (new_stage) {
        if (e > 0) close_stage(e - 1);
        stage = StageSummary{inter ? "alternating" : stage_name(ph), e, e, -1, 0.0};
      }
      const auto t0 = std::chrono::steady_clock::now();
      EpochRecord rec;
      rec.epoch = e;
      rec.phase = ph;
      rec.train_loss = run_epoch(e, ph);
      rec.val_loss = validation_loss(ph);
      latest_val[ph] = rec.val_loss;
      if (inter) {
        // Both phase losses at the current parameters.
        const Phase other = ph == Phase::Density ? (plan_.schedule == Schedule::OTD ? Phase::Transport : Phase::Manifold)
                                                 : Phase::Density;
        rec.selection_loss = rec.val_loss + validation_loss(other);
      } else {
        rec.selection_loss = rec.val_loss;
      }
      rec.seconds = std::chrono::duration<double>(std::chrono::steady_clock::now() - t0).count();
      if (stage.best_epoch < 0 || rec.selection_loss < stage.best_loss) {
        stage.best_epoch = e;
        stage.best_loss = rec.selection_loss;
        best = model_.params().snapshot();
      }
      log.epochs.push_back(rec);
      if (hooks.on_epoch) hooks.on_epoch(rec);
    }
    close_stage(static_cast<int>(phases_.size()) - 1);
    return log;
  }

  // The phase's loss on the validation set, evaluated in chunks.
  double validation_loss(Phase ph) {
    nd::NoGradGuard no_grad;
    if (ph == Phase::Transport) {
      const Eigen::Index rows = val_ot_base_.rows();
      std::vector<Eigen::Index> head(static_cast<std::size_t>(rows));
      std::iota(head.begin(), head.end(), Eigen::Index{0});
      const auto sub = val_.rows(head);
      return loss_for(ph, sub, val_ot_base_).item();
    }
    const Eigen::Index chunk = 1000;
    double total = 0.0;
    for (Eigen::Index s = 0; s < val_.size(); s += chunk) {
      const Eigen::Index r = std::min(chunk, val_.size() - s);
      std::vector<Eigen::Index> ids(static_cast<std::size_t>(r));
      std::iota(ids.begin(), ids.end(), s);
      total += loss_for(ph, val_.rows(ids), Array()).item() * static_cast<double>(r);
    }
    return total / static_cast<double>(val_.size());
  }

  const data::Dataset& train_split() const { return train_; }
  const data::Dataset& validation_split() const { return val_; }

 private:
  Array normal(Eigen::Index rows, Eigen::Index cols) {
    std::normal_distribution<double> n;
    Array a(rows, cols);
    for (Eigen::Index i = 0; i < a.size(); ++i) a.data()[i] = n(rng_);
    return a;
  }

  Tensor context_of(const data::Dataset& b) const {
    return model_.context_dim() > 0 ? nd::constant(b.theta) : Tensor();
  }

  Tensor loss_for(Phase ph, const data::Dataset& b, const Array& base) const {
    const Tensor x = nd::constant(b.x);
    const Tensor ctx = context_of(b);
    switch (ph) {
      case Phase::Manifold: return loss_recon(model_, x, ctx, plan_.lambda_m, plan_.recon_loss);
      case Phase::Density: return loss_nll(model_, x, ctx, /*include_gram=*/!model_.learns_manifold(), plan_.lambda_d);
      case Phase::Simultaneous: return loss_simultaneous(model_, x, ctx, plan_.s_nll_weight, plan_.s_recon_weight);
      case Phase::Transport: return loss_ot(model_, x, base, ctx, sinkhorn_, plan_.ot_weight);
    }
    return {};
  }

  double run_epoch(int epoch, Phase ph) {
    const auto targets = targets_for(model_, ph);
    const long batch = batch_size_for(plan_, ph);
    std::vector<Eigen::Index> order(static_cast<std::size_t>(train_.size()));
    std::iota(order.begin(), order.end(), Eigen::Index{0});
    std::shuffle(order.begin(), order.end(), rng_);

    double sum = 0.0;
    long count = 0;
    for (std::size_t s = 0; s < order.size(); s += static_cast<std::size_t>(batch)) {
      const auto end = std::min(order.size(), s + static_cast<std::size_t>(batch));
      const auto b = train_.rows({order.begin() + static_cast<std::ptrdiff_t>(s), order.begin() + static_cast<std::ptrdiff_t>(end)});
      const Array base = ph == Phase::Transport ? normal(b.size(), model_.latent_dim()) : Array();
      try {
        const Tensor loss = loss_for(ph, b, base);
        const double v = loss.item();
        if (!std::isfinite(v)) throw NumericalError("loss is " + std::to_string(v));
        auto grads = nd::grad(loss, model_.params());
        clip_grad_norm(grads, targets, plan_.clip_norm);
        for (const auto& n : targets)
          if (!grads.at(n).allFinite()) throw NumericalError("non-finite gradient for " + n);
        opt_.step(model_.params(), grads, targets);
        sum += v;
        ++count;
      } catch (const NumericalError& err) {
        throw TrainingAborted(std::string("training aborted in epoch ") + std::to_string(epoch) + " (phase " +
                                  phase_label(ph) + ", step " + std::to_string(count) + "): " + err.what(),
                              model_.params().snapshot(), epoch, count, ph);
      }
    }
    return sum / static_cast<double>(count);
  }

  ManifoldFlowModel& model_;
  TrainPlan plan_;
  std::mt19937_64& rng_;
  AdamW opt_;
  SinkhornOptions sinkhorn_;
  data::Dataset train_, val_;
  std::vector<Phase> phases_;
  Array val_ot_base_;
};

}  // namespace detail

// Trains according to plan.schedule. Models without a learned manifold (AF,
// PIE, FOM) are trained by maximum likelihood whatever the schedule. The
// returned model carries the best-validation snapshot of the last stage.
inline PhaseLog train(ManifoldFlowModel& model, const data::Dataset& data, const TrainPlan& plan,
                      std::mt19937_64& rng, const TrainHooks& hooks = {}) {
  detail::Runner runner(model, data, plan, rng);
  return runner.run(hooks);
}

inline PhaseLog train_md(ManifoldFlowModel& model, const data::Dataset& data, const TrainPlan& plan,
                         std::mt19937_64& rng, const TrainHooks& hooks = {}) {
  if (plan.schedule != Schedule::MDSequential && plan.schedule != Schedule::MDAlternating) {
    throw ContractViolation("train_md: schedule must be MD-sequential or MD-alternating");
  }
  if (!model.learns_manifold()) throw UnsupportedConfiguration("train_md: needs an mflow or meflow model");
  return train(model, data, plan, rng, hooks);
}

inline PhaseLog train_adversarial(ManifoldFlowModel& model, const data::Dataset& data, const TrainPlan& plan,
                                  std::mt19937_64& rng, const TrainHooks& hooks = {}) {
  if (plan.schedule != Schedule::OT && plan.schedule != Schedule::OTD) {
    throw ContractViolation("train_adversarial: schedule must be OT or OTD");
  }
  if (!model.learns_manifold()) throw UnsupportedConfiguration("train_adversarial: needs an mflow or meflow model");
  return train(model, data, plan, rng, hooks);
}

}  // namespace mflow::train
