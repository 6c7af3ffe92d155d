#pragma once

#include <cmath>
#include <string>
#include <vector>

#include "mflow/errors.hpp"

namespace mflow::train {

enum class Schedule { S, MDSequential, MDAlternating, OT, OTD };

inline std::string to_string(Schedule s) {
  switch (s) {
    case Schedule::S: return "S";
    case Schedule::MDSequential: return "MD-sequential";
    case Schedule::MDAlternating: return "MD-alternating";
    case Schedule::OT: return "OT";
    case Schedule::OTD: return "OTD";
  }
  return "?";
}

inline Schedule parse_schedule(const std::string& s) {
  for (auto v : {Schedule::S, Schedule::MDSequential, Schedule::MDAlternating, Schedule::OT, Schedule::OTD})
    if (s == to_string(v)) return v;
  throw ContractViolation("unknown schedule '" + s + "'");
}

// Per-row reconstruction penalty of the manifold phase.
enum class ReconLoss { Squared, Norm };

inline std::string to_string(ReconLoss r) { return r == ReconLoss::Squared ? "squared" : "norm"; }

inline ReconLoss parse_recon_loss(const std::string& s) {
  if (s == "squared") return ReconLoss::Squared;
  if (s == "norm") return ReconLoss::Norm;
  throw ContractViolation("unknown reconstruction loss '" + s + "' (expected squared or norm)");
}

// m: manifold (φ_f, encoder), d: density (φ_h, or every parameter of a model
// without a learned manifold), s: simultaneous, t: optimal transport.
enum class Phase { Manifold, Density, Simultaneous, Transport };

inline char phase_label(Phase p) {
  switch (p) {
    case Phase::Manifold: return 'm';
    case Phase::Density: return 'd';
    case Phase::Simultaneous: return 's';
    case Phase::Transport: return 't';
  }
  return '?';
}

inline Phase parse_phase(char c) {
  for (auto p : {Phase::Manifold, Phase::Density, Phase::Simultaneous, Phase::Transport})
    if (phase_label(p) == c) return p;
  throw ContractViolation(std::string("unknown phase label '") + c + "'");
}

struct TrainPlan {
  Schedule schedule = Schedule::MDSequential;
  int epochs = 50;
  long batch_m = 100;   // manifold and simultaneous phases
  long batch_d = 100;   // density phases
  long batch_ot = 1000;
  double lambda_m = 1000.0;
  ReconLoss recon_loss = ReconLoss::Squared;
  double lambda_d = 1.0;
  double s_nll_weight = 0.1;
  double s_recon_weight = 1000.0;
  double s_pre_fraction = 0.1;   // recon-only epochs before S training
  double s_post_fraction = 0.1;  // φ_h-only epochs after S training
  double ot_weight = 10.0;
  double sinkhorn_epsilon = 0.05;
  int sinkhorn_max_iterations = 200;
  double sinkhorn_tolerance = 1e-6;
  // Unconverged solves keep their last iterate rather than aborting training.
  bool sinkhorn_strict = false;
  double learning_rate = 3e-4;
  double weight_decay = 1e-6;
  double validation_fraction = 0.1;
  double clip_norm = 5.0;

  void validate() const {
    auto fail = [](const std::string& m) { throw ContractViolation("train plan: " + m); };
    if (epochs < 1) fail("epochs must be positive");
    if (batch_m < 1 || batch_d < 1 || batch_ot < 1) fail("batch sizes must be positive");
    if ((schedule == Schedule::MDSequential || schedule == Schedule::MDAlternating || schedule == Schedule::OTD) &&
        epochs < 2) {
      fail("two-phase schedules need at least two epochs");
    }
    if (!(validation_fraction > 0 && validation_fraction < 1)) fail("validation_fraction must lie in (0, 1)");
    if (!(learning_rate > 0) || !(weight_decay >= 0) || !(clip_norm >= 0)) fail("invalid optimizer settings");
    if (!(s_pre_fraction >= 0 && s_post_fraction >= 0 && s_pre_fraction + s_post_fraction < 1)) {
      fail("S pre/post fractions must be nonnegative and sum below 1");
    }
    if (!(sinkhorn_epsilon > 0) || sinkhorn_max_iterations < 1 || !(sinkhorn_tolerance > 0)) {
      fail("invalid Sinkhorn settings");
    }
  }
};

// Phase of every epoch, in order.
inline std::vector<Phase> epoch_phases(const TrainPlan& plan, bool learns_manifold) {
  std::vector<Phase> out;
  const int e = plan.epochs;
  if (!learns_manifold) return std::vector<Phase>(static_cast<std::size_t>(e), Phase::Density);
  switch (plan.schedule) {
    case Schedule::MDSequential: {
      const int m = (e + 1) / 2;
      out.assign(static_cast<std::size_t>(m), Phase::Manifold);
      out.insert(out.end(), static_cast<std::size_t>(e - m), Phase::Density);
      break;
    }
    case Schedule::MDAlternating:
    case Schedule::OTD: {
      const Phase first = plan.schedule == Schedule::OTD ? Phase::Transport : Phase::Manifold;
      for (int k = 0; k < e; ++k) out.push_back(k % 2 == 0 ? first : Phase::Density);
      break;
    }
    case Schedule::OT: out.assign(static_cast<std::size_t>(e), Phase::Transport); break;
    case Schedule::S: {
      const int pre = static_cast<int>(std::lround(plan.s_pre_fraction * e));
      const int post = static_cast<int>(std::lround(plan.s_post_fraction * e));
      const int main = std::max(1, e - pre - post);
      out.assign(static_cast<std::size_t>(pre), Phase::Manifold);
      out.insert(out.end(), static_cast<std::size_t>(main), Phase::Simultaneous);
      out.insert(out.end(), static_cast<std::size_t>(std::max(0, e - pre - main)), Phase::Density);
      break;
    }
  }
  return out;
}

struct EpochRecord {
  int epoch = 0;
  Phase phase = Phase::Density;
  double train_loss = 0.0;  // mean over the epoch's batches
  double val_loss = 0.0;    // the phase's own loss on the validation set
  double selection_loss = 0.0;  // what checkpoint selection compares
  double seconds = 0.0;     // wall-clock, not part of equality
  int snapshot = -1;        // epoch whose snapshot is restored at stage end

  bool operator==(const EpochRecord& o) const {
    return epoch == o.epoch && phase == o.phase && train_loss == o.train_loss && val_loss == o.val_loss &&
           selection_loss == o.selection_loss && snapshot == o.snapshot;
  }
};

// A stage is a run of epochs sharing one checkpoint-selection criterion.
struct StageSummary {
  std::string name;
  int first_epoch = 0;
  int last_epoch = 0;
  int best_epoch = -1;
  double best_loss = 0.0;
  bool operator==(const StageSummary&) const = default;
};

struct PhaseLog {
  std::vector<EpochRecord> epochs;
  std::vector<StageSummary> stages;
  long train_size = 0;
  long validation_size = 0;
  bool operator==(const PhaseLog&) const = default;
};

}  // namespace mflow::train
