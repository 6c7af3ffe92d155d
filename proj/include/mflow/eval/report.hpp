#pragma once

#include <algorithm>
#include <cmath>
#include <cstdint>
#include <functional>
#include <map>
#include <optional>
#include <sstream>
#include <string>
#include <vector>

#include <Eigen/Dense>

#include "mflow/errors.hpp"
#include "mflow/eval/mcmc.hpp"
#include "mflow/io/csv.hpp"
#include "mflow/models/model.hpp"

namespace mflow::eval {

inline constexpr const char* kChainSchema = "mflow.chain.v1";

// One evaluation run. Absent metrics were not computed; every present value
// is attributable to `dataset` and `checkpoint`.
struct MetricReport {
  std::string dataset;
  std::string checkpoint;  // checkpoint content hash
  std::string config_hash;
  std::uint64_t seed = 0;
  std::optional<double> mean_manifold_distance;
  std::optional<double> mean_reconstruction_error;
  std::optional<double> mmd;
  std::optional<double> auc;
  std::optional<double> log_posterior;
  std::map<std::string, long> counts;  // e.g. test_points, generated, chain_length

  static const std::vector<std::string>& metric_names() {
    static const std::vector<std::string> names = {"mean_manifold_distance", "mean_reconstruction_error", "mmd",
                                                   "auc", "log_posterior"};
    return names;
  }

  std::optional<double>& metric(const std::string& name) {
    if (name == "mean_manifold_distance") return mean_manifold_distance;
    if (name == "mean_reconstruction_error") return mean_reconstruction_error;
    if (name == "mmd") return mmd;
    if (name == "auc") return auc;
    if (name == "log_posterior") return log_posterior;
    throw ContractViolation("metric report: unknown metric '" + name + "'");
  }
  const std::optional<double>& metric(const std::string& name) const {
    return const_cast<MetricReport*>(this)->metric(name);
  }

  // key=value lines; counts are written as count.<name>=<n>.
  std::string to_text() const {
    std::ostringstream os;
    os << "dataset=" << dataset << "\ncheckpoint=" << checkpoint << "\nconfig_hash=" << config_hash << "\nseed=" << seed
       << '\n';
    for (const auto& n : metric_names())
      if (const auto& v = metric(n)) os << n << '=' << io::format_double(*v) << '\n';
    for (const auto& [k, v] : counts) os << "count." << k << '=' << v << '\n';
    return os.str();
  }

  static MetricReport from_text(const std::string& text) {
    MetricReport r;
    std::istringstream is(text);
    std::string line;
    while (std::getline(is, line)) {
      if (line.empty()) continue;
      const auto eq = line.find('=');
      if (eq == std::string::npos) throw io::FormatError("metric report: malformed line '" + line + "'");
      const auto key = line.substr(0, eq), value = line.substr(eq + 1);
      try {
        if (key == "dataset") {
          r.dataset = value;
        } else if (key == "checkpoint") {
          r.checkpoint = value;
        } else if (key == "config_hash") {
          r.config_hash = value;
        } else if (key == "seed") {
          r.seed = std::stoull(value);
        } else if (key.rfind("count.", 0) == 0) {
          r.counts[key.substr(6)] = std::stol(value);
        } else {
          r.metric(key) = std::stod(value);
        }
      } catch (const std::logic_error& e) {
        throw io::FormatError("metric report: bad value for '" + key + "': " + e.what());
      }
    }
    return r;
  }

  // Fixed metric columns, empty when absent. Counts are not part of the row.
  static std::string csv_header() {
    std::string h = "dataset,checkpoint,config_hash,seed";
    for (const auto& n : metric_names()) h += "," + n;
    return h;
  }
  std::string csv_row() const {
    for (const auto* tag : {&dataset, &checkpoint, &config_hash})
      if (tag->find(',') != std::string::npos) throw ContractViolation("metric report: tags must not contain commas");
    std::string row = dataset + "," + checkpoint + "," + config_hash + "," + std::to_string(seed);
    for (const auto& n : metric_names()) {
      row += ',';
      if (const auto& v = metric(n)) row += io::format_double(*v);
    }
    return row;
  }
};

// Per-point scores used by the OOD and reconstruction metrics.
struct PointScores {
  Eigen::VectorXd log_likelihood;
  Eigen::VectorXd reconstruction;  // zero for models without a manifold
};

inline PointScores score_points(const models::ManifoldFlowModel& model, const nd::Array& x,
                                const nd::Array& context = nd::Array(), Eigen::Index chunk = 1000) {
  nd::NoGradGuard no_grad;
  PointScores s{Eigen::VectorXd(x.rows()), Eigen::VectorXd::Zero(x.rows())};
  for (Eigen::Index start = 0; start < x.rows(); start += chunk) {
    const Eigen::Index rows = std::min(chunk, x.rows() - start);
    const nd::Tensor xb = nd::constant(x.middleRows(start, rows));
    const nd::Tensor cb = context.size() ? nd::constant(context.middleRows(start, rows)) : nd::Tensor();
    if (model.learns_manifold()) {
      const auto d = model.mflow_log_prob(xb, cb);
      s.log_likelihood.segment(start, rows) = d.log_prob.value().col(0);
      s.reconstruction.segment(start, rows) = d.recon.value().col(0);
    } else {
      s.log_likelihood.segment(start, rows) = model.log_prob(xb, cb).value().col(0);
      if (model.has_manifold()) {
        s.reconstruction.segment(start, rows) = model.project(xb, cb).recon.value().col(0);
      }
    }
  }
  return s;
}

// Mean ‖x − g(g⁻¹(x))‖ over the rows of x.
inline double mean_reconstruction_error(const models::ManifoldFlowModel& model, const nd::Array& x,
                                        const nd::Array& context = nd::Array()) {
  if (!model.has_manifold()) throw UnsupportedConfiguration("reconstruction error: the model has no manifold");
  if (x.rows() == 0) throw ContractViolation("reconstruction error: empty point set");
  return score_points(model, x, context).reconstruction.mean();
}

// Mean of a ground-truth distance-to-manifold function over the rows of x.
inline double mean_manifold_distance(const nd::Array& x, const std::function<double(const Eigen::VectorXd&)>& distance) {
  if (x.rows() == 0) throw ContractViolation("manifold distance: empty point set");
  double sum = 0.0;
  for (Eigen::Index i = 0; i < x.rows(); ++i) sum += distance(x.row(i).transpose());
  return sum / static_cast<double>(x.rows());
}

inline io::CsvTable chain_table(const Chain& chain) {
  io::CsvTable t;
  t.schema = kChainSchema;
  t.meta = {{"step_size", io::format_double(chain.step_size)},
            {"burn_in", std::to_string(chain.burn_in)},
            {"proposed", std::to_string(chain.proposed)},
            {"accepted", std::to_string(chain.accepted)}};
  for (Eigen::Index k = 0; k < chain.samples.cols(); ++k) t.columns.push_back("theta" + std::to_string(k));
  t.rows.reserve(static_cast<std::size_t>(chain.samples.rows()));
  for (Eigen::Index i = 0; i < chain.samples.rows(); ++i) {
    const Eigen::RowVectorXd r = chain.samples.row(i);
    t.rows.emplace_back(r.data(), r.data() + r.size());
  }
  return t;
}

inline Eigen::MatrixXd chain_samples(const io::CsvTable& t) {
  if (t.schema != kChainSchema) throw io::FormatError("chain: unexpected schema '" + t.schema + "'");
  Eigen::MatrixXd m(static_cast<Eigen::Index>(t.rows.size()), static_cast<Eigen::Index>(t.columns.size()));
  for (std::size_t i = 0; i < t.rows.size(); ++i)
    for (std::size_t k = 0; k < t.columns.size(); ++k)
      m(static_cast<Eigen::Index>(i), static_cast<Eigen::Index>(k)) = t.rows[i][k];
  return m;
}

}  // namespace mflow::eval
