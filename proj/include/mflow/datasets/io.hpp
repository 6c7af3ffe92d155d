#pragma once

#include <fstream>
#include <map>
#include <string>

#include "mflow/datasets/lorenz.hpp"
#include "mflow/io/csv.hpp"
#include "mflow/ndiff/tensor.hpp"

namespace mflow::data {

inline constexpr const char* kDatasetSchema = "mflow.dataset.v1";
inline constexpr const char* kStandardizationSchema = "mflow.standardization.v1";

// Rows of x, with optional conditioning values θ and latent coordinates z.
struct Dataset {
  Array x;
  Array theta;  // N x c or empty
  Array z;      // N x n or empty

  Eigen::Index size() const { return x.rows(); }
  Eigen::Index dim() const { return x.cols(); }
  Eigen::Index context_dim() const { return theta.cols(); }

  Dataset rows(const std::vector<Eigen::Index>& idx) const {
    Dataset out;
    out.x = x(idx, Eigen::all);
    if (theta.size()) out.theta = theta(idx, Eigen::all);
    if (z.size()) out.z = z(idx, Eigen::all);
    return out;
  }
};

inline io::CsvTable to_table(const Dataset& ds, const std::map<std::string, std::string>& meta = {}) {
  io::CsvTable t;
  t.schema = kDatasetSchema;
  t.meta = meta;
  auto add = [&](const Array& a, const std::string& prefix) {
    for (Eigen::Index j = 0; j < a.cols(); ++j) t.columns.push_back(prefix + std::to_string(j));
  };
  add(ds.x, "x");
  if (ds.theta.size()) add(ds.theta, "theta");
  if (ds.z.size()) add(ds.z, "z");
  for (Eigen::Index i = 0; i < ds.size(); ++i) {
    std::vector<double> row;
    for (Eigen::Index j = 0; j < ds.x.cols(); ++j) row.push_back(ds.x(i, j));
    if (ds.theta.size())
      for (Eigen::Index j = 0; j < ds.theta.cols(); ++j) row.push_back(ds.theta(i, j));
    if (ds.z.size())
      for (Eigen::Index j = 0; j < ds.z.cols(); ++j) row.push_back(ds.z(i, j));
    t.rows.push_back(std::move(row));
  }
  return t;
}

inline Dataset from_table(const io::CsvTable& t) {
  if (t.schema != kDatasetSchema) throw io::FormatError("dataset: unknown schema '" + t.schema + "'");
  std::vector<std::size_t> xs, ths, zs;
  for (std::size_t i = 0; i < t.columns.size(); ++i) {
    const auto& c = t.columns[i];
    auto numbered = [&](const std::string& p, std::vector<std::size_t>& into) {
      if (c.rfind(p, 0) != 0 || c.size() == p.size()) return false;
      if (c.substr(p.size()) != std::to_string(into.size())) throw io::FormatError("dataset: column '" + c + "' out of order");
      into.push_back(i);
      return true;
    };
    if (!numbered("theta", ths) && !numbered("x", xs) && !numbered("z", zs)) {
      throw io::FormatError("dataset: unexpected column '" + c + "'");
    }
  }
  if (xs.empty()) throw io::FormatError("dataset: no x columns");
  const auto n = static_cast<Eigen::Index>(t.rows.size());
  Dataset ds;
  auto fill = [&](Array& a, const std::vector<std::size_t>& cols) {
    if (cols.empty()) return;
    a.resize(n, static_cast<Eigen::Index>(cols.size()));
    for (Eigen::Index i = 0; i < n; ++i)
      for (std::size_t j = 0; j < cols.size(); ++j) a(i, static_cast<Eigen::Index>(j)) = t.rows[static_cast<std::size_t>(i)][cols[j]];
  };
  fill(ds.x, xs);
  fill(ds.theta, ths);
  fill(ds.z, zs);
  return ds;
}

inline void save_dataset(const std::string& path, const Dataset& ds, const std::map<std::string, std::string>& meta = {}) {
  io::write_csv(path, to_table(ds, meta));
}

inline Dataset load_dataset(const std::string& path) { return from_table(io::read_csv(path, kDatasetSchema)); }

// Sidecar: one "mean=..." and one "std=..." line of comma-separated values.
inline void save_standardization(const std::string& path, const Standardization& s) {
  std::ofstream os(path, std::ios::binary);
  if (!os) throw io::FormatError("standardization: cannot write '" + path + "'");
  os << "# schema=" << kStandardizationSchema << '\n';
  auto line = [&](const char* key, const Eigen::RowVectorXd& v) {
    os << key << '=';
    for (Eigen::Index j = 0; j < v.size(); ++j) os << (j ? "," : "") << io::format_double(v(j));
    os << '\n';
  };
  line("mean", s.mean);
  line("std", s.std);
}

inline Standardization load_standardization(const std::string& path) {
  std::ifstream is(path, std::ios::binary);
  if (!is) throw io::FormatError("standardization: cannot open '" + path + "'");
  std::string line;
  if (!std::getline(is, line) || line != std::string("# schema=") + kStandardizationSchema) {
    throw io::FormatError("standardization: unknown schema");
  }
  Standardization s;
  while (std::getline(is, line)) {
    const auto eq = line.find('=');
    if (eq == std::string::npos) continue;
    const auto vals = io::split(line.substr(eq + 1), ',');
    Eigen::RowVectorXd v(static_cast<Eigen::Index>(vals.size()));
    for (std::size_t j = 0; j < vals.size(); ++j) v(static_cast<Eigen::Index>(j)) = std::stod(vals[j]);
    const auto key = line.substr(0, eq);
    if (key == "mean") s.mean = v;
    else if (key == "std") s.std = v;
    else throw io::FormatError("standardization: unknown key '" + key + "'");
  }
  if (s.mean.size() == 0 || s.mean.size() != s.std.size()) throw io::FormatError("standardization: incomplete file");
  return s;
}

}  // namespace mflow::data
