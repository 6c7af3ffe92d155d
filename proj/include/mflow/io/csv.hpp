#pragma once

// Numeric CSV with a leading comment line naming its schema:
//   # schema=<name> key=value ...
//   col0,col1,...
//   1.5,2.25,...
// Values are written with 17 significant digits so a round trip is exact.

#include <charconv>
#include <fstream>
#include <map>
#include <sstream>
#include <string>
#include <vector>

#include "mflow/errors.hpp"

namespace mflow::io {

class FormatError : public std::runtime_error {
 public:
  using std::runtime_error::runtime_error;
};

struct CsvTable {
  std::string schema;
  std::map<std::string, std::string> meta;  // no spaces or '=' in keys/values
  std::vector<std::string> columns;
  std::vector<std::vector<double>> rows;

  std::size_t column(const std::string& name) const {
    for (std::size_t i = 0; i < columns.size(); ++i)
      if (columns[i] == name) return i;
    throw FormatError("csv: missing column '" + name + "'");
  }
};

inline std::string format_double(double v) {
  char buf[32];
  auto r = std::to_chars(buf, buf + sizeof buf, v);
  return std::string(buf, r.ptr);
}

inline void write_csv(std::ostream& os, const CsvTable& t) {
  os << "# schema=" << t.schema;
  for (const auto& [k, v] : t.meta) os << ' ' << k << '=' << v;
  os << '\n';
  for (std::size_t i = 0; i < t.columns.size(); ++i) os << (i ? "," : "") << t.columns[i];
  os << '\n';
  for (const auto& row : t.rows) {
    if (row.size() != t.columns.size()) throw ContractViolation("csv: row width does not match header");
    for (std::size_t i = 0; i < row.size(); ++i) os << (i ? "," : "") << format_double(row[i]);
    os << '\n';
  }
}

inline void write_csv(const std::string& path, const CsvTable& t) {
  std::ofstream os(path, std::ios::binary);
  if (!os) throw FormatError("csv: cannot open '" + path + "' for writing");
  write_csv(os, t);
  if (!os) throw FormatError("csv: write to '" + path + "' failed");
}

inline std::vector<std::string> split(const std::string& s, char sep) {
  std::vector<std::string> out;
  std::string cur;
  std::istringstream is(s);
  while (std::getline(is, cur, sep)) out.push_back(cur);
  if (!s.empty() && s.back() == sep) out.emplace_back();
  return out;
}

// `expected_schema` empty accepts any schema.
inline CsvTable read_csv(std::istream& is, const std::string& expected_schema) {
  CsvTable t;
  std::string line;
  if (!std::getline(is, line) || line.rfind("# schema=", 0) != 0) throw FormatError("csv: missing schema header");
  std::istringstream hs(line.substr(2));
  std::string tok;
  while (hs >> tok) {
    const auto eq = tok.find('=');
    if (eq == std::string::npos) throw FormatError("csv: malformed header token '" + tok + "'");
    const auto key = tok.substr(0, eq), value = tok.substr(eq + 1);
    if (key == "schema") {
      t.schema = value;
    } else {
      t.meta[key] = value;
    }
  }
  if (!expected_schema.empty() && t.schema != expected_schema) {
    throw FormatError("csv: unknown schema '" + t.schema + "' (expected '" + expected_schema + "')");
  }
  if (!std::getline(is, line)) throw FormatError("csv: missing column header");
  t.columns = split(line, ',');
  std::size_t lineno = 2;
  while (std::getline(is, line)) {
    ++lineno;
    if (line.empty()) continue;
    const auto cells = split(line, ',');
    if (cells.size() != t.columns.size()) {
      throw FormatError("csv: line " + std::to_string(lineno) + " has " + std::to_string(cells.size()) + " fields");
    }
    std::vector<double> row(cells.size());
    for (std::size_t i = 0; i < cells.size(); ++i) {
      const auto& c = cells[i];
      auto r = std::from_chars(c.data(), c.data() + c.size(), row[i]);
      if (r.ec != std::errc() || r.ptr != c.data() + c.size()) {
        throw FormatError("csv: line " + std::to_string(lineno) + ": bad number '" + c + "'");
      }
    }
    t.rows.push_back(std::move(row));
  }
  return t;
}

inline CsvTable read_csv(const std::string& path, const std::string& expected_schema) {
  std::ifstream is(path, std::ios::binary);
  if (!is) throw FormatError("csv: cannot open '" + path + "'");
  return read_csv(is, expected_schema);
}

}  // namespace mflow::io
