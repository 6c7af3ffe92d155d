#pragma once

#include <map>
#include <string>
#include <string_view>
#include <unordered_map>
#include <vector>

#include "mflow/ndiff/tensor.hpp"

namespace mflow::nd {

// Named parameters in insertion order. Names are stable across save/load.
class ParamStore {
 public:
  using Snapshot = std::map<std::string, Array>;

  Tensor add(const std::string& name, Array init) {
    if (index_.count(name)) throw ContractViolation("duplicate parameter name: " + name);
    index_.emplace(name, entries_.size());
    entries_.push_back({name, parameter(std::move(init))});
    return entries_.back().second;
  }

  bool contains(const std::string& name) const { return index_.count(name) > 0; }

  const Tensor& get(const std::string& name) const {
    auto it = index_.find(name);
    if (it == index_.end()) throw ContractViolation("unknown parameter: " + name);
    return entries_[it->second].second;
  }
  Tensor& get(const std::string& name) {
    auto it = index_.find(name);
    if (it == index_.end()) throw ContractViolation("unknown parameter: " + name);
    return entries_[it->second].second;
  }

  std::size_t size() const { return entries_.size(); }
  auto begin() const { return entries_.begin(); }
  auto end() const { return entries_.end(); }
  auto begin() { return entries_.begin(); }
  auto end() { return entries_.end(); }

  std::vector<std::string> names() const {
    std::vector<std::string> out;
    out.reserve(entries_.size());
    for (const auto& e : entries_) out.push_back(e.first);
    return out;
  }

  // Names starting with `prefix`, in insertion order.
  std::vector<std::string> names_with_prefix(std::string_view prefix) const {
    std::vector<std::string> out;
    for (const auto& e : entries_)
      if (std::string_view(e.first).substr(0, prefix.size()) == prefix) out.push_back(e.first);
    return out;
  }

  std::size_t scalar_count() const {
    std::size_t n = 0;
    for (const auto& e : entries_) n += static_cast<std::size_t>(e.second.value().size());
    return n;
  }

  Snapshot snapshot() const {
    Snapshot s;
    for (const auto& e : entries_) s.emplace(e.first, e.second.value());
    return s;
  }

  // Restores every parameter present in the snapshot; shapes must agree.
  void restore(const Snapshot& s) {
    for (auto& e : entries_) {
      auto it = s.find(e.first);
      if (it == s.end()) continue;
      set_value(e.first, it->second);
    }
  }

  void set_value(const std::string& name, const Array& v) {
    Tensor& t = get(name);
    if (t.rows() != v.rows() || t.cols() != v.cols()) throw ContractViolation("shape mismatch restoring " + name);
    t.mutable_param_value() = v;
  }

 private:
  std::vector<std::pair<std::string, Tensor>> entries_;
  std::unordered_map<std::string, std::size_t> index_;
};

}  // namespace mflow::nd
