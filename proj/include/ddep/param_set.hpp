#pragma once

#include <cstdint>
#include <functional>
#include <map>
#include <string>
#include <vector>

#include "ddep/tensor.hpp"

namespace ddep {

/// One named parameter with its gradient and Adam moments.
struct ParamEntry {
  Tensor value;
  Tensor grad;
  Tensor first_moment;
  Tensor second_moment;
  std::int64_t step = 0;
  bool trainable = true;
  bool has_grad = false;
  /// Decoupled weight decay applies only to weight tensors.
  bool decays = false;
};

/// Ordered name -> parameter table. Names are hierarchical
/// ("decoder.stage2.fuse.conv.weight"); iteration order is lexicographic.
class ParamSet {
 public:
  void add(const std::string& name, Tensor value, bool decays);
  bool contains(const std::string& name) const { return entries_.count(name) != 0; }
  void erase(const std::string& name) { entries_.erase(name); }
  void erase_prefix(const std::string& prefix);

  ParamEntry& entry(const std::string& name);
  const ParamEntry& entry(const std::string& name) const;
  Tensor& value(const std::string& name) { return entry(name).value; }
  const Tensor& value(const std::string& name) const { return entry(name).value; }

  std::vector<std::string> names() const;
  std::vector<std::string> names_with_prefix(const std::string& prefix) const;
  std::size_t size() const { return entries_.size(); }
  std::size_t element_count(const std::string& prefix = "") const;

  void zero_grad();
  /// Replaces a parameter value keeping optimizer state untouched.
  void set_value(const std::string& name, Tensor value);

  /// SHA-256 over names, shapes and raw bytes of the selected parameters.
  std::string checksum(const std::string& prefix = "") const;

  auto begin() { return entries_.begin(); }
  auto end() { return entries_.end(); }
  auto begin() const { return entries_.begin(); }
  auto end() const { return entries_.end(); }

 private:
  std::map<std::string, ParamEntry> entries_;
};

}  // namespace ddep
