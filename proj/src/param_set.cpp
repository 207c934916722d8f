#include "ddep/param_set.hpp"

#include "ddep/error.hpp"
#include "ddep/hash.hpp"

namespace ddep {

void ParamSet::add(const std::string& name, Tensor value, bool decays) {
  require(!contains(name), ErrorKind::InvalidArgument, "duplicate parameter name " + name);
  ParamEntry e;
  e.grad = Tensor(value.shape());
  e.first_moment = Tensor(value.shape());
  e.second_moment = Tensor(value.shape());
  e.value = std::move(value);
  e.decays = decays;
  entries_.emplace(name, std::move(e));
}

void ParamSet::erase_prefix(const std::string& prefix) {
  for (auto it = entries_.begin(); it != entries_.end();) {
    if (it->first.starts_with(prefix)) {
      it = entries_.erase(it);
    } else {
      ++it;
    }
  }
}

ParamEntry& ParamSet::entry(const std::string& name) {
  auto it = entries_.find(name);
  require(it != entries_.end(), ErrorKind::InvalidArgument, "unknown parameter " + name);
  return it->second;
}

const ParamEntry& ParamSet::entry(const std::string& name) const {
  auto it = entries_.find(name);
  require(it != entries_.end(), ErrorKind::InvalidArgument, "unknown parameter " + name);
  return it->second;
}

std::vector<std::string> ParamSet::names() const { return names_with_prefix(""); }

std::vector<std::string> ParamSet::names_with_prefix(const std::string& prefix) const {
  std::vector<std::string> out;
  for (const auto& [name, e] : entries_) {
    if (name.starts_with(prefix)) out.push_back(name);
  }
  return out;
}

std::size_t ParamSet::element_count(const std::string& prefix) const {
  std::size_t n = 0;
  for (const auto& [name, e] : entries_) {
    if (name.starts_with(prefix)) n += e.value.size();
  }
  return n;
}

void ParamSet::zero_grad() {
  for (auto& [name, e] : entries_) {
    e.grad.fill(0.0f);
    e.has_grad = false;
  }
}

void ParamSet::set_value(const std::string& name, Tensor value) {
  ParamEntry& e = entry(name);
  check_same_shape(e.value, value, ("set_value(" + name + ")").c_str());
  e.value = std::move(value);
}

std::string ParamSet::checksum(const std::string& prefix) const {
  Sha256 h;
  for (const auto& [name, e] : entries_) {
    if (!name.starts_with(prefix)) continue;
    h.update(name.data(), name.size() + 1);
    for (int d : e.value.shape().dims()) h.update(&d, sizeof(d));
    h.update(e.value.ptr(), e.value.size() * sizeof(float));
  }
  return h.hex();
}

}  // namespace ddep
