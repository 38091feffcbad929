#pragma once

#include <cmath>
#include <map>
#include <random>
#include <string>
#include <vector>

#include "satkit/tensor.hpp"

namespace satkit {

// Named trainable tensors in registration order.
template <class Real = double>
class ParameterStore {
 public:
  struct Entry {
    std::string name;
    Tensor<Real> tensor;
  };

  Tensor<Real>& add(const std::string& name, Tensor<Real> t) {
    if (index_.count(name)) throw Error("parameter registered twice: " + name);
    t.set_requires_grad(true);
    index_[name] = entries_.size();
    entries_.push_back({name, std::move(t)});
    return entries_.back().tensor;
  }

  // Uniform in +-sqrt(6 / (fan_in + fan_out)).
  template <class Rng>
  Tensor<Real>& add_matrix(const std::string& name, std::size_t fan_in, std::size_t fan_out, Rng& rng) {
    const double bound = std::sqrt(6.0 / static_cast<double>(fan_in + fan_out));
    std::uniform_real_distribution<double> u(-bound, bound);
    std::vector<Real> v(fan_in * fan_out);
    for (auto& x : v) x = static_cast<Real>(u(rng));
    return add(name, Tensor<Real>({fan_in, fan_out}, std::move(v)));
  }
  Tensor<Real>& add_vector(const std::string& name, std::size_t n, Real fill) {
    return add(name, Tensor<Real>::full({n}, fill));
  }

  Tensor<Real>& get(const std::string& name) {
    auto it = index_.find(name);
    if (it == index_.end()) throw Error("unknown parameter: " + name);
    return entries_[it->second].tensor;
  }
  const Tensor<Real>& get(const std::string& name) const {
    auto it = index_.find(name);
    if (it == index_.end()) throw Error("unknown parameter: " + name);
    return entries_[it->second].tensor;
  }
  bool contains(const std::string& name) const { return index_.count(name) > 0; }

  std::vector<Entry>& entries() { return entries_; }
  const std::vector<Entry>& entries() const { return entries_; }
  std::size_t size() const { return entries_.size(); }

  std::size_t total_numel() const {
    std::size_t n = 0;
    for (const auto& e : entries_) n += e.tensor.numel();
    return n;
  }

  void zero_grad() {
    for (auto& e : entries_) e.tensor.zero_grad();
  }

 private:
  std::vector<Entry> entries_;
  std::map<std::string, std::size_t> index_;
};

}  // namespace satkit
