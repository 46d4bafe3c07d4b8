#pragma once

#include <cmath>
#include <cstdint>
#include <map>
#include <random>
#include <string>
#include <vector>

#include "gsrd/tensor.hpp"

namespace gsrd {

using Rng = std::mt19937_64;

/// Named trainable tensors in registration order. Every module registers its
/// weights here under a dotted prefix ("encoder.layers.3.wq_node").
class ParamStore {
 public:
  struct Entry {
    std::string name;
    Value value;
  };

  Value add(const std::string& name, std::size_t rows, std::size_t cols, std::vector<double> init) {
    if (index_.count(name)) throw ContractError("duplicate parameter name " + name);
    Value v = Value::parameter(rows, cols, std::move(init));
    index_[name] = entries_.size();
    entries_.push_back({name, v});
    return v;
  }

  /// Gaussian init with standard deviation 1/sqrt(fan_in).
  Value add_normal(const std::string& name, std::size_t rows, std::size_t cols, Rng& rng,
                   double gain = 1.0) {
    std::normal_distribution<double> dist(0.0, gain / std::sqrt(static_cast<double>(rows)));
    std::vector<double> w(rows * cols);
    for (double& x : w) x = dist(rng);
    return add(name, rows, cols, std::move(w));
  }
  Value add_constant(const std::string& name, std::size_t rows, std::size_t cols, double fill) {
    return add(name, rows, cols, std::vector<double>(rows * cols, fill));
  }

  const std::vector<Entry>& entries() const { return entries_; }
  bool contains(const std::string& name) const { return index_.count(name) != 0; }
  Value get(const std::string& name) const {
    auto it = index_.find(name);
    if (it == index_.end()) throw ContractError("unknown parameter " + name);
    return entries_[it->second].value;
  }

  void zero_grad() {
    for (auto& e : entries_) e.value.zero_grad();
  }

  /// Freezes (or unfreezes) every parameter whose name starts with prefix.
  void set_trainable(const std::string& prefix, bool on) {
    for (auto& e : entries_)
      if (e.name.rfind(prefix, 0) == 0) e.value.set_requires_grad(on);
  }

  /// Flat copy of all parameter data with the given prefix (for drift checks).
  std::vector<double> snapshot(const std::string& prefix = "") const {
    std::vector<double> out;
    for (const auto& e : entries_)
      if (e.name.rfind(prefix, 0) == 0) out.insert(out.end(), e.value.data().begin(), e.value.data().end());
    return out;
  }

  std::size_t count(const std::string& prefix = "") const {
    std::size_t n = 0;
    for (const auto& e : entries_)
      if (e.name.rfind(prefix, 0) == 0) n += e.value.size();
    return n;
  }

 private:
  std::vector<Entry> entries_;
  std::map<std::string, std::size_t> index_;
};

/// y = x W (+ b).
struct Linear {
  Value weight;
  Value bias;  // undefined when bias-free

  Linear() = default;
  Linear(ParamStore& store, const std::string& name, std::size_t in, std::size_t out, Rng& rng,
         bool with_bias = true, double gain = 1.0) {
    weight = store.add_normal(name + ".weight", in, out, rng, gain);
    if (with_bias) bias = store.add_constant(name + ".bias", 1, out, 0.0);
  }

  Value operator()(const Value& x) const {
    Value y = matmul(x, weight);
    return bias.defined() ? add(y, bias) : y;
  }
};

/// Two-layer perceptron in -> hidden -> out with SiLU in between.
struct FeedForward {
  Linear first;
  Linear second;

  FeedForward() = default;
  FeedForward(ParamStore& store, const std::string& name, std::size_t in, std::size_t hidden,
              std::size_t out, Rng& rng, bool final_bias = true, double final_gain = 1.0) {
    first = Linear(store, name + ".0", in, hidden, rng);
    second = Linear(store, name + ".1", hidden, out, rng, final_bias, final_gain);
  }

  Value operator()(const Value& x) const { return second(silu(first(x))); }
};

}  // namespace gsrd
