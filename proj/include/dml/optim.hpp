#pragma once

#include <cmath>
#include <cstdint>
#include <map>
#include <random>
#include <string>
#include <vector>

#include "dml/hash.hpp"
#include "dml/tensor.hpp"

namespace dml {

template <typename T>
struct Parameter {
  std::string name;
  Tensor<T> tensor;
  std::vector<T> momentum;
};

/// Named parameters in insertion order. Names are unique.
template <typename T>
class ParameterSet {
 public:
  Tensor<T>& add(const std::string& name, Shape shape) {
    if (index_.count(name)) throw ConfigError("duplicate parameter name '" + name + "'");
    index_[name] = params_.size();
    params_.push_back(Parameter<T>{name, Tensor<T>(shape, T(0), true), std::vector<T>(shape.numel(), T(0))});
    return params_.back().tensor;
  }

  bool contains(const std::string& name) const { return index_.count(name) != 0; }

  Parameter<T>& get(const std::string& name) {
    auto it = index_.find(name);
    if (it == index_.end()) throw ConfigError("unknown parameter '" + name + "'");
    return params_[it->second];
  }
  const Parameter<T>& get(const std::string& name) const {
    auto it = index_.find(name);
    if (it == index_.end()) throw ConfigError("unknown parameter '" + name + "'");
    return params_[it->second];
  }

  std::vector<Parameter<T>>& all() { return params_; }
  const std::vector<Parameter<T>>& all() const { return params_; }
  std::size_t size() const { return params_.size(); }

  std::size_t scalar_count() const {
    std::size_t n = 0;
    for (const auto& p : params_) n += p.tensor.numel();
    return n;
  }

  void zero_grad() {
    for (auto& p : params_) p.tensor.zero_grad();
  }

  // FNV-1a over names and raw values.
  std::uint64_t fingerprint() const {
    Fnv1a h;
    for (const auto& p : params_) {
      h.update(p.name);
      h.update_bytes(p.tensor.data().data(), p.tensor.numel() * sizeof(T));
    }
    return h.value();
  }

 private:
  std::vector<Parameter<T>> params_;
  std::map<std::string, std::size_t> index_;
};

/// He-normal weights, seeded per parameter name so that models sharing a
/// parameter name start from identical values.
template <typename T>
void init_he_normal(Tensor<T>& weight, std::uint64_t seed, const std::string& name) {
  const Shape& s = weight.shape();
  const double fan_in = static_cast<double>(s.c * s.h * s.w);
  std::mt19937_64 rng(seed ^ fnv1a(name));
  std::normal_distribution<double> dist(0.0, std::sqrt(2.0 / fan_in));
  for (auto& v : weight.data()) v = static_cast<T>(dist(rng));
}

struct SgdOptions {
  double lr = 0.01;
  double momentum = 0.9;
  double weight_decay = 0.0005;
};

/// v <- momentum*v + grad + weight_decay*theta; theta <- theta - lr*v.
/// Gradients are zeroed afterwards.
template <typename T>
void sgd_step(std::vector<Parameter<T>>& params, const SgdOptions& opt) {
  if (!(opt.lr >= 0.0)) throw ConfigError("sgd: learning rate must be non-negative");
  if (!(opt.momentum >= 0.0 && opt.momentum < 1.0)) throw ConfigError("sgd: momentum must lie in [0, 1)");
  if (!(opt.weight_decay >= 0.0)) throw ConfigError("sgd: weight decay must be non-negative");
  for (const auto& p : params)
    if (!p.tensor.requires_grad() || !p.tensor.has_grad())
      throw UsageError("sgd: parameter '" + p.name + "' has no gradient");
  const T lr = static_cast<T>(opt.lr);
  const T mu = static_cast<T>(opt.momentum);
  const T wd = static_cast<T>(opt.weight_decay);
  for (auto& p : params) {
    auto theta = p.tensor.data();
    auto grad = p.tensor.grad();
    for (std::size_t i = 0; i < theta.size(); ++i) {
      p.momentum[i] = mu * p.momentum[i] + grad[i] + wd * theta[i];
      theta[i] -= lr * p.momentum[i];
    }
    p.tensor.zero_grad();
  }
}

template <typename T>
void sgd_step(ParameterSet<T>& params, const SgdOptions& opt) {
  sgd_step(params.all(), opt);
}

}  // namespace dml
