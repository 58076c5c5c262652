// Copyright 2026 The weakdns Authors
// License: Apache 2.0 (http://www.apache.org/licenses/LICENSE-2.0)

#pragma once

#include <cmath>
#include <string>
#include <utility>
#include <vector>

#include "weakdns/autodiff.hpp"

namespace weakdns {

/// Ordered, named parameter list. Order is the serialization order.
template <typename T>
using ParamList = std::vector<std::pair<std::string, ad::Tensor<T>>>;

template <typename T>
void zero_grads(ParamList<T>& params) {
  for (auto& [name, p] : params) p.zero_grad();
}

template <typename T>
void set_trainable(ParamList<T>& params, bool on) {
  for (auto& [name, p] : params) p.set_requires_grad(on);
}

/// Freezes a parameter list for the lifetime of the scope and restores each
/// parameter's previous flag afterwards. Works on shared handles, so a const
/// model can be evaluated without recording a graph.
template <typename T>
class NoGradScope {
 public:
  explicit NoGradScope(const ParamList<T>& params) {
    for (const auto& [name, p] : params) {
      saved_.emplace_back(p, p.requires_grad());
      saved_.back().first.set_requires_grad(false);
    }
  }
  ~NoGradScope() {
    for (auto& [p, flag] : saved_) p.set_requires_grad(flag);
  }
  NoGradScope(const NoGradScope&) = delete;
  NoGradScope& operator=(const NoGradScope&) = delete;

 private:
  std::vector<std::pair<ad::Tensor<T>, bool>> saved_;
};

struct AdamConfig {
  double lr = 1e-4;
  double beta1 = 0.9;
  double beta2 = 0.999;
  double eps = 1e-8;
};

/// Moments are stored per parameter in the same order as the ParamList.
template <typename T>
struct AdamState {
  std::vector<std::vector<T>> m, v;
  std::uint64_t t = 0;

  static AdamState init(const ParamList<T>& params) {
    AdamState s;
    for (const auto& [name, p] : params) {
      s.m.emplace_back(p.numel(), T(0));
      s.v.emplace_back(p.numel(), T(0));
    }
    return s;
  }
  bool operator==(const AdamState&) const = default;
};

class NonFiniteGradient : public std::runtime_error {
 public:
  using std::runtime_error::runtime_error;
};

/// One bias-corrected Adam step. Gradients are checked first; a NaN or Inf
/// anywhere aborts the step before any parameter or moment changes.
template <typename T>
void adam_step(ParamList<T>& params, AdamState<T>& state, const AdamConfig& cfg) {
  if (state.m.size() != params.size()) throw DomainError("adam_step: optimizer state does not match parameters");
  for (const auto& [name, p] : params)
    for (T g : p.grad())
      if (!std::isfinite(g)) throw NonFiniteGradient("adam_step: non-finite gradient in parameter '" + name + "'");

  ++state.t;
  const double c1 = 1.0 - std::pow(cfg.beta1, double(state.t));
  const double c2 = 1.0 - std::pow(cfg.beta2, double(state.t));
  for (std::size_t i = 0; i < params.size(); ++i) {
    auto& p = params[i].second;
    auto data = p.mutable_data();
    const auto grad = p.grad();
    if (grad.size() != data.size()) continue;  // frozen, never had a gradient
    auto& m = state.m[i];
    auto& v = state.v[i];
    for (std::size_t j = 0; j < data.size(); ++j) {
      const double g = grad[j];
      m[j] = T(cfg.beta1 * double(m[j]) + (1.0 - cfg.beta1) * g);
      v[j] = T(cfg.beta2 * double(v[j]) + (1.0 - cfg.beta2) * g * g);
      const double mhat = double(m[j]) / c1;
      const double vhat = double(v[j]) / c2;
      data[j] = T(double(data[j]) - cfg.lr * mhat / (std::sqrt(vhat) + cfg.eps));
    }
  }
}

}  // namespace weakdns
