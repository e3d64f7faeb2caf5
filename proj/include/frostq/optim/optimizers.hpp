// Copyright 2026 The FrostQ Authors.
//
// Licensed under the Apache License, Version 2.0 (the "License");
// you may not use this file except in compliance with the License.
// You may obtain a copy of the License at
//
//     http://www.apache.org/licenses/LICENSE-2.0
//
// Unless required by applicable law or agreed to in writing, software
// distributed under the License is distributed on an "AS IS" BASIS,
// WITHOUT WARRANTIES OR CONDITIONS OF ANY KIND, either express or implied.
// See the License for the specific language governing permissions and
// limitations under the License.

#pragma once

// Momentum SGD and AdamW, each with an optional GradBoost stage between
// gradient formation and the moment updates.

#include <cmath>
#include <cstdint>
#include <string>
#include <vector>

#include "frostq/core/autograd.hpp"
#include "frostq/optim/gradboost.hpp"

namespace frostq::optim {

enum class OptimizerKind { kSgd, kAdamW };

inline const char* to_string(OptimizerKind k) {
  return k == OptimizerKind::kSgd ? "sgd" : "adamw";
}

inline OptimizerKind optimizer_from_string(const std::string& s) {
  if (s == "sgd") return OptimizerKind::kSgd;
  if (s == "adamw") return OptimizerKind::kAdamW;
  throw ContractError("unknown optimizer '" + s + "' (sgd | adamw)");
}

struct OptimizerConfig {
  OptimizerKind kind = OptimizerKind::kSgd;
  double lr = 0.05;  // alpha
  double beta1 = 0.9;
  double beta2 = 0.999;
  double eps = 1e-8;
  double weight_decay = 4e-5;
  GradBoostHyper boost;
  std::uint64_t seed = 0;

  void validate() const {
    if (!(lr > 0.0)) throw ContractError("optimizer: lr must be > 0");
    if (!(beta1 >= 0.0 && beta1 < 1.0)) throw ContractError("optimizer: beta1 must lie in [0, 1)");
    if (!(beta2 >= 0.0 && beta2 < 1.0)) throw ContractError("optimizer: beta2 must lie in [0, 1)");
    if (!(eps > 0.0)) throw ContractError("optimizer: eps must be > 0");
    if (!(weight_decay >= 0.0)) throw ContractError("optimizer: weight_decay must be >= 0");
    boost.validate();
  }
};

template <class T>
struct ParamState {
  Tensor<T> m;
  Tensor<T> v;  // AdamW only
  ExtremeTracker extremes;
  std::int64_t t = 0;
  Rng rng;
  double last_b = 1.0;
  std::int64_t last_selected = 0;
};

/// g <- grad + lambda * theta, then GradBoost when enabled. Returns the
/// working gradient.
template <class T>
std::vector<T> boosted_gradient(const Variable<T>& p, ParamState<T>& s, double weight_decay,
                                bool add_decay, const GradBoostHyper* boost) {
  const std::int64_t n = p.value.numel();
  std::vector<T> g(p.grad.data(), p.grad.data() + n);
  if (add_decay && weight_decay != 0.0) {
    const T wd = static_cast<T>(weight_decay);
    for (std::int64_t i = 0; i < n; ++i) g[i] += wd * p.value[i];
  }
  if (boost) {
    s.last_b = update_laplace_scale(s.extremes, g.data(), n, boost->gamma1);
    s.last_selected = gradboost_transform(g.data(), n, s.last_b, *boost, s.t, s.rng);
  }
  return g;
}

/// m <- beta1 m + eta alpha g;  theta <- theta - m - eta lambda theta.
template <class T>
void sgd_step(Variable<T>& p, ParamState<T>& s, double lr, double beta1, double weight_decay,
              const GradBoostHyper* boost, double eta) {
  if (!(lr > 0.0)) throw ContractError("sgd_step: lr must be > 0");
  ++s.t;
  const auto g = boosted_gradient(p, s, weight_decay, true, boost);
  if (s.m.shape() != p.value.shape()) s.m = Tensor<T>(p.value.shape());
  const T b1 = static_cast<T>(beta1), step = static_cast<T>(eta * lr),
          decay = static_cast<T>(eta * weight_decay);
  T* m = s.m.data();
  T* th = p.value.data();
  for (std::int64_t i = 0; i < p.value.numel(); ++i) {
    m[i] = b1 * m[i] + step * g[i];
    th[i] = th[i] - m[i] - decay * th[i];
  }
}

/// Bias-corrected Adam moments with decay applied outside the gradient:
/// theta <- theta - eta (alpha m_hat / (sqrt(v_hat) + eps) + lambda theta).
template <class T>
void adamw_step(Variable<T>& p, ParamState<T>& s, double lr, double beta1, double beta2,
                double eps, double weight_decay, const GradBoostHyper* boost, double eta) {
  if (!(lr > 0.0)) throw ContractError("adamw_step: lr must be > 0");
  ++s.t;
  const auto g = boosted_gradient(p, s, weight_decay, false, boost);
  if (s.m.shape() != p.value.shape()) s.m = Tensor<T>(p.value.shape());
  if (s.v.shape() != p.value.shape()) s.v = Tensor<T>(p.value.shape());
  const double c1 = 1.0 - std::pow(beta1, double(s.t));
  const double c2 = 1.0 - std::pow(beta2, double(s.t));
  const T b1 = static_cast<T>(beta1), b2 = static_cast<T>(beta2);
  T* m = s.m.data();
  T* v = s.v.data();
  T* th = p.value.data();
  for (std::int64_t i = 0; i < p.value.numel(); ++i) {
    m[i] = b1 * m[i] + (T(1) - b1) * g[i];
    v[i] = b2 * v[i] + (T(1) - b2) * g[i] * g[i];
    const double mh = m[i] / c1, vh = v[i] / c2;
    const double upd = lr * mh / (std::sqrt(vh) + eps) + weight_decay * double(th[i]);
    th[i] = static_cast<T>(double(th[i]) - eta * upd);
  }
}

/// Owns per-parameter state for a fixed parameter list.
template <class T>
class Optimizer {
 public:
  Optimizer(std::vector<Var<T>> params, OptimizerConfig cfg, bool boost_enabled = false)
      : params_(std::move(params)), cfg_(cfg), boost_enabled_(boost_enabled) {
    cfg_.validate();
    states_.resize(params_.size());
    for (std::size_t i = 0; i < params_.size(); ++i) {
      states_[i].rng = Rng::derive(cfg_.seed, i);
    }
  }

  /// One update with schedule multiplier eta (>= 0). Parameters that received
  /// no gradient are left alone.
  void step(double eta) {
    if (!(eta >= 0.0)) throw ContractError("optimizer: schedule multiplier must be >= 0");
    const GradBoostHyper* boost = boost_enabled_ ? &cfg_.boost : nullptr;
    for (std::size_t i = 0; i < params_.size(); ++i) {
      auto& p = *params_[i];
      if (p.grad.shape() != p.value.shape()) continue;
      if (cfg_.kind == OptimizerKind::kSgd) {
        sgd_step(p, states_[i], cfg_.lr, cfg_.beta1, cfg_.weight_decay, boost, eta);
      } else {
        adamw_step(p, states_[i], cfg_.lr, cfg_.beta1, cfg_.beta2, cfg_.eps,
                   cfg_.weight_decay, boost, eta);
      }
    }
  }

  void zero_grad() {
    for (auto& p : params_) p->zero_grad();
  }

  void set_boost_enabled(bool on) { boost_enabled_ = on; }
  bool boost_enabled() const { return boost_enabled_; }
  const OptimizerConfig& config() const { return cfg_; }
  const std::vector<Var<T>>& params() const { return params_; }
  const ParamState<T>& state(std::size_t i) const { return states_.at(i); }
  std::size_t size() const { return params_.size(); }

  /// True when any first moment holds a nonzero entry.
  bool momentum_charged() const {
    for (const auto& s : states_)
      for (const T v : s.m.vec())
        if (v != T{0}) return true;
    return false;
  }

 private:
  std::vector<Var<T>> params_;
  OptimizerConfig cfg_;
  bool boost_enabled_;
  std::vector<ParamState<T>> states_;
};

}  // namespace frostq::optim
