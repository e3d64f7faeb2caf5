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

// GradBoost and optimizer property checks, shared by unit and acceptance
// tests. The vanilla optimizers below are written out independently of the
// library and serve as the reduction oracle.

#include <cmath>
#include <cstdint>
#include <limits>
#include <vector>

#include "frostq/optim/optimizers.hpp"
#include "support/quant_oracles.hpp"

namespace frostq::testing {

struct VanillaSgd {
  double lr, beta1, wd;
  std::vector<float> m;
  void step(std::vector<float>& th, const std::vector<float>& grad, double eta) {
    if (m.empty()) m.assign(th.size(), 0.f);
    for (std::size_t i = 0; i < th.size(); ++i) {
      const float g = grad[i] + float(wd) * th[i];
      m[i] = float(beta1) * m[i] + float(eta * lr) * g;
      th[i] = th[i] - m[i] - float(eta * wd) * th[i];
    }
  }
};

struct VanillaAdamW {
  double lr, beta1, beta2, eps, wd;
  std::vector<float> m, v;
  std::int64_t t = 0;
  void step(std::vector<float>& th, const std::vector<float>& grad, double eta) {
    if (m.empty()) {
      m.assign(th.size(), 0.f);
      v.assign(th.size(), 0.f);
    }
    ++t;
    const double c1 = 1.0 - std::pow(beta1, double(t)), c2 = 1.0 - std::pow(beta2, double(t));
    for (std::size_t i = 0; i < th.size(); ++i) {
      const float g = grad[i];
      m[i] = float(beta1) * m[i] + (1.f - float(beta1)) * g;
      v[i] = float(beta2) * v[i] + (1.f - float(beta2)) * g * g;
      const double upd = lr * (m[i] / c1) / (std::sqrt(v[i] / c2) + eps) + wd * double(th[i]);
      th[i] = float(double(th[i]) - eta * upd);
    }
  }
};

/// Runs `steps` updates of Optimizer (boost enabled, boost_prob = 0) next to
/// the vanilla oracle on identical random gradients; counts mismatching bits.
inline PropertyReport reduction_property(optim::OptimizerKind kind, std::uint64_t seed,
                                         int steps) {
  Rng rng(seed);
  PropertyReport r{kind == optim::OptimizerKind::kSgd ? "reduction_sgd" : "reduction_adamw"};
  optim::OptimizerConfig cfg;
  cfg.kind = kind;
  cfg.lr = 0.01;
  cfg.weight_decay = 1e-3;
  cfg.boost.boost_prob = 0.0;
  cfg.seed = seed;
  const Shape shapes[] = {{8, 4, 3, 3}, {16}, {5, 7}};
  std::vector<Var<float>> params;
  std::vector<std::vector<float>> oracle;
  for (const auto& s : shapes) {
    auto t = uniform_tensor(s, rng, -1, 1);
    oracle.push_back(t.vec());
    params.push_back(parameter(std::move(t), "p"));
  }
  optim::Optimizer<float> opt(params, cfg, true);
  std::vector<VanillaSgd> sgd(params.size(), VanillaSgd{cfg.lr, cfg.beta1, cfg.weight_decay, {}});
  std::vector<VanillaAdamW> adam(
      params.size(), VanillaAdamW{cfg.lr, cfg.beta1, cfg.beta2, cfg.eps, cfg.weight_decay, {}, {}});
  for (int t = 0; t < steps; ++t) {
    const double eta = rng.uniform(0.0, 1.0);
    for (std::size_t i = 0; i < params.size(); ++i) {
      params[i]->grad = uniform_tensor(params[i]->value.shape(), rng, -2, 2);
      const auto g = params[i]->grad.vec();
      if (kind == optim::OptimizerKind::kSgd) {
        sgd[i].step(oracle[i], g, eta);
      } else {
        adam[i].step(oracle[i], g, eta);
      }
    }
    opt.step(eta);
    ++r.trials;
    for (std::size_t i = 0; i < params.size(); ++i) {
      for (std::size_t j = 0; j < oracle[i].size(); ++j) {
        const double d = std::abs(double(params[i]->value.vec()[j]) - oracle[i][j]);
        r.worst = std::max(r.worst, d);
        if (params[i]->value.vec()[j] != oracle[i][j]) ++r.violations;
      }
    }
  }
  return r;
}

/// Random draws through gradboost_transform: bound and sign checks.
struct BoostSweep {
  PropertyReport bound{"perturbation_bound"};
  PropertyReport sign{"sign_preservation"};
  PropertyReport zero_grad{"zero_gradient_untouched"};
};

inline BoostSweep boost_sweep(std::uint64_t seed, std::int64_t draws) {
  Rng rng(seed);
  BoostSweep out;
  optim::GradBoostHyper h;
  std::vector<double> g(100);
  while (out.bound.trials < draws) {
    h.gamma2 = std::pow(10.0, rng.uniform(-4, 0));
    h.gamma3 = rng.uniform(0.9, 0.99999);
    h.boost_prob = rng.uniform(0.1, 1.0);
    const double b = std::pow(10.0, rng.uniform(-3, 1));
    const auto t = static_cast<std::int64_t>(rng.below(100000));
    for (auto& v : g) v = rng.bernoulli(0.1) ? 0.0 : rng.normal() * std::pow(10.0, rng.uniform(-4, 1));
    auto before = g;
    optim::gradboost_transform(g.data(), std::int64_t(g.size()), b, h, t, rng);
    const double limit = optim::boost_decay(h, t) * h.gamma2;
    for (std::size_t i = 0; i < g.size(); ++i) {
      const double d = g[i] - before[i];
      // The measured difference carries the rounding of g + delta.
      const double slack = 2.0 * std::numeric_limits<double>::epsilon() * std::abs(before[i]);
      out.bound.worst = std::max(out.bound.worst, (std::abs(d) - slack) / limit);
      if (std::abs(d) > limit + slack) ++out.bound.violations;
      const double s0 = before[i] > 0 ? 1 : (before[i] < 0 ? -1 : 0);
      const double sd = d > 0 ? 1 : (d < 0 ? -1 : 0);
      if (!(sd == 0 || sd == s0)) ++out.sign.violations;
      if (before[i] != 0.0 && (g[i] > 0) != (before[i] > 0)) ++out.sign.violations;
      if (before[i] == 0.0) {
        ++out.zero_grad.trials;
        if (g[i] != 0.0) ++out.zero_grad.violations;
      }
      ++out.bound.trials;
      ++out.sign.trials;
    }
  }
  return out;
}

/// em_max >= em_min and b >= 0 across `steps` random gradients.
inline PropertyReport extremes_property(std::uint64_t seed, int steps) {
  Rng rng(seed);
  PropertyReport r{"extremes_ordered"};
  optim::ExtremeTracker tr;
  std::vector<float> g(64);
  r.worst = std::numeric_limits<double>::infinity();  // smallest b seen
  for (int t = 0; t < steps; ++t) {
    const double mag = std::pow(10.0, rng.uniform(-6, 3));
    const double shift = rng.uniform(-1, 1) * mag;
    for (auto& v : g) v = static_cast<float>(shift + rng.normal() * mag);
    const double b = optim::update_laplace_scale(tr, g.data(), 64, rng.uniform(0.0, 0.9999));
    r.worst = std::min(r.worst, b);
    if (!(b >= 0.0) || !(tr.em_max >= tr.em_min)) ++r.violations;
    ++r.trials;
  }
  return r;
}

}  // namespace frostq::testing
