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

// Stochastic gradient boosting: sign-matched, clamped, decaying Laplace noise
// added to a random subset of gradient elements.

#include <algorithm>
#include <cmath>
#include <cstdint>
#include <string>

#include "frostq/core/error.hpp"
#include "frostq/core/random.hpp"

namespace frostq::optim {

enum class DecayMode { kPower, kOneMinusPower };
enum class ClampMode { kSignPreserving, kLiteral };
enum class MaskMode { kElementwise, kPerTensor };

inline const char* to_string(DecayMode m) {
  return m == DecayMode::kPower ? "power" : "one_minus_power";
}
inline const char* to_string(ClampMode m) {
  return m == ClampMode::kSignPreserving ? "sign_preserving" : "literal";
}
inline const char* to_string(MaskMode m) {
  return m == MaskMode::kElementwise ? "elementwise" : "per_tensor";
}

struct GradBoostHyper {
  double gamma1 = 0.999;   // EMA decay for gradient extremes
  double gamma2 = 0.01;    // noise clamp
  double gamma3 = 0.9999;  // noise decay base, per step
  double boost_prob = 0.5;
  DecayMode decay_mode = DecayMode::kPower;
  ClampMode clamp_mode = ClampMode::kSignPreserving;
  MaskMode mask_mode = MaskMode::kElementwise;

  void validate() const {
    auto open01 = [](double v) { return v > 0.0 && v < 1.0; };
    if (!(gamma1 >= 0.0 && gamma1 < 1.0)) {
      throw ContractError("GradBoostHyper: gamma1 must lie in [0, 1)");
    }
    if (!(gamma2 > 0.0)) throw ContractError("GradBoostHyper: gamma2 must be > 0");
    if (!open01(gamma3)) throw ContractError("GradBoostHyper: gamma3 must lie in (0, 1)");
    if (!(boost_prob >= 0.0 && boost_prob <= 1.0)) {
      throw ContractError("GradBoostHyper: boost_prob must lie in [0, 1]");
    }
  }
};

/// Exponential-moving gradient extremes of one parameter tensor.
struct ExtremeTracker {
  double em_max = 1.0;
  double em_min = 0.0;

  double scale() const { return em_max - em_min; }
};

/// Folds the extremes of g into the tracker and returns b = em_max - em_min.
template <class T>
double update_laplace_scale(ExtremeTracker& s, const T* g, std::int64_t n, double gamma1) {
  double gmax = s.em_max, gmin = s.em_min;
  for (std::int64_t i = 0; i < n; ++i) {
    const double v = g[i];
    if (!std::isfinite(v)) throw Error("update_laplace_scale: non-finite gradient");
    gmax = std::max(gmax, v);
    gmin = std::min(gmin, v);
  }
  s.em_max = gamma1 * s.em_max + (1.0 - gamma1) * gmax;
  s.em_min = gamma1 * s.em_min + (1.0 - gamma1) * gmin;
  return s.scale();
}

inline double boost_decay(const GradBoostHyper& h, std::int64_t t) {
  const double p = std::pow(h.gamma3, static_cast<double>(t));
  return h.decay_mode == DecayMode::kPower ? p : 1.0 - p;
}

/// In place: g += decay(t) * psi on the selected elements. Returns how many
/// elements were selected.
template <class T>
std::int64_t gradboost_transform(T* g, std::int64_t n, double b, const GradBoostHyper& h,
                                 std::int64_t t, Rng& rng) {
  if (b < 0.0) throw ContractError("gradboost_transform: negative Laplace scale");
  if (h.boost_prob <= 0.0) return 0;
  const double decay = boost_decay(h, t);
  bool tensor_on = true;
  if (h.mask_mode == MaskMode::kPerTensor) tensor_on = rng.bernoulli(h.boost_prob);
  if (!tensor_on) return 0;
  std::int64_t selected = 0;
  for (std::int64_t i = 0; i < n; ++i) {
    if (h.mask_mode == MaskMode::kElementwise && !rng.bernoulli(h.boost_prob)) continue;
    ++selected;
    const double mag = rng.laplace_magnitude(b);
    const double gi = g[i];
    const double sgn = gi > 0.0 ? 1.0 : (gi < 0.0 ? -1.0 : 0.0);
    double psi = sgn * mag;
    if (h.clamp_mode == ClampMode::kSignPreserving) {
      psi = sgn * std::min(mag, h.gamma2);
    } else {
      psi = std::min(std::max(psi, 0.0), h.gamma2);
    }
    if (psi != 0.0) g[i] = static_cast<T>(gi + decay * psi);
  }
  return selected;
}

}  // namespace frostq::optim
