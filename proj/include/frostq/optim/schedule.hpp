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

#include <algorithm>
#include <cmath>
#include <cstdint>
#include <string>
#include <vector>

#include "frostq/core/error.hpp"

namespace frostq::optim {

enum class ScheduleKind { kConstant, kStep, kPoly };

inline const char* to_string(ScheduleKind k) {
  switch (k) {
    case ScheduleKind::kConstant: return "constant";
    case ScheduleKind::kStep: return "step";
    case ScheduleKind::kPoly: return "poly";
  }
  return "?";
}

inline ScheduleKind schedule_from_string(const std::string& s) {
  if (s == "constant") return ScheduleKind::kConstant;
  if (s == "step") return ScheduleKind::kStep;
  if (s == "poly") return ScheduleKind::kPoly;
  throw ContractError("unknown schedule '" + s + "' (constant | step | poly)");
}

struct ScheduleConfig {
  ScheduleKind kind = ScheduleKind::kPoly;
  std::vector<std::int64_t> milestones;  // step schedule
  double step_factor = 0.1;
  double poly_power = 0.9;
};

/// Learning rate at step t of `total`.
inline double lr_schedule(const ScheduleConfig& cfg, std::int64_t t, std::int64_t total,
                          double base_lr) {
  if (t < 0 || t > total) {
    throw ContractError("lr_schedule: t=" + std::to_string(t) + " outside [0, " +
                        std::to_string(total) + "]");
  }
  switch (cfg.kind) {
    case ScheduleKind::kConstant:
      return base_lr;
    case ScheduleKind::kStep: {
      double lr = base_lr;
      for (auto m : cfg.milestones)
        if (t >= m) lr *= cfg.step_factor;
      return lr;
    }
    case ScheduleKind::kPoly:
      if (total == 0) return base_lr;
      return base_lr * std::pow(1.0 - double(t) / double(total), cfg.poly_power);
  }
  return base_lr;
}

}  // namespace frostq::optim
