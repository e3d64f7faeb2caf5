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

// FLOPs-aware reward and a small random / evolutionary search over per-block
// kernel, expansion and squeeze choices of a fixed stage skeleton.

#include <algorithm>
#include <cmath>
#include <cstdint>
#include <fstream>
#include <functional>
#include <limits>
#include <string>
#include <vector>

#include <json.hpp>  // vendored nlohmann::json

#include "frostq/arch/frostnet.hpp"
#include "frostq/core/random.hpp"

namespace frostq::nas {

/// acc * (flops / tar)^w.
inline double reward(double acc, double flops, double tar, double w) {
  if (!(flops > 0.0)) throw ContractError("reward: flops must be > 0");
  if (!(tar > 0.0)) throw ContractError("reward: tar must be > 0");
  if (!std::isfinite(acc) || !std::isfinite(w)) throw ContractError("reward: non-finite input");
  return acc * std::pow(flops / tar, w);
}

inline constexpr double kDefaultRewardExponent = -0.07;

/// FLOPs targets of the three reference variants.
inline constexpr double kTargetLarge = 500e6, kTargetBase = 400e6, kTargetSmall = 300e6;

struct BlockChoice {
  std::int64_t kernel = 3, ef = 3, rf = 4;
  bool operator==(const BlockChoice&) const = default;
};

using Config = std::vector<BlockChoice>;

struct SearchSpace {
  arch::ArchSpec skeleton;            // channels and strides fixed
  std::vector<std::size_t> searchable;  // indices of blocks whose choices vary
  std::vector<std::int64_t> kernels{3, 5};
  std::vector<std::int64_t> efs{3, 6};
  std::vector<std::int64_t> rfs{4, 2};  // squeeze fractions 0.25 and 0.5

  /// Every non-degenerate block of the skeleton is searchable.
  static SearchSpace over(arch::ArchSpec skeleton) {
    SearchSpace s;
    for (std::size_t i = 0; i < skeleton.blocks.size(); ++i)
      if (!skeleton.blocks[i].degenerate()) s.searchable.push_back(i);
    s.skeleton = std::move(skeleton);
    return s;
  }

  std::size_t size() const { return searchable.size(); }

  Config sample(Rng& r) const {
    Config c(size());
    for (auto& b : c) {
      b.kernel = kernels[r.below(kernels.size())];
      b.ef = efs[r.below(efs.size())];
      b.rf = rfs[r.below(rfs.size())];
    }
    return c;
  }

  /// Changes exactly one choice of one block.
  Config mutate(Config c, Rng& r) const {
    if (c.empty()) return c;
    auto& b = c[r.below(c.size())];
    auto flip = [&](std::int64_t& v, const std::vector<std::int64_t>& opts) {
      std::vector<std::int64_t> other;
      for (auto o : opts)
        if (o != v) other.push_back(o);
      if (!other.empty()) v = other[r.below(other.size())];
    };
    switch (r.below(3)) {
      case 0: flip(b.kernel, kernels); break;
      case 1: flip(b.ef, efs); break;
      default: flip(b.rf, rfs); break;
    }
    return c;
  }

  arch::ArchSpec realize(const Config& c) const {
    if (c.size() != size()) throw ContractError("SearchSpace: config length mismatch");
    arch::ArchSpec a = skeleton;
    for (std::size_t i = 0; i < c.size(); ++i) {
      auto& b = a.blocks[searchable[i]];
      b.kernel = c[i].kernel;
      b.ef = c[i].ef;
      b.rf = c[i].rf;
    }
    a.validate();
    return a;
  }
};

struct Candidate {
  int index = 0;  // evaluation order
  Config config;
  std::int64_t flops = 0;
  double accuracy = 0.0;
  double reward = -std::numeric_limits<double>::infinity();
  std::uint64_t seed = 0;
  bool failed = false;
  std::string error;
};

enum class Strategy { kRandom, kEvolutionary };

inline Strategy strategy_from_string(const std::string& s) {
  if (s == "random") return Strategy::kRandom;
  if (s == "evolutionary") return Strategy::kEvolutionary;
  throw ContractError("unknown search strategy '" + s + "' (random|evolutionary)");
}

inline const char* to_string(Strategy s) {
  return s == Strategy::kRandom ? "random" : "evolutionary";
}

/// Trains and scores one architecture; must be deterministic in its seed.
using Evaluator = std::function<double(const arch::ArchSpec&, std::uint64_t seed)>;

struct SearchOptions {
  int budget = 8;
  double tar = 0.0;  // FLOPs target; required
  double w = kDefaultRewardExponent;
  Strategy strategy = Strategy::kRandom;
  std::uint64_t seed = 0;
  int population = 8;
  std::int64_t input_res = 32;
};

/// Best first; failures last; ties broken by evaluation order.
inline void rank(std::vector<Candidate>& cs) {
  std::stable_sort(cs.begin(), cs.end(), [](const Candidate& a, const Candidate& b) {
    if (a.failed != b.failed) return !a.failed;
    if (a.reward != b.reward) return a.reward > b.reward;
    return a.index < b.index;
  });
}

inline std::vector<Candidate> search(const SearchSpace& space, const Evaluator& eval,
                                     const SearchOptions& opt) {
  if (opt.budget < 1) throw ContractError("search: budget must be >= 1");
  if (!(opt.tar > 0.0)) throw ContractError("search: tar must be > 0");
  if (opt.population < 2) throw ContractError("search: population must be >= 2");
  Rng rng = Rng::derive(opt.seed, 0);
  std::vector<Candidate> done;
  auto evaluate = [&](Config c) {
    Candidate cand;
    cand.index = static_cast<int>(done.size());
    cand.config = std::move(c);
    cand.seed = Rng::derive(opt.seed, 1 + done.size()).next_u64();
    try {
      const auto a = space.realize(cand.config);
      cand.flops = arch::count(a, opt.input_res).flops;
      cand.accuracy = eval(a, cand.seed);
      cand.reward = reward(cand.accuracy, double(cand.flops), opt.tar, opt.w);
    } catch (const std::exception& e) {
      cand.failed = true;
      cand.error = e.what();
      cand.reward = -std::numeric_limits<double>::infinity();
    }
    done.push_back(std::move(cand));
  };
  for (int i = 0; i < opt.budget; ++i) {
    const bool seed_phase = opt.strategy == Strategy::kRandom || i < opt.population;
    if (seed_phase) {
      evaluate(space.sample(rng));
      continue;
    }
    // Tournament of two among the current top `population` survivors.
    auto pool = done;
    rank(pool);
    std::size_t alive = 0;
    while (alive < pool.size() && !pool[alive].failed) ++alive;
    if (alive == 0) {
      evaluate(space.sample(rng));
      continue;
    }
    pool.resize(std::min<std::size_t>(alive, static_cast<std::size_t>(opt.population)));
    const auto& a = pool[rng.below(pool.size())];
    const auto& b = pool[rng.below(pool.size())];
    const auto& parent = a.reward >= b.reward ? a : b;
    evaluate(space.mutate(parent.config, rng));
  }
  rank(done);
  return done;
}

inline nlohmann::json to_json(const Candidate& c) {
  nlohmann::json cfg = nlohmann::json::array();
  for (const auto& b : c.config) cfg.push_back({{"kernel", b.kernel}, {"ef", b.ef}, {"rf", b.rf}});
  nlohmann::json j{{"index", c.index}, {"config", cfg},   {"flops", c.flops},
                   {"acc", c.accuracy}, {"seed", c.seed}, {"failed", c.failed}};
  j["reward"] = c.failed ? nlohmann::json(nullptr) : nlohmann::json(c.reward);
  if (c.failed) j["error"] = c.error;
  return j;
}

/// One JSON record per line, in ranked order.
inline void write_results(const std::vector<Candidate>& cs, const std::string& path) {
  std::ofstream f(path);
  if (!f) throw IoError("cannot write search results '" + path + "'");
  for (const auto& c : cs) f << to_json(c).dump() << '\n';
}

}  // namespace frostq::nas
