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

// Latency measurement: warm-up runs, timed runs, median and spread, and the
// float-versus-integer comparison of one architecture.

#include <algorithm>
#include <chrono>
#include <cstdint>
#include <functional>
#include <string>
#include <vector>

#include <json.hpp>  // vendored nlohmann::json

#include "frostq/arch/frostnet.hpp"
#include "frostq/core/parallel.hpp"
#include "frostq/core/random.hpp"

namespace frostq::bench {

struct TimingStats {
  std::vector<double> ms;  // per timed run, in run order
  double median = 0.0, q1 = 0.0, q3 = 0.0;

  double rel_iqr() const { return median > 0.0 ? (q3 - q1) / median : 0.0; }
  bool unstable(double limit = 0.10) const { return rel_iqr() >= limit; }
};

/// Linear-interpolated quantile of sorted data.
inline double quantile(const std::vector<double>& sorted, double q) {
  if (sorted.empty()) throw ContractError("quantile: no samples");
  const double pos = q * double(sorted.size() - 1);
  const auto lo = static_cast<std::size_t>(pos);
  const auto hi = std::min(lo + 1, sorted.size() - 1);
  return sorted[lo] + (pos - double(lo)) * (sorted[hi] - sorted[lo]);
}

inline TimingStats summarize(std::vector<double> ms) {
  TimingStats s;
  s.ms = ms;
  std::sort(ms.begin(), ms.end());
  s.median = quantile(ms, 0.5);
  s.q1 = quantile(ms, 0.25);
  s.q3 = quantile(ms, 0.75);
  return s;
}

inline TimingStats time_runs(const std::function<void()>& fn, int warmup = 5, int runs = 30) {
  if (warmup < 0 || runs < 1) throw ContractError("time_runs: need warmup >= 0 and runs >= 1");
  for (int i = 0; i < warmup; ++i) fn();
  std::vector<double> ms;
  ms.reserve(static_cast<std::size_t>(runs));
  for (int i = 0; i < runs; ++i) {
    const auto t0 = std::chrono::steady_clock::now();
    fn();
    ms.push_back(
        std::chrono::duration<double, std::milli>(std::chrono::steady_clock::now() - t0).count());
  }
  return summarize(std::move(ms));
}

struct BenchOptions {
  std::int64_t input_res = 56;
  std::int64_t batch = 1;
  int threads = 4;
  int warmup = 5;
  int runs = 30;
  std::uint64_t seed = 0;
};

struct BenchReport {
  std::string model;
  TimingStats fp, int8;
  int threads = 0;
  std::int64_t input_res = 0;
  std::int64_t batch = 0;

  double fp_ms() const { return fp.median; }
  double int8_ms() const { return int8.median; }
  /// (fp - int8) / fp.
  double reduction_rate() const { return (fp.median - int8.median) / fp.median; }
  bool unstable() const { return fp.unstable() || int8.unstable(); }

  nlohmann::json to_json() const {
    return {{"model", model},
            {"fp_ms", fp.median},
            {"int8_ms", int8.median},
            {"reduction_rate", reduction_rate()},
            {"fp_rel_iqr", fp.rel_iqr()},
            {"int8_rel_iqr", int8.rel_iqr()},
            {"unstable", unstable()},
            {"threads", threads},
            {"input_res", input_res},
            {"batch", batch},
            {"runs", fp.ms.size()}};
  }
};

/// Times the BN-folded float graph against the integer graph of the same
/// architecture on one random input. Activation ranges come from a few
/// random calibration batches; latency does not depend on their values.
inline BenchReport bench_arch(const arch::ArchSpec& a, const std::string& name,
                              const BenchOptions& opt) {
  const int prev_threads = num_threads();
  set_num_threads(opt.threads);
  auto g = arch::build_from_spec(a, opt.input_res, opt.seed);
  Rng r(opt.seed);
  Tensor<float> x({opt.batch, 3, opt.input_res, opt.input_res});
  for (auto& v : x.vec()) v = static_cast<float>(r.normal());
  g.prepare_qat();
  g.set_training(false);
  g.set_observing(true);
  for (int i = 0; i < 2; ++i) g.predict(x);
  g.set_observing(false);
  g.convert_int8();
  g.cache_folded();
  BenchReport rep;
  rep.model = name;
  rep.threads = opt.threads;
  rep.input_res = opt.input_res;
  rep.batch = opt.batch;
  rep.fp = time_runs([&] { (void)g.run_folded(x); }, opt.warmup, opt.runs);
  rep.int8 = time_runs([&] { (void)g.run_int8(x); }, opt.warmup, opt.runs);
  set_num_threads(prev_threads);
  return rep;
}

}  // namespace frostq::bench
