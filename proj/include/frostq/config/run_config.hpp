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

// Everything a command needs, serializable to and from JSON. A run is a
// function of this struct; two runs with equal configs write equal metrics.

#include <cstdint>
#include <cstdlib>
#include <fstream>
#include <set>
#include <string>
#include <vector>

#include <json.hpp>  // vendored nlohmann::json

#include "frostq/arch/frostnet.hpp"
#include "frostq/core/error.hpp"
#include "frostq/data/dataset.hpp"
#include "frostq/nas/search.hpp"
#include "frostq/optim/optimizers.hpp"
#include "frostq/optim/schedule.hpp"

namespace frostq::config {

inline constexpr const char* kDataEnv = "FROSTQ_CIFAR10_DIR";

struct RunConfig {
  // architecture
  std::string variant = "desk";  // base | large | small | desk | custom (needs arch_file)
  double width = 1.0;
  std::string arch_file;
  std::int64_t num_classes = 10;
  std::int64_t input_res = 32;
  std::int64_t stem_stride = 2;

  // optimization
  optim::OptimizerConfig optimizer{};
  bool boost = true;
  optim::ScheduleConfig schedule{};
  int fp_epochs = 1;   // StatAssist warm-up; 0 means a cold start
  int qat_epochs = 3;
  std::int64_t batch_size = 32;
  bool augment = false;
  double grad_threshold = 1e-8;
  double observer_averaging = 0.01;
  int calib_batches = 8;  // only used when no QAT epoch ran

  // data: "synthetic", a CIFAR-10 binary directory, or empty for the env var
  std::string data;
  std::int64_t synthetic_train = 5000;
  std::int64_t synthetic_test = 1000;
  std::int64_t subset = 0;  // first N training images; 0 keeps all

  std::uint64_t seed = 1;
  std::string out_dir = "runs/default";
  int threads = 1;

  // bench
  std::string bench_stack;  // frost | mbconv | mbconv_se; empty benches the arch
  std::int64_t bench_res = 56;
  std::int64_t bench_channels = 64;
  int bench_threads = 4;
  int bench_warmup = 5;
  int bench_runs = 30;

  // search
  int search_budget = 8;
  std::string search_strategy = "evolutionary";
  double search_w = nas::kDefaultRewardExponent;
  double search_tar = 0.0;  // 0 scales the Base target to the skeleton
  int search_population = 8;
  int proxy_fp_epochs = 1;
  int proxy_qat_epochs = 2;

  // eval
  std::string checkpoint;

  bool cold() const { return fp_epochs == 0; }

  /// Checks that hold for every command.
  void validate() const {
    auto bad = [](const std::string& why) { throw ContractError("config: " + why); };
    if (variant != "desk") arch::variant_from_string(variant);
    if (variant == "custom" && arch_file.empty()) bad("variant custom needs arch_file");
    if (!(width > 0.0)) bad("width must be > 0");
    if (num_classes < 2) bad("num_classes must be >= 2");
    if (input_res < 1) bad("input_res must be >= 1");
    if (stem_stride < 1) bad("stem_stride must be >= 1");
    optimizer.validate();
    if (fp_epochs < 0 || qat_epochs < 0) bad("epochs must be >= 0");
    if (batch_size < 1) bad("batch_size must be >= 1");
    if (!(observer_averaging > 0.0 && observer_averaging <= 1.0)) {
      bad("observer_averaging must lie in (0, 1]");
    }
    if (calib_batches < 1) bad("calib_batches must be >= 1");
    if (synthetic_train < 1 || synthetic_test < 1) bad("synthetic sizes must be >= 1");
    if (subset < 0) bad("subset must be >= 0");
    if (threads < 1 || bench_threads < 1) bad("thread counts must be >= 1");
    if (bench_runs < 1 || bench_warmup < 0) bad("bench needs runs >= 1 and warmup >= 0");
    if (!bench_stack.empty()) arch::block_type_from_string(bench_stack);
    if (search_budget < 1) bad("search_budget must be >= 1");
    nas::strategy_from_string(search_strategy);
    if (search_population < 2) bad("search_population must be >= 2");
    if (search_tar < 0.0) bad("search_tar must be >= 0");
    if (proxy_fp_epochs < 0 || proxy_qat_epochs < 0) bad("proxy epochs must be >= 0");
  }

  /// Extra checks for a command; `command` is the CLI verb.
  void validate_for(const std::string& command) const {
    validate();
    if (command == "qat" && fp_epochs == 0 && qat_epochs == 0) {
      throw ContractError("config: qat needs fp_epochs or qat_epochs > 0 (both are 0)");
    }
    if (command == "train" && fp_epochs + qat_epochs == 0) {
      throw ContractError("config: train needs fp_epochs + qat_epochs > 0");
    }
    if (command == "eval" && checkpoint.empty()) {
      throw ContractError("config: eval needs a checkpoint directory");
    }
  }
};

// ---------------------------------------------------------------- JSON

inline nlohmann::json to_json(const RunConfig& c) {
  using nlohmann::json;
  const auto& o = c.optimizer;
  const auto& b = o.boost;
  return json{
      {"variant", c.variant},
      {"width", c.width},
      {"arch_file", c.arch_file},
      {"num_classes", c.num_classes},
      {"input_res", c.input_res},
      {"stem_stride", c.stem_stride},
      {"optimizer", optim::to_string(o.kind)},
      {"lr", o.lr},
      {"beta1", o.beta1},
      {"beta2", o.beta2},
      {"eps", o.eps},
      {"weight_decay", o.weight_decay},
      {"boost", c.boost},
      {"gamma1", b.gamma1},
      {"gamma2", b.gamma2},
      {"gamma3", b.gamma3},
      {"boost_prob", b.boost_prob},
      {"decay_mode", optim::to_string(b.decay_mode)},
      {"clamp_mode", optim::to_string(b.clamp_mode)},
      {"mask_mode", optim::to_string(b.mask_mode)},
      {"schedule", optim::to_string(c.schedule.kind)},
      {"milestones", c.schedule.milestones},
      {"step_factor", c.schedule.step_factor},
      {"poly_power", c.schedule.poly_power},
      {"fp_epochs", c.fp_epochs},
      {"qat_epochs", c.qat_epochs},
      {"batch_size", c.batch_size},
      {"augment", c.augment},
      {"grad_threshold", c.grad_threshold},
      {"observer_averaging", c.observer_averaging},
      {"calib_batches", c.calib_batches},
      {"data", c.data},
      {"synthetic_train", c.synthetic_train},
      {"synthetic_test", c.synthetic_test},
      {"subset", c.subset},
      {"seed", c.seed},
      {"out_dir", c.out_dir},
      {"threads", c.threads},
      {"bench_stack", c.bench_stack},
      {"bench_res", c.bench_res},
      {"bench_channels", c.bench_channels},
      {"bench_threads", c.bench_threads},
      {"bench_warmup", c.bench_warmup},
      {"bench_runs", c.bench_runs},
      {"search_budget", c.search_budget},
      {"search_strategy", c.search_strategy},
      {"search_w", c.search_w},
      {"search_tar", c.search_tar},
      {"search_population", c.search_population},
      {"proxy_fp_epochs", c.proxy_fp_epochs},
      {"proxy_qat_epochs", c.proxy_qat_epochs},
      {"checkpoint", c.checkpoint},
  };
}

namespace detail {

inline optim::DecayMode decay_from_string(const std::string& s) {
  if (s == "power") return optim::DecayMode::kPower;
  if (s == "one_minus_power") return optim::DecayMode::kOneMinusPower;
  throw ContractError("unknown decay_mode '" + s + "' (power | one_minus_power)");
}
inline optim::ClampMode clamp_from_string(const std::string& s) {
  if (s == "sign_preserving") return optim::ClampMode::kSignPreserving;
  if (s == "literal") return optim::ClampMode::kLiteral;
  throw ContractError("unknown clamp_mode '" + s + "' (sign_preserving | literal)");
}
inline optim::MaskMode mask_from_string(const std::string& s) {
  if (s == "elementwise") return optim::MaskMode::kElementwise;
  if (s == "per_tensor") return optim::MaskMode::kPerTensor;
  throw ContractError("unknown mask_mode '" + s + "' (elementwise | per_tensor)");
}

}  // namespace detail

/// Keys missing from `j` keep their defaults; unknown keys are an error so
/// typos do not silently fall back.
inline RunConfig config_from_json(const nlohmann::json& j, RunConfig c = {}) {
  if (!j.is_object()) throw ContractError("config: expected a JSON object");
  const auto known = to_json(c);
  for (const auto& [k, v] : j.items()) {
    if (!known.contains(k)) throw ContractError("config: unknown key '" + k + "'");
  }
  auto get = [&](const char* key, auto& field) {
    if (!j.contains(key)) return;
    try {
      j.at(key).get_to(field);
    } catch (const nlohmann::json::exception& e) {
      throw ContractError(std::string("config: bad value for '") + key + "': " + e.what());
    }
  };
  auto get_enum = [&](const char* key, auto& field, auto parse) {
    if (!j.contains(key)) return;
    if (!j.at(key).is_string()) {
      throw ContractError(std::string("config: '") + key + "' must be a string");
    }
    field = parse(j.at(key).get<std::string>());
  };
  auto& o = c.optimizer;
  auto& b = o.boost;
  get("variant", c.variant);
  get("width", c.width);
  get("arch_file", c.arch_file);
  get("num_classes", c.num_classes);
  get("input_res", c.input_res);
  get("stem_stride", c.stem_stride);
  get_enum("optimizer", o.kind, optim::optimizer_from_string);
  get("lr", o.lr);
  get("beta1", o.beta1);
  get("beta2", o.beta2);
  get("eps", o.eps);
  get("weight_decay", o.weight_decay);
  get("boost", c.boost);
  get("gamma1", b.gamma1);
  get("gamma2", b.gamma2);
  get("gamma3", b.gamma3);
  get("boost_prob", b.boost_prob);
  get_enum("decay_mode", b.decay_mode, detail::decay_from_string);
  get_enum("clamp_mode", b.clamp_mode, detail::clamp_from_string);
  get_enum("mask_mode", b.mask_mode, detail::mask_from_string);
  get_enum("schedule", c.schedule.kind, optim::schedule_from_string);
  get("milestones", c.schedule.milestones);
  get("step_factor", c.schedule.step_factor);
  get("poly_power", c.schedule.poly_power);
  get("fp_epochs", c.fp_epochs);
  get("qat_epochs", c.qat_epochs);
  get("batch_size", c.batch_size);
  get("augment", c.augment);
  get("grad_threshold", c.grad_threshold);
  get("observer_averaging", c.observer_averaging);
  get("calib_batches", c.calib_batches);
  get("data", c.data);
  get("synthetic_train", c.synthetic_train);
  get("synthetic_test", c.synthetic_test);
  get("subset", c.subset);
  get("seed", c.seed);
  get("out_dir", c.out_dir);
  get("threads", c.threads);
  get("bench_stack", c.bench_stack);
  get("bench_res", c.bench_res);
  get("bench_channels", c.bench_channels);
  get("bench_threads", c.bench_threads);
  get("bench_warmup", c.bench_warmup);
  get("bench_runs", c.bench_runs);
  get("search_budget", c.search_budget);
  get("search_strategy", c.search_strategy);
  get("search_w", c.search_w);
  get("search_tar", c.search_tar);
  get("search_population", c.search_population);
  get("proxy_fp_epochs", c.proxy_fp_epochs);
  get("proxy_qat_epochs", c.proxy_qat_epochs);
  get("checkpoint", c.checkpoint);
  return c;
}

inline RunConfig load_config(const std::string& path) {
  std::ifstream f(path);
  if (!f) throw IoError("cannot open config '" + path + "'");
  nlohmann::json j;
  try {
    f >> j;
  } catch (const nlohmann::json::exception& e) {
    throw IoError("config '" + path + "' is not valid JSON: " + e.what());
  }
  return config_from_json(j);
}

inline void save_config(const RunConfig& c, const std::string& path) {
  std::ofstream f(path);
  if (!f) throw IoError("cannot write config '" + path + "'");
  f << to_json(c).dump(2) << '\n';
}

// ------------------------------------------------------------ resolution

inline arch::ArchSpec resolve_arch(const RunConfig& c) {
  arch::ArchSpec a;
  if (!c.arch_file.empty()) {
    a = arch::load_arch(c.arch_file);
  } else if (c.variant == "desk") {
    a = arch::desk_spec(c.num_classes);
    if (c.width != 1.0) a.blocks = arch::scale_blocks(a.blocks, c.width, a.stem_channels);
    a.stem_stride = c.stem_stride;
  } else {
    a = arch::frostnet_spec(arch::variant_from_string(c.variant), c.width, c.num_classes,
                            c.stem_stride);
  }
  a.num_classes = c.num_classes;
  a.validate();
  return a;
}

/// Where the data comes from, after the env override.
inline std::string resolve_data_source(const RunConfig& c) {
  if (!c.data.empty()) return c.data;
  if (const char* env = std::getenv(kDataEnv); env && *env) return env;
  throw IoError(std::string("no dataset configured; ") + data::kCifarHelp +
                ", or pass --data synthetic for the built-in generator");
}

inline data::Splits load_data(const RunConfig& c) {
  const std::string src = resolve_data_source(c);
  data::Splits s = src == "synthetic"
                       ? data::synthetic_splits(c.synthetic_train, c.synthetic_test, c.seed)
                       : data::load_cifar10(src);
  if (c.subset > 0 && c.subset < s.train.size()) s.train = s.train.slice(0, c.subset);
  return s;
}

}  // namespace frostq::config
