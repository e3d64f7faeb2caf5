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

// frostq: train, quantize, evaluate, benchmark, count and search models.

#include <cstdlib>
#include <iostream>
#include <map>
#include <string>
#include <vector>

#include <CLI11.hpp>
#include <json.hpp>

#include "frostq/core/parallel.hpp"
#include "frostq/pipeline/run.hpp"

namespace {

using nlohmann::json;

// Flag name -> config key. Values are parsed as JSON when possible so
// numbers and booleans keep their type; anything else is a string.
struct Flag {
  const char* flag;
  const char* key;
  const char* help;
};

const Flag kFlags[] = {
    {"--variant", "variant", "desk | base | large | small | custom"},
    {"--width", "width", "channel multiplier"},
    {"--arch", "arch_file", "architecture JSON file"},
    {"--res", "input_res", "input resolution"},
    {"--classes", "num_classes", "number of classes"},
    {"--data", "data", "CIFAR-10 binary directory or 'synthetic'"},
    {"--out", "out_dir", "output directory"},
    {"--seed", "seed", "run seed"},
    {"--fp-epochs", "fp_epochs", "full-precision warm-up epochs"},
    {"--qat-epochs", "qat_epochs", "quantization-aware epochs"},
    {"--batch", "batch_size", "batch size"},
    {"--optimizer", "optimizer", "sgd | adam | adamw"},
    {"--lr", "lr", "base learning rate"},
    {"--threads", "threads", "worker threads"},
    {"--subset", "subset", "keep the first N training images"},
    {"--checkpoint", "checkpoint", "checkpoint directory (eval)"},
    {"--stack", "bench_stack", "bench a block stack: frost | mbconv | mbconv_se"},
    {"--bench-threads", "bench_threads", "bench threads"},
    {"--runs", "bench_runs", "timed bench iterations"},
    {"--budget", "search_budget", "candidates to evaluate"},
    {"--strategy", "search_strategy", "random | evolutionary"},
};

json parse_value(const std::string& s) {
  try {
    return json::parse(s);
  } catch (const json::exception&) {
    return s;
  }
}

struct Common {
  std::string config_path;
  std::map<std::string, std::string> values;
  std::vector<std::string> sets;
  bool no_boost = false;
};

void add_common(CLI::App* sub, Common& c) {
  sub->add_option("-c,--config", c.config_path, "JSON config file");
  for (const auto& f : kFlags) sub->add_option(f.flag, c.values[f.key], f.help);
  sub->add_option("--set", c.sets, "override any config key: key=value")->take_all();
  sub->add_flag("--no-boost", c.no_boost, "disable GradBoost");
}

frostq::config::RunConfig build_config(const Common& c, const std::string& command) {
  frostq::config::RunConfig cfg;
  if (!c.config_path.empty()) cfg = frostq::config::load_config(c.config_path);
  json patch = json::object();
  for (const auto& [key, v] : c.values) {
    if (v.empty()) continue;
    // string-typed keys must not be reinterpreted (e.g. out_dir "1")
    const json current = frostq::config::to_json(cfg).at(key);
    patch[key] = current.is_string() ? json(v) : parse_value(v);
  }
  for (const auto& s : c.sets) {
    const auto eq = s.find('=');
    if (eq == std::string::npos || eq == 0) {
      throw frostq::ContractError("--set expects key=value, got '" + s + "'");
    }
    const std::string key = s.substr(0, eq), v = s.substr(eq + 1);
    const auto all = frostq::config::to_json(cfg);
    patch[key] = all.contains(key) && all.at(key).is_string() ? json(v) : parse_value(v);
  }
  if (c.no_boost) patch["boost"] = false;
  cfg = frostq::config::config_from_json(patch, cfg);
  cfg.validate_for(command);
  return cfg;
}

}  // namespace

int main(int argc, char** argv) {
  frostq::tune_allocator();
  CLI::App app{"frostq: quantization-aware training and search for FrostNet models"};
  app.require_subcommand(1);
  struct Cmd {
    const char* name;
    const char* help;
  };
  const Cmd cmds[] = {
      {"train", "full-precision baseline"},
      {"qat", "warm-up, quantization-aware training, int8 conversion"},
      {"eval", "accuracy of a checkpoint"},
      {"bench", "fp vs int8 latency"},
      {"count", "parameters and FLOPs"},
      {"search", "architecture search with a short QAT proxy"},
      {"show-config", "print the effective configuration"},
  };
  std::map<std::string, Common> opts;
  std::map<std::string, CLI::App*> subs;
  for (const auto& c : cmds) {
    subs[c.name] = app.add_subcommand(c.name, c.help);
    add_common(subs[c.name], opts[c.name]);
  }
  CLI11_PARSE(app, argc, argv);

  namespace p = frostq::pipeline;
  try {
    for (const auto& [name, sub] : subs) {
      if (!sub->parsed()) continue;
      const auto cfg = build_config(opts[name], name == "show-config" ? "count" : name);
      if (name == "train") {
        p::run_train(cfg);
      } else if (name == "qat") {
        p::run_qat(cfg);
      } else if (name == "eval") {
        p::run_eval(cfg);
      } else if (name == "bench") {
        const auto r = p::run_bench(cfg);
        if (r.unstable()) std::cerr << "warning: timings unstable (relative IQR >= 10%)\n";
      } else if (name == "count") {
        p::run_count(cfg);
      } else if (name == "search") {
        p::run_search(cfg);
      } else {
        std::cout << frostq::config::to_json(cfg).dump(2) << '\n';
      }
    }
  } catch (const std::exception& e) {
    std::cerr << "error: " << e.what() << '\n';
    return 1;
  }
  return 0;
}
