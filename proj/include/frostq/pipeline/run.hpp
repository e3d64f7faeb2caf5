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

// Command implementations shared by the CLI and the acceptance harness.
// Each writes into cfg.out_dir: config.json, summary.json and, for training
// commands, metrics.csv (deterministic) plus timing.csv (wall clock).

#include <cstdio>
#include <filesystem>
#include <fstream>
#include <iostream>
#include <optional>
#include <string>
#include <vector>

#include <json.hpp>  // vendored nlohmann::json

#include "frostq/arch/frostnet.hpp"
#include "frostq/bench/bench.hpp"
#include "frostq/config/run_config.hpp"
#include "frostq/core/parallel.hpp"
#include "frostq/nas/search.hpp"
#include "frostq/pipeline/checkpoint.hpp"
#include "frostq/pipeline/train.hpp"

namespace frostq::pipeline {

using config::RunConfig;

// Independent streams for the parts of a run that draw random numbers.
enum class SeedRole : std::uint64_t { kModel = 1, kOptimizer = 2, kLoader = 3 };

inline std::uint64_t seed_for(std::uint64_t seed, SeedRole role) {
  return Rng::derive(seed, static_cast<std::uint64_t>(role)).next_u64();
}

inline std::string fmt(double v) {
  char buf[40];
  std::snprintf(buf, sizeof buf, "%.9g", v);
  return buf;
}

// ------------------------------------------------------------ metrics

/// Per-epoch rows plus one summary row. Timing goes to a separate file so
/// this one stays byte-identical across repeated runs.
class MetricsWriter {
 public:
  MetricsWriter(const std::filesystem::path& dir, std::vector<std::string> groups)
      : groups_(std::move(groups)) {
    std::filesystem::create_directories(dir);
    csv_.open(dir / "metrics.csv");
    timing_.open(dir / "timing.csv");
    if (!csv_ || !timing_) throw IoError("cannot write metrics under '" + dir.string() + "'");
    csv_ << "epoch,phase,loss,acc,lr";
    for (const auto& g : groups_) csv_ << ",median_grad:" << g << ",zero_frac:" << g;
    csv_ << '\n';
    timing_ << "epoch,phase,seconds\n";
  }

  void epoch(const EpochRecord& r) {
    csv_ << r.epoch << ',' << r.phase << ',' << fmt(r.loss) << ',' << fmt(r.accuracy) << ','
         << fmt(r.lr);
    for (const auto& g : groups_) {
      const ModelGraph::GroupGradStats* s = nullptr;
      for (const auto& x : r.grads)
        if (x.group == g) s = &x;
      if (s) {
        csv_ << ',' << fmt(s->median_abs) << ',' << fmt(s->zero_fraction);
      } else {
        csv_ << ",,";
      }
    }
    csv_ << '\n';
    timing_ << r.epoch << ',' << r.phase << ',' << fmt(r.seconds) << '\n';
    csv_.flush();
    timing_.flush();
  }

  /// Final record: phase holds the model precision, acc the test accuracy.
  void summary(const std::string& precision, double final_loss, double test_acc,
               double final_lr) {
    csv_ << "summary," << precision << ',' << fmt(final_loss) << ',' << fmt(test_acc) << ','
         << fmt(final_lr);
    for (std::size_t i = 0; i < groups_.size(); ++i) csv_ << ",,";
    csv_ << '\n';
    csv_.flush();
  }

  void total_seconds(double s) { timing_ << "total,," << fmt(s) << '\n'; }

 private:
  std::vector<std::string> groups_;
  std::ofstream csv_, timing_;
};

inline void write_json(const std::filesystem::path& path, const nlohmann::json& j) {
  std::filesystem::create_directories(path.parent_path());
  std::ofstream f(path);
  if (!f) throw IoError("cannot write '" + path.string() + "'");
  f << j.dump(2) << '\n';
}

inline void log_epoch(std::ostream* log, const EpochRecord& r) {
  if (!log) return;
  *log << "epoch " << r.epoch << " [" << r.phase << "] loss " << fmt(r.loss) << " acc "
       << fmt(r.accuracy) << " lr " << fmt(r.lr) << " (" << fmt(r.seconds) << " s)\n";
}

// ------------------------------------------------------------ pieces

inline data::LoaderOptions train_loader_options(const RunConfig& c) {
  data::LoaderOptions lo;
  lo.batch_size = c.batch_size;
  lo.shuffle = true;
  lo.augment = c.augment;
  lo.drop_last = true;
  lo.seed = seed_for(c.seed, SeedRole::kLoader);
  return lo;
}

inline optim::OptimizerConfig optimizer_config(const RunConfig& c) {
  auto o = c.optimizer;
  o.seed = seed_for(c.seed, SeedRole::kOptimizer);
  return o;
}

inline ModelGraph build_model(const RunConfig& c, const arch::ArchSpec& a) {
  return arch::build_from_spec(a, c.input_res, seed_for(c.seed, SeedRole::kModel));
}

struct RunResult {
  TrainRunReport report;
  nlohmann::json summary;
  std::optional<ModelGraph> model;
};

// ------------------------------------------------------------ commands

/// Full-precision baseline over fp_epochs + qat_epochs epochs, the same
/// step budget and schedule as the matching qat run.
inline RunResult run_train(const RunConfig& c, std::ostream* log = &std::cout) {
  c.validate_for("train");
  set_num_threads(c.threads);
  const auto t0 = std::chrono::steady_clock::now();
  const auto data = config::load_data(c);
  const auto a = config::resolve_arch(c);
  auto model = build_model(c, a);
  Opt opt(model.params(), optimizer_config(c), false);
  data::BatchLoader loader(data.train, train_loader_options(c));
  const int epochs = c.fp_epochs + c.qat_epochs;
  RunSchedule sched{c.schedule, std::int64_t{epochs} * loader.num_batches()};
  std::filesystem::create_directories(c.out_dir);
  config::save_config(c, (std::filesystem::path(c.out_dir) / "config.json").string());
  MetricsWriter mw(c.out_dir, model.groups());
  RunResult res;
  std::int64_t step = 0;
  for (int e = 0; e < epochs; ++e) {
    auto r = train_epoch(model, opt, loader, e, e, sched, step, c.grad_threshold);
    log_epoch(log, r);
    mw.epoch(r);
    res.report.add(std::move(r));
  }
  const double acc = evaluate(model, data.test);
  const auto& last = res.report.epochs.back();
  mw.summary("fp", last.loss, acc, last.lr);
  mw.total_seconds(
      std::chrono::duration<double>(std::chrono::steady_clock::now() - t0).count());
  CheckpointMeta meta{a, c.input_res, {}, config::to_json(c)};
  save_checkpoint(model, meta, std::filesystem::path(c.out_dir) / "checkpoint");
  const auto counts = arch::count(a, c.input_res);
  res.summary = {{"command", "train"},      {"precision", "fp"},
                 {"test_acc", acc},         {"final_loss", last.loss},
                 {"epochs", epochs},        {"params", counts.params},
                 {"flops", counts.flops},   {"train_size", data.train.size()},
                 {"test_size", data.test.size()}};
  write_json(std::filesystem::path(c.out_dir) / "summary.json", res.summary);
  if (log) *log << "summary,fp,test_acc," << fmt(acc) << '\n';
  res.model = std::move(model);
  return res;
}

/// Optional warm-up, fusion, fake-quantized training, conversion to
/// integer arithmetic and evaluation; leaves an int8 checkpoint.
inline RunResult run_qat(const RunConfig& c, std::ostream* log = &std::cout,
                         const data::Splits* preloaded = nullptr) {
  c.validate_for("qat");
  set_num_threads(c.threads);
  const auto t0 = std::chrono::steady_clock::now();
  std::optional<data::Splits> owned;
  if (!preloaded) owned = config::load_data(c);
  const data::Splits& data = preloaded ? *preloaded : *owned;
  const auto a = config::resolve_arch(c);
  auto model = build_model(c, a);
  Opt opt(model.params(), optimizer_config(c), c.boost);
  data::BatchLoader loader(data.train, train_loader_options(c));
  const int epochs = c.fp_epochs + c.qat_epochs;
  RunSchedule sched{c.schedule, std::int64_t{epochs} * loader.num_batches()};
  const std::filesystem::path out(c.out_dir);
  std::filesystem::create_directories(out);
  config::save_config(c, (out / "config.json").string());
  MetricsWriter mw(out, model.groups());
  RunResult res;
  std::int64_t step = 0;

  double fp_acc = -1.0;
  if (c.fp_epochs > 0) {
    auto w = statassist_warmup(model, opt, loader, c.fp_epochs, sched, step, &res.report);
    for (const auto& r : w.epochs) {
      log_epoch(log, r);
      mw.epoch(r);
    }
    if (w.degenerate && log) *log << "warning: warm-up left the optimizer momentum at zero\n";
    fp_acc = evaluate(model, data.test);
  }
  model::PrepareOptions po;
  po.averaging = c.observer_averaging;
  const auto prep = model.prepare_qat(po);
  for (const auto& u : prep.unfusible) {
    if (log) *log << "note: " << u << " stays unfused\n";
  }
  auto q = qat_train(model, opt, loader, c.qat_epochs, c.fp_epochs, sched, step, &res.report,
                     {});
  for (const auto& r : q) {
    log_epoch(log, r);
    mw.epoch(r);
  }
  if (c.qat_epochs == 0) {
    calibrate(model, loader, c.calib_batches);
  }
  const auto fq_pred = predict_labels(model, data.test);
  const double fq_acc = evaluate(model, data.test);
  model.convert_int8();
  const auto int8_pred = predict_labels(model, data.test);
  std::int64_t correct = 0;
  for (std::size_t i = 0; i < int8_pred.size(); ++i) correct += int8_pred[i] == data.test.labels[i];
  const double int8_acc = double(correct) / double(int8_pred.size());
  const double agree = agreement(fq_pred, int8_pred);

  const auto& last = res.report.epochs.back();
  mw.summary("int8", last.loss, int8_acc, last.lr);
  mw.total_seconds(
      std::chrono::duration<double>(std::chrono::steady_clock::now() - t0).count());
  CheckpointMeta meta{a, c.input_res, po, config::to_json(c)};
  save_checkpoint(model, meta, out / "checkpoint");
  const auto counts = arch::count(a, c.input_res);
  res.summary = {{"command", "qat"},
                 {"precision", "int8"},
                 {"test_acc", int8_acc},
                 {"fake_quant_acc", fq_acc},
                 {"warmup_fp_acc", fp_acc},
                 {"int8_fake_quant_agreement", agree},
                 {"final_loss", last.loss},
                 {"fp_epochs", c.fp_epochs},
                 {"qat_epochs", c.qat_epochs},
                 {"cold_start", res.report.cold_start},
                 {"degenerate_warmup", res.report.degenerate_warmup},
                 {"fused_patterns", prep.fused_patterns},
                 {"unfusible", prep.unfusible},
                 {"params", counts.params},
                 {"flops", counts.flops},
                 {"train_size", data.train.size()},
                 {"test_size", data.test.size()}};
  write_json(out / "summary.json", res.summary);
  if (log) {
    *log << "summary,int8,test_acc," << fmt(int8_acc) << ",fake_quant_acc," << fmt(fq_acc)
         << ",agreement," << fmt(agree) << '\n';
  }
  res.model = std::move(model);
  return res;
}

/// Accuracy of a stored checkpoint of any precision.
inline nlohmann::json run_eval(const RunConfig& c, std::ostream* log = &std::cout) {
  c.validate_for("eval");
  set_num_threads(c.threads);
  auto ck = load_checkpoint(c.checkpoint);
  const auto data = config::load_data(c);
  const double acc = evaluate(ck.model, data.test);
  const std::string prec = model::to_string(ck.model.precision());
  nlohmann::json s{{"command", "eval"},
                   {"checkpoint", c.checkpoint},
                   {"precision", prec},
                   {"test_acc", acc},
                   {"test_size", data.test.size()}};
  write_json(std::filesystem::path(c.out_dir) / "summary.json", s);
  if (log) *log << "summary," << prec << ",test_acc," << fmt(acc) << '\n';
  return s;
}

inline bench::BenchReport run_bench(const RunConfig& c, std::ostream* log = &std::cout) {
  c.validate_for("bench");
  bench::BenchOptions o;
  o.input_res = c.bench_res;
  o.threads = c.bench_threads;
  o.warmup = c.bench_warmup;
  o.runs = c.bench_runs;
  o.seed = c.seed;
  arch::ArchSpec a;
  std::string name;
  if (!c.bench_stack.empty()) {
    a = arch::bench_stack(arch::block_type_from_string(c.bench_stack), c.bench_channels);
    name = c.bench_stack + "_stack";
  } else {
    a = config::resolve_arch(c);
    name = c.arch_file.empty() ? c.variant : c.arch_file;
  }
  const auto r = bench::bench_arch(a, name, o);
  write_json(std::filesystem::path(c.out_dir) / "bench.json", r.to_json());
  if (log) {
    *log << "model,threads,input_res,batch,fp_ms,int8_ms,reduction_rate,unstable\n"
         << r.model << ',' << r.threads << ',' << r.input_res << ',' << r.batch << ','
         << fmt(r.fp_ms()) << ',' << fmt(r.int8_ms()) << ',' << fmt(r.reduction_rate()) << ','
         << (r.unstable() ? "yes" : "no") << '\n';
  }
  return r;
}

/// Params and FLOPs at the configured resolution and at 224.
inline nlohmann::json run_count(const RunConfig& c, std::ostream* log = &std::cout) {
  c.validate_for("count");
  const auto a = config::resolve_arch(c);
  nlohmann::json rows = nlohmann::json::array();
  std::vector<std::int64_t> res{c.input_res};
  if (c.input_res != 224) res.push_back(224);
  if (log) *log << "model,input_res,params,flops\n";
  for (auto r : res) {
    if (r % a.total_stride() != 0) continue;
    const auto k = arch::count(a, r);
    rows.push_back({{"input_res", r}, {"params", k.params}, {"flops", k.flops}});
    if (log) *log << c.variant << ',' << r << ',' << k.params << ',' << k.flops << '\n';
  }
  return rows;
}

// ------------------------------------------------------------ search

/// Short warm-up + QAT run whose int8 test accuracy scores a candidate.
inline nas::Evaluator proxy_evaluator(const RunConfig& base, const data::Splits& data) {
  return [base, &data](const arch::ArchSpec& a, std::uint64_t seed) {
    RunConfig c = base;
    c.seed = seed;
    auto model = arch::build_from_spec(a, c.input_res, seed_for(seed, SeedRole::kModel));
    Opt opt(model.params(), optimizer_config(c), c.boost);
    data::BatchLoader loader(data.train, train_loader_options(c));
    const int epochs = c.proxy_fp_epochs + c.proxy_qat_epochs;
    RunSchedule sched{c.schedule, std::int64_t{epochs} * loader.num_batches()};
    std::int64_t step = 0;
    if (c.proxy_fp_epochs > 0) {
      statassist_warmup(model, opt, loader, c.proxy_fp_epochs, sched, step);
    }
    model::PrepareOptions po;
    po.averaging = c.observer_averaging;
    model.prepare_qat(po);
    qat_train(model, opt, loader, c.proxy_qat_epochs, c.proxy_fp_epochs, sched, step, nullptr);
    if (c.proxy_qat_epochs == 0) calibrate(model, loader, c.calib_batches);
    model.convert_int8();
    return evaluate(model, data.test);
  };
}

/// Base's FLOPs target scaled by the skeleton-to-Base FLOPs ratio.
inline double scaled_target(const arch::ArchSpec& skeleton, std::int64_t input_res) {
  const double base = double(arch::count(arch::frostnet_spec(arch::Variant::kBase), 224).flops);
  return nas::kTargetBase * double(arch::count(skeleton, input_res).flops) / base;
}

struct SearchRun {
  std::vector<nas::Candidate> ranked;
  double tar = 0.0;
};

inline SearchRun run_search(const RunConfig& c, std::ostream* log = &std::cout,
                            const data::Splits* preloaded = nullptr) {
  c.validate_for("search");
  set_num_threads(c.threads);
  std::optional<data::Splits> owned;
  if (!preloaded) owned = config::load_data(c);
  const data::Splits& data = preloaded ? *preloaded : *owned;
  const auto skeleton = config::resolve_arch(c);
  const auto space = nas::SearchSpace::over(skeleton);
  nas::SearchOptions o;
  o.budget = c.search_budget;
  o.tar = c.search_tar > 0 ? c.search_tar : scaled_target(skeleton, c.input_res);
  o.w = c.search_w;
  o.strategy = nas::strategy_from_string(c.search_strategy);
  o.seed = c.seed;
  o.population = c.search_population;
  o.input_res = c.input_res;
  SearchRun run;
  run.tar = o.tar;
  run.ranked = nas::search(space, proxy_evaluator(c, data), o);
  const std::filesystem::path out(c.out_dir);
  std::filesystem::create_directories(out);
  config::save_config(c, (out / "config.json").string());
  nas::write_results(run.ranked, (out / "search.jsonl").string());
  write_json(out / "summary.json", {{"command", "search"},
                                    {"budget", c.search_budget},
                                    {"tar", o.tar},
                                    {"w", o.w},
                                    {"strategy", c.search_strategy},
                                    {"best", nas::to_json(run.ranked.front())}});
  if (log) {
    *log << "rank,index,flops,acc,reward,failed\n";
    for (std::size_t i = 0; i < run.ranked.size(); ++i) {
      const auto& k = run.ranked[i];
      *log << i + 1 << ',' << k.index << ',' << k.flops << ',' << fmt(k.accuracy) << ','
           << (k.failed ? std::string("") : fmt(k.reward)) << ',' << (k.failed ? "yes" : "no")
           << '\n';
    }
  }
  return run;
}

}  // namespace frostq::pipeline
