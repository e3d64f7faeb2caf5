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

// Training workflow: full-precision warm-up that charges the optimizer,
// fake-quantized training, calibration, integer conversion and evaluation.

#include <chrono>
#include <cmath>
#include <cstdint>
#include <functional>
#include <string>
#include <vector>

#include "frostq/core/ops.hpp"
#include "frostq/data/dataset.hpp"
#include "frostq/model/graph.hpp"
#include "frostq/optim/optimizers.hpp"
#include "frostq/optim/schedule.hpp"

namespace frostq::pipeline {

using model::ModelGraph;
using model::Precision;
using Opt = optim::Optimizer<float>;

struct EpochRecord {
  std::int64_t epoch = 0;  // global index across warm-up and QAT
  std::string phase;       // "fp" or "qat"
  double loss = 0.0;
  double accuracy = 0.0;   // running train accuracy
  double lr = 0.0;         // effective rate at the epoch's first step
  double seconds = 0.0;
  std::vector<ModelGraph::GroupGradStats> grads;
};

struct TrainRunReport {
  std::vector<EpochRecord> epochs;
  bool degenerate_warmup = false;  // warm-up left the momentum at zero
  bool cold_start = false;         // QAT started without a warm-up

  void add(EpochRecord r) {
    if (!epochs.empty() && r.epoch <= epochs.back().epoch) {
      throw ContractError("TrainRunReport: epoch " + std::to_string(r.epoch) +
                          " recorded after " + std::to_string(epochs.back().epoch));
    }
    epochs.push_back(std::move(r));
  }

  /// Zero-fraction of a group at a given epoch, or -1 if not recorded.
  double zero_fraction(std::int64_t epoch, const std::string& group) const {
    for (const auto& e : epochs) {
      if (e.epoch != epoch) continue;
      for (const auto& g : e.grads)
        if (g.group == group) return g.zero_fraction;
    }
    return -1.0;
  }
};

/// Learning-rate schedule over a whole run, stepped per iteration.
struct RunSchedule {
  optim::ScheduleConfig cfg{};
  std::int64_t total_steps = 0;

  double eta(std::int64_t step) const {
    if (total_steps <= 0) return 1.0;
    return optim::lr_schedule(cfg, std::min(step, total_steps), total_steps, 1.0);
  }
};

/// Per-step observer for callers that want finer diagnostics.
using StepHook = std::function<void(std::int64_t epoch, std::int64_t batch, double loss)>;

/// One pass over the loader: forward, cross-entropy, backward, step.
inline EpochRecord train_epoch(ModelGraph& model, Opt& opt, const data::BatchLoader& loader,
                               std::int64_t epoch, std::int64_t data_epoch,
                               const RunSchedule& sched, std::int64_t& global_step,
                               double grad_threshold = 1e-8, const StepHook& hook = {}) {
  const std::int64_t nb = loader.num_batches();
  if (nb == 0) {
    throw ContractError("train_epoch: loader yields no batches (dataset of " +
                        std::to_string(loader.dataset().size()) + " with batch size " +
                        std::to_string(loader.options().batch_size) + ")");
  }
  const auto t0 = std::chrono::steady_clock::now();
  EpochRecord rec;
  rec.epoch = epoch;
  rec.phase = model.precision() == Precision::kFp ? "fp" : "qat";
  rec.lr = opt.config().lr * sched.eta(global_step);
  model.set_training(true);
  double loss_sum = 0.0;
  std::int64_t correct = 0, seen = 0;
  for (std::int64_t b = 0; b < nb; ++b) {
    auto batch = loader.batch(data_epoch, b);
    if (batch.labels.empty()) {
      throw ContractError("train_epoch: data exhausted at batch " + std::to_string(b));
    }
    Tape<float> tape;
    auto logits = model.forward(tape, batch.images);
    auto loss = ops::softmax_cross_entropy(tape, logits, batch.labels);
    if (!std::isfinite(loss->value[0])) {
      throw Error("train_epoch: non-finite loss at epoch " + std::to_string(epoch) +
                  ", batch " + std::to_string(b));
    }
    const std::int64_t n = logits->value.dim(0), k = logits->value.dim(1);
    for (std::int64_t i = 0; i < n; ++i) {
      const float* z = logits->value.data() + i * k;
      correct += (std::max_element(z, z + k) - z) == batch.labels[static_cast<std::size_t>(i)];
    }
    seen += n;
    loss_sum += loss->value[0] * double(n);
    tape.backward(loss);
    if (b == nb - 1) rec.grads = model.gradient_summary(grad_threshold);
    opt.step(sched.eta(global_step));
    opt.zero_grad();
    ++global_step;
    if (hook) hook(epoch, b, loss->value[0]);
  }
  rec.loss = loss_sum / double(seen);
  rec.accuracy = double(correct) / double(seen);
  rec.seconds = std::chrono::duration<double>(std::chrono::steady_clock::now() - t0).count();
  return rec;
}

struct WarmupResult {
  std::vector<EpochRecord> epochs;
  bool degenerate = false;
};

/// Full-precision epochs that leave both the weights and the optimizer's
/// first moments in place for the quantized phase. GradBoost stays off here.
inline WarmupResult statassist_warmup(ModelGraph& model, Opt& opt,
                                      const data::BatchLoader& loader, int fp_epochs,
                                      const RunSchedule& sched, std::int64_t& global_step,
                                      TrainRunReport* report = nullptr) {
  if (fp_epochs < 1) throw ContractError("statassist_warmup: fp_epochs must be >= 1");
  if (model.precision() != Precision::kFp) {
    throw ContractError(std::string("statassist_warmup: model is ") +
                        model::to_string(model.precision()) + ", warm-up runs before prepare_qat");
  }
  if (opt.momentum_charged()) {
    throw ContractError("statassist_warmup: optimizer state must start at zero");
  }
  const bool boost = opt.boost_enabled();
  opt.set_boost_enabled(false);
  WarmupResult r;
  for (int e = 0; e < fp_epochs; ++e) {
    r.epochs.push_back(train_epoch(model, opt, loader, e, e, sched, global_step));
    if (report) report->add(r.epochs.back());
  }
  opt.set_boost_enabled(boost);
  r.degenerate = !opt.momentum_charged();
  if (report) report->degenerate_warmup = r.degenerate;
  return r;
}

/// Fake-quantized training epochs [first_epoch, first_epoch + epochs).
inline std::vector<EpochRecord> qat_train(ModelGraph& model, Opt& opt,
                                          const data::BatchLoader& loader, int epochs,
                                          std::int64_t first_epoch, const RunSchedule& sched,
                                          std::int64_t& global_step, TrainRunReport* report,
                                          const StepHook& hook = {}) {
  if (epochs < 0) throw ContractError("qat_train: epochs must be >= 0");
  if (model.precision() != Precision::kFakeQuant) {
    throw ContractError(std::string("qat_train: model is ") +
                        model::to_string(model.precision()) + ", call prepare_qat first");
  }
  std::vector<EpochRecord> out;
  if (report && first_epoch == 0 && !opt.momentum_charged()) report->cold_start = true;
  for (int e = 0; e < epochs; ++e) {
    out.push_back(train_epoch(model, opt, loader, first_epoch + e, first_epoch + e, sched,
                              global_step, 1e-8, hook));
    if (report) report->add(out.back());
  }
  return out;
}

/// Re-estimates activation ranges from `n_batches` batches in eval mode,
/// then freezes them.
inline void calibrate(ModelGraph& model, const data::BatchLoader& loader, int n_batches) {
  if (n_batches < 1) throw ContractError("calibrate: n_batches must be >= 1");
  if (model.precision() != Precision::kFakeQuant) {
    throw ContractError("calibrate: model must be in fake_quant mode");
  }
  if (loader.num_batches() < 1) throw ContractError("calibrate: loader yields no batches");
  for (auto& n : model.mutable_nodes())
    if (n.observer) n.observer->reset();
  model.set_observing(true);
  for (int b = 0; b < n_batches; ++b) {
    model.predict(loader.batch(0, b % loader.num_batches()).images);
  }
  model.set_observing(false);
  for (auto& n : model.mutable_nodes())
    if (n.observer) n.observer->freeze();
}

/// Top-1 predictions over a dataset.
inline std::vector<int> predict_labels(ModelGraph& model, const data::Dataset& ds,
                                       std::int64_t batch_size = 100) {
  if (ds.size() == 0) throw ContractError("evaluate: empty split");
  data::LoaderOptions lo;
  lo.batch_size = batch_size;
  lo.shuffle = false;
  lo.drop_last = false;
  data::BatchLoader loader(ds, lo);
  std::vector<int> out;
  out.reserve(static_cast<std::size_t>(ds.size()));
  for (std::int64_t b = 0; b < loader.num_batches(); ++b) {
    const auto batch = loader.batch(0, b);
    const auto logits = model.predict(batch.images);
    const std::int64_t n = logits.dim(0), k = logits.dim(1);
    for (std::int64_t i = 0; i < n; ++i) {
      const float* z = logits.data() + i * k;
      out.push_back(static_cast<int>(std::max_element(z, z + k) - z));
    }
  }
  return out;
}

/// Top-1 accuracy in [0, 1].
inline double evaluate(ModelGraph& model, const data::Dataset& ds,
                       std::int64_t batch_size = 100) {
  const auto pred = predict_labels(model, ds, batch_size);
  std::int64_t correct = 0;
  for (std::size_t i = 0; i < pred.size(); ++i) correct += pred[i] == ds.labels[i];
  return double(correct) / double(pred.size());
}

/// Fraction of samples on which two label vectors agree.
inline double agreement(const std::vector<int>& a, const std::vector<int>& b) {
  if (a.size() != b.size() || a.empty()) throw ContractError("agreement: size mismatch");
  std::int64_t same = 0;
  for (std::size_t i = 0; i < a.size(); ++i) same += a[i] == b[i];
  return double(same) / double(a.size());
}

}  // namespace frostq::pipeline
