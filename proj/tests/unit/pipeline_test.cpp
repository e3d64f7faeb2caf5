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

#include <gtest/gtest.h>

#include <cmath>
#include <cstdlib>
#include <filesystem>
#include <fstream>
#include <sstream>

#include "frostq/pipeline/run.hpp"

namespace frostq {
namespace {

namespace fs = std::filesystem;
using config::RunConfig;

fs::path scratch(const std::string& name) {
  const auto p = fs::temp_directory_path() / ("frostq_test_" + name);
  fs::remove_all(p);
  return p;
}

std::string slurp(const fs::path& p) {
  std::ifstream f(p);
  std::stringstream s;
  s << f.rdbuf();
  return s.str();
}

RunConfig small_config(const std::string& name) {
  RunConfig c;
  c.data = "synthetic";
  c.synthetic_train = 96;
  c.synthetic_test = 40;
  c.batch_size = 16;
  c.fp_epochs = 1;
  c.qat_epochs = 1;
  c.out_dir = scratch(name).string();
  return c;
}

// ------------------------------------------------------------------ data

TEST(Data, SyntheticSplitsHaveRequestedSizes) {
  const auto s = data::synthetic_splits(50, 20, 3);
  EXPECT_EQ(s.train.size(), 50);
  EXPECT_EQ(s.test.size(), 20);
  EXPECT_EQ(s.train.pixels.size(), 50u * 3072u);
  for (int l : s.train.labels) {
    EXPECT_GE(l, 0);
    EXPECT_LT(l, 10);
  }
  const auto again = data::synthetic_splits(50, 20, 3);
  EXPECT_EQ(again.train.pixels, s.train.pixels);
  EXPECT_NE(data::synthetic_splits(50, 20, 4).train.pixels, s.train.pixels);
}

TEST(Data, TruncatedCifarFileRejected) {
  const auto dir = scratch("cifar_trunc");
  fs::create_directories(dir);
  std::ofstream(dir / "data_batch_1.bin") << std::string(1000, '\0');
  try {
    data::load_cifar10(dir);
    FAIL() << "expected IoError";
  } catch (const IoError& e) {
    EXPECT_NE(std::string(e.what()).find("expected 30730000"), std::string::npos);
  }
  fs::remove_all(dir);
}

TEST(Data, MissingDirectoryExplainsDownload) {
  try {
    data::load_cifar10("/nonexistent/frostq");
    FAIL() << "expected IoError";
  } catch (const IoError& e) {
    EXPECT_NE(std::string(e.what()).find("cifar-10-binary.tar.gz"), std::string::npos);
  }
}

TEST(Data, LoaderReplaysAndShufflesPerEpoch) {
  const auto ds = data::synthetic_cifar(64, 1);
  data::LoaderOptions o;
  o.batch_size = 10;
  o.seed = 5;
  data::BatchLoader a(ds, o), b(ds, o);
  EXPECT_EQ(a.num_batches(), 6);
  EXPECT_EQ(a.order(0), b.order(0));
  EXPECT_NE(a.order(0), a.order(1));
  auto sorted = a.order(1);
  std::sort(sorted.begin(), sorted.end());
  for (std::int64_t i = 0; i < 64; ++i) EXPECT_EQ(sorted[i], i);
  EXPECT_EQ(a.batch(2, 3).images.vec(), b.batch(2, 3).images.vec());
  o.drop_last = false;
  EXPECT_EQ(data::BatchLoader(ds, o).num_batches(), 7);
  EXPECT_THROW(a.batch(0, 6), ContractError);
}

// -------------------------------------------------------------- training

TEST(Train, WarmupEqualsPlainFullPrecisionEpoch) {
  const auto ds = data::synthetic_cifar(64, 7);
  data::LoaderOptions lo;
  lo.batch_size = 16;
  lo.seed = 11;
  data::BatchLoader loader(ds, lo);
  optim::OptimizerConfig oc;
  oc.seed = 3;
  pipeline::RunSchedule sched{{}, 3 * loader.num_batches()};

  auto a = arch::build_from_spec(arch::desk_spec(), 32, 21);
  pipeline::Opt oa(a.params(), oc, true);
  std::int64_t step = 0;
  const auto w = pipeline::statassist_warmup(a, oa, loader, 1, sched, step);
  EXPECT_FALSE(w.degenerate);
  EXPECT_TRUE(oa.boost_enabled());  // restored for the quantized phase

  // Independent loop: no helper, boost off, same schedule.
  auto b = arch::build_from_spec(arch::desk_spec(), 32, 21);
  pipeline::Opt ob(b.params(), oc, false);
  b.set_training(true);
  for (std::int64_t i = 0; i < loader.num_batches(); ++i) {
    const auto batch = loader.batch(0, i);
    Tape<float> tape;
    auto loss = ops::softmax_cross_entropy(tape, b.forward(tape, batch.images), batch.labels);
    tape.backward(loss);
    ob.step(sched.eta(i));
    ob.zero_grad();
  }
  const auto pa = a.params(), pb = b.params();
  ASSERT_EQ(pa.size(), pb.size());
  for (std::size_t i = 0; i < pa.size(); ++i) EXPECT_EQ(pa[i]->value.vec(), pb[i]->value.vec());
  for (std::size_t i = 0; i < pa.size(); ++i) {
    EXPECT_EQ(oa.state(i).m.vec(), ob.state(i).m.vec());
  }
}

TEST(Train, WarmupNeedsFreshOptimizerAndFpModel) {
  const auto ds = data::synthetic_cifar(32, 1);
  data::LoaderOptions lo;
  lo.batch_size = 16;
  data::BatchLoader loader(ds, lo);
  auto g = arch::build_from_spec(arch::desk_spec(), 32, 1);
  pipeline::Opt opt(g.params(), {}, true);
  pipeline::RunSchedule sched{{}, 10};
  std::int64_t step = 0;
  EXPECT_THROW(pipeline::statassist_warmup(g, opt, loader, 0, sched, step), ContractError);
  pipeline::statassist_warmup(g, opt, loader, 1, sched, step);
  EXPECT_THROW(pipeline::statassist_warmup(g, opt, loader, 1, sched, step), ContractError);
  g.prepare_qat();
  pipeline::Opt fresh(g.params(), {}, true);
  EXPECT_THROW(pipeline::statassist_warmup(g, fresh, loader, 1, sched, step), ContractError);
}

TEST(Train, ColdStartIsFlagged) {
  const auto ds = data::synthetic_cifar(32, 1);
  data::LoaderOptions lo;
  lo.batch_size = 16;
  data::BatchLoader loader(ds, lo);
  auto g = arch::build_from_spec(arch::desk_spec(), 32, 1);
  pipeline::Opt opt(g.params(), {}, true);
  g.prepare_qat();
  pipeline::TrainRunReport rep;
  pipeline::RunSchedule sched{{}, 2};
  std::int64_t step = 0;
  pipeline::qat_train(g, opt, loader, 1, 0, sched, step, &rep);
  EXPECT_TRUE(rep.cold_start);
  EXPECT_GE(rep.zero_fraction(0, "stage1"), 0.0);
  EXPECT_EQ(rep.zero_fraction(5, "stage1"), -1.0);
}

TEST(Train, EvaluateIsDeterministicAndNearChanceUntrained) {
  auto g = arch::build_from_spec(arch::desk_spec(), 32, 2);
  const auto ds = data::synthetic_cifar(400, 9);
  const double a = pipeline::evaluate(g, ds), b = pipeline::evaluate(g, ds, 37);
  EXPECT_EQ(a, b);
  EXPECT_LT(a, 0.3);
  data::Dataset empty;
  EXPECT_THROW(pipeline::evaluate(g, empty), ContractError);
}

TEST(Train, ScheduleEndpoints) {
  pipeline::RunSchedule s{{}, 100};
  EXPECT_EQ(s.eta(0), 1.0);
  EXPECT_NEAR(s.eta(100), 0.0, 1e-12);
  EXPECT_EQ(s.eta(250), s.eta(100));
  EXPECT_EQ((pipeline::RunSchedule{{}, 0}.eta(5)), 1.0);
}

// ------------------------------------------------------------ checkpoint

TEST(Checkpoint, Int8RoundTripIsBitExact) {
  auto c = small_config("ckpt");
  auto run = pipeline::run_qat(c, nullptr);
  const auto ck = fs::path(c.out_dir) / "checkpoint";
  auto loaded = pipeline::load_checkpoint(ck, model::Precision::kInt8);
  EXPECT_EQ(loaded.model.precision(), model::Precision::kInt8);
  const auto ds = data::synthetic_cifar(8, 99);
  data::LoaderOptions lo;
  lo.batch_size = 8;
  lo.shuffle = false;
  const auto x = data::BatchLoader(ds, lo).batch(0, 0).images;
  EXPECT_EQ(run.model->predict(x).vec(), loaded.model.predict(x).vec());
  EXPECT_EQ(loaded.meta.extra.at("seed"), c.seed);
}

TEST(Checkpoint, PrecisionMismatchAndVersionChecked) {
  auto c = small_config("ckpt_fp");
  c.fp_epochs = 1;
  c.qat_epochs = 0;
  auto run = pipeline::run_train(c, nullptr);
  const auto ck = fs::path(c.out_dir) / "checkpoint";
  EXPECT_THROW(pipeline::load_checkpoint(ck, model::Precision::kInt8), ContractError);
  auto fp = pipeline::load_checkpoint(ck, model::Precision::kFp);
  Rng r(1);
  Tensor<float> x({2, 3, 32, 32});
  for (auto& v : x.vec()) v = float(r.normal());
  EXPECT_EQ(run.model->predict(x).vec(), fp.model.predict(x).vec());

  auto m = nlohmann::json::parse(slurp(ck / "manifest.json"));
  m["version"] = 99;
  std::ofstream(ck / "manifest.json") << m.dump();
  EXPECT_THROW(pipeline::load_checkpoint(ck), IoError);
  EXPECT_THROW(pipeline::load_checkpoint(fs::path(c.out_dir) / "nothing"), IoError);
}

// ---------------------------------------------------------------- config

TEST(Config, JsonRoundTrip) {
  RunConfig c;
  c.variant = "small";
  c.width = 0.5;
  c.optimizer.kind = optim::OptimizerKind::kAdamW;
  c.optimizer.boost.clamp_mode = optim::ClampMode::kLiteral;
  c.schedule.kind = optim::ScheduleKind::kStep;
  c.schedule.milestones = {10, 20};
  c.seed = 1234567890123ULL;
  const auto path = scratch("cfg.json");
  config::save_config(c, path.string());
  const auto d = config::load_config(path.string());
  EXPECT_EQ(config::to_json(d), config::to_json(c));
  fs::remove(path);
}

TEST(Config, UnknownKeyAndBadTypeRejected) {
  EXPECT_THROW(config::config_from_json({{"learning_rate", 0.1}}), ContractError);
  EXPECT_THROW(config::config_from_json({{"lr", "fast"}}), ContractError);
  EXPECT_THROW(config::config_from_json({{"optimizer", "lion"}}), ContractError);
  EXPECT_EQ(config::config_from_json({{"lr", 0.2}}).optimizer.lr, 0.2);
}

TEST(Config, QatWithZeroEpochsIsRejected) {
  RunConfig c;
  c.fp_epochs = 0;
  c.qat_epochs = 0;
  EXPECT_THROW(c.validate_for("qat"), ContractError);
  EXPECT_NO_THROW(c.validate_for("count"));
  c.qat_epochs = 1;
  EXPECT_NO_THROW(c.validate_for("qat"));
  EXPECT_TRUE(c.cold());
  c.optimizer.lr = 0.0;
  EXPECT_THROW(c.validate(), ContractError);
}

TEST(Config, MissingDatasetNamesDownload) {
  RunConfig c;
  ::unsetenv(config::kDataEnv);
  try {
    config::load_data(c);
    FAIL() << "expected IoError";
  } catch (const IoError& e) {
    const std::string m = e.what();
    EXPECT_NE(m.find("cifar-10-binary.tar.gz"), std::string::npos);
    EXPECT_NE(m.find(config::kDataEnv), std::string::npos);
  }
  ::setenv(config::kDataEnv, "/nonexistent/frostq", 1);
  EXPECT_THROW(config::load_data(c), IoError);
  ::unsetenv(config::kDataEnv);
}

TEST(Config, DeskWidthAndStemStride) {
  RunConfig c;
  c.width = 0.5;
  c.stem_stride = 1;
  const auto a = config::resolve_arch(c);
  EXPECT_EQ(a.stem_stride, 1);
  EXPECT_EQ(a.blocks.back().out_ch, 32);
  c.variant = "base";
  c.width = 1.0;
  EXPECT_EQ(config::resolve_arch(c).blocks.size(), 16u);
  c.variant = "custom";
  EXPECT_THROW(c.validate(), ContractError);
}

// ------------------------------------------------------------------ runs

TEST(Run, IdenticalConfigsWriteIdenticalMetrics) {
  auto a = small_config("det_a");
  auto b = small_config("det_b");
  pipeline::run_qat(a, nullptr);
  pipeline::run_qat(b, nullptr);
  const auto ma = slurp(fs::path(a.out_dir) / "metrics.csv");
  EXPECT_FALSE(ma.empty());
  EXPECT_EQ(ma, slurp(fs::path(b.out_dir) / "metrics.csv"));
  auto c = small_config("det_c");
  c.seed = 2;
  pipeline::run_qat(c, nullptr);
  EXPECT_NE(ma, slurp(fs::path(c.out_dir) / "metrics.csv"));
}

TEST(Run, ThreadCountDoesNotChangeMetrics) {
  auto a = small_config("thr_1");
  auto b = small_config("thr_4");
  b.threads = 4;
  pipeline::run_qat(a, nullptr);
  pipeline::run_qat(b, nullptr);
  EXPECT_EQ(slurp(fs::path(a.out_dir) / "metrics.csv"),
            slurp(fs::path(b.out_dir) / "metrics.csv"));
  set_num_threads(1);
}

TEST(Run, MetricsHaveEpochRowsAndSummary) {
  auto c = small_config("rows");
  c.fp_epochs = 1;
  c.qat_epochs = 2;
  pipeline::run_qat(c, nullptr);
  std::ifstream f(fs::path(c.out_dir) / "metrics.csv");
  std::vector<std::string> lines;
  for (std::string l; std::getline(f, l);) lines.push_back(l);
  ASSERT_EQ(lines.size(), 5u);
  EXPECT_EQ(lines[0].rfind("epoch,phase,loss,acc,lr,median_grad:stem", 0), 0u);
  EXPECT_EQ(lines[1].rfind("0,fp,", 0), 0u);
  EXPECT_EQ(lines[2].rfind("1,qat,", 0), 0u);
  EXPECT_EQ(lines[3].rfind("2,qat,", 0), 0u);
  EXPECT_EQ(lines[4].rfind("summary,int8,", 0), 0u);
  const auto s = nlohmann::json::parse(slurp(fs::path(c.out_dir) / "summary.json"));
  EXPECT_FALSE(s.at("cold_start").get<bool>());
  EXPECT_GE(s.at("int8_fake_quant_agreement").get<double>(), 0.0);
}

TEST(Run, TrainBaselineSharesWarmupEpoch) {
  auto q = small_config("share_q");
  auto t = small_config("share_t");
  pipeline::run_qat(q, nullptr);
  pipeline::run_train(t, nullptr);
  std::ifstream fq(fs::path(q.out_dir) / "metrics.csv"), ft(fs::path(t.out_dir) / "metrics.csv");
  std::string lq, lt;
  std::getline(fq, lq);
  std::getline(ft, lt);
  EXPECT_EQ(lq, lt);
  std::getline(fq, lq);
  std::getline(ft, lt);
  EXPECT_EQ(lq, lt);  // first fp epoch, bit-identical
}

TEST(Run, ColdQatRecordsColdStart) {
  auto c = small_config("cold");
  c.fp_epochs = 0;
  auto r = pipeline::run_qat(c, nullptr);
  EXPECT_TRUE(r.report.cold_start);
  EXPECT_EQ(r.summary.at("warmup_fp_acc").get<double>(), -1.0);
}

TEST(Run, CountReportsConfiguredResolution) {
  RunConfig c;
  c.variant = "large";
  c.num_classes = 1000;
  c.input_res = 224;
  std::ostringstream out;
  const auto rows = pipeline::run_count(c, &out);
  ASSERT_EQ(rows.size(), 1u);
  EXPECT_EQ(rows[0].at("params").get<std::int64_t>(),
            arch::count(arch::frostnet_spec(arch::Variant::kLarge), 224).params);
  EXPECT_NE(out.str().find("large,224,"), std::string::npos);
}

}  // namespace
}  // namespace frostq
