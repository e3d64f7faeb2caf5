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
#include <filesystem>

#include "frostq/arch/frostnet.hpp"
#include "frostq/model/graph.hpp"
#include "support/quant_oracles.hpp"

namespace frostq {
namespace {

using arch::ArchSpec;
using arch::FrostBlockSpec;
using model::ModelGraph;
using model::Precision;

// Conv-only walk of a spec, written against the block recipe rather than
// the graph builder. BN layers contribute two parameters per channel.
struct HandCount {
  std::int64_t params = 0, macs = 0;
  void conv(std::int64_t in, std::int64_t out, std::int64_t k, std::int64_t groups,
            std::int64_t hw_out, bool bn) {
    const std::int64_t w = out * (in / groups) * k * k;
    params += w + (bn ? 2 * out : out);
    macs += w * hw_out * hw_out;
  }
};

HandCount hand_count(const ArchSpec& a, std::int64_t res) {
  HandCount h;
  std::int64_t r = res / a.stem_stride;
  h.conv(3, a.stem_channels, 3, 1, r, true);
  for (const auto& b : a.blocks) {
    std::int64_t e = b.in_ch;
    if (!(b.ef == 1 && b.rf == 1)) {
      const std::int64_t sq = b.in_ch / b.rf, cat = b.in_ch + sq;
      e = cat * b.ef;
      h.conv(b.in_ch, sq, 1, 1, r, true);
      h.conv(cat, e, 1, 1, r, true);
    }
    r /= b.stride;
    h.conv(e, e, b.kernel, e, r, true);
    h.conv(e, b.out_ch, 1, 1, r, true);
  }
  std::int64_t last = a.blocks.back().out_ch;
  if (a.head_channels > 0) {
    h.conv(last, a.head_channels, 1, 1, r, true);
    last = a.head_channels;
  }
  h.conv(last, a.num_classes, 1, 1, 1, false);
  return h;
}

ModelGraph tiny_net(std::uint64_t seed) {
  ArchSpec a;
  a.stem_channels = 8;
  a.head_channels = 0;
  a.num_classes = 4;
  a.blocks = {{8, 8, 3, 1, 1, 1}, {8, 16, 3, 3, 4, 2}, {16, 16, 5, 3, 2, 1}};
  return arch::build_from_spec(a, 16, seed);
}

Tensor<float> random_images(std::int64_t n, std::int64_t res, std::uint64_t seed) {
  Rng r(seed);
  return testing::uniform_tensor({n, 3, res, res}, r, -2.0, 2.0);
}

std::int64_t count_kind(const ModelGraph& g, model::NodeKind k) {
  std::int64_t c = 0;
  for (const auto& n : g.nodes()) c += n.kind == k;
  return c;
}

// ------------------------------------------------------------------ arch

TEST(Arch, ReferenceTablesHaveExpectedDepth) {
  EXPECT_EQ(arch::reference_blocks(arch::Variant::kBase).size(), 16u);
  EXPECT_EQ(arch::reference_blocks(arch::Variant::kLarge).size(), 18u);
  EXPECT_EQ(arch::reference_blocks(arch::Variant::kSmall).size(), 14u);
  for (auto v : {arch::Variant::kBase, arch::Variant::kLarge, arch::Variant::kSmall}) {
    const auto a = arch::frostnet_spec(v);
    EXPECT_NO_THROW(a.validate());
    EXPECT_EQ(a.total_stride(), 32);
    EXPECT_EQ(a.blocks.back().out_ch, 320);
  }
}

TEST(Arch, ExpandWidthUsesConcatenatedChannels) {
  const FrostBlockSpec b{16, 24, 5, 6, 4, 2};
  EXPECT_EQ(b.squeeze(), 4);
  EXPECT_EQ(b.concat(), 20);
  EXPECT_EQ(b.expand(arch::ExpandBase::kConcat), 120);
  EXPECT_EQ(b.expand(arch::ExpandBase::kInput), 96);
  const FrostBlockSpec d{32, 16, 3, 1, 1, 1};
  EXPECT_TRUE(d.degenerate());
  EXPECT_EQ(d.expand(arch::ExpandBase::kConcat), 32);
}

TEST(Arch, ScaleChannelsRounding) {
  EXPECT_EQ(arch::scale_channels(32, 1.0), 32);
  EXPECT_EQ(arch::scale_channels(24, 0.5), 16);  // 12 -> 16
  EXPECT_EQ(arch::scale_channels(16, 0.5), 8);
  EXPECT_EQ(arch::scale_channels(3, 0.1), 8);
  for (std::int64_t c : {8, 16, 24, 40, 80, 96, 192, 320}) {
    for (double m : {0.25, 0.5, 0.75, 1.0, 1.3}) {
      const auto r = arch::scale_channels(c, m);
      EXPECT_EQ(r % 8, 0);
      EXPECT_GE(double(r), 0.9 * double(c) * m);
    }
  }
  EXPECT_THROW(arch::scale_channels(8, 0.0), ContractError);
}

TEST(Arch, CountsMatchHandWalk) {
  for (auto v : {arch::Variant::kBase, arch::Variant::kLarge, arch::Variant::kSmall}) {
    const auto a = arch::frostnet_spec(v);
    const auto h = hand_count(a, 224);
    const auto c = arch::count(a, 224);
    EXPECT_EQ(c.params, h.params) << arch::to_string(v);
    EXPECT_EQ(c.flops, h.macs) << arch::to_string(v);
  }
  const auto d = arch::desk_spec();
  EXPECT_EQ(arch::count(d, 32).params, hand_count(d, 32).params);
  EXPECT_EQ(arch::count(d, 32).flops, hand_count(d, 32).macs);
}

TEST(Arch, LargeMatchesPublishedCounts) {
  const auto c = arch::count(arch::frostnet_spec(arch::Variant::kLarge), 224);
  EXPECT_NEAR(double(c.params), 5.8e6, 0.05e6);
  EXPECT_NEAR(double(c.flops), 449e6, 1e6);
}

TEST(Arch, CountsGrowWithWidthAndResolution) {
  std::int64_t prev_p = 0, prev_f = 0;
  for (double m : {0.5, 0.75, 1.0, 1.25}) {
    const auto c = arch::count(arch::frostnet_spec(arch::Variant::kBase, m), 224);
    EXPECT_GT(c.params, prev_p);
    EXPECT_GT(c.flops, prev_f);
    prev_p = c.params;
    prev_f = c.flops;
  }
  const auto a = arch::frostnet_spec(arch::Variant::kBase);
  EXPECT_LT(arch::count(a, 160).flops, arch::count(a, 224).flops);
  EXPECT_EQ(arch::count(a, 160).params, arch::count(a, 224).params);
}

TEST(Arch, BaseForwardGivesThousandLogits) {
  auto g = arch::build_frostnet(arch::Variant::kBase, 1.0, 1000, 224);
  const auto y = g.predict(random_images(1, 224, 3));
  ASSERT_EQ(y.shape(), (Shape{1, 1000}));
  for (float v : y.vec()) EXPECT_TRUE(std::isfinite(v));
}

TEST(Arch, ResolutionMustDivideStride) {
  const auto a = arch::frostnet_spec(arch::Variant::kBase);
  EXPECT_THROW(arch::build_from_spec(a, 100), ContractError);
  EXPECT_THROW(arch::build_from_spec(arch::desk_spec(), 36), ContractError);
}

TEST(Arch, InvalidBlocksRejected) {
  EXPECT_THROW((FrostBlockSpec{16, 16, 7, 3, 4, 1}.validate()), ContractError);
  EXPECT_THROW((FrostBlockSpec{16, 16, 3, 3, 4, 3}.validate()), ContractError);
  EXPECT_THROW((FrostBlockSpec{2, 16, 3, 3, 4, 1}.validate()), ContractError);
  ArchSpec a = arch::desk_spec();
  a.blocks[2].in_ch = 99;
  EXPECT_THROW(a.validate(), DimensionError);
}

TEST(Arch, JsonRoundTrip) {
  auto a = arch::frostnet_spec(arch::Variant::kSmall, 0.75, 100);
  a.expand_base = arch::ExpandBase::kInput;
  a.act = ops::Activation::kRelu6;
  const auto path = std::filesystem::temp_directory_path() / "frostq_arch_roundtrip.json";
  arch::save_arch(a, path.string());
  const auto b = arch::load_arch(path.string());
  EXPECT_EQ(b.blocks, a.blocks);
  EXPECT_EQ(b.num_classes, 100);
  EXPECT_EQ(b.expand_base, arch::ExpandBase::kInput);
  EXPECT_EQ(b.act, ops::Activation::kRelu6);
  EXPECT_EQ(arch::count(b, 224).flops, arch::count(a, 224).flops);
  std::filesystem::remove(path);
  EXPECT_THROW(arch::arch_from_json(nlohmann::json{{"blocks", "nope"}}), ContractError);
}

TEST(Arch, ResidualOnlyWhenShapesAgree) {
  ModelGraph g;
  int x = g.input(16);
  const auto t = arch::build_frost_conv(g, x, {16, 16, 3, 3, 4, 1}, "b");
  EXPECT_TRUE(t.residual);
  const auto u = arch::build_frost_conv(g, t.output, {16, 24, 3, 3, 4, 1}, "c");
  EXPECT_FALSE(u.residual);
  const auto w = arch::build_frost_conv(g, u.output, {24, 24, 3, 3, 4, 2}, "d");
  EXPECT_FALSE(w.residual);
}

TEST(Arch, SeGateUsesHardSigmoidAndIsReportedUnfusible) {
  auto g = arch::build_from_spec(arch::bench_stack(arch::BlockType::kMBConvSE, 16, 3, 3, 4, 2),
                                 8);
  EXPECT_EQ(count_kind(g, model::NodeKind::kHardSigmoid), 2);
  const auto rep = g.prepare_qat();
  EXPECT_EQ(rep.unfusible.size(), 2u);
  for (const auto& u : rep.unfusible) EXPECT_NE(u.find("se.mul"), std::string::npos);
}

// ----------------------------------------------------------------- graph

TEST(Graph, PrepareCountsFakeQuantWeights) {
  auto g = tiny_net(1);
  const auto convs = count_kind(g, model::NodeKind::kConv);
  const auto rep = g.prepare_qat();
  EXPECT_EQ(rep.weight_fake_quant, convs - 1);  // classifier stays float
  EXPECT_EQ(rep.fused_patterns, convs - 1);
  EXPECT_TRUE(rep.unfusible.empty());
  EXPECT_EQ(g.precision(), Precision::kFakeQuant);
}

TEST(Graph, ModesOnlyAdvance) {
  auto g = tiny_net(2);
  EXPECT_THROW(g.convert_int8(), ContractError);
  g.prepare_qat();
  EXPECT_THROW(g.prepare_qat(), ContractError);
  EXPECT_THROW(g.convert_int8(), ContractError);  // observers never saw data
  EXPECT_THROW(g.predict(random_images(2, 16, 5)), Error);  // no ranges to quantize with
  g.set_observing(true);
  g.predict(random_images(2, 16, 5));
  g.convert_int8();
  EXPECT_EQ(g.precision(), Precision::kInt8);
  EXPECT_THROW(g.prepare_qat(), ContractError);
}

TEST(Graph, Int8HasNoBackward) {
  auto g = tiny_net(3);
  g.prepare_qat();
  g.set_observing(true);
  g.predict(random_images(4, 16, 6));
  g.convert_int8();
  Tape<float> tape;
  EXPECT_THROW(g.forward(tape, random_images(1, 16, 7)), ContractError);
}

TEST(Graph, StandaloneBatchNormCannotBeFused) {
  ModelGraph g;
  int x = g.input(3);
  x = g.conv(x, 8, 3, 1, 1, false, "c0");
  x = g.activation(x, ops::Activation::kRelu, "r0");
  x = g.batchnorm(x, "lonely_bn");
  x = g.global_avgpool(x, "pool");
  x = g.conv(x, 4, 1, 1, 1, true, "cls");
  g.flatten(x, "logits");
  EXPECT_THROW(g.prepare_qat(), ContractError);
}

TEST(Graph, ConvBatchNormFoldingPreservesOutputs) {
  auto g = tiny_net(4);
  // Train a little so BN statistics are not at their initial values.
  g.set_training(true);
  for (int i = 0; i < 3; ++i) {
    Tape<float> tape;
    g.forward(tape, random_images(8, 16, 10 + i));
  }
  const auto x = random_images(3, 16, 20);
  const auto ref = g.predict(x);
  g.prepare_qat();
  g.cache_folded();
  const auto f = g.run_folded(x);
  ASSERT_EQ(f.shape(), ref.shape());
  for (std::int64_t i = 0; i < ref.numel(); ++i) {
    EXPECT_NEAR(f[i], ref[i], 1e-4 * (1.0 + std::abs(ref[i])));
  }
}

TEST(Graph, Int8TracksFakeQuant) {
  auto g = tiny_net(5);
  g.prepare_qat();
  g.set_observing(true);
  for (int i = 0; i < 4; ++i) g.predict(random_images(8, 16, 30 + i));
  g.set_observing(false);
  const auto x = random_images(16, 16, 40);
  const auto fq = g.predict(x);
  g.convert_int8();
  const auto q = g.predict(x);
  ASSERT_EQ(q.shape(), fq.shape());
  double max_logit = 0.0, max_diff = 0.0;
  for (std::int64_t i = 0; i < fq.numel(); ++i) {
    max_logit = std::max(max_logit, double(std::abs(fq[i])));
    max_diff = std::max(max_diff, double(std::abs(fq[i] - q[i])));
  }
  EXPECT_LT(max_diff, 0.1 * max_logit + 1e-3);
}

TEST(Graph, GroupsFollowStages) {
  const auto g = arch::build_from_spec(arch::desk_spec(), 32);
  const std::vector<std::string> want{"stem", "stage1", "stage2", "stage3", "stage4", "head"};
  EXPECT_EQ(g.groups(), want);
}

TEST(Graph, SameSeedSameWeights) {
  auto a = tiny_net(9), b = tiny_net(9), c = tiny_net(10);
  const auto x = random_images(2, 16, 1);
  const auto ya = a.predict(x), yb = b.predict(x), yc = c.predict(x);
  EXPECT_EQ(ya.vec(), yb.vec());
  EXPECT_NE(ya.vec(), yc.vec());
}

}  // namespace
}  // namespace frostq
