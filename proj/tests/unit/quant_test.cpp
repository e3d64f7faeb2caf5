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

#include "frostq/quant/fake_quant.hpp"
#include "frostq/quant/fusion.hpp"
#include "frostq/quant/int_kernels.hpp"
#include "support/quant_oracles.hpp"

namespace frostq::quant {
namespace {

using frostq::testing::uniform_tensor;

TEST(QParams, UnsignedZeroToTwentyFiveFive) {
  const auto s = compute_qparams(0.0, 25.5, Signedness::kUnsigned);
  EXPECT_NEAR(s.scale, 0.1, 1e-12);
  EXPECT_EQ(s.zero_point, 0);
}

TEST(QParams, SymmetricRangeHasExactZero) {
  const auto s = compute_qparams(-1.0, 1.0, Signedness::kUnsigned);
  EXPECT_EQ(dequantize_value(s.zero_point, s), 0.0);
  EXPECT_GT(s.zero_point, 0);
  EXPECT_LT(s.zero_point, 255);
}

TEST(QParams, PositiveRangeWidenedToZero) {
  const auto s = compute_qparams(3.0, 7.0, Signedness::kUnsigned);
  EXPECT_EQ(s.min_val, 0.0);
  EXPECT_EQ(s.max_val, 7.0);
  EXPECT_NEAR(s.scale, 7.0 / 255.0, 1e-15);
}

TEST(QParams, DegenerateRangeFallsBackToUnitScale) {
  const auto s = compute_qparams(0.0, 0.0, Signedness::kUnsigned);
  EXPECT_EQ(s.scale, 1.0);
  EXPECT_EQ(dequantize_value(quantize_value(0.0, s), s), 0.0);
  const auto v = compute_qparams(3.0, 3.0, Signedness::kUnsigned);
  EXPECT_LE(std::abs(dequantize_value(quantize_value(3.0, v), v) - 3.0), v.scale);
}

TEST(QParams, NaNRejected) {
  EXPECT_THROW(compute_qparams(std::nan(""), 1.0, Signedness::kUnsigned), Error);
  EXPECT_THROW(compute_qparams(1.0, 0.0, Signedness::kUnsigned), ContractError);
}

TEST(Quantize, ZerosMapToZeroPoint) {
  const auto s = compute_qparams(-2.0, 5.0, Signedness::kUnsigned);
  Tensor<float> z({3, 4});
  for (auto q : quantize(z, s)) EXPECT_EQ(q, s.zero_point);
  const auto fq = fake_quantize_values(z, s);
  for (auto v : fq.vec()) EXPECT_EQ(v, 0.0f);
}

TEST(Quantize, SaturatesAboveRange) {
  const auto s = compute_qparams(-2.0, 5.0, Signedness::kUnsigned);
  EXPECT_EQ(quantize_value(s.max_val + 10 * s.scale, s), 255);
  EXPECT_EQ(quantize_value(s.min_val - 10 * s.scale, s), 0);
  const auto w = compute_qparams(-2.0, 5.0, Signedness::kSigned);
  EXPECT_EQ(quantize_value(1e9, w), 127);
  EXPECT_EQ(quantize_value(-1e9, w), -128);
}

TEST(Quantize, TiesRoundToEven) {
  QuantStats s;
  s.scale = 1.0;
  s.zero_point = 0;
  EXPECT_EQ(quantize_value(2.5, s), 2);
  EXPECT_EQ(quantize_value(3.5, s), 4);
}

TEST(QuantProperties, RoundTripBound) {
  const auto r = frostq::testing::roundtrip_property(11, 1000);
  EXPECT_EQ(r.violations, 0);
  EXPECT_LE(r.worst, 0.5 + 1e-9);
}

TEST(QuantProperties, ZeroExactness) {
  EXPECT_EQ(frostq::testing::zero_exactness_property(12, 1000).violations, 0);
}

TEST(QuantProperties, Monotonic) {
  EXPECT_EQ(frostq::testing::monotonicity_property(13, 1000).violations, 0);
}

TEST(QuantProperties, FusionEquivalence) {
  const auto r = frostq::testing::fusion_property(14, 1000);
  EXPECT_EQ(r.violations, 0) << r.worst;
}

TEST(QuantProperties, DualPathWithinOneStep) {
  const auto r = frostq::testing::dual_path_property(15, 1000);
  EXPECT_EQ(r.violations, 0);
  EXPECT_LE(r.worst, 1.0);
}

TEST(FakeQuant, GridValuesAreFixedPoints) {
  const auto s = compute_qparams(-1.3, 2.1, Signedness::kUnsigned);
  Tensor<float> x({256});
  for (int q = 0; q < 256; ++q) x[q] = static_cast<float>(dequantize_value(q, s));
  EXPECT_EQ(fake_quantize_values(x, s), x);
}

TEST(FakeQuant, ClippedStraightThrough) {
  const auto s = compute_qparams(-1.0, 1.0, Signedness::kUnsigned);
  Tape<double> tape;
  auto x = make_var(Tensor<double>({3}, std::vector<double>{0.3, 2.0, -0.9}), true);
  auto y = fake_quantize(tape, x, s);
  tape.backward(ops::weighted_sum(tape, y, Tensor<double>({3}, std::vector<double>{2, 3, 4})));
  EXPECT_EQ(x->grad[0], 2.0);
  EXPECT_EQ(x->grad[1], 0.0);
  EXPECT_EQ(x->grad[2], 4.0);
}

TEST(FakeQuant, DeepStackKeepsGradientsAlive) {
  // Ten fake-quantized pointwise layers: the input gradient must not vanish.
  Rng rng(21);
  Tape<float> tape;
  auto x = make_var(uniform_tensor({1, 8, 4, 4}, rng, -1, 1), true);
  Var<float> h = x;
  for (int i = 0; i < 10; ++i) {
    auto w = make_var(uniform_tensor({8, 8, 1, 1}, rng, -0.6, 0.6), true);
    auto wq = fake_quantize(tape, w, weight_qparams(w->value));
    h = ops::relu(tape, ops::conv2d(tape, h, wq, Var<float>{}, 1, 0, 1));
    const auto [lo, hi] = min_max(h->value);
    h = fake_quantize(tape, h, compute_qparams(lo, hi, Signedness::kUnsigned));
  }
  tape.backward(ops::weighted_sum(tape, h, Tensor<float>(h->value.shape(), 1.f)));
  std::int64_t nonzero = 0;
  for (float g : x->grad.vec()) nonzero += std::abs(g) >= 1e-8f;
  EXPECT_GT(nonzero, 0);
}

TEST(Fusion, IdentityBatchNormLeavesConv) {
  Rng rng(3);
  const auto w = uniform_tensor({4, 3, 3, 3}, rng, -1, 1);
  const auto b = uniform_tensor({4}, rng, -1, 1);
  Tensor<float> gamma({4}, 1.f), beta({4});
  ops::BatchNormStats<float> bn(4);
  bn.running_var.fill(1.f - bn.eps);
  const auto f = fuse_conv_bn(w, &b, &gamma, &beta, &bn, {1, 1, 1}, ops::Activation::kNone);
  EXPECT_LT(max_abs_diff(f.weight, w), 1e-6);
  EXPECT_LT(max_abs_diff(f.bias, b), 1e-6);
}

TEST(Fusion, ReluSurvivesFusion) {
  Tensor<float> w({1, 1, 1, 1}, 1.f), b({1}), gamma({1}, 1.f), beta({1}, -5.f);
  ops::BatchNormStats<float> bn(1);
  const auto f = fuse_conv_bn(w, &b, &gamma, &beta, &bn, {}, ops::Activation::kRelu);
  const auto y = f.forward(Tensor<float>({1, 1, 2, 2}, 1.f));
  for (float v : y.vec()) EXPECT_EQ(v, 0.f);
}

TEST(Fusion, NegativeVarianceRejected) {
  Tensor<float> w({1, 1, 1, 1}, 1.f), gamma({1}, 1.f), beta({1});
  ops::BatchNormStats<float> bn(1);
  bn.running_var[0] = -0.5f;
  EXPECT_THROW(fuse_conv_bn(w, nullptr, &gamma, &beta, &bn, {}, ops::Activation::kNone),
               ContractError);
}

TEST(IntConv, ZeroPointInputGivesQuantizedBias) {
  Rng rng(5);
  FusedConv<float> f;
  f.weight = uniform_tensor({6, 4, 3, 3}, rng, -0.5, 0.5);
  f.bias = uniform_tensor({6}, rng, -1, 1);
  f.attrs = {1, 1, 1};
  const auto in = compute_qparams(-1, 3, Signedness::kUnsigned);
  const auto out = compute_qparams(-1.2, 1.2, Signedness::kUnsigned);
  QTensor x{{1, 4, 5, 5}, std::vector<std::uint8_t>(100, std::uint8_t(in.zero_point)), in};
  const auto y = int_conv2d(x, make_int_conv(f, in, weight_qparams(f.weight), out));
  for (std::int64_t o = 0; o < 6; ++o) {
    const int expect = quantize_value(f.bias[o], out);
    for (std::int64_t i = 0; i < 25; ++i) EXPECT_LE(std::abs(y.data[o * 25 + i] - expect), 1);
  }
}

TEST(IntConv, IdentityPointwiseIsExact) {
  FusedConv<float> f;
  f.weight = Tensor<float>({3, 3, 1, 1});
  for (int c = 0; c < 3; ++c) f.weight[c * 3 + c] = 1.f;
  f.bias = Tensor<float>({3});
  const auto in = compute_qparams(-2, 2, Signedness::kUnsigned);
  Rng rng(8);
  QTensor x{{1, 3, 6, 7}, std::vector<std::uint8_t>(126), in};
  for (auto& v : x.data) v = static_cast<std::uint8_t>(rng.below(256));
  const auto y = int_conv2d(x, make_int_conv(f, in, weight_qparams(f.weight), in));
  EXPECT_EQ(y.data, x.data);
}

TEST(IntConv, MissingOutputStatsRejected) {
  FusedConv<float> f;
  f.weight = Tensor<float>({1, 1, 1, 1}, 1.f);
  f.bias = Tensor<float>({1});
  const auto in = compute_qparams(0, 1, Signedness::kUnsigned);
  EXPECT_THROW(make_int_conv(f, in, weight_qparams(f.weight), std::nullopt), ContractError);
}

TEST(IntConv, FastKernelMatchesReferenceBitExactly) {
  Rng rng(17);
  for (int trial = 0; trial < 200; ++trial) {
    const std::int64_t c = 1 + rng.below(40), h = 3 + rng.below(15);
    auto l = frostq::testing::random_conv_bn(rng, c);
    const auto f = fuse_conv_bn(l.w, &l.b, &l.gamma, &l.beta, &l.bn, l.attrs, l.act);
    const auto in = compute_qparams(-rng.uniform(0, 2), rng.uniform(0, 4), Signedness::kUnsigned);
    const auto out = compute_qparams(-rng.uniform(0, 2), rng.uniform(0, 4), Signedness::kUnsigned);
    QTensor x{{2, c, h, h}, std::vector<std::uint8_t>(static_cast<std::size_t>(2 * c * h * h)), in};
    for (auto& v : x.data) v = static_cast<std::uint8_t>(rng.below(256));
    const auto ic = make_int_conv(f, in, weight_qparams(f.weight), out);
    ASSERT_EQ(int_conv2d(x, ic).data, int_conv2d_reference(x, ic).data) << "trial " << trial;
  }
}

TEST(IntConv, WideDepthwisePlanesMatchReference) {
  Rng rng(23);
  for (int trial = 0; trial < 24; ++trial) {
    const std::int64_t c = 2 + rng.below(4), h = 60 + rng.below(90);
    auto l = frostq::testing::random_conv_bn(rng, c);
    while (l.attrs.groups != c) l = frostq::testing::random_conv_bn(rng, c);
    const auto f = fuse_conv_bn(l.w, &l.b, &l.gamma, &l.beta, &l.bn, l.attrs, l.act);
    const auto in = compute_qparams(-rng.uniform(0, 2), rng.uniform(0, 4), Signedness::kUnsigned);
    const auto out = compute_qparams(-rng.uniform(0, 2), rng.uniform(0, 4), Signedness::kUnsigned);
    QTensor x{{1, c, h, h + 3}, std::vector<std::uint8_t>(static_cast<std::size_t>(c * h * (h + 3))), in};
    for (auto& v : x.data) v = static_cast<std::uint8_t>(rng.below(256));
    const auto ic = make_int_conv(f, in, weight_qparams(f.weight), out);
    ASSERT_EQ(int_conv2d(x, ic).data, int_conv2d_reference(x, ic).data) << "trial " << trial;
  }
}

TEST(IntOps, TableRequantizeMatchesFormula) {
  Rng rng(5);
  for (int trial = 0; trial < 50; ++trial) {
    const auto a = compute_qparams(-rng.uniform(0, 3), rng.uniform(0, 3), Signedness::kUnsigned);
    const auto b = compute_qparams(-rng.uniform(0, 3), rng.uniform(0, 3), Signedness::kUnsigned);
    QTensor x{{1, 1, 1, 200}, std::vector<std::uint8_t>(200), a};
    for (auto& v : x.data) v = static_cast<std::uint8_t>(rng.below(256));
    const auto y = requantize(x, b);
    for (std::size_t i = 0; i < x.data.size(); ++i) {
      const double v = std::nearbyint(a.scale / b.scale * (x.data[i] - a.zero_point)) + b.zero_point;
      ASSERT_EQ(y.data[i], static_cast<std::uint8_t>(std::clamp(v, 0.0, 255.0)));
    }
  }
}

TEST(IntOps, AddMatchesFloat) {
  Rng rng(2);
  const auto sa = compute_qparams(-1, 2, Signedness::kUnsigned);
  const auto sb = compute_qparams(-3, 1, Signedness::kUnsigned);
  const auto so = compute_qparams(-4, 3, Signedness::kUnsigned);
  QTensor a{{1, 2, 5, 5}, std::vector<std::uint8_t>(50), sa}, b = a;
  b.stats = sb;
  for (auto& v : a.data) v = static_cast<std::uint8_t>(rng.below(256));
  for (auto& v : b.data) v = static_cast<std::uint8_t>(rng.below(256));
  const auto y = int_add(a, b, so);
  for (std::size_t i = 0; i < 50; ++i) {
    const double ref = dequantize_value(a.data[i], sa) + dequantize_value(b.data[i], sb);
    EXPECT_LE(std::abs(dequantize_value(y.data[i], so) - ref), so.scale / 2 + 1e-12);
  }
}

TEST(IntOps, ConcatKeepsChannelOrder) {
  const auto s = compute_qparams(0, 1, Signedness::kUnsigned);
  QTensor a{{1, 1, 1, 2}, {1, 2}, s}, b{{1, 2, 1, 2}, {3, 4, 5, 6}, s};
  const auto y = int_concat({&a, &b}, s);
  EXPECT_EQ(y.shape, (Shape{1, 3, 1, 2}));
  EXPECT_EQ(y.data, (std::vector<std::uint8_t>{1, 2, 3, 4, 5, 6}));
}

TEST(IntOps, PoolsOnCodes) {
  const auto s = compute_qparams(-1, 1, Signedness::kUnsigned);
  QTensor x{{1, 1, 2, 2}, {10, 40, 30, 20}, s};
  EXPECT_EQ(int_maxpool(x, 2, 2).data[0], 40);
  EXPECT_EQ(int_global_avgpool(x).data[0], 25);
}

}  // namespace
}  // namespace frostq::quant
