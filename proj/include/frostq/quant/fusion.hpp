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

// Folding an eval-mode batch norm (and trailing activation) into the conv
// that feeds it.

#include <cmath>
#include <optional>
#include <type_traits>

#include "frostq/core/kernels.hpp"
#include "frostq/core/ops.hpp"

namespace frostq::quant {

struct ConvAttrs {
  std::int64_t stride = 1;
  std::int64_t padding = 0;
  std::int64_t groups = 1;
};

template <class T>
struct FusedConv {
  Tensor<T> weight;  // [O, C/groups, k, k]
  Tensor<T> bias;    // [O]
  ConvAttrs attrs;
  ops::Activation act = ops::Activation::kNone;

  std::int64_t out_channels() const { return weight.dim(0); }

  Tensor<T> forward(const Tensor<T>& x) const {
    const auto g = kernels::conv_geometry(x.shape(), weight.shape(), attrs.stride,
                                          attrs.padding, attrs.groups);
    Tensor<T> y({g.n, g.o, g.ho, g.wo});
    kernels::conv2d_forward(g, x.data(), weight.data(), bias.data(), y.data());
    apply_activation(y, act);
    return y;
  }

  static void apply_activation(Tensor<T>& y, ops::Activation act) {
    if (act == ops::Activation::kNone) return;
    const T hi = act == ops::Activation::kRelu6 ? T(6) : std::numeric_limits<T>::infinity();
    for (auto& v : y.vec()) v = std::min(std::max(v, T{0}), hi);
  }
};

/// Per-output-channel gamma / sqrt(var + eps).
template <class T>
Tensor<T> bn_scale(const Tensor<T>& gamma, const ops::BatchNormStats<T>& bn) {
  Tensor<T> s(gamma.shape());
  for (std::int64_t c = 0; c < s.numel(); ++c) {
    const T var = bn.running_var[c];
    if (var < T{0} || std::isnan(double(var))) {
      throw ContractError("fuse_conv_bn: running_var[" + std::to_string(c) +
                          "] is negative");
    }
    s[c] = gamma[c] / std::sqrt(var + bn.eps);
  }
  return s;
}

/// w' = w * gamma / sigma per output channel, b' = beta + (b - mu) * gamma / sigma.
/// Pass an empty `conv_bias` for bias-free convs and `gamma` empty to fold
/// only the activation.
template <class T>
FusedConv<T> fuse_conv_bn(const Tensor<T>& conv_weight,
                          const std::type_identity_t<Tensor<T>>* conv_bias,
                          const std::type_identity_t<Tensor<T>>* gamma,
                          const std::type_identity_t<Tensor<T>>* beta,
                          const std::type_identity_t<ops::BatchNormStats<T>>* bn,
                          ConvAttrs attrs,
                          ops::Activation act) {
  require_rank("fuse_conv_bn", conv_weight.shape(), 4, "weight");
  const std::int64_t o = conv_weight.dim(0);
  const std::int64_t per = conv_weight.numel() / std::max<std::int64_t>(o, 1);
  FusedConv<T> f;
  f.attrs = attrs;
  f.act = act;
  f.weight = conv_weight;
  f.bias = conv_bias ? *conv_bias : Tensor<T>({o}, T{0});
  if (f.bias.numel() != o) {
    throw DimensionError("fuse_conv_bn", "bias", to_string(f.bias.shape()));
  }
  if (!bn) return f;
  if (!gamma || !beta || gamma->numel() != o || beta->numel() != o ||
      bn->running_mean.numel() != o) {
    throw DimensionError("fuse_conv_bn", "channels",
                         "batch norm does not match " + std::to_string(o) +
                             " output channels");
  }
  const Tensor<T> s = bn_scale(*gamma, *bn);
  for (std::int64_t c = 0; c < o; ++c) {
    T* row = f.weight.data() + c * per;
    for (std::int64_t i = 0; i < per; ++i) row[i] *= s[c];
    f.bias[c] = (*beta)[c] + (f.bias[c] - bn->running_mean[c]) * s[c];
  }
  return f;
}

}  // namespace frostq::quant
