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

// Differentiable operators over Var<T>. Each op computes its forward value
// and, when the tape records and some input requires a gradient, pushes a
// closure that accumulates input gradients from the output gradient.

#include <algorithm>
#include <cmath>
#include <cstdint>
#include <limits>
#include <optional>
#include <vector>

#include "frostq/core/autograd.hpp"
#include "frostq/core/kernels.hpp"

namespace frostq::ops {

namespace detail {

template <class T>
bool has_grad(const Var<T>& v) {
  return v && v->requires_grad;
}

template <class T>
bool reached(const Var<T>& out) {
  return out->grad.shape() == out->value.shape() && !out->grad.vec().empty();
}

}  // namespace detail

enum class Activation { kNone, kRelu, kRelu6 };

inline const char* to_string(Activation a) {
  switch (a) {
    case Activation::kNone: return "none";
    case Activation::kRelu: return "relu";
    case Activation::kRelu6: return "relu6";
  }
  return "?";
}

using frostq::to_string;

// ---------------------------------------------------------------- conv2d

template <class T>
Var<T> conv2d(Tape<T>& tape, const Var<T>& x, const Var<T>& w, const Var<T>& b,
              std::int64_t stride, std::int64_t padding, std::int64_t groups) {
  const auto g = kernels::conv_geometry(x->value.shape(), w->value.shape(),
                                        stride, padding, groups);
  if (b && (b->value.rank() != 1 || b->value.dim(0) != g.o)) {
    throw DimensionError("conv2d", "bias",
                         "expected [" + std::to_string(g.o) + "], got " +
                             to_string(b->value.shape()));
  }
  Tensor<T> y({g.n, g.o, g.ho, g.wo});
  kernels::conv2d_forward(g, x->value.data(), w->value.data(),
                          b ? b->value.data() : nullptr, y.data());
  auto out = make_var(std::move(y), tape.needs(x, w, b));
  if (out->requires_grad) {
    tape.push([g, x, w, b, out] {
      if (!detail::reached(out)) return;
      kernels::conv2d_backward(
          g, x->value.data(), w->value.data(), out->grad.data(),
          detail::has_grad(x) ? x->grad_buffer().data() : nullptr,
          detail::has_grad(w) ? w->grad_buffer().data() : nullptr,
          detail::has_grad(b) ? b->grad_buffer().data() : nullptr);
    });
  }
  return out;
}

// ----------------------------------------------------------- batchnorm2d

/// Running statistics owned by a batch-norm layer (buffers, not parameters).
template <class T>
struct BatchNormStats {
  Tensor<T> running_mean;
  Tensor<T> running_var;
  T momentum = T(0.1);
  T eps = T(1e-5);

  explicit BatchNormStats(std::int64_t channels = 0)
      : running_mean({channels}, T{0}), running_var({channels}, T{1}) {}
};

template <class T>
Var<T> batchnorm2d(Tape<T>& tape, const Var<T>& x, const Var<T>& gamma,
                   const Var<T>& beta, BatchNormStats<T>& stats,
                   bool training) {
  const auto& s = x->value.shape();
  require_rank("batchnorm2d", s, 4, "input");
  const std::int64_t n = s[0], c = s[1], plane = s[2] * s[3];
  if (gamma->value.numel() != c || beta->value.numel() != c ||
      stats.running_mean.numel() != c || stats.running_var.numel() != c) {
    throw DimensionError("batchnorm2d", "channels",
                         "parameters sized " +
                             std::to_string(gamma->value.numel()) +
                             " for input " + to_string(s));
  }
  if (!(stats.eps > T{0})) throw ContractError("batchnorm2d: eps must be > 0");
  const std::int64_t m = n * plane;
  if (m == 0) throw ContractError("batchnorm2d: zero-size batch");
  if (training && m < 2) {
    throw ContractError("batchnorm2d: training needs more than one value per channel");
  }

  Tensor<T> y(s);
  Tensor<T> xhat(s);
  std::vector<T> inv_std(static_cast<std::size_t>(c));
  const T* xd = x->value.data();
  for (std::int64_t ch = 0; ch < c; ++ch) {
    double mean, var;
    if (training) {
      double sum = 0.0;
      for (std::int64_t i = 0; i < n; ++i) sum += kernels::lane_sum(xd + (i * c + ch) * plane, plane);
      mean = sum / static_cast<double>(m);
      double sq = 0.0;
      for (std::int64_t i = 0; i < n; ++i)
        sq += kernels::lane_sq_dev(xd + (i * c + ch) * plane, plane, mean);
      var = sq / static_cast<double>(m);
      const double unbiased = sq / static_cast<double>(m - 1);
      const double mom = stats.momentum;
      stats.running_mean[ch] =
          static_cast<T>((1.0 - mom) * stats.running_mean[ch] + mom * mean);
      stats.running_var[ch] =
          static_cast<T>((1.0 - mom) * stats.running_var[ch] + mom * unbiased);
    } else {
      mean = stats.running_mean[ch];
      var = stats.running_var[ch];
    }
    const double istd = 1.0 / std::sqrt(var + static_cast<double>(stats.eps));
    inv_std[static_cast<std::size_t>(ch)] = static_cast<T>(istd);
    const T gm = gamma->value[ch], bt = beta->value[ch];
    for (std::int64_t i = 0; i < n; ++i) {
      const std::int64_t off = (i * c + ch) * plane;
      for (std::int64_t j = 0; j < plane; ++j) {
        const T xh = static_cast<T>((xd[off + j] - mean) * istd);
        xhat[off + j] = xh;
        y[off + j] = gm * xh + bt;
      }
    }
  }

  auto out = make_var(std::move(y), tape.needs(x, gamma, beta));
  if (out->requires_grad) {
    tape.push([=, xhat = std::move(xhat), inv_std = std::move(inv_std)] {
      if (!detail::reached(out)) return;
      const T* dy = out->grad.data();
      for (std::int64_t ch = 0; ch < c; ++ch) {
        double sdy = 0.0, sdyx = 0.0;
        for (std::int64_t i = 0; i < n; ++i) {
          const std::int64_t off = (i * c + ch) * plane;
          sdy += kernels::lane_sum(dy + off, plane);
          sdyx += kernels::lane_dot(dy + off, xhat.data() + off, plane);
        }
        if (detail::has_grad(gamma)) gamma->grad_buffer()[ch] += static_cast<T>(sdyx);
        if (detail::has_grad(beta)) beta->grad_buffer()[ch] += static_cast<T>(sdy);
        if (!detail::has_grad(x)) continue;
        T* dx = x->grad_buffer().data();
        const double scale = static_cast<double>(gamma->value[ch]) *
                             inv_std[static_cast<std::size_t>(ch)];
        const double mdy = training ? sdy / m : 0.0, mdyx = training ? sdyx / m : 0.0;
        const T* xh = xhat.data();
        for (std::int64_t i = 0; i < n; ++i) {
          const std::int64_t off = (i * c + ch) * plane;
          for (std::int64_t j = 0; j < plane; ++j) {
            dx[off + j] += static_cast<T>(scale * (dy[off + j] - mdy - xh[off + j] * mdyx));
          }
        }
      }
    });
  }
  return out;
}

// ------------------------------------------------------------ activation

template <class T>
Var<T> activation(Tape<T>& tape, const Var<T>& x, Activation kind) {
  if (kind == Activation::kNone) return x;
  const T hi = kind == Activation::kRelu6 ? T(6) : std::numeric_limits<T>::infinity();
  Tensor<T> y(x->value.shape());
  const T* xd = x->value.data();
  for (std::int64_t i = 0; i < y.numel(); ++i) {
    y[i] = std::min(std::max(xd[i], T{0}), hi);
  }
  auto out = make_var(std::move(y), tape.needs(x));
  if (out->requires_grad) {
    tape.push([x, out, hi] {
      if (!detail::reached(out)) return;
      T* __restrict dx = x->grad_buffer().data();
      const T* __restrict dy = out->grad.data();
      const T* __restrict xd = x->value.data();
      const std::int64_t n = x->value.numel();
      for (std::int64_t i = 0; i < n; ++i) {
        const T g = dy[i];
        dx[i] += ((xd[i] > T{0}) & (xd[i] < hi)) ? g : T{0};
      }
    });
  }
  return out;
}

template <class T>
Var<T> relu(Tape<T>& tape, const Var<T>& x) {
  return activation(tape, x, Activation::kRelu);
}
template <class T>
Var<T> relu6(Tape<T>& tape, const Var<T>& x) {
  return activation(tape, x, Activation::kRelu6);
}

/// relu6(x + 3) / 6.
template <class T>
Var<T> hard_sigmoid(Tape<T>& tape, const Var<T>& x) {
  Tensor<T> y(x->value.shape());
  for (std::int64_t i = 0; i < y.numel(); ++i) {
    y[i] = std::min(std::max(x->value[i] + T(3), T{0}), T(6)) / T(6);
  }
  auto out = make_var(std::move(y), tape.needs(x));
  if (out->requires_grad) {
    tape.push([x, out] {
      if (!detail::reached(out)) return;
      auto& dx = x->grad_buffer();
      for (std::int64_t i = 0; i < dx.numel(); ++i) {
        const T v = x->value[i];
        if (v > T(-3) && v < T(3)) dx[i] += out->grad[i] / T(6);
      }
    });
  }
  return out;
}

// ------------------------------------------------------------------ pool

template <class T>
Var<T> maxpool2d(Tape<T>& tape, const Var<T>& x, std::int64_t k,
                 std::int64_t stride) {
  const auto& s = x->value.shape();
  require_rank("maxpool2d", s, 4, "input");
  if (k < 1 || stride < 1) throw ContractError("maxpool2d: kernel and stride must be >= 1");
  if (k > s[2] || k > s[3]) {
    throw DimensionError("maxpool2d", "height",
                         "kernel " + std::to_string(k) + " larger than input " +
                             to_string(s));
  }
  const std::int64_t ho = (s[2] - k) / stride + 1, wo = (s[3] - k) / stride + 1;
  Tensor<T> y({s[0], s[1], ho, wo});
  std::vector<std::int64_t> arg(static_cast<std::size_t>(y.numel()));
  const std::int64_t planes = s[0] * s[1];
  for (std::int64_t pi = 0; pi < planes; ++pi) {
    const T* xp = x->value.data() + pi * s[2] * s[3];
    for (std::int64_t oh = 0; oh < ho; ++oh) {
      for (std::int64_t ow = 0; ow < wo; ++ow) {
        std::int64_t best = (oh * stride) * s[3] + ow * stride;
        for (std::int64_t kh = 0; kh < k; ++kh) {
          for (std::int64_t kw = 0; kw < k; ++kw) {
            const std::int64_t idx = (oh * stride + kh) * s[3] + ow * stride + kw;
            if (xp[idx] > xp[best]) best = idx;
          }
        }
        const std::int64_t o = (pi * ho + oh) * wo + ow;
        y[o] = xp[best];
        arg[static_cast<std::size_t>(o)] = pi * s[2] * s[3] + best;
      }
    }
  }
  auto out = make_var(std::move(y), tape.needs(x));
  if (out->requires_grad) {
    tape.push([x, out, arg = std::move(arg)] {
      if (!detail::reached(out)) return;
      auto& dx = x->grad_buffer();
      for (std::size_t i = 0; i < arg.size(); ++i) {
        dx[arg[i]] += out->grad[static_cast<std::int64_t>(i)];
      }
    });
  }
  return out;
}

template <class T>
Var<T> global_avgpool(Tape<T>& tape, const Var<T>& x) {
  const auto& s = x->value.shape();
  require_rank("global_avgpool", s, 4, "input");
  const std::int64_t planes = s[0] * s[1], plane = s[2] * s[3];
  if (plane == 0) throw DimensionError("global_avgpool", "height", "empty plane");
  Tensor<T> y({s[0], s[1], 1, 1});
  for (std::int64_t pi = 0; pi < planes; ++pi) {
    const double sum = kernels::lane_sum(x->value.data() + pi * plane, plane);
    y[pi] = static_cast<T>(sum / static_cast<double>(plane));
  }
  auto out = make_var(std::move(y), tape.needs(x));
  if (out->requires_grad) {
    tape.push([x, out, planes, plane] {
      if (!detail::reached(out)) return;
      T* dx = x->grad_buffer().data();
      for (std::int64_t pi = 0; pi < planes; ++pi) {
        const T g = out->grad[pi] / static_cast<T>(plane);
        for (std::int64_t j = 0; j < plane; ++j) dx[pi * plane + j] += g;
      }
    });
  }
  return out;
}

// ------------------------------------------------------------ structural

/// Stacks along the channel axis; inputs[0] occupies the lowest channels.
template <class T>
Var<T> concat_channels(Tape<T>& tape, const std::vector<Var<T>>& inputs) {
  if (inputs.empty()) throw ContractError("concat_channels: no inputs");
  const auto& s0 = inputs[0]->value.shape();
  require_rank("concat_channels", s0, 4, "input");
  std::int64_t channels = 0;
  bool any_grad = false;
  for (const auto& v : inputs) {
    const auto& s = v->value.shape();
    require_rank("concat_channels", s, 4, "input");
    if (s[0] != s0[0]) throw DimensionError("concat_channels", "batch", to_string(s));
    if (s[2] != s0[2]) throw DimensionError("concat_channels", "height", to_string(s));
    if (s[3] != s0[3]) throw DimensionError("concat_channels", "width", to_string(s));
    channels += s[1];
    any_grad = any_grad || tape.needs(v);
  }
  const std::int64_t n = s0[0], plane = s0[2] * s0[3];
  Tensor<T> y({n, channels, s0[2], s0[3]});
  std::int64_t c_off = 0;
  for (const auto& v : inputs) {
    const std::int64_t c = v->value.dim(1);
    for (std::int64_t i = 0; i < n; ++i) {
      std::copy_n(v->value.data() + i * c * plane, c * plane,
                  y.data() + (i * channels + c_off) * plane);
    }
    c_off += c;
  }
  auto out = make_var(std::move(y), any_grad);
  if (out->requires_grad) {
    tape.push([inputs, out, n, channels, plane] {
      if (!detail::reached(out)) return;
      std::int64_t c_off = 0;
      for (const auto& v : inputs) {
        const std::int64_t c = v->value.dim(1);
        if (detail::has_grad(v)) {
          T* dx = v->grad_buffer().data();
          for (std::int64_t i = 0; i < n; ++i) {
            const T* src = out->grad.data() + (i * channels + c_off) * plane;
            T* dst = dx + i * c * plane;
            for (std::int64_t j = 0; j < c * plane; ++j) dst[j] += src[j];
          }
        }
        c_off += c;
      }
    });
  }
  return out;
}

/// Channels [begin, begin + count) of x.
template <class T>
Var<T> slice_channels(Tape<T>& tape, const Var<T>& x, std::int64_t begin,
                      std::int64_t count) {
  const auto& s = x->value.shape();
  require_rank("slice_channels", s, 4, "input");
  if (begin < 0 || count < 0 || begin + count > s[1]) {
    throw DimensionError("slice_channels", "channels",
                         "range [" + std::to_string(begin) + ", " +
                             std::to_string(begin + count) + ") outside " +
                             to_string(s));
  }
  const std::int64_t n = s[0], c = s[1], plane = s[2] * s[3];
  Tensor<T> y({n, count, s[2], s[3]});
  for (std::int64_t i = 0; i < n; ++i) {
    std::copy_n(x->value.data() + (i * c + begin) * plane, count * plane,
                y.data() + i * count * plane);
  }
  auto out = make_var(std::move(y), tape.needs(x));
  if (out->requires_grad) {
    tape.push([x, out, n, c, begin, count, plane] {
      if (!detail::reached(out)) return;
      T* dx = x->grad_buffer().data();
      for (std::int64_t i = 0; i < n; ++i) {
        const T* src = out->grad.data() + i * count * plane;
        T* dst = dx + (i * c + begin) * plane;
        for (std::int64_t j = 0; j < count * plane; ++j) dst[j] += src[j];
      }
    });
  }
  return out;
}

template <class T>
Var<T> add(Tape<T>& tape, const Var<T>& a, const Var<T>& b) {
  if (a->value.shape() != b->value.shape()) {
    throw DimensionError("add", "shape",
                         to_string(a->value.shape()) + " vs " +
                             to_string(b->value.shape()));
  }
  Tensor<T> y(a->value.shape());
  for (std::int64_t i = 0; i < y.numel(); ++i) y[i] = a->value[i] + b->value[i];
  auto out = make_var(std::move(y), tape.needs(a, b));
  if (out->requires_grad) {
    tape.push([a, b, out] {
      if (!detail::reached(out)) return;
      for (const auto* v : {&a, &b}) {
        if (!detail::has_grad(*v)) continue;
        auto& g = (*v)->grad_buffer();
        for (std::int64_t i = 0; i < g.numel(); ++i) g[i] += out->grad[i];
      }
    });
  }
  return out;
}

/// Elementwise product of equally shaped tensors.
template <class T>
Var<T> mul(Tape<T>& tape, const Var<T>& a, const Var<T>& b) {
  if (a->value.shape() != b->value.shape()) {
    throw DimensionError("mul", "shape",
                         to_string(a->value.shape()) + " vs " +
                             to_string(b->value.shape()));
  }
  Tensor<T> y(a->value.shape());
  for (std::int64_t i = 0; i < y.numel(); ++i) y[i] = a->value[i] * b->value[i];
  auto out = make_var(std::move(y), tape.needs(a, b));
  if (out->requires_grad) {
    tape.push([a, b, out] {
      if (!detail::reached(out)) return;
      if (detail::has_grad(a)) {
        auto& g = a->grad_buffer();
        for (std::int64_t i = 0; i < g.numel(); ++i) g[i] += out->grad[i] * b->value[i];
      }
      if (detail::has_grad(b)) {
        auto& g = b->grad_buffer();
        for (std::int64_t i = 0; i < g.numel(); ++i) g[i] += out->grad[i] * a->value[i];
      }
    });
  }
  return out;
}

template <class T>
Var<T> reciprocal(Tape<T>& tape, const Var<T>& x) {
  Tensor<T> y(x->value.shape());
  for (std::int64_t i = 0; i < y.numel(); ++i) {
    if (x->value[i] == T{0}) throw ContractError("reciprocal: division by zero");
    y[i] = T{1} / x->value[i];
  }
  auto out = make_var(std::move(y), tape.needs(x));
  if (out->requires_grad) {
    tape.push([x, out] {
      if (!detail::reached(out)) return;
      auto& g = x->grad_buffer();
      for (std::int64_t i = 0; i < g.numel(); ++i) {
        g[i] -= out->grad[i] * out->value[i] * out->value[i];
      }
    });
  }
  return out;
}

/// x scaled by s[c] along `axis` (0 for [Cout, ...] weights, 1 for NCHW).
template <class T>
Var<T> scale_axis(Tape<T>& tape, const Var<T>& x, const Var<T>& s,
                  std::size_t axis) {
  const auto& xs = x->value.shape();
  if (axis >= xs.size() || s->value.numel() != xs[axis]) {
    throw DimensionError("scale_axis", axis == 0 ? "out_channels" : "channels",
                         "scale of " + std::to_string(s->value.numel()) +
                             " for " + to_string(xs));
  }
  std::int64_t outer = 1, inner = 1;
  for (std::size_t i = 0; i < axis; ++i) outer *= xs[i];
  for (std::size_t i = axis + 1; i < xs.size(); ++i) inner *= xs[i];
  const std::int64_t c = xs[axis];
  Tensor<T> y(xs);
  for (std::int64_t o = 0; o < outer; ++o) {
    for (std::int64_t ch = 0; ch < c; ++ch) {
      const T sv = s->value[ch];
      const std::int64_t off = (o * c + ch) * inner;
      const T* __restrict src = x->value.data() + off;
      T* __restrict dst = y.data() + off;
      for (std::int64_t j = 0; j < inner; ++j) dst[j] = src[j] * sv;
    }
  }
  auto out = make_var(std::move(y), tape.needs(x, s));
  if (out->requires_grad) {
    tape.push([x, s, out, outer, inner, c] {
      if (!detail::reached(out)) return;
      const bool gs = detail::has_grad(s);
      T* dx = detail::has_grad(x) ? x->grad_buffer().data() : nullptr;
      const T* g = out->grad.data();
      const T* xv = x->value.data();
      for (std::int64_t ch = 0; ch < c; ++ch) {
        double acc = 0.0;
        const T sv = s->value[ch];
        for (std::int64_t o = 0; o < outer; ++o) {
          const std::int64_t off = (o * c + ch) * inner;
          if (dx) {
            T* __restrict d = dx + off;
            const T* __restrict gy = g + off;
            for (std::int64_t j = 0; j < inner; ++j) d[j] += gy[j] * sv;
          }
          if (gs) acc += kernels::lane_dot(g + off, xv + off, inner);
        }
        if (gs) s->grad_buffer()[ch] += static_cast<T>(acc);
      }
    });
  }
  return out;
}

/// x[N,C,H,W] * gate[N,C,1,1], the squeeze-and-excitation channel multiply.
template <class T>
Var<T> mul_channels(Tape<T>& tape, const Var<T>& x, const Var<T>& gate) {
  const auto& xs = x->value.shape();
  const auto& gs = gate->value.shape();
  require_rank("mul_channels", xs, 4, "input");
  if (gs != Shape{xs[0], xs[1], 1, 1}) {
    throw DimensionError("mul_channels", "channels",
                         "gate " + to_string(gs) + " for input " + to_string(xs));
  }
  const std::int64_t planes = xs[0] * xs[1], plane = xs[2] * xs[3];
  Tensor<T> y(xs);
  for (std::int64_t p = 0; p < planes; ++p) {
    const T gv = gate->value[p];
    const T* __restrict xp = x->value.data() + p * plane;
    T* __restrict yp = y.data() + p * plane;
    for (std::int64_t j = 0; j < plane; ++j) yp[j] = xp[j] * gv;
  }
  auto out = make_var(std::move(y), tape.needs(x, gate));
  if (out->requires_grad) {
    tape.push([x, gate, out, planes, plane] {
      if (!detail::reached(out)) return;
      T* dx = detail::has_grad(x) ? x->grad_buffer().data() : nullptr;
      for (std::int64_t p = 0; p < planes; ++p) {
        const T gv = gate->value[p];
        const T* __restrict dy = out->grad.data() + p * plane;
        if (dx) {
          T* __restrict d = dx + p * plane;
          for (std::int64_t j = 0; j < plane; ++j) d[j] += dy[j] * gv;
        }
        if (detail::has_grad(gate)) {
          gate->grad_buffer()[p] +=
              static_cast<T>(kernels::lane_dot(dy, x->value.data() + p * plane, plane));
        }
      }
    });
  }
  return out;
}

template <class T>
Var<T> reshape(Tape<T>& tape, const Var<T>& x, Shape shape) {
  auto out = make_var(x->value.reshaped(std::move(shape)), tape.needs(x));
  if (out->requires_grad) {
    tape.push([x, out] {
      if (!detail::reached(out)) return;
      auto& g = x->grad_buffer();
      for (std::int64_t i = 0; i < g.numel(); ++i) g[i] += out->grad[i];
    });
  }
  return out;
}

/// y[N, out] = x[N, in] * W[out, in]^T + b.
template <class T>
Var<T> linear(Tape<T>& tape, const Var<T>& x, const Var<T>& w, const Var<T>& b) {
  const auto& xs = x->value.shape();
  const auto& ws = w->value.shape();
  require_rank("linear", xs, 2, "input");
  require_rank("linear", ws, 2, "weight");
  if (xs[1] != ws[1]) {
    throw DimensionError("linear", "in_features",
                         to_string(xs) + " vs weight " + to_string(ws));
  }
  if (b && b->value.numel() != ws[0]) {
    throw DimensionError("linear", "bias", to_string(b->value.shape()));
  }
  const std::int64_t n = xs[0], in = xs[1], outf = ws[0];
  Tensor<T> y({n, outf});
  {
    kernels::CMapR<T> X(x->value.data(), n, in);
    kernels::CMapR<T> W(w->value.data(), outf, in);
    kernels::MapR<T> Y(y.data(), n, outf);
    Y.noalias() = X * W.transpose();
    if (b) {
      for (std::int64_t i = 0; i < n; ++i)
        for (std::int64_t j = 0; j < outf; ++j) Y(i, j) += b->value[j];
    }
  }
  auto out = make_var(std::move(y), tape.needs(x, w, b));
  if (out->requires_grad) {
    tape.push([x, w, b, out, n, in, outf] {
      if (!detail::reached(out)) return;
      kernels::CMapR<T> DY(out->grad.data(), n, outf);
      if (detail::has_grad(x)) {
        kernels::MapR<T> DX(x->grad_buffer().data(), n, in);
        kernels::CMapR<T> W(w->value.data(), outf, in);
        DX.noalias() += DY * W;
      }
      if (detail::has_grad(w)) {
        kernels::MapR<T> DW(w->grad_buffer().data(), outf, in);
        kernels::CMapR<T> X(x->value.data(), n, in);
        DW.noalias() += DY.transpose() * X;
      }
      if (detail::has_grad(b)) {
        auto& db = b->grad_buffer();
        for (std::int64_t j = 0; j < outf; ++j) {
          double s = 0.0;
          for (std::int64_t i = 0; i < n; ++i) s += DY(i, j);
          db[j] += static_cast<T>(s);
        }
      }
    });
  }
  return out;
}

/// Mean cross-entropy of softmax(logits) against integer labels. Logits may be
/// [N, k] or [N, k, 1, 1].
template <class T>
Var<T> softmax_cross_entropy(Tape<T>& tape, const Var<T>& logits,
                             const std::vector<int>& labels) {
  const auto& s = logits->value.shape();
  if (s.size() != 2 && !(s.size() == 4 && s[2] == 1 && s[3] == 1)) {
    throw DimensionError("softmax_cross_entropy", "logits",
                         "expected [N, k], got " + to_string(s));
  }
  const std::int64_t n = s[0], k = s[1];
  if (static_cast<std::int64_t>(labels.size()) != n) {
    throw DimensionError("softmax_cross_entropy", "batch",
                         std::to_string(labels.size()) + " labels for " +
                             to_string(s));
  }
  if (n == 0) throw ContractError("softmax_cross_entropy: empty batch");
  Tensor<T> prob({n, k});
  double loss = 0.0;
  for (std::int64_t i = 0; i < n; ++i) {
    const int label = labels[static_cast<std::size_t>(i)];
    if (label < 0 || label >= k) {
      throw ContractError("softmax_cross_entropy: label " + std::to_string(label) +
                          " outside [0, " + std::to_string(k) + ")");
    }
    const T* z = logits->value.data() + i * k;
    const double zmax = *std::max_element(z, z + k);
    double denom = 0.0;
    for (std::int64_t j = 0; j < k; ++j) denom += std::exp(z[j] - zmax);
    for (std::int64_t j = 0; j < k; ++j) {
      prob[i * k + j] = static_cast<T>(std::exp(z[j] - zmax) / denom);
    }
    loss += std::log(denom) + zmax - z[label];
  }
  auto out = make_var(Tensor<T>({1}, static_cast<T>(loss / n)), tape.needs(logits));
  if (out->requires_grad) {
    tape.push([logits, out, labels, prob = std::move(prob), n, k] {
      if (!detail::reached(out)) return;
      const T scale = out->grad[0] / static_cast<T>(n);
      auto& g = logits->grad_buffer();
      for (std::int64_t i = 0; i < n; ++i) {
        for (std::int64_t j = 0; j < k; ++j) {
          const T onehot = j == labels[static_cast<std::size_t>(i)] ? T{1} : T{0};
          g[i * k + j] += scale * (prob[i * k + j] - onehot);
        }
      }
    });
  }
  return out;
}

/// sum(x * weights) for a constant weight tensor; used to build scalar probes.
template <class T>
Var<T> weighted_sum(Tape<T>& tape, const Var<T>& x, const Tensor<T>& weights) {
  if (weights.shape() != x->value.shape()) {
    throw DimensionError("weighted_sum", "shape", to_string(weights.shape()));
  }
  double s = 0.0;
  for (std::int64_t i = 0; i < weights.numel(); ++i) s += x->value[i] * weights[i];
  auto out = make_var(Tensor<T>({1}, static_cast<T>(s)), tape.needs(x));
  if (out->requires_grad) {
    tape.push([x, out, weights] {
      if (!detail::reached(out)) return;
      auto& g = x->grad_buffer();
      for (std::int64_t i = 0; i < g.numel(); ++i) g[i] += out->grad[0] * weights[i];
    });
  }
  return out;
}

}  // namespace frostq::ops
