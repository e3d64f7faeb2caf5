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

// Integer-only inference kernels. Activations travel as uint8 codes with an
// affine (scale, zero point); conv weights are per-tensor int8. Products are
// accumulated in int32 and requantized with a double multiplier.

#include <algorithm>
#include <cmath>
#include <cstdint>
#include <cstring>
#include <optional>
#include <vector>

#if defined(__AVX512F__)
#include <immintrin.h>
#endif

#include "frostq/core/kernels.hpp"
#include "frostq/core/parallel.hpp"
#include "frostq/quant/fusion.hpp"
#include "frostq/quant/qparams.hpp"

namespace frostq::quant {

struct QTensor {
  Shape shape;
  std::vector<std::uint8_t> data;
  QuantStats stats;

  std::int64_t numel() const { return static_cast<std::int64_t>(data.size()); }
  std::int64_t dim(std::size_t i) const { return shape.at(i); }
};

inline QTensor quantize_activation(const Tensor<float>& x, const QuantStats& s) {
  if (s.signedness != Signedness::kUnsigned) {
    throw ContractError("quantize_activation: activation stats must be unsigned");
  }
  QTensor q{x.shape(), std::vector<std::uint8_t>(static_cast<std::size_t>(x.numel())), s};
  const float* __restrict d = x.data();
  std::uint8_t* __restrict o = q.data.data();
  // quantize_value, written so it vectorizes.
  const double lo = s.repr_min(), hi = s.repr_max(), scale = s.scale, zp = s.zero_point;
  const std::int64_t n = x.numel();
  for (std::int64_t i = 0; i < n; ++i) {
    double v = std::nearbyint(static_cast<double>(d[i]) / scale) + zp;
    v = v >= lo ? v : lo;  // NaN lands on lo
    v = v > hi ? hi : v;
    o[i] = static_cast<std::uint8_t>(static_cast<int>(v));
  }
  return q;
}

inline Tensor<float> dequantize_activation(const QTensor& q) {
  Tensor<float> out(q.shape);
  for (std::int64_t i = 0; i < out.numel(); ++i) {
    out[i] = static_cast<float>(dequantize_value(q.data[static_cast<std::size_t>(i)], q.stats));
  }
  return out;
}

namespace detail {

inline std::uint8_t clamp_u8(double v, int lo, int hi) {
  const double c = std::clamp(v, double(lo), double(hi));
  return static_cast<std::uint8_t>(c);
}

#if defined(__AVX512F__)
// round(m * acc) + zo, clamped, for 16 int32 lanes.
inline __m128i requant16(__m512i acc, __m512d m, __m512i zo, __m512i lo, __m512i hi) {
  const __m512d a0 = _mm512_mul_pd(_mm512_cvtepi32_pd(_mm512_castsi512_si256(acc)), m);
  const __m512d a1 =
      _mm512_mul_pd(_mm512_cvtepi32_pd(_mm512_extracti64x4_epi64(acc, 1)), m);
  const __m256i r0 =
      _mm512_cvt_roundpd_epi32(a0, _MM_FROUND_TO_NEAREST_INT | _MM_FROUND_NO_EXC);
  const __m256i r1 =
      _mm512_cvt_roundpd_epi32(a1, _MM_FROUND_TO_NEAREST_INT | _MM_FROUND_NO_EXC);
  __m512i r = _mm512_inserti64x4(_mm512_castsi256_si512(r0), r1, 1);
  r = _mm512_add_epi32(r, zo);
  r = _mm512_min_epi32(_mm512_max_epi32(r, lo), hi);
  return _mm512_cvtepi32_epi8(r);
}
#endif

}  // namespace detail

/// out[i] = clamp(round(m * (acc[i] + add)) + zo, lo, hi).
inline void requantize_row(const std::int32_t* acc, std::int64_t n, std::int32_t add,
                           double m, std::int32_t zo, int lo, int hi,
                           std::uint8_t* out) {
  std::int64_t i = 0;
#if defined(__AVX512F__)
  const __m512d vm = _mm512_set1_pd(m);
  const __m512i vadd = _mm512_set1_epi32(add), vzo = _mm512_set1_epi32(zo);
  const __m512i vlo = _mm512_set1_epi32(lo), vhi = _mm512_set1_epi32(hi);
  for (; i + 16 <= n; i += 16) {
    const __m512i a = _mm512_add_epi32(_mm512_loadu_si512(acc + i), vadd);
    _mm_storeu_si128(reinterpret_cast<__m128i*>(out + i),
                     detail::requant16(a, vm, vzo, vlo, vhi));
  }
  if (i < n) {
    const __mmask16 mask = static_cast<__mmask16>((1u << (n - i)) - 1);
    const __m512i a = _mm512_add_epi32(_mm512_maskz_loadu_epi32(mask, acc + i), vadd);
    _mm_mask_storeu_epi8(out + i, mask, detail::requant16(a, vm, vzo, vlo, vhi));
    i = n;
  }
#endif
  for (; i < n; ++i) {
    const double v = std::nearbyint(m * double(acc[i] + add)) + zo;
    out[i] = detail::clamp_u8(v, lo, hi);
  }
}

/// Output clamp bounds for a fused activation on the output grid.
inline std::pair<int, int> activation_bounds(ops::Activation act, const QuantStats& out) {
  int lo = out.repr_min(), hi = out.repr_max();
  if (act != ops::Activation::kNone) lo = std::max(lo, out.zero_point);
  if (act == ops::Activation::kRelu6) hi = std::min(hi, quantize_value(6.0, out));
  return {lo, hi};
}

/// A fused conv lowered to integer form.
struct IntConv {
  ConvAttrs attrs;
  ops::Activation act = ops::Activation::kNone;
  std::int64_t o = 0, cg = 0, k = 0;
  std::int64_t kdim = 0, kpad = 0;
  QuantStats in, w, out;
  double multiplier = 1.0;
  int lo = 0, hi = 255;
  std::vector<std::int8_t> wq;       // [o][kdim] raw codes
  std::vector<std::int8_t> wpacked;  // [o][kpad], zero padded
  std::vector<std::int32_t> wsum;    // per output channel, sum of raw codes
  std::vector<std::int32_t> bias;    // at scale in.scale * w.scale
  std::vector<std::int32_t> wdw;     // depthwise: codes minus weight zero point

  bool depthwise() const { return attrs.groups > 1 && attrs.groups == o && cg == 1; }
};

inline IntConv make_int_conv(const FusedConv<float>& f, const QuantStats& in,
                             const QuantStats& w_stats,
                             const std::optional<QuantStats>& out) {
  if (!out) {
    throw ContractError("int_conv2d: output statistics missing; calibrate first");
  }
  if (w_stats.signedness != Signedness::kSigned) {
    throw ContractError("int_conv2d: weight statistics must be signed");
  }
  IntConv c;
  c.attrs = f.attrs;
  c.act = f.act;
  c.o = f.weight.dim(0);
  c.cg = f.weight.dim(1);
  c.k = f.weight.dim(2);
  c.kdim = c.cg * c.k * c.k;
  c.kpad = (c.kdim + 3) / 4 * 4;
  c.in = in;
  c.w = w_stats;
  c.out = *out;
  c.multiplier = in.scale * w_stats.scale / out->scale;
  std::tie(c.lo, c.hi) = activation_bounds(f.act, *out);
  c.wq.resize(static_cast<std::size_t>(c.o * c.kdim));
  c.wpacked.assign(static_cast<std::size_t>(c.o * c.kpad), 0);
  c.wsum.assign(static_cast<std::size_t>(c.o), 0);
  c.bias.resize(static_cast<std::size_t>(c.o));
  const double bscale = in.scale * w_stats.scale;
  for (std::int64_t oc = 0; oc < c.o; ++oc) {
    for (std::int64_t i = 0; i < c.kdim; ++i) {
      const auto q = static_cast<std::int8_t>(
          quantize_value(double(f.weight[oc * c.kdim + i]), w_stats));
      c.wq[oc * c.kdim + i] = q;
      c.wpacked[oc * c.kpad + i] = q;
      c.wsum[oc] += q;
    }
    const double b = std::nearbyint(double(f.bias[oc]) / bscale);
    c.bias[oc] = static_cast<std::int32_t>(std::clamp(b, -2147483648.0, 2147483647.0));
  }
  if (c.depthwise()) {
    c.wdw.resize(c.wq.size());
    for (std::size_t i = 0; i < c.wq.size(); ++i) c.wdw[i] = c.wq[i] - w_stats.zero_point;
  }
  return c;
}

namespace detail {

inline kernels::ConvGeometry int_geometry(const QTensor& x, const IntConv& c) {
  return kernels::conv_geometry(x.shape, {c.o, c.cg, c.k, c.k}, c.attrs.stride,
                                c.attrs.padding, c.attrs.groups);
}

#if defined(__AVX512VNNI__) && defined(__AVX512BW__)
// Accumulates output rows from int16-pair sources with vpdpwssd, four
// independent chains per 64 columns, then requantizes each row.
__attribute__((always_inline)) inline void dw_rows(
    const std::int32_t* src, std::int64_t row_step, std::int64_t tap_step,
    std::int64_t stride, std::int64_t k, std::int64_t kp, const std::int32_t* wpair,
    std::int64_t ho, std::int64_t wo, const IntConv& c, std::int32_t add,
    std::int32_t* acc, std::uint8_t* y) {
  for (std::int64_t oh = 0; oh < ho; ++oh) {
    const std::int32_t* base = src + oh * stride * row_step;
    for (std::int64_t ow = 0; ow < wo; ow += 64) {
      __m512i a0 = _mm512_setzero_si512(), a1 = a0, a2 = a0, a3 = a0;
      for (std::int64_t kh = 0; kh < k; ++kh) {
        const std::int32_t* r = base + kh * row_step + ow;
        for (std::int64_t m = 0; m < kp; ++m) {
          const __m512i w = _mm512_set1_epi32(wpair[kh * kp + m]);
          const std::int32_t* q = r + m * tap_step;
          a0 = _mm512_dpwssd_epi32(a0, _mm512_loadu_si512(q), w);
          a1 = _mm512_dpwssd_epi32(a1, _mm512_loadu_si512(q + 16), w);
          a2 = _mm512_dpwssd_epi32(a2, _mm512_loadu_si512(q + 32), w);
          a3 = _mm512_dpwssd_epi32(a3, _mm512_loadu_si512(q + 48), w);
        }
      }
      _mm512_storeu_si512(acc + ow, a0);
      _mm512_storeu_si512(acc + ow + 16, a1);
      _mm512_storeu_si512(acc + ow + 32, a2);
      _mm512_storeu_si512(acc + ow + 48, a3);
    }
    requantize_row(acc, wo, add, c.multiplier, c.out.zero_point, c.lo, c.hi, y + oh * wo);
  }
}
#endif

inline void depthwise_plane(const kernels::ConvGeometry& g, const IntConv& c,
                            const std::uint8_t* x, std::int64_t ch,
                            std::vector<std::int16_t>& pad,
                            std::vector<std::int32_t>& acc, std::uint8_t* y) {
  const std::int64_t ph = g.h + 2 * g.pad;
  // Even pitch plus one spare column so stride-2 rows read as int16 pairs.
  const std::int64_t pw = (g.w + 2 * g.pad + 2) / 2 * 2;
  pad.assign(static_cast<std::size_t>(ph * pw + 256), 0);
  const int zx = c.in.zero_point;
  for (std::int64_t i = 0; i < g.h; ++i) {
    std::int16_t* __restrict dst = pad.data() + (i + g.pad) * pw + g.pad;
    const std::uint8_t* __restrict src = x + i * g.w;
    for (std::int64_t j = 0; j < g.w; ++j) dst[j] = static_cast<std::int16_t>(src[j] - zx);
  }
  const std::int32_t* wt = c.wdw.data() + ch * g.k * g.k;
  const std::int32_t add = c.bias[ch];
#if defined(__AVX512VNNI__) && defined(__AVX512BW__)
  // Taps are consumed two at a time with vpdpwssd: each int32 lane of the
  // source holds (x[j], x[j+1]) and the weight word holds (w[kw], w[kw+1]).
  const std::int64_t kp = (g.k + 1) / 2;
  const bool vec_ok = (g.stride == 1 || g.stride == 2) && g.k * kp <= 64;
  std::int32_t wpair[64];
  for (std::int64_t kh = 0; kh < g.k && vec_ok; ++kh) {
    for (std::int64_t m = 0; m < kp; ++m) {
      const std::int64_t kw = 2 * m;
      const std::uint32_t w0 = static_cast<std::uint16_t>(wt[kh * g.k + kw]);
      const std::uint32_t w1 =
          kw + 1 < g.k ? static_cast<std::uint16_t>(wt[kh * g.k + kw + 1]) : 0u;
      wpair[kh * kp + m] = static_cast<std::int32_t>(w0 | (w1 << 16));
    }
  }
  const std::int32_t* src;
  std::int64_t row_step, tap_step;
  thread_local std::vector<std::int32_t> pairs;
  if (!vec_ok) {
    src = nullptr;
    row_step = tap_step = 0;
  } else if (g.stride == 1) {
    pairs.resize(static_cast<std::size_t>(ph * pw + 128));
    // pairs[j] = (pad[j], pad[j+1]); one lane permute per 16 pairs.
    alignas(64) static const std::uint16_t kIdx[32] = {
        0, 1, 1, 2, 2, 3, 3, 4, 4, 5, 5, 6, 6, 7, 7, 8,
        8, 9, 9, 10, 10, 11, 11, 12, 12, 13, 13, 14, 14, 15, 15, 16};
    const __m512i idx = _mm512_load_si512(kIdx);
    const std::int64_t n = ph * pw;
    for (std::int64_t j = 0; j < n; j += 16) {
      const __m512i v = _mm512_loadu_si512(pad.data() + j);
      _mm512_storeu_si512(pairs.data() + j, _mm512_permutexvar_epi16(idx, v));
    }
    src = pairs.data();
    row_step = pw;   // int32 units per input row
    tap_step = 2;    // next tap pair is two columns on
  } else {
    src = reinterpret_cast<const std::int32_t*>(pad.data());
    row_step = pw / 2;
    tap_step = 1;
  }
  if (vec_ok) {
    acc.resize(static_cast<std::size_t>(g.wo + 64));
    const auto run = [&](auto kconst) {
      constexpr int K = decltype(kconst)::value;
      const std::int64_t kk = K ? K : g.k, kpp = K ? (K + 1) / 2 : kp;
      dw_rows(src, row_step, tap_step, g.stride, kk, kpp, wpair, g.ho, g.wo, c, add,
              acc.data(), y);
    };
    if (g.k == 3) {
      run(std::integral_constant<int, 3>{});
    } else if (g.k == 5) {
      run(std::integral_constant<int, 5>{});
    } else {
      run(std::integral_constant<int, 0>{});
    }
  }
  if (vec_ok) return;
#endif
  acc.resize(static_cast<std::size_t>(g.wo));
  for (std::int64_t oh = 0; oh < g.ho; ++oh) {
    std::int32_t* a = acc.data();
    std::fill(a, a + g.wo, 0);
    for (std::int64_t kh = 0; kh < g.k; ++kh) {
      const std::int16_t* row = pad.data() + (oh * g.stride + kh) * pw;
      for (std::int64_t kw = 0; kw < g.k; ++kw) {
        const std::int32_t wv = wt[kh * g.k + kw];
        const std::int16_t* r = row + kw;
        for (std::int64_t ow = 0; ow < g.wo; ++ow) a[ow] += wv * r[ow * g.stride];
      }
    }
    requantize_row(a, g.wo, add, c.multiplier, c.out.zero_point, c.lo, c.hi,
                   y + oh * g.wo);
  }
}

/// Packs a [kdim][p] code matrix into [kpad/4][ppad][4] and sums columns.
inline void pack_columns(const std::uint8_t* src, std::int64_t kdim, std::int64_t p,
                         std::int64_t kpad, std::int64_t ppad,
                         std::vector<std::uint8_t>& packed,
                         std::vector<std::int32_t>& colsum) {
  packed.resize(static_cast<std::size_t>(kpad * ppad));
  colsum.assign(static_cast<std::size_t>(ppad), 0);
  static const std::uint8_t kZeros[16] = {};
  for (std::int64_t kb = 0; kb < kpad / 4; ++kb) {
    std::uint8_t* dst = packed.data() + kb * ppad * 4;
    const std::uint8_t* rows[4];
    for (int r = 0; r < 4; ++r) {
      const std::int64_t k = kb * 4 + r;
      rows[r] = k < kdim ? src + k * p : nullptr;
    }
    std::int64_t j = 0;
#if defined(__AVX512F__)
    for (; j + 16 <= p; j += 16) {
      __m128i v[4];
      for (int r = 0; r < 4; ++r) {
        v[r] = _mm_loadu_si128(reinterpret_cast<const __m128i*>(rows[r] ? rows[r] + j : kZeros));
      }
      const __m128i ab0 = _mm_unpacklo_epi8(v[0], v[1]), ab1 = _mm_unpackhi_epi8(v[0], v[1]);
      const __m128i cd0 = _mm_unpacklo_epi8(v[2], v[3]), cd1 = _mm_unpackhi_epi8(v[2], v[3]);
      __m128i* o = reinterpret_cast<__m128i*>(dst + j * 4);
      _mm_storeu_si128(o + 0, _mm_unpacklo_epi16(ab0, cd0));
      _mm_storeu_si128(o + 1, _mm_unpackhi_epi16(ab0, cd0));
      _mm_storeu_si128(o + 2, _mm_unpacklo_epi16(ab1, cd1));
      _mm_storeu_si128(o + 3, _mm_unpackhi_epi16(ab1, cd1));
    }
#endif
    for (; j < ppad; ++j) {
      for (int r = 0; r < 4; ++r) dst[j * 4 + r] = rows[r] && j < p ? rows[r][j] : 0;
    }
  }
  std::int64_t j0 = 0;
#if defined(__AVX512VNNI__)
  const __m512i ones = _mm512_set1_epi8(1);
  for (; j0 + 16 <= ppad; j0 += 16) {
    __m512i a = _mm512_setzero_si512();
    for (std::int64_t kb = 0; kb < kpad / 4; ++kb) {
      a = _mm512_dpbusd_epi32(a, _mm512_loadu_si512(packed.data() + (kb * ppad + j0) * 4),
                              ones);
    }
    _mm512_storeu_si512(colsum.data() + j0, a);
  }
#endif
  for (; j0 < ppad; ++j0) {
    for (std::int64_t kb = 0; kb < kpad / 4; ++kb) {
      for (int r = 0; r < 4; ++r) colsum[j0] += packed[(kb * ppad + j0) * 4 + r];
    }
  }
}

#if defined(__AVX512VNNI__)
template <int RO, int NP>
inline void vnni_tile(const IntConv& c, const std::uint8_t* xp, const std::int32_t* colsum,
                      std::int64_t ppad, std::int64_t o0, std::int64_t p0,
                      std::int64_t p, std::uint8_t* y) {
  __m512i acc[RO][NP];
  for (int r = 0; r < RO; ++r)
    for (int v = 0; v < NP; ++v) acc[r][v] = _mm512_setzero_si512();
  const std::int64_t k4 = c.kpad / 4;
  for (std::int64_t kb = 0; kb < k4; ++kb) {
    __m512i xv[NP];
    const std::uint8_t* xrow = xp + (kb * ppad + p0) * 4;
    for (int v = 0; v < NP; ++v) xv[v] = _mm512_loadu_si512(xrow + 64 * v);
    for (int r = 0; r < RO; ++r) {
      std::int32_t wbits;
      std::memcpy(&wbits, c.wpacked.data() + (o0 + r) * c.kpad + kb * 4, 4);
      const __m512i wb = _mm512_set1_epi32(wbits);
      for (int v = 0; v < NP; ++v) acc[r][v] = _mm512_dpbusd_epi32(acc[r][v], xv[v], wb);
    }
  }
  const __m512d vm = _mm512_set1_pd(c.multiplier);
  const __m512i vzo = _mm512_set1_epi32(c.out.zero_point);
  const __m512i vlo = _mm512_set1_epi32(c.lo), vhi = _mm512_set1_epi32(c.hi);
  const __m512i vzw = _mm512_set1_epi32(c.w.zero_point);
  const std::int32_t zx = c.in.zero_point;
  // zw * colsum is shared by every row of the tile.
  __m512i wcol[NP];
  for (int v = 0; v < NP; ++v) {
    wcol[v] = _mm512_mullo_epi32(vzw, _mm512_loadu_si512(colsum + p0 + 16 * v));
  }
  for (int r = 0; r < RO; ++r) {
    const std::int64_t oc = o0 + r;
    const std::int32_t base = c.bias[oc] - zx * c.wsum[oc] +
                              static_cast<std::int32_t>(c.kdim) * zx * c.w.zero_point;
    const __m512i vbase = _mm512_set1_epi32(base);
    for (int v = 0; v < NP; ++v) {
      const std::int64_t pj = p0 + 16 * v;
      if (pj >= p) break;
      __m512i a = _mm512_sub_epi32(acc[r][v], wcol[v]);
      a = _mm512_add_epi32(a, vbase);
      const __m128i q = requant16(a, vm, vzo, vlo, vhi);
      const std::int64_t left = p - pj;
      const __mmask16 mask = left >= 16 ? __mmask16(0xFFFF) : __mmask16((1u << left) - 1);
      _mm_mask_storeu_epi8(y + oc * p + pj, mask, q);
    }
  }
}
#endif

// Dense (non-depthwise) conv of one image-group given its [kdim][p] codes.
inline void dense_group(const IntConv& c, const std::uint8_t* cols, std::int64_t p,
                        std::int64_t o_begin, std::int64_t o_count, std::uint8_t* y) {
#if defined(__AVX512VNNI__)
  const std::int64_t ppad = (p + 15) / 16 * 16;
  std::vector<std::uint8_t> packed;
  std::vector<std::int32_t> colsum;
  pack_columns(cols, c.kdim, p, c.kpad, ppad, packed, colsum);
  constexpr int kRO = 4, kNP = 4;
  const std::int64_t pchunks = (ppad + 16 * kNP - 1) / (16 * kNP);
  const std::int64_t oblocks = (o_count + kRO - 1) / kRO;
  parallel_for(oblocks * pchunks, [&](std::int64_t lo, std::int64_t hi) {
    for (std::int64_t t = lo; t < hi; ++t) {
      // Column chunk outer so its packed codes stay in L1 across output blocks.
      const std::int64_t pc = t / oblocks, ob = t % oblocks;
      const std::int64_t o0 = o_begin + ob * kRO;
      const std::int64_t p0 = pc * 16 * kNP;
      const std::int64_t rows = std::min<std::int64_t>(kRO, o_begin + o_count - o0);
      const std::int64_t vecs = std::min<std::int64_t>(kNP, (ppad - p0) / 16);
      for (std::int64_t r = 0; r < rows;) {
        if (rows - r >= 4 && vecs == 4) {
          vnni_tile<4, 4>(c, packed.data(), colsum.data(), ppad, o0 + r, p0, p, y);
          r += 4;
        } else {
          for (std::int64_t v = 0; v < vecs; ++v) {
            vnni_tile<1, 1>(c, packed.data(), colsum.data(), ppad, o0 + r, p0 + 16 * v,
                            p, y);
          }
          r += 1;
        }
      }
    }
  });
#else
  const std::int32_t zx = c.in.zero_point, zw = c.w.zero_point;
  std::vector<std::int32_t> colsum(static_cast<std::size_t>(p), 0);
  for (std::int64_t k = 0; k < c.kdim; ++k)
    for (std::int64_t j = 0; j < p; ++j) colsum[j] += cols[k * p + j];
  parallel_for(o_count, [&](std::int64_t lo, std::int64_t hi) {
    std::vector<std::int32_t> acc(static_cast<std::size_t>(p));
    for (std::int64_t oc = o_begin + lo; oc < o_begin + hi; ++oc) {
      std::fill(acc.begin(), acc.end(), 0);
      const std::int8_t* wr = c.wq.data() + oc * c.kdim;
      for (std::int64_t k = 0; k < c.kdim; ++k) {
        const std::int32_t wv = wr[k];
        const std::uint8_t* xr = cols + k * p;
        for (std::int64_t j = 0; j < p; ++j) acc[j] += wv * xr[j];
      }
      for (std::int64_t j = 0; j < p; ++j) acc[j] -= zw * colsum[j];
      const std::int32_t base = c.bias[oc] - zx * c.wsum[oc] +
                                static_cast<std::int32_t>(c.kdim) * zx * zw;
      requantize_row(acc.data(), p, base, c.multiplier, c.out.zero_point, c.lo, c.hi,
                     y + oc * p);
    }
  });
#endif
}

// im2col on codes; out-of-image taps take the input zero point.
inline void im2col_codes(const kernels::ConvGeometry& g, const std::uint8_t* x,
                         std::uint8_t zx, std::uint8_t* col) {
  for (std::int64_t c = 0; c < g.cg(); ++c) {
    const std::uint8_t* plane = x + c * g.in_plane();
    for (std::int64_t kh = 0; kh < g.k; ++kh) {
      for (std::int64_t kw = 0; kw < g.k; ++kw) {
        std::uint8_t* row = col + ((c * g.k + kh) * g.k + kw) * g.out_plane();
        for (std::int64_t oh = 0; oh < g.ho; ++oh) {
          const std::int64_t ih = oh * g.stride - g.pad + kh;
          std::uint8_t* dst = row + oh * g.wo;
          for (std::int64_t ow = 0; ow < g.wo; ++ow) {
            const std::int64_t iw = ow * g.stride - g.pad + kw;
            dst[ow] = (ih >= 0 && ih < g.h && iw >= 0 && iw < g.w) ? plane[ih * g.w + iw] : zx;
          }
        }
      }
    }
  }
}

}  // namespace detail

inline QTensor int_conv2d(const QTensor& x, const IntConv& c) {
  if (x.stats.scale != c.in.scale || x.stats.zero_point != c.in.zero_point) {
    throw ContractError("int_conv2d: input statistics differ from the calibrated ones");
  }
  const auto g = detail::int_geometry(x, c);
  QTensor y{{g.n, g.o, g.ho, g.wo},
            std::vector<std::uint8_t>(static_cast<std::size_t>(g.n * g.o * g.out_plane())),
            c.out};
  const std::int64_t in_img = g.c * g.in_plane(), out_img = g.o * g.out_plane();
  if (c.depthwise()) {
    parallel_for(g.n * g.c, [&](std::int64_t lo, std::int64_t hi) {
      std::vector<std::int16_t> pad;
      std::vector<std::int32_t> acc;
      for (std::int64_t i = lo; i < hi; ++i) {
        detail::depthwise_plane(g, c, x.data.data() + i * g.in_plane(), i % g.c, pad, acc,
                                y.data.data() + i * g.out_plane());
      }
    });
    return y;
  }
  const std::int64_t p = g.out_plane();
  std::vector<std::uint8_t> col(g.pointwise() ? 0 : static_cast<std::size_t>(c.kdim * p));
  for (std::int64_t n = 0; n < g.n; ++n) {
    for (std::int64_t gi = 0; gi < g.groups; ++gi) {
      const std::uint8_t* xg = x.data.data() + n * in_img + gi * g.cg() * g.in_plane();
      const std::uint8_t* cols = xg;
      if (!g.pointwise()) {
        detail::im2col_codes(g, xg, static_cast<std::uint8_t>(c.in.zero_point), col.data());
        cols = col.data();
      }
      detail::dense_group(c, cols, p, gi * g.og(), g.og(), y.data.data() + n * out_img);
    }
  }
  return y;
}

/// Plain loops over sum (x - zx)(w - zw); the yardstick for the fast kernels.
inline QTensor int_conv2d_reference(const QTensor& x, const IntConv& c) {
  const auto g = detail::int_geometry(x, c);
  QTensor y{{g.n, g.o, g.ho, g.wo},
            std::vector<std::uint8_t>(static_cast<std::size_t>(g.n * g.o * g.out_plane())),
            c.out};
  const std::int32_t zx = c.in.zero_point, zw = c.w.zero_point;
  for (std::int64_t n = 0; n < g.n; ++n)
    for (std::int64_t oc = 0; oc < g.o; ++oc) {
      const std::int64_t gi = oc / g.og();
      for (std::int64_t oh = 0; oh < g.ho; ++oh)
        for (std::int64_t ow = 0; ow < g.wo; ++ow) {
          std::int64_t acc = c.bias[oc];
          for (std::int64_t ci = 0; ci < g.cg(); ++ci)
            for (std::int64_t kh = 0; kh < g.k; ++kh)
              for (std::int64_t kw = 0; kw < g.k; ++kw) {
                const std::int64_t ih = oh * g.stride - g.pad + kh;
                const std::int64_t iw = ow * g.stride - g.pad + kw;
                if (ih < 0 || ih >= g.h || iw < 0 || iw >= g.w) continue;
                const std::int32_t xv =
                    x.data[((n * g.c + gi * g.cg() + ci) * g.h + ih) * g.w + iw];
                const std::int32_t wv = c.wq[((oc * g.cg() + ci) * g.k + kh) * g.k + kw];
                acc += std::int64_t(xv - zx) * (wv - zw);
              }
          const double v = std::nearbyint(c.multiplier * double(acc)) + c.out.zero_point;
          y.data[((n * g.o + oc) * g.ho + oh) * g.wo + ow] = detail::clamp_u8(v, c.lo, c.hi);
        }
    }
  return y;
}

/// Requantizes codes onto another grid.
/// out[i] = lut[in[i]].
inline void lut_map(const std::uint8_t* in, std::int64_t n, const std::uint8_t* lut,
                    std::uint8_t* out) {
  std::int64_t i = 0;
#if defined(__AVX512VBMI__)
  const __m512i t0 = _mm512_loadu_si512(lut), t1 = _mm512_loadu_si512(lut + 64);
  const __m512i t2 = _mm512_loadu_si512(lut + 128), t3 = _mm512_loadu_si512(lut + 192);
  for (; i + 64 <= n; i += 64) {
    const __m512i v = _mm512_loadu_si512(in + i);
    const __m512i lo = _mm512_permutex2var_epi8(t0, v, t1);
    const __m512i hi = _mm512_permutex2var_epi8(t2, v, t3);
    const __mmask64 top = _mm512_movepi8_mask(v);
    _mm512_storeu_si512(out + i, _mm512_mask_blend_epi8(top, lo, hi));
  }
#endif
  for (; i < n; ++i) out[i] = lut[in[i]];
}

/// Table taking every code on `in` to its requantized code on `out`.
inline std::vector<std::uint8_t> requant_table(const QuantStats& in, const QuantStats& out) {
  std::int32_t codes[256];
  for (int q = 0; q < 256; ++q) codes[q] = q - in.zero_point;
  std::vector<std::uint8_t> lut(256);
  requantize_row(codes, 256, 0, in.scale / out.scale, out.zero_point, out.repr_min(),
                 out.repr_max(), lut.data());
  return lut;
}

inline QTensor requantize(const QTensor& x, const QuantStats& out) {
  if (x.stats == out) return x;
  QTensor y{x.shape, std::vector<std::uint8_t>(x.data.size()), out};
  const auto lut = requant_table(x.stats, out);
  lut_map(x.data.data(), x.numel(), lut.data(), y.data.data());
  return y;
}

inline QTensor int_add(const QTensor& a, const QTensor& b, const QuantStats& out) {
  if (a.shape != b.shape) {
    throw DimensionError("int_add", "shape", to_string(a.shape) + " vs " + to_string(b.shape));
  }
  QTensor y{a.shape, std::vector<std::uint8_t>(a.data.size()), out};
  const double ma = a.stats.scale / out.scale, mb = b.stats.scale / out.scale;
  const std::int32_t za = a.stats.zero_point, zb = b.stats.zero_point;
  const std::int64_t n = a.numel();
  std::int64_t i = 0;
#if defined(__AVX512F__)
  const __m512d vma = _mm512_set1_pd(ma), vmb = _mm512_set1_pd(mb);
  const __m256i vza = _mm256_set1_epi32(za), vzb = _mm256_set1_epi32(zb);
  const __m256i vzo = _mm256_set1_epi32(out.zero_point);
  const __m256i vlo = _mm256_set1_epi32(out.repr_min()), vhi = _mm256_set1_epi32(out.repr_max());
  for (; i + 8 <= n; i += 8) {
    const __m256i qa = _mm256_sub_epi32(
        _mm256_cvtepu8_epi32(_mm_loadl_epi64(reinterpret_cast<const __m128i*>(a.data.data() + i))), vza);
    const __m256i qb = _mm256_sub_epi32(
        _mm256_cvtepu8_epi32(_mm_loadl_epi64(reinterpret_cast<const __m128i*>(b.data.data() + i))), vzb);
    const __m512d s = _mm512_add_pd(_mm512_mul_pd(_mm512_cvtepi32_pd(qa), vma),
                                    _mm512_mul_pd(_mm512_cvtepi32_pd(qb), vmb));
    __m256i r = _mm512_cvt_roundpd_epi32(s, _MM_FROUND_TO_NEAREST_INT | _MM_FROUND_NO_EXC);
    r = _mm256_min_epi32(_mm256_max_epi32(_mm256_add_epi32(r, vzo), vlo), vhi);
    _mm_storel_epi64(reinterpret_cast<__m128i*>(y.data.data() + i), _mm256_cvtepi32_epi8(r));
  }
#endif
  for (; i < n; ++i) {
    const double s = ma * (a.data[i] - za) + mb * (b.data[i] - zb);
    y.data[i] = detail::clamp_u8(std::nearbyint(s) + out.zero_point, out.repr_min(),
                                 out.repr_max());
  }
  return y;
}

inline QTensor int_concat(const std::vector<const QTensor*>& xs, const QuantStats& out) {
  if (xs.empty()) throw ContractError("int_concat: no inputs");
  Shape s = xs[0]->shape;
  std::int64_t c = 0;
  for (const auto* x : xs) {
    if (x->shape[0] != s[0] || x->shape[2] != s[2] || x->shape[3] != s[3]) {
      throw DimensionError("int_concat", "height", to_string(x->shape));
    }
    c += x->shape[1];
  }
  s[1] = c;
  QTensor y{s, std::vector<std::uint8_t>(static_cast<std::size_t>(numel(s))), out};
  const std::int64_t plane = s[2] * s[3];
  std::int64_t off = 0;
  for (const auto* x : xs) {
    const std::int64_t chunk = x->shape[1] * plane;
    const bool same = x->stats == out;
    const auto lut = same ? std::vector<std::uint8_t>{} : requant_table(x->stats, out);
    for (std::int64_t n = 0; n < s[0]; ++n) {
      std::uint8_t* dst = y.data.data() + n * c * plane + off;
      const std::uint8_t* src = x->data.data() + n * chunk;
      if (same) {
        std::memcpy(dst, src, static_cast<std::size_t>(chunk));
      } else {
        lut_map(src, chunk, lut.data(), dst);
      }
    }
    off += chunk;
  }
  return y;
}

inline QTensor int_maxpool(const QTensor& x, std::int64_t k, std::int64_t stride) {
  const std::int64_t n = x.dim(0), c = x.dim(1), h = x.dim(2), w = x.dim(3);
  if (k > h || k > w) throw DimensionError("int_maxpool", "kernel", to_string(x.shape));
  const std::int64_t ho = (h - k) / stride + 1, wo = (w - k) / stride + 1;
  QTensor y{{n, c, ho, wo}, std::vector<std::uint8_t>(static_cast<std::size_t>(n * c * ho * wo)),
            x.stats};
  for (std::int64_t i = 0; i < n * c; ++i) {
    const std::uint8_t* p = x.data.data() + i * h * w;
    std::uint8_t* q = y.data.data() + i * ho * wo;
    for (std::int64_t oh = 0; oh < ho; ++oh)
      for (std::int64_t ow = 0; ow < wo; ++ow) {
        std::uint8_t m = 0;
        for (std::int64_t a = 0; a < k; ++a)
          for (std::int64_t b = 0; b < k; ++b)
            m = std::max(m, p[(oh * stride + a) * w + ow * stride + b]);
        q[oh * wo + ow] = m;
      }
  }
  return y;
}

/// Mean per plane, kept on the input grid.
inline QTensor int_global_avgpool(const QTensor& x) {
  const std::int64_t n = x.dim(0), c = x.dim(1), plane = x.dim(2) * x.dim(3);
  QTensor y{{n, c, 1, 1}, std::vector<std::uint8_t>(static_cast<std::size_t>(n * c)), x.stats};
  for (std::int64_t i = 0; i < n * c; ++i) {
    const std::uint8_t* __restrict p = x.data.data() + i * plane;
    std::int64_t s = 0;
    // uint32 partials cannot overflow inside a 2^23-element block.
    for (std::int64_t b = 0; b < plane; b += std::int64_t{1} << 23) {
      const std::int64_t e = std::min(plane, b + (std::int64_t{1} << 23));
      std::uint32_t part = 0;
      for (std::int64_t j = b; j < e; ++j) part += p[j];
      s += part;
    }
    const double mean = double(s - plane * x.stats.zero_point) / double(plane);
    y.data[i] = detail::clamp_u8(std::nearbyint(mean) + x.stats.zero_point, 0, 255);
  }
  return y;
}

/// Elementwise map through a 256-entry table built from a float function.
template <class F>
std::vector<std::uint8_t> build_lut(const QuantStats& in, const QuantStats& out, F fn) {
  std::vector<std::uint8_t> lut(256);
  for (int q = 0; q < 256; ++q) {
    lut[q] = static_cast<std::uint8_t>(quantize_value(fn(dequantize_value(q, in)), out));
  }
  return lut;
}

inline QTensor int_lut(const QTensor& x, const std::vector<std::uint8_t>& lut,
                       const QuantStats& out) {
  QTensor y{x.shape, std::vector<std::uint8_t>(x.data.size()), out};
  lut_map(x.data.data(), x.numel(), lut.data(), y.data.data());
  return y;
}

/// x[N,C,H,W] * gate[N,C,1,1] with the product requantized onto `out`.
inline QTensor int_mul_channels(const QTensor& x, const QTensor& gate, const QuantStats& out) {
  const std::int64_t n = x.dim(0), c = x.dim(1), plane = x.dim(2) * x.dim(3);
  if (gate.numel() != n * c) {
    throw DimensionError("int_mul_channels", "gate", to_string(gate.shape));
  }
  QTensor y{x.shape, std::vector<std::uint8_t>(x.data.size()), out};
  std::vector<std::int32_t> tmp(static_cast<std::size_t>(plane));
  for (std::int64_t i = 0; i < n * c; ++i) {
    const double g = dequantize_value(gate.data[i], gate.stats);
    const double m = x.stats.scale * g / out.scale;
    const std::uint8_t* p = x.data.data() + i * plane;
    for (std::int64_t j = 0; j < plane; ++j) tmp[j] = p[j] - x.stats.zero_point;
    requantize_row(tmp.data(), plane, 0, m, out.zero_point, out.repr_min(), out.repr_max(),
                   y.data.data() + i * plane);
  }
  return y;
}

}  // namespace frostq::quant
