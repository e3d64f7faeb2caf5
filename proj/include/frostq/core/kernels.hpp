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

// Raw float kernels behind the autograd operators. Dense matrix products are
// delegated to Eigen; everything else is written out directly.

#include <Eigen/Core>

#include <algorithm>
#include <cmath>
#include <cstdint>
#include <limits>
#include <vector>

#include "frostq/core/parallel.hpp"
#include "frostq/core/tensor.hpp"

namespace frostq::kernels {

template <class T>
using MatR = Eigen::Matrix<T, Eigen::Dynamic, Eigen::Dynamic, Eigen::RowMajor>;
template <class T>
using MapR = Eigen::Map<MatR<T>>;
template <class T>
using CMapR = Eigen::Map<const MatR<T>>;

// Double sums with eight interleaved partials so the loop vectorizes; the
// association order is fixed, so results stay reproducible.
template <class T>
double lane_sum(const T* p, std::int64_t n) {
  double acc[8] = {};
  std::int64_t i = 0;
  for (; i + 8 <= n; i += 8)
    for (int l = 0; l < 8; ++l) acc[l] += static_cast<double>(p[i + l]);
  for (; i < n; ++i) acc[i & 7] += static_cast<double>(p[i]);
  return ((acc[0] + acc[4]) + (acc[1] + acc[5])) + ((acc[2] + acc[6]) + (acc[3] + acc[7]));
}

template <class T>
double lane_dot(const T* a, const T* b, std::int64_t n) {
  double acc[8] = {};
  std::int64_t i = 0;
  for (; i + 8 <= n; i += 8)
    for (int l = 0; l < 8; ++l)
      acc[l] += static_cast<double>(a[i + l]) * static_cast<double>(b[i + l]);
  for (; i < n; ++i) acc[i & 7] += static_cast<double>(a[i]) * static_cast<double>(b[i]);
  return ((acc[0] + acc[4]) + (acc[1] + acc[5])) + ((acc[2] + acc[6]) + (acc[3] + acc[7]));
}

/// Sum of (p[i] - mean)^2.
template <class T>
double lane_sq_dev(const T* p, std::int64_t n, double mean) {
  double acc[8] = {};
  std::int64_t i = 0;
  for (; i + 8 <= n; i += 8)
    for (int l = 0; l < 8; ++l) {
      const double d = static_cast<double>(p[i + l]) - mean;
      acc[l] += d * d;
    }
  for (; i < n; ++i) {
    const double d = static_cast<double>(p[i]) - mean;
    acc[i & 7] += d * d;
  }
  return ((acc[0] + acc[4]) + (acc[1] + acc[5])) + ((acc[2] + acc[6]) + (acc[3] + acc[7]));
}

struct ConvGeometry {
  std::int64_t n, c, h, w;   // input
  std::int64_t o, k;         // output channels, square kernel size
  std::int64_t stride, pad, groups;
  std::int64_t ho, wo;

  std::int64_t cg() const { return c / groups; }
  std::int64_t og() const { return o / groups; }
  std::int64_t in_plane() const { return h * w; }
  std::int64_t out_plane() const { return ho * wo; }
  bool depthwise() const { return groups == c && groups == o && groups > 1; }
  bool pointwise() const { return k == 1 && stride == 1 && pad == 0; }
};

inline ConvGeometry conv_geometry(const Shape& x, const Shape& w,
                                  std::int64_t stride, std::int64_t pad,
                                  std::int64_t groups) {
  require_rank("conv2d", x, 4, "input");
  require_rank("conv2d", w, 4, "weight");
  if (groups < 1 || x[1] % groups != 0) {
    throw DimensionError("conv2d", "channels",
                         "input channels " + std::to_string(x[1]) +
                             " not divisible by groups " +
                             std::to_string(groups));
  }
  if (w[0] % groups != 0) {
    throw DimensionError("conv2d", "out_channels",
                         "output channels " + std::to_string(w[0]) +
                             " not divisible by groups " +
                             std::to_string(groups));
  }
  if (w[1] != x[1] / groups) {
    throw DimensionError("conv2d", "channels",
                         "weight expects " + std::to_string(w[1]) +
                             " channels per group, input has " +
                             std::to_string(x[1] / groups));
  }
  if (w[2] != w[3]) {
    throw DimensionError("conv2d", "kernel",
                         "kernel must be square, got " + to_string(w));
  }
  if (stride < 1 || pad < 0) {
    throw DimensionError("conv2d", "stride", "stride must be >= 1, pad >= 0");
  }
  ConvGeometry g{x[0], x[1], x[2], x[3], w[0], w[2], stride, pad, groups, 0, 0};
  if (g.h + 2 * pad < g.k || g.w + 2 * pad < g.k) {
    throw DimensionError("conv2d", "height",
                         "kernel " + std::to_string(g.k) +
                             " larger than padded input " + to_string(x));
  }
  g.ho = (g.h + 2 * pad - g.k) / stride + 1;
  g.wo = (g.w + 2 * pad - g.k) / stride + 1;
  return g;
}

/// Unfolds one group of one image into a (cg*k*k) x (ho*wo) matrix.
template <class T>
void im2col(const ConvGeometry& g, const T* x, T* col) {
  const std::int64_t k = g.k;
  for (std::int64_t c = 0; c < g.cg(); ++c) {
    const T* plane = x + c * g.in_plane();
    for (std::int64_t kh = 0; kh < k; ++kh) {
      for (std::int64_t kw = 0; kw < k; ++kw) {
        T* row = col + ((c * k + kh) * k + kw) * g.out_plane();
        for (std::int64_t oh = 0; oh < g.ho; ++oh) {
          const std::int64_t ih = oh * g.stride - g.pad + kh;
          T* dst = row + oh * g.wo;
          if (ih < 0 || ih >= g.h) {
            std::fill(dst, dst + g.wo, T{0});
            continue;
          }
          const T* src = plane + ih * g.w;
          for (std::int64_t ow = 0; ow < g.wo; ++ow) {
            const std::int64_t iw = ow * g.stride - g.pad + kw;
            dst[ow] = (iw >= 0 && iw < g.w) ? src[iw] : T{0};
          }
        }
      }
    }
  }
}

template <class T>
void col2im(const ConvGeometry& g, const T* col, T* dx) {
  const std::int64_t k = g.k;
  for (std::int64_t c = 0; c < g.cg(); ++c) {
    T* plane = dx + c * g.in_plane();
    for (std::int64_t kh = 0; kh < k; ++kh) {
      for (std::int64_t kw = 0; kw < k; ++kw) {
        const T* row = col + ((c * k + kh) * k + kw) * g.out_plane();
        for (std::int64_t oh = 0; oh < g.ho; ++oh) {
          const std::int64_t ih = oh * g.stride - g.pad + kh;
          if (ih < 0 || ih >= g.h) continue;
          T* dst = plane + ih * g.w;
          const T* src = row + oh * g.wo;
          for (std::int64_t ow = 0; ow < g.wo; ++ow) {
            const std::int64_t iw = ow * g.stride - g.pad + kw;
            if (iw >= 0 && iw < g.w) dst[iw] += src[ow];
          }
        }
      }
    }
  }
}

// Copies a plane into a zero-bordered scratch buffer of (h+2p) x (w+2p),
// with `slack` trailing zeros so whole-plane sweeps may overrun a row.
template <class T>
const T* padded_plane(const ConvGeometry& g, const T* x, std::vector<T>& buf,
                      std::int64_t slack = 0) {
  if (g.pad == 0 && slack == 0) return x;
  const std::int64_t wp = g.w + 2 * g.pad, hp = g.h + 2 * g.pad;
  buf.assign(static_cast<std::size_t>(hp * wp + slack), T{0});
  for (std::int64_t r = 0; r < g.h; ++r) {
    std::copy(x + r * g.w, x + (r + 1) * g.w, buf.data() + (r + g.pad) * wp + g.pad);
  }
  return buf.data();
}

// Stride-1 planes are swept as one run of ho*wp outputs laid out with the
// padded row pitch; the columns past wo are junk and get dropped.
template <class T>
void depthwise_forward_plane(const ConvGeometry& g, const T* x, const T* wt,
                             T bias, T* y) {
  thread_local std::vector<T> buf, acc;
  const std::int64_t wp = g.w + 2 * g.pad, s = g.stride, wo = g.wo;
  if (s == 1) {
    const T* xp = padded_plane(g, x, buf, g.k);
    const std::int64_t run = g.ho * wp;
    acc.assign(static_cast<std::size_t>(run), bias);
    T* __restrict a = acc.data();
    for (std::int64_t kh = 0; kh < g.k; ++kh) {
      for (std::int64_t kw = 0; kw < g.k; ++kw) {
        const T wv = wt[kh * g.k + kw];
        const T* __restrict src = xp + kh * wp + kw;
        for (std::int64_t i = 0; i < run; ++i) a[i] += wv * src[i];
      }
    }
    for (std::int64_t oh = 0; oh < g.ho; ++oh) {
      std::copy(a + oh * wp, a + oh * wp + wo, y + oh * wo);
    }
    return;
  }
  const T* xp = padded_plane(g, x, buf);
  for (std::int64_t oh = 0; oh < g.ho; ++oh) {
    T* __restrict yrow = y + oh * wo;
    std::fill(yrow, yrow + wo, bias);
    for (std::int64_t kh = 0; kh < g.k; ++kh) {
      const T* __restrict prow = xp + (oh * s + kh) * wp;
      for (std::int64_t kw = 0; kw < g.k; ++kw) {
        const T wv = wt[kh * g.k + kw];
        const T* __restrict src = prow + kw;
        for (std::int64_t ow = 0; ow < wo; ++ow) yrow[ow] += wv * src[ow * s];
      }
    }
  }
}

template <class T>
void depthwise_backward_plane(const ConvGeometry& g, const T* x, const T* wt,
                              const T* dy, T* dx, T* dw) {
  thread_local std::vector<T> buf, dbuf, dyp;
  const std::int64_t wp = g.w + 2 * g.pad, hp = g.h + 2 * g.pad;
  const std::int64_t s = g.stride, wo = g.wo;
  if (s == 1) {
    // dy re-laid with the padded pitch, zeros in the junk columns.
    const std::int64_t run = g.ho * wp;
    dyp.assign(static_cast<std::size_t>(run), T{0});
    for (std::int64_t oh = 0; oh < g.ho; ++oh) {
      std::copy(dy + oh * wo, dy + (oh + 1) * wo, dyp.data() + oh * wp);
    }
    if (dw) {
      const T* xp = padded_plane(g, x, buf, g.k);
      for (std::int64_t kh = 0; kh < g.k; ++kh)
        for (std::int64_t kw = 0; kw < g.k; ++kw)
          dw[kh * g.k + kw] += static_cast<T>(lane_dot(dyp.data(), xp + kh * wp + kw, run));
    }
    if (dx) {
      dbuf.assign(static_cast<std::size_t>(hp * wp + g.k), T{0});
      const T* __restrict d = dyp.data();
      for (std::int64_t kh = 0; kh < g.k; ++kh) {
        for (std::int64_t kw = 0; kw < g.k; ++kw) {
          const T wv = wt[kh * g.k + kw];
          T* __restrict dst = dbuf.data() + kh * wp + kw;
          for (std::int64_t i = 0; i < run; ++i) dst[i] += wv * d[i];
        }
      }
    }
  } else {
    if (dw) {
      const T* xp = padded_plane(g, x, buf);
      for (std::int64_t kh = 0; kh < g.k; ++kh) {
        for (std::int64_t kw = 0; kw < g.k; ++kw) {
          double acc = 0.0;
          for (std::int64_t oh = 0; oh < g.ho; ++oh) {
            const T* src = xp + (oh * s + kh) * wp + kw;
            const T* dyrow = dy + oh * wo;
            for (std::int64_t ow = 0; ow < wo; ++ow)
              acc += static_cast<double>(dyrow[ow]) * static_cast<double>(src[ow * s]);
          }
          dw[kh * g.k + kw] += static_cast<T>(acc);
        }
      }
    }
    if (dx) {
      dbuf.assign(static_cast<std::size_t>(hp * wp), T{0});
      for (std::int64_t oh = 0; oh < g.ho; ++oh) {
        const T* __restrict dyrow = dy + oh * wo;
        for (std::int64_t kh = 0; kh < g.k; ++kh) {
          T* __restrict drow = dbuf.data() + (oh * s + kh) * wp;
          for (std::int64_t kw = 0; kw < g.k; ++kw) {
            const T wv = wt[kh * g.k + kw];
            T* __restrict dst = drow + kw;
            for (std::int64_t ow = 0; ow < wo; ++ow) dst[ow * s] += wv * dyrow[ow];
          }
        }
      }
    }
  }
  if (dx) {
    for (std::int64_t r = 0; r < g.h; ++r) {
      const T* __restrict src = dbuf.data() + (r + g.pad) * wp + g.pad;
      T* __restrict dst = dx + r * g.w;
      for (std::int64_t c = 0; c < g.w; ++c) dst[c] += src[c];
    }
  }
}

/// y = conv(x, w) + b. `b` may be null.
template <class T>
void conv2d_forward(const ConvGeometry& g, const T* x, const T* w, const T* b,
                    T* y) {
  const std::int64_t in_img = g.c * g.in_plane();
  const std::int64_t out_img = g.o * g.out_plane();
  if (g.depthwise()) {
    parallel_for(g.n * g.c, [&](std::int64_t lo, std::int64_t hi) {
      for (std::int64_t i = lo; i < hi; ++i) {
        const std::int64_t c = i % g.c;
        depthwise_forward_plane(g, x + i * g.in_plane(), w + c * g.k * g.k,
                                b ? b[c] : T{0}, y + i * g.out_plane());
      }
    });
    return;
  }
  const std::int64_t kdim = g.cg() * g.k * g.k;
  const std::int64_t p = g.out_plane();
  std::vector<T> col(g.pointwise() ? 0 : static_cast<std::size_t>(kdim * p));
  // Row blocks of the output give every thread independent work at batch 1.
  // The split is fixed: Eigen's blocking depends on the block shape, so a
  // thread-dependent split would change results with the thread count.
  constexpr std::int64_t kRowBlocks = 4;
  const std::int64_t rows_per = std::max<std::int64_t>(8, (g.og() + kRowBlocks - 1) / kRowBlocks);
  const std::int64_t blocks = (g.og() + rows_per - 1) / rows_per;
  for (std::int64_t n = 0; n < g.n; ++n) {
    for (std::int64_t gi = 0; gi < g.groups; ++gi) {
      const T* xg = x + n * in_img + gi * g.cg() * g.in_plane();
      const T* rhs = xg;
      if (!g.pointwise()) {
        im2col(g, xg, col.data());
        rhs = col.data();
      }
      T* yg = y + n * out_img + gi * g.og() * p;
      const T* wg = w + gi * g.og() * kdim;
      parallel_for(blocks, [&](std::int64_t lo, std::int64_t hi) {
        for (std::int64_t bi = lo; bi < hi; ++bi) {
          const std::int64_t r0 = bi * rows_per;
          const std::int64_t rows = std::min(rows_per, g.og() - r0);
          CMapR<T> A(wg + r0 * kdim, rows, kdim);
          CMapR<T> B(rhs, kdim, p);
          MapR<T> C(yg + r0 * p, rows, p);
          C.noalias() = A * B;
          if (b) {
            for (std::int64_t r = 0; r < rows; ++r) {
              C.row(r).array() += b[gi * g.og() + r0 + r];
            }
          }
        }
      });
    }
  }
}

/// Accumulates gradients. Any of dx, dw, db may be null.
template <class T>
void conv2d_backward(const ConvGeometry& g, const T* x, const T* w,
                     const T* dy, T* dx, T* dw, T* db) {
  const std::int64_t in_img = g.c * g.in_plane();
  const std::int64_t out_img = g.o * g.out_plane();
  const std::int64_t p = g.out_plane();
  if (db) {
    for (std::int64_t n = 0; n < g.n; ++n) {
      for (std::int64_t o = 0; o < g.o; ++o) {
        const T* row = dy + n * out_img + o * p;
        db[o] += static_cast<T>(lane_sum(row, p));
      }
    }
  }
  if (g.depthwise()) {
    for (std::int64_t n = 0; n < g.n; ++n) {
      for (std::int64_t c = 0; c < g.c; ++c) {
        const std::int64_t i = n * g.c + c;
        depthwise_backward_plane(g, x + i * g.in_plane(), w + c * g.k * g.k,
                                 dy + i * p, dx ? dx + i * g.in_plane() : nullptr,
                                 dw ? dw + c * g.k * g.k : nullptr);
      }
    }
    return;
  }
  const std::int64_t kdim = g.cg() * g.k * g.k;
  std::vector<T> col(g.pointwise() ? 0 : static_cast<std::size_t>(kdim * p));
  std::vector<T> dcol(static_cast<std::size_t>(kdim * p));
  for (std::int64_t n = 0; n < g.n; ++n) {
    for (std::int64_t gi = 0; gi < g.groups; ++gi) {
      const T* xg = x + n * in_img + gi * g.cg() * g.in_plane();
      const T* dyg = dy + n * out_img + gi * g.og() * p;
      const T* wg = w + gi * g.og() * kdim;
      CMapR<T> DY(dyg, g.og(), p);
      if (dw) {
        const T* rhs = xg;
        if (!g.pointwise()) {
          im2col(g, xg, col.data());
          rhs = col.data();
        }
        CMapR<T> B(rhs, kdim, p);
        MapR<T> DW(dw + gi * g.og() * kdim, g.og(), kdim);
        DW.noalias() += DY * B.transpose();
      }
      if (dx) {
        T* dxg = dx + n * in_img + gi * g.cg() * g.in_plane();
        CMapR<T> W(wg, g.og(), kdim);
        if (g.pointwise()) {
          MapR<T> DX(dxg, kdim, p);
          DX.noalias() += W.transpose() * DY;
        } else {
          MapR<T> DC(dcol.data(), kdim, p);
          DC.noalias() = W.transpose() * DY;
          col2im(g, dcol.data(), dxg);
        }
      }
    }
  }
}

}  // namespace frostq::kernels
