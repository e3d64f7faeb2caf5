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

// Per-tensor affine 8-bit quantization parameters and range observers.

#include <algorithm>
#include <cmath>
#include <cstdint>
#include <limits>
#include <string>
#include <vector>

#include "frostq/core/error.hpp"
#include "frostq/core/tensor.hpp"

namespace frostq::quant {

enum class Signedness { kSigned, kUnsigned };

inline const char* to_string(Signedness s) {
  return s == Signedness::kSigned ? "signed" : "unsigned";
}

using frostq::to_string;

inline int qmin(Signedness s) { return s == Signedness::kSigned ? -128 : 0; }
inline int qmax(Signedness s) { return s == Signedness::kSigned ? 127 : 255; }

/// Range statistics plus the affine map they imply. Values are kept in
/// double so the integer and simulated paths see the same scale.
struct QuantStats {
  double min_val = 0.0;
  double max_val = 0.0;
  double scale = 1.0;
  std::int32_t zero_point = 0;
  int bit_width = 8;
  Signedness signedness = Signedness::kUnsigned;

  int repr_min() const { return qmin(signedness); }
  int repr_max() const { return qmax(signedness); }

  bool operator==(const QuantStats&) const = default;
};

/// Widens [min_val, max_val] to contain 0 and derives scale / zero point.
inline QuantStats compute_qparams(double min_val, double max_val,
                                  Signedness signedness) {
  if (std::isnan(min_val) || std::isnan(max_val)) {
    throw Error("compute_qparams: NaN range");
  }
  if (!std::isfinite(min_val) || !std::isfinite(max_val)) {
    throw Error("compute_qparams: infinite range");
  }
  if (max_val < min_val) {
    throw ContractError("compute_qparams: max " + std::to_string(max_val) +
                        " below min " + std::to_string(min_val));
  }
  QuantStats s;
  s.signedness = signedness;
  s.min_val = std::min(min_val, 0.0);
  s.max_val = std::max(max_val, 0.0);
  const int lo = qmin(signedness), hi = qmax(signedness);
  if (s.max_val == s.min_val) {
    // Only reachable at exactly zero once the range is widened.
    s.scale = 1.0;
    s.zero_point = signedness == Signedness::kSigned ? 0 : lo;
    return s;
  }
  s.scale = (s.max_val - s.min_val) / static_cast<double>(hi - lo);
  if (!(s.scale > 0.0)) s.scale = std::numeric_limits<double>::min();
  const double zp = static_cast<double>(lo) - std::nearbyint(s.min_val / s.scale);
  s.zero_point = static_cast<std::int32_t>(std::clamp(zp, double(lo), double(hi)));
  return s;
}

inline int quantize_value(double x, const QuantStats& s) {
  const double q = std::nearbyint(x / s.scale) + s.zero_point;
  if (!(q >= s.repr_min())) return s.repr_min();  // also catches NaN
  if (q > s.repr_max()) return s.repr_max();
  return static_cast<int>(q);
}

inline double dequantize_value(int q, const QuantStats& s) {
  return s.scale * static_cast<double>(q - s.zero_point);
}

/// Integer codes as int32 so signed and unsigned stats share one container.
template <class T>
std::vector<std::int32_t> quantize(const Tensor<T>& x, const QuantStats& s) {
  std::vector<std::int32_t> q(static_cast<std::size_t>(x.numel()));
  const T* d = x.data();
  for (std::size_t i = 0; i < q.size(); ++i) q[i] = quantize_value(double(d[i]), s);
  return q;
}

template <class T>
Tensor<T> dequantize(const std::vector<std::int32_t>& q, const Shape& shape,
                     const QuantStats& s) {
  Tensor<T> out(shape);
  if (static_cast<std::int64_t>(q.size()) != out.numel()) {
    throw DimensionError("dequantize", "shape",
                         std::to_string(q.size()) + " codes for " + to_string(shape));
  }
  for (std::size_t i = 0; i < q.size(); ++i) {
    out[static_cast<std::int64_t>(i)] = static_cast<T>(dequantize_value(q[i], s));
  }
  return out;
}

/// dequantize(quantize(x)) without autograd.
template <class T>
Tensor<T> fake_quantize_values(const Tensor<T>& x, const QuantStats& s) {
  Tensor<T> out(x.shape());
  const T* __restrict d = x.data();
  T* __restrict o = out.data();
  // Same arithmetic as quantize_value/dequantize_value, in a form that
  // vectorizes: clamp(round(x / scale)) on the zero-point-shifted grid.
  const double lo = s.repr_min() - s.zero_point, hi = s.repr_max() - s.zero_point;
  const double scale = s.scale;
  const std::int64_t n = x.numel();
  for (std::int64_t i = 0; i < n; ++i) {
    double q = std::nearbyint(static_cast<double>(d[i]) / scale);
    q = q >= lo ? q : lo;  // NaN lands on lo
    q = q > hi ? hi : q;
    o[i] = static_cast<T>(scale * q);
  }
  return out;
}

template <class T>
std::pair<double, double> min_max(const Tensor<T>& x) {
  if (x.numel() == 0) throw ContractError("min_max: empty tensor");
  const T* __restrict d = x.data();
  const std::int64_t n = x.numel();
  constexpr int L = 16;
  T lo[L], hi[L];
  int nan[L] = {};
  for (int l = 0; l < L; ++l) lo[l] = hi[l] = d[0];
  std::int64_t i = 0;
  for (; i + L <= n; i += L) {
    for (int l = 0; l < L; ++l) {
      const T v = d[i + l];
      nan[l] |= v != v;
      lo[l] = v < lo[l] ? v : lo[l];
      hi[l] = v > hi[l] ? v : hi[l];
    }
  }
  for (; i < n; ++i) {
    const T v = d[i];
    nan[0] |= v != v;
    lo[0] = v < lo[0] ? v : lo[0];
    hi[0] = v > hi[0] ? v : hi[0];
  }
  for (int l = 1; l < L; ++l) {
    nan[0] |= nan[l];
    lo[0] = std::min(lo[0], lo[l]);
    hi[0] = std::max(hi[0], hi[l]);
  }
  if (nan[0]) throw Error("min_max: NaN in tensor");
  return {double(lo[0]), double(hi[0])};
}

/// Weight statistics straight from the current values.
template <class T>
QuantStats weight_qparams(const Tensor<T>& w) {
  const auto [lo, hi] = min_max(w);
  return compute_qparams(lo, hi, Signedness::kSigned);
}

enum class ObserverMode { kMovingAverage, kAbsoluteMinMax };

inline const char* to_string(ObserverMode m) {
  return m == ObserverMode::kMovingAverage ? "moving_average" : "absolute_min_max";
}

/// Running activation range. The first batch sets the range outright, later
/// batches blend in with constant c (moving-average) or widen it (min-max).
class Observer {
 public:
  explicit Observer(double averaging = 0.01,
                    ObserverMode mode = ObserverMode::kMovingAverage,
                    Signedness signedness = Signedness::kUnsigned)
      : c_(averaging), mode_(mode), signedness_(signedness) {
    if (!(averaging > 0.0 && averaging <= 1.0)) {
      throw ContractError("Observer: averaging constant must lie in (0, 1]");
    }
  }

  template <class T>
  void observe(const Tensor<T>& batch) {
    if (frozen_) return;
    const auto [lo, hi] = min_max(batch);
    update(lo, hi);
  }

  void update(double lo, double hi) {
    if (frozen_) return;
    if (count_ == 0) {
      min_ = lo;
      max_ = hi;
    } else if (mode_ == ObserverMode::kMovingAverage) {
      min_ = (1.0 - c_) * min_ + c_ * lo;
      max_ = (1.0 - c_) * max_ + c_ * hi;
    } else {
      min_ = std::min(min_, lo);
      max_ = std::max(max_, hi);
    }
    min_ = std::min(min_, 0.0);
    max_ = std::max(max_, 0.0);
    ++count_;
  }

  QuantStats stats() const {
    if (count_ == 0) throw ContractError("Observer: no batches observed");
    return compute_qparams(min_, max_, signedness_);
  }

  /// Installs a range directly (checkpoint reload).
  void restore(double lo, double hi, std::int64_t count) {
    min_ = lo;
    max_ = hi;
    count_ = count;
  }

  void reset() {
    count_ = 0;
    min_ = max_ = 0.0;
    frozen_ = false;
  }
  void freeze() { frozen_ = true; }
  void unfreeze() { frozen_ = false; }

  bool frozen() const { return frozen_; }
  std::int64_t count() const { return count_; }
  double min_val() const { return min_; }
  double max_val() const { return max_; }
  double averaging() const { return c_; }
  ObserverMode mode() const { return mode_; }
  void set_averaging(double c) { c_ = c; }
  void set_mode(ObserverMode m) { mode_ = m; }

 private:
  double c_;
  ObserverMode mode_;
  Signedness signedness_;
  double min_ = 0.0, max_ = 0.0;
  std::int64_t count_ = 0;
  bool frozen_ = false;
};

}  // namespace frostq::quant
