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

#include "frostq/core/autograd.hpp"
#include "frostq/core/ops.hpp"
#include "frostq/quant/qparams.hpp"

namespace frostq::quant {

/// dequantize(quantize(x)); backward passes the upstream gradient where
/// min_val <= x <= max_val and blocks it elsewhere.
template <class T>
Var<T> fake_quantize(Tape<T>& tape, const Var<T>& x, const QuantStats& s) {
  auto out = make_var(fake_quantize_values(x->value, s), tape.needs(x));
  if (out->requires_grad) {
    tape.push([x, out, lo = s.min_val, hi = s.max_val] {
      if (!ops::detail::reached(out)) return;
      T* __restrict dx = x->grad_buffer().data();
      const T* __restrict dy = out->grad.data();
      const T* __restrict xd = x->value.data();
      const std::int64_t n = x->value.numel();
      for (std::int64_t i = 0; i < n; ++i) {
        const double v = xd[i];
        const T g = dy[i];
        dx[i] += ((v >= lo) & (v <= hi)) ? g : T{0};
      }
    });
  }
  return out;
}

}  // namespace frostq::quant
