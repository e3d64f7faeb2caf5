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

// Finite-difference sweep over every differentiable operator, each on at least
// ten random shapes. Shared by the unit tests and the acceptance suite.

#include <map>
#include <string>
#include <vector>

#include "support/gradcheck.hpp"

namespace frostq::testing {

struct OpOracleReport {
  std::string op;
  int shapes = 0;
  double worst_rel_error = 0.0;
};

inline std::vector<OpOracleReport> run_gradient_oracles(std::uint64_t seed,
                                                        int shapes_per_op = 10) {
  Rng rng(seed);
  std::vector<OpOracleReport> reports;
  auto record = [&](const std::string& op, const GradCheckResult& r) {
    auto it = std::find_if(reports.begin(), reports.end(),
                           [&](const auto& rep) { return rep.op == op; });
    if (it == reports.end()) {
      reports.push_back({op, 0, 0.0});
      it = reports.end() - 1;
    }
    ++it->shapes;
    it->worst_rel_error = std::max(it->worst_rel_error, r.max_rel_error);
  };
  auto dim = [&](int lo, int hi) {
    return static_cast<std::int64_t>(lo + rng.below(hi - lo + 1));
  };

  for (int s = 0; s < shapes_per_op; ++s) {
    // Regular, depthwise, pointwise and strided convolution with bias.
    {
      const std::int64_t n = dim(1, 2), c = dim(1, 4), o = dim(1, 4);
      const std::int64_t k = (s % 2) ? 3 : 1, stride = dim(1, 2);
      const std::int64_t h = dim(k + 1, 7), w = dim(k + 1, 7);
      auto f = [=](Tape<double>& t, const std::vector<Var<double>>& v) {
        return ops::conv2d(t, v[0], v[1], v[2], stride, k / 2, 1);
      };
      record("conv2d", gradcheck(f, {random_tensor({n, c, h, w}, rng),
                                     random_tensor({o, c, k, k}, rng),
                                     random_tensor({o}, rng)}, rng));
    }
    {
      const std::int64_t n = dim(1, 2), c = dim(1, 5);
      const std::int64_t k = (s % 2) ? 3 : 5, stride = dim(1, 2);
      const std::int64_t h = dim(3, 8), w = dim(3, 8);
      auto f = [=](Tape<double>& t, const std::vector<Var<double>>& v) {
        return ops::conv2d(t, v[0], v[1], Var<double>{}, stride, k / 2, c);
      };
      record("conv2d_depthwise", gradcheck(f, {random_tensor({n, c, h, w}, rng),
                                               random_tensor({c, 1, k, k}, rng)}, rng));
    }
    {
      const std::int64_t n = dim(1, 2), g = dim(2, 3), cg = dim(1, 2), og = dim(1, 2);
      const std::int64_t h = dim(3, 6), w = dim(3, 6);
      auto f = [=](Tape<double>& t, const std::vector<Var<double>>& v) {
        return ops::conv2d(t, v[0], v[1], Var<double>{}, 1, 1, g);
      };
      record("conv2d_grouped", gradcheck(f, {random_tensor({n, g * cg, h, w}, rng),
                                             random_tensor({g * og, cg, 3, 3}, rng)}, rng));
    }
    // Batch norm, both modes.
    for (bool training : {true, false}) {
      const std::int64_t n = dim(2, 3), c = dim(1, 3), h = dim(2, 4), w = dim(2, 4);
      Tensor<double> rm = random_tensor({c}, rng);
      Tensor<double> rv = random_tensor({c}, rng, 0.5, 2.0);
      auto f = [=](Tape<double>& t, const std::vector<Var<double>>& v) {
        ops::BatchNormStats<double> stats(c);
        stats.running_mean = rm;
        stats.running_var = rv;
        return ops::batchnorm2d(t, v[0], v[1], v[2], stats, training);
      };
      record(training ? "batchnorm2d_train" : "batchnorm2d_eval",
             gradcheck(f, {random_tensor({n, c, h, w}, rng),
                           random_tensor({c}, rng, 0.5, 1.5),
                           random_tensor({c}, rng)}, rng));
    }
    {
      const Shape shape{dim(1, 2), dim(1, 3), dim(2, 4), dim(2, 4)};
      auto relu = [](Tape<double>& t, const std::vector<Var<double>>& v) {
        return ops::relu(t, v[0]);
      };
      auto relu6 = [](Tape<double>& t, const std::vector<Var<double>>& v) {
        return ops::relu6(t, v[0]);
      };
      auto hsig = [](Tape<double>& t, const std::vector<Var<double>>& v) {
        return ops::hard_sigmoid(t, v[0]);
      };
      record("relu", gradcheck(relu, {away_from(shape, rng, -3, 3, {0})}, rng));
      record("relu6", gradcheck(relu6, {away_from(shape, rng, -2, 8, {0, 6})}, rng));
      record("hard_sigmoid",
             gradcheck(hsig, {away_from(shape, rng, -5, 5, {-3, 3})}, rng));
    }
    {
      // Distinct values spaced well beyond 2h keep the argmax stable.
      const std::int64_t n = dim(1, 2), c = dim(1, 3), h = dim(2, 6), w = dim(2, 6);
      Tensor<double> x({n, c, h, w});
      std::vector<double> vals(static_cast<std::size_t>(x.numel()));
      for (std::size_t i = 0; i < vals.size(); ++i) vals[i] = 0.05 * static_cast<double>(i);
      for (std::size_t i = vals.size(); i > 1; --i) std::swap(vals[i - 1], vals[rng.below(i)]);
      x.vec() = vals;
      const std::int64_t k = 2, stride = dim(1, 2);
      auto f = [=](Tape<double>& t, const std::vector<Var<double>>& v) {
        return ops::maxpool2d(t, v[0], k, stride);
      };
      record("maxpool2d", gradcheck(f, {x}, rng));
      auto g = [](Tape<double>& t, const std::vector<Var<double>>& v) {
        return ops::global_avgpool(t, v[0]);
      };
      record("global_avgpool", gradcheck(g, {random_tensor({n, c, h, w}, rng)}, rng));
    }
    {
      const std::int64_t n = dim(1, 2), h = dim(1, 4), w = dim(1, 4);
      const std::int64_t c0 = dim(1, 3), c1 = dim(1, 3);
      auto cat = [](Tape<double>& t, const std::vector<Var<double>>& v) {
        return ops::concat_channels(t, {v[0], v[1]});
      };
      record("concat_channels", gradcheck(cat, {random_tensor({n, c0, h, w}, rng),
                                                random_tensor({n, c1, h, w}, rng)}, rng));
      const std::int64_t begin = static_cast<std::int64_t>(rng.below(c0));
      auto slice = [=](Tape<double>& t, const std::vector<Var<double>>& v) {
        return ops::slice_channels(t, v[0], begin, c0 - begin);
      };
      record("slice_channels", gradcheck(slice, {random_tensor({n, c0, h, w}, rng)}, rng));
      auto add = [](Tape<double>& t, const std::vector<Var<double>>& v) {
        return ops::add(t, v[0], v[1]);
      };
      record("add", gradcheck(add, {random_tensor({n, c0, h, w}, rng),
                                    random_tensor({n, c0, h, w}, rng)}, rng));
      auto mul = [](Tape<double>& t, const std::vector<Var<double>>& v) {
        return ops::mul(t, v[0], v[1]);
      };
      record("mul", gradcheck(mul, {random_tensor({n, c0, h, w}, rng),
                                    random_tensor({n, c0, h, w}, rng)}, rng));
      auto recip = [](Tape<double>& t, const std::vector<Var<double>>& v) {
        return ops::reciprocal(t, v[0]);
      };
      record("reciprocal", gradcheck(recip, {random_tensor({c0}, rng, 0.5, 2.0)}, rng));
      auto sc1 = [](Tape<double>& t, const std::vector<Var<double>>& v) {
        return ops::scale_axis(t, v[0], v[1], 1);
      };
      record("scale_axis", gradcheck(sc1, {random_tensor({n, c0, h, w}, rng),
                                           random_tensor({c0}, rng)}, rng));
      auto sc0 = [](Tape<double>& t, const std::vector<Var<double>>& v) {
        return ops::scale_axis(t, v[0], v[1], 0);
      };
      record("scale_axis", gradcheck(sc0, {random_tensor({c0, c1, 3, 3}, rng),
                                           random_tensor({c0}, rng)}, rng));
      auto mc = [](Tape<double>& t, const std::vector<Var<double>>& v) {
        return ops::mul_channels(t, v[0], v[1]);
      };
      record("mul_channels", gradcheck(mc, {random_tensor({n, c0, h, w}, rng),
                                            random_tensor({n, c0, 1, 1}, rng)}, rng));
      auto rs = [=](Tape<double>& t, const std::vector<Var<double>>& v) {
        return ops::reshape(t, v[0], Shape{n, c0 * h * w});
      };
      record("reshape", gradcheck(rs, {random_tensor({n, c0, h, w}, rng)}, rng));
    }
    {
      const std::int64_t n = dim(1, 4), in = dim(1, 6), out = dim(1, 5);
      auto f = [](Tape<double>& t, const std::vector<Var<double>>& v) {
        return ops::linear(t, v[0], v[1], v[2]);
      };
      record("linear", gradcheck(f, {random_tensor({n, in}, rng),
                                     random_tensor({out, in}, rng),
                                     random_tensor({out}, rng)}, rng));
      const std::int64_t k = dim(2, 10);
      std::vector<int> labels;
      for (std::int64_t i = 0; i < n; ++i) labels.push_back(static_cast<int>(rng.below(k)));
      auto ce = [labels](Tape<double>& t, const std::vector<Var<double>>& v) {
        return ops::softmax_cross_entropy(t, v[0], labels);
      };
      record("softmax_cross_entropy",
             gradcheck(ce, {random_tensor({n, k}, rng, -3.0, 3.0)}, rng));
    }
  }
  return reports;
}

}  // namespace frostq::testing
