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

// A static single-assignment layer graph that runs in three precisions:
// float, fake-quantized (training-capable, fused Conv-BN-ReLU), and integer.

#include <algorithm>
#include <cmath>
#include <cstdint>
#include <map>
#include <memory>
#include <optional>
#include <string>
#include <vector>

#include "frostq/core/autograd.hpp"
#include "frostq/core/ops.hpp"
#include "frostq/core/random.hpp"
#include "frostq/quant/fake_quant.hpp"
#include "frostq/quant/fusion.hpp"
#include "frostq/quant/int_kernels.hpp"

namespace frostq::model {

enum class NodeKind {
  kInput,
  kConv,
  kBatchNorm,
  kAct,
  kHardSigmoid,
  kAdd,
  kConcat,
  kMaxPool,
  kGlobalAvgPool,
  kChannelMul,
  kFlatten,
  kLinear,
};

inline const char* to_string(NodeKind k) {
  switch (k) {
    case NodeKind::kInput: return "input";
    case NodeKind::kConv: return "conv";
    case NodeKind::kBatchNorm: return "batchnorm";
    case NodeKind::kAct: return "act";
    case NodeKind::kHardSigmoid: return "hard_sigmoid";
    case NodeKind::kAdd: return "add";
    case NodeKind::kConcat: return "concat";
    case NodeKind::kMaxPool: return "maxpool";
    case NodeKind::kGlobalAvgPool: return "global_avgpool";
    case NodeKind::kChannelMul: return "channel_mul";
    case NodeKind::kFlatten: return "flatten";
    case NodeKind::kLinear: return "linear";
  }
  return "?";
}

inline NodeKind node_kind_from_string(const std::string& s) {
  for (int i = 0; i <= static_cast<int>(NodeKind::kLinear); ++i) {
    if (s == to_string(static_cast<NodeKind>(i))) return static_cast<NodeKind>(i);
  }
  throw ContractError("unknown node kind '" + s + "'");
}

enum class Precision { kFp, kFakeQuant, kInt8 };

inline const char* to_string(Precision p) {
  switch (p) {
    case Precision::kFp: return "fp";
    case Precision::kFakeQuant: return "fake_quant";
    case Precision::kInt8: return "int8";
  }
  return "?";
}

using frostq::to_string;

inline Precision precision_from_string(const std::string& s) {
  if (s == "fp") return Precision::kFp;
  if (s == "fake_quant") return Precision::kFakeQuant;
  if (s == "int8") return Precision::kInt8;
  throw ContractError("unknown precision '" + s + "'");
}

struct Node {
  NodeKind kind = NodeKind::kInput;
  std::string name;
  std::string group;
  std::vector<int> inputs;
  std::int64_t channels = 0;  // output channels (features for linear)

  // conv / linear
  std::int64_t in_channels = 0, kernel = 1, stride = 1, padding = 0, groups = 1;
  Var<float> weight, bias;
  // batch norm
  Var<float> gamma, beta;
  ops::BatchNormStats<float> bn;
  // act
  ops::Activation act = ops::Activation::kNone;
  // pool
  std::int64_t pool_kernel = 2, pool_stride = 2;

  // Set by prepare_qat.
  bool absorbed = false;      // folded into the conv that feeds it
  int fused_bn = -1;          // conv: absorbed batch-norm node
  ops::Activation fused_act = ops::Activation::kNone;
  bool quantized = false;     // conv: weight fake-quant inserted
  bool float_layer = false;   // the classifier, left unquantized
  std::optional<quant::Observer> observer;
};

struct PrepareOptions {
  double averaging = 0.01;
  quant::ObserverMode mode = quant::ObserverMode::kMovingAverage;
};

struct PrepareReport {
  int fused_patterns = 0;
  int weight_fake_quant = 0;
  int observers = 0;
  std::vector<std::string> unfusible;  // nodes outside the integer pattern set
};

/// Shape-only walk result for one node.
struct NodeShape {
  Shape shape;
  std::int64_t params = 0;
  std::int64_t macs = 0;
};

class ModelGraph {
 public:
  explicit ModelGraph(std::uint64_t init_seed = 0) : rng_(init_seed) {}
  ModelGraph(const ModelGraph&) = delete;
  ModelGraph& operator=(const ModelGraph&) = delete;
  ModelGraph(ModelGraph&&) = default;
  ModelGraph& operator=(ModelGraph&&) = default;

  // ------------------------------------------------------------- building

  int input(std::int64_t channels, std::string name = "input") {
    if (!nodes_.empty()) throw ContractError("ModelGraph: input must be the first node");
    Node n;
    n.kind = NodeKind::kInput;
    n.name = std::move(name);
    n.group = "input";
    n.channels = channels;
    return push(std::move(n));
  }

  int conv(int x, std::int64_t out, std::int64_t k, std::int64_t stride, std::int64_t groups,
           bool with_bias, const std::string& name) {
    const std::int64_t in = channels(x);
    if (in % groups != 0 || out % groups != 0) {
      throw DimensionError("ModelGraph::conv", "channels",
                           name + ": " + std::to_string(in) + " -> " + std::to_string(out) +
                               " not divisible by groups " + std::to_string(groups));
    }
    Node n = make(NodeKind::kConv, name, {x});
    n.in_channels = in;
    n.channels = out;
    n.kernel = k;
    n.stride = stride;
    n.padding = k / 2;
    n.groups = groups;
    // He-normal over fan-out.
    const double std = std::sqrt(2.0 / double(out / groups * k * k));
    Tensor<float> w({out, in / groups, k, k});
    for (auto& v : w.vec()) v = static_cast<float>(rng_.normal() * std);
    n.weight = parameter(std::move(w), name + ".weight");
    if (with_bias) n.bias = parameter(Tensor<float>({out}), name + ".bias");
    return push(std::move(n));
  }

  int batchnorm(int x, const std::string& name) {
    Node n = make(NodeKind::kBatchNorm, name, {x});
    n.channels = channels(x);
    n.gamma = parameter(Tensor<float>({n.channels}, 1.f), name + ".gamma");
    n.beta = parameter(Tensor<float>({n.channels}), name + ".beta");
    n.bn = ops::BatchNormStats<float>(n.channels);
    return push(std::move(n));
  }

  int activation(int x, ops::Activation act, const std::string& name) {
    Node n = make(NodeKind::kAct, name, {x});
    n.channels = channels(x);
    n.act = act;
    return push(std::move(n));
  }

  /// conv (no bias) -> batch norm -> optional activation.
  int conv_bn_act(int x, std::int64_t out, std::int64_t k, std::int64_t stride,
                  std::int64_t groups, ops::Activation act, const std::string& name) {
    int y = conv(x, out, k, stride, groups, false, name + ".conv");
    y = batchnorm(y, name + ".bn");
    if (act != ops::Activation::kNone) y = activation(y, act, name + ".act");
    return y;
  }

  int hard_sigmoid(int x, const std::string& name) {
    Node n = make(NodeKind::kHardSigmoid, name, {x});
    n.channels = channels(x);
    return push(std::move(n));
  }

  int add(int a, int b, const std::string& name) {
    if (channels(a) != channels(b)) {
      throw DimensionError("ModelGraph::add", "channels", name);
    }
    Node n = make(NodeKind::kAdd, name, {a, b});
    n.channels = channels(a);
    return push(std::move(n));
  }

  int concat(const std::vector<int>& xs, const std::string& name) {
    Node n = make(NodeKind::kConcat, name, xs);
    for (int x : xs) n.channels += channels(x);
    return push(std::move(n));
  }

  int maxpool(int x, std::int64_t k, std::int64_t stride, const std::string& name) {
    Node n = make(NodeKind::kMaxPool, name, {x});
    n.channels = channels(x);
    n.pool_kernel = k;
    n.pool_stride = stride;
    return push(std::move(n));
  }

  int global_avgpool(int x, const std::string& name) {
    Node n = make(NodeKind::kGlobalAvgPool, name, {x});
    n.channels = channels(x);
    return push(std::move(n));
  }

  int mul_channels(int x, int gate, const std::string& name) {
    if (channels(x) != channels(gate)) {
      throw DimensionError("ModelGraph::mul_channels", "channels", name);
    }
    Node n = make(NodeKind::kChannelMul, name, {x, gate});
    n.channels = channels(x);
    return push(std::move(n));
  }

  int flatten(int x, const std::string& name) {
    Node n = make(NodeKind::kFlatten, name, {x});
    n.channels = channels(x);
    return push(std::move(n));
  }

  int linear(int x, std::int64_t out, bool with_bias, const std::string& name) {
    Node n = make(NodeKind::kLinear, name, {x});
    n.in_channels = channels(x);
    n.channels = out;
    Tensor<float> w({out, n.in_channels});
    for (auto& v : w.vec()) v = static_cast<float>(rng_.normal() * 0.01);
    n.weight = parameter(std::move(w), name + ".weight");
    if (with_bias) n.bias = parameter(Tensor<float>({out}), name + ".bias");
    return push(std::move(n));
  }

  /// Subsequent nodes are tagged with this group (gradient summaries).
  void set_group(std::string g) { group_ = std::move(g); }

  /// Appends a node as-is (graph reload).
  int push_node(Node n) { return push(std::move(n)); }

  // ------------------------------------------------------------ inspection

  const std::vector<Node>& nodes() const { return nodes_; }
  std::vector<Node>& mutable_nodes() { return nodes_; }
  const Node& node(int i) const { return nodes_.at(static_cast<std::size_t>(i)); }
  int output() const { return static_cast<int>(nodes_.size()) - 1; }
  std::int64_t channels(int i) const { return node(i).channels; }
  Precision precision() const { return precision_; }
  bool training() const { return training_; }

  /// Trainable parameters in node order; stable across fusion.
  std::vector<Var<float>> params() const {
    std::vector<Var<float>> ps;
    for (const auto& n : nodes_) {
      for (const auto* v : {&n.weight, &n.bias, &n.gamma, &n.beta}) {
        if (*v) ps.push_back(*v);
      }
    }
    return ps;
  }

  /// Parameter name -> group tag.
  std::map<std::string, std::string> param_groups() const {
    std::map<std::string, std::string> m;
    for (const auto& n : nodes_) {
      for (const auto* v : {&n.weight, &n.bias, &n.gamma, &n.beta}) {
        if (*v) m[(*v)->name] = n.group;
      }
    }
    return m;
  }

  std::vector<std::string> groups() const {
    std::vector<std::string> gs;
    for (const auto& n : nodes_) {
      if (!n.weight && !n.gamma) continue;
      if (std::find(gs.begin(), gs.end(), n.group) == gs.end()) gs.push_back(n.group);
    }
    return gs;
  }

  /// Shapes, parameter and multiply-accumulate counts for an input shape.
  std::vector<NodeShape> infer(const Shape& in) const {
    std::vector<NodeShape> out(nodes_.size());
    for (std::size_t i = 0; i < nodes_.size(); ++i) {
      const Node& n = nodes_[i];
      auto& o = out[i];
      auto in0 = [&]() -> const Shape& { return out[n.inputs.at(0)].shape; };
      switch (n.kind) {
        case NodeKind::kInput:
          require_rank("infer", in, 4, "input");
          if (in[1] != n.channels) {
            throw DimensionError("ModelGraph", "channels",
                                 "input has " + std::to_string(in[1]) + ", graph expects " +
                                     std::to_string(n.channels));
          }
          o.shape = in;
          break;
        case NodeKind::kConv: {
          const auto g = kernels::conv_geometry(in0(), n.weight->value.shape(), n.stride,
                                                n.padding, n.groups);
          o.shape = {g.n, g.o, g.ho, g.wo};
          o.params = n.weight->value.numel() + (n.bias ? n.bias->value.numel() : 0);
          o.macs = n.weight->value.numel() * g.ho * g.wo;
          break;
        }
        case NodeKind::kBatchNorm:
          o.shape = in0();
          o.params = 2 * n.channels;
          break;
        case NodeKind::kAct:
        case NodeKind::kHardSigmoid:
          o.shape = in0();
          break;
        case NodeKind::kAdd:
          if (out[n.inputs[0]].shape != out[n.inputs[1]].shape) {
            throw DimensionError("ModelGraph", "shape", n.name + ": add operands differ");
          }
          o.shape = in0();
          break;
        case NodeKind::kConcat: {
          o.shape = in0();
          o.shape[1] = 0;
          for (int x : n.inputs) {
            const auto& s = out[x].shape;
            if (s[2] != o.shape[2] || s[3] != o.shape[3]) {
              throw DimensionError("ModelGraph", "height", n.name + ": concat spatial mismatch");
            }
            o.shape[1] += s[1];
          }
          break;
        }
        case NodeKind::kMaxPool: {
          const auto& s = in0();
          if (s[2] < n.pool_kernel || s[3] < n.pool_kernel) {
            throw DimensionError("ModelGraph", "height", n.name + ": pool larger than input");
          }
          o.shape = {s[0], s[1], (s[2] - n.pool_kernel) / n.pool_stride + 1,
                     (s[3] - n.pool_kernel) / n.pool_stride + 1};
          break;
        }
        case NodeKind::kGlobalAvgPool:
          o.shape = {in0()[0], in0()[1], 1, 1};
          break;
        case NodeKind::kChannelMul:
          o.shape = in0();
          break;
        case NodeKind::kFlatten: {
          const auto& s = in0();
          o.shape = {s[0], frostq::numel(s) / std::max<std::int64_t>(s[0], 1)};
          break;
        }
        case NodeKind::kLinear:
          o.shape = {in0()[0], n.channels};
          o.params = n.weight->value.numel() + (n.bias ? n.bias->value.numel() : 0);
          o.macs = n.weight->value.numel();
          break;
      }
    }
    return out;
  }

  std::int64_t count_params() const {
    std::int64_t p = 0;
    for (const auto& s : infer({1, nodes_.at(0).channels, 32, 32})) p += s.params;
    return p;
  }

  std::int64_t count_flops(std::int64_t input_res) const {
    std::int64_t m = 0;
    for (const auto& s : infer({1, nodes_.at(0).channels, input_res, input_res})) m += s.macs;
    return m;
  }

  // ---------------------------------------------------------------- modes

  void set_training(bool on) { training_ = on; }

  /// Observers update during eval-mode forwards too while this is set.
  void set_observing(bool on) { observing_ = on; }

  /// Fuses Conv-BN(-ReLU) / Conv-ReLU patterns and attaches observers.
  PrepareReport prepare_qat(const PrepareOptions& opt = {}) {
    if (precision_ != Precision::kFp) {
      throw ContractError(std::string("prepare_qat: model is already ") + to_string(precision_) +
                          "; modes only advance fp -> fake_quant -> int8");
    }
    PrepareReport rep;
    const auto consumers = consumer_lists();
    // The classifier: last conv or linear layer.
    int classifier = -1;
    for (int i = output(); i >= 0; --i) {
      if (nodes_[i].kind == NodeKind::kConv || nodes_[i].kind == NodeKind::kLinear) {
        classifier = i;
        break;
      }
    }
    for (std::size_t i = 0; i < nodes_.size(); ++i) {
      Node& n = nodes_[i];
      if (n.kind != NodeKind::kBatchNorm) continue;
      const int src = n.inputs[0];
      const bool ok = nodes_[src].kind == NodeKind::kConv && consumers[src].size() == 1 &&
                      static_cast<int>(src) != classifier;
      if (!ok) {
        throw ContractError("prepare_qat: batch norm '" + n.name +
                            "' is not preceded by a conv it can fold into");
      }
    }
    const quant::Observer proto(opt.averaging, opt.mode, quant::Signedness::kUnsigned);
    for (std::size_t i = 0; i < nodes_.size(); ++i) {
      Node& n = nodes_[i];
      switch (n.kind) {
        case NodeKind::kInput:
          n.observer = proto;
          break;
        case NodeKind::kConv: {
          if (static_cast<int>(i) == classifier) {
            n.float_layer = true;
            break;
          }
          int tail = static_cast<int>(i);
          const auto& cs = consumers[i];
          if (cs.size() == 1 && nodes_[cs[0]].kind == NodeKind::kBatchNorm) {
            n.fused_bn = cs[0];
            nodes_[cs[0]].absorbed = true;
            tail = cs[0];
          }
          const auto& ts = consumers[tail];
          if (ts.size() == 1 && nodes_[ts[0]].kind == NodeKind::kAct) {
            n.fused_act = nodes_[ts[0]].act;
            nodes_[ts[0]].absorbed = true;
          }
          n.quantized = true;
          n.observer = proto;
          ++rep.fused_patterns;
          ++rep.weight_fake_quant;
          break;
        }
        case NodeKind::kLinear:
          if (static_cast<int>(i) == classifier) {
            n.float_layer = true;
          } else {
            rep.unfusible.push_back(n.name);
          }
          break;
        case NodeKind::kAct:
          if (!n.absorbed) n.observer = proto;
          break;
        case NodeKind::kHardSigmoid:
        case NodeKind::kAdd:
        case NodeKind::kConcat:
          n.observer = proto;
          break;
        case NodeKind::kChannelMul:
          n.observer = proto;
          rep.unfusible.push_back(n.name);
          break;
        default:
          break;
      }
    }
    for (const auto& n : nodes_) rep.observers += n.observer.has_value();
    precision_ = Precision::kFakeQuant;
    return rep;
  }

  /// Lowers every fused conv to integer kernels with frozen statistics.
  void convert_int8() {
    if (precision_ != Precision::kFakeQuant) {
      throw ContractError(std::string("convert_int8: model is ") + to_string(precision_) +
                          ", expected fake_quant");
    }
    for (const auto& n : nodes_) {
      if (n.observer && n.observer->count() == 0) {
        throw ContractError("convert_int8: observer of '" + n.name + "' never saw data");
      }
    }
    int_.assign(nodes_.size(), IntPayload{});
    for (std::size_t i = 0; i < nodes_.size(); ++i) {
      Node& n = nodes_[i];
      if (n.observer) n.observer->freeze();
      if (n.kind == NodeKind::kConv && n.quantized) {
        const auto f = folded(n);
        const auto in = output_stats(n.inputs[0]);
        int_[i].conv = quant::make_int_conv(f, in, quant::weight_qparams(f.weight),
                                            n.observer->stats());
      } else if (n.kind == NodeKind::kHardSigmoid) {
        int_[i].lut = quant::build_lut(output_stats(n.inputs[0]), n.observer->stats(),
                                       [](double v) { return std::clamp(v + 3.0, 0.0, 6.0) / 6.0; });
      } else if (n.kind == NodeKind::kAct && !n.absorbed) {
        const double hi = n.act == ops::Activation::kRelu6 ? 6.0 : 1e300;
        int_[i].lut = quant::build_lut(output_stats(n.inputs[0]), n.observer->stats(),
                                       [hi](double v) { return std::clamp(v, 0.0, hi); });
      }
    }
    precision_ = Precision::kInt8;
    training_ = false;
  }

  /// Statistics of node i's output on the integer grid.
  quant::QuantStats output_stats(int i) const {
    const Node& n = node(i);
    if (n.observer) return n.observer->stats();
    switch (n.kind) {
      case NodeKind::kBatchNorm:
      case NodeKind::kAct:
        if (n.absorbed) return output_stats(n.inputs[0]);
        break;
      case NodeKind::kMaxPool:
      case NodeKind::kGlobalAvgPool:
      case NodeKind::kFlatten:
        return output_stats(n.inputs[0]);
      default:
        break;
    }
    throw ContractError("output_stats: node '" + n.name + "' has no quantized output");
  }

  /// The conv with its batch norm folded in using running statistics.
  quant::FusedConv<float> folded(const Node& n) const {
    const quant::ConvAttrs attrs{n.stride, n.padding, n.groups};
    const Tensor<float>* b = n.bias ? &n.bias->value : nullptr;
    if (n.fused_bn >= 0) {
      const Node& bn = nodes_[n.fused_bn];
      return quant::fuse_conv_bn(n.weight->value, b, &bn.gamma->value, &bn.beta->value, &bn.bn,
                                 attrs, n.fused_act);
    }
    return quant::fuse_conv_bn<float>(n.weight->value, b, nullptr, nullptr, nullptr, attrs,
                                      n.fused_act);
  }

  // -------------------------------------------------------------- forward

  /// Differentiable forward in fp or fake-quant precision; returns the
  /// output node's value.
  Var<float> forward(Tape<float>& tape, const Tensor<float>& x) {
    if (precision_ == Precision::kInt8) {
      throw ContractError("int8 model is inference-only: no differentiable forward/backward");
    }
    std::vector<Var<float>> v(nodes_.size());
    for (std::size_t i = 0; i < nodes_.size(); ++i) v[i] = step(tape, static_cast<int>(i), v, x);
    return v.back();
  }

  /// Output values in any precision without recording gradients.
  Tensor<float> predict(const Tensor<float>& x) {
    if (precision_ == Precision::kInt8) return run_int8(x);
    const bool was = training_;
    training_ = false;
    Tape<float> tape(false);
    auto out = forward(tape, x)->value;
    training_ = was;
    return out;
  }

  /// Float inference with every fused pattern folded into one conv, the
  /// float counterpart of the integer graph. Needs fusion annotations.
  Tensor<float> run_folded(const Tensor<float>& x) const {
    if (precision_ == Precision::kFp) throw ContractError("run_folded: model is not fused yet");
    if (folded_.size() != nodes_.size()) {
      throw ContractError("run_folded: call cache_folded() first");
    }
    Tape<float> tape(false);
    std::vector<Tensor<float>> v(nodes_.size());
    for (std::size_t i = 0; i < nodes_.size(); ++i) {
      const Node& n = nodes_[i];
      const int a = n.inputs.empty() ? -1 : n.inputs[0];
      auto in = [&](std::size_t k) {
        const int src = n.inputs.at(k);
        const bool reused = std::count(n.inputs.begin(), n.inputs.end(), src) > 1;
        if (last_use_.at(src) == static_cast<int>(i) && !reused) {
          return make_var(std::move(v[src]));
        }
        return make_var(v[src]);
      };
      switch (n.kind) {
        case NodeKind::kInput: v[i] = x; break;
        case NodeKind::kConv: v[i] = folded_[i]->forward(v[a]); break;
        case NodeKind::kBatchNorm:
        case NodeKind::kAct:
          if (n.absorbed) {
            v[i] = std::move(v[a]);
          } else if (n.kind == NodeKind::kAct) {
            v[i] = ops::activation(tape, in(0), n.act)->value;
          } else {
            throw ContractError("run_folded: standalone batch norm '" + n.name + "'");
          }
          break;
        case NodeKind::kHardSigmoid: v[i] = ops::hard_sigmoid(tape, in(0))->value; break;
        case NodeKind::kAdd: v[i] = ops::add(tape, in(0), in(1))->value; break;
        case NodeKind::kConcat: {
          std::vector<Var<float>> xs;
          for (std::size_t k = 0; k < n.inputs.size(); ++k) xs.push_back(in(k));
          v[i] = ops::concat_channels(tape, xs)->value;
          break;
        }
        case NodeKind::kMaxPool:
          v[i] = ops::maxpool2d(tape, in(0), n.pool_kernel, n.pool_stride)->value;
          break;
        case NodeKind::kGlobalAvgPool: v[i] = ops::global_avgpool(tape, in(0))->value; break;
        case NodeKind::kChannelMul: v[i] = ops::mul_channels(tape, in(0), in(1))->value; break;
        case NodeKind::kFlatten:
          v[i] = v[a].reshaped({v[a].dim(0), v[a].numel() / v[a].dim(0)});
          break;
        case NodeKind::kLinear:
          v[i] = ops::linear(tape, in(0), n.weight, n.bias)->value;
          break;
      }
      for (int k : n.inputs) {
        if (last_use_.at(k) == static_cast<int>(i)) v[k] = {};
      }
    }
    return v.back();
  }

  /// Precomputes the folded convs used by run_folded.
  void cache_folded() {
    folded_.assign(nodes_.size(), std::nullopt);
    for (std::size_t i = 0; i < nodes_.size(); ++i) {
      const Node& n = nodes_[i];
      if (n.kind == NodeKind::kConv) folded_[i] = folded(n);
    }
  }

  /// Quantized-domain output of node `upto` (int8 mode), for diagnostics.
  Tensor<float> run_int8(const Tensor<float>& x) {
    if (precision_ != Precision::kInt8) throw ContractError("run_int8: model is not int8");
    std::vector<quant::QTensor> q(nodes_.size());
    std::vector<Tensor<float>> f(nodes_.size());
    std::vector<bool> is_float(nodes_.size(), false);
    auto as_float = [&](int i) -> Tensor<float> {
      return is_float[i] ? f[i] : quant::dequantize_activation(q[i]);
    };
    for (std::size_t i = 0; i < nodes_.size(); ++i) {
      const Node& n = nodes_[i];
      const int a = n.inputs.empty() ? -1 : n.inputs[0];
      switch (n.kind) {
        case NodeKind::kInput:
          q[i] = quant::quantize_activation(x, n.observer->stats());
          break;
        case NodeKind::kConv:
          if (n.quantized) {
            q[i] = quant::int_conv2d(q[a], int_[i].conv);
          } else {
            f[i] = folded(n).forward(as_float(a));
            is_float[i] = true;
          }
          break;
        case NodeKind::kBatchNorm:
        case NodeKind::kAct:
          if (n.absorbed) {
            is_float[i] = is_float[a];
            if (last_use_.at(a) == static_cast<int>(i)) {
              q[i] = std::move(q[a]);
              f[i] = std::move(f[a]);
            } else {
              q[i] = q[a];
              f[i] = f[a];
            }
          } else if (n.kind == NodeKind::kAct && n.observer) {
            q[i] = quant::int_lut(q[a], int_[i].lut, n.observer->stats());
          } else {
            throw ContractError("run_int8: unsupported node '" + n.name + "'");
          }
          break;
        case NodeKind::kHardSigmoid:
          q[i] = quant::int_lut(q[a], int_[i].lut, n.observer->stats());
          break;
        case NodeKind::kAdd:
          q[i] = quant::int_add(q[a], q[n.inputs[1]], n.observer->stats());
          break;
        case NodeKind::kConcat: {
          std::vector<const quant::QTensor*> xs;
          for (int k : n.inputs) xs.push_back(&q[k]);
          q[i] = quant::int_concat(xs, n.observer->stats());
          break;
        }
        case NodeKind::kMaxPool:
          q[i] = quant::int_maxpool(q[a], n.pool_kernel, n.pool_stride);
          break;
        case NodeKind::kGlobalAvgPool:
          q[i] = quant::int_global_avgpool(q[a]);
          break;
        case NodeKind::kChannelMul:
          q[i] = quant::int_mul_channels(q[a], q[n.inputs[1]], n.observer->stats());
          break;
        case NodeKind::kFlatten:
          if (is_float[a]) {
            f[i] = f[a].reshaped({f[a].dim(0), f[a].numel() / f[a].dim(0)});
            is_float[i] = true;
          } else {
            q[i] = q[a];
            q[i].shape = {q[a].shape[0], q[a].numel() / q[a].shape[0]};
          }
          break;
        case NodeKind::kLinear: {
          Tape<float> tape(false);
          f[i] = ops::linear(tape, make_var(as_float(a)), n.weight, n.bias)->value;
          is_float[i] = true;
          break;
        }
      }
      // Release values nobody reads any more.
      for (int k : n.inputs) {
        if (last_use_.at(k) == static_cast<int>(i)) {
          q[k] = {};
          f[k] = {};
        }
      }
    }
    return as_float(output());
  }

  // ------------------------------------------------------------ gradients

  struct GroupGradStats {
    std::string group;
    double median_abs = 0.0;
    double zero_fraction = 0.0;
    std::int64_t count = 0;
  };

  /// Median |g| and fraction with |g| < threshold over each group's
  /// conv/linear weight gradients.
  std::vector<GroupGradStats> gradient_summary(double threshold = 1e-8) const {
    std::vector<GroupGradStats> out;
    for (const auto& g : groups()) {
      std::vector<float> mags;
      for (const auto& n : nodes_) {
        if (n.group != g || !n.weight) continue;
        const auto& gr = n.weight->grad;
        if (gr.shape() != n.weight->value.shape()) {
          mags.insert(mags.end(), static_cast<std::size_t>(n.weight->value.numel()), 0.f);
          continue;
        }
        for (float v : gr.vec()) mags.push_back(std::abs(v));
      }
      GroupGradStats s;
      s.group = g;
      s.count = static_cast<std::int64_t>(mags.size());
      if (!mags.empty()) {
        std::int64_t z = 0;
        for (float m : mags) z += m < threshold;
        s.zero_fraction = double(z) / double(mags.size());
        auto mid = mags.begin() + static_cast<std::ptrdiff_t>(mags.size() / 2);
        std::nth_element(mags.begin(), mid, mags.end());
        s.median_abs = *mid;
      }
      out.push_back(s);
    }
    return out;
  }

  void zero_grad() {
    for (auto& p : params()) p->grad = Tensor<float>();
  }

  /// Restores precision bookkeeping after a reload.
  void set_precision_unchecked(Precision p) { precision_ = p; }

 private:
  struct IntPayload {
    quant::IntConv conv;
    std::vector<std::uint8_t> lut;
  };

  Node make(NodeKind kind, const std::string& name, std::vector<int> inputs) const {
    Node n;
    n.kind = kind;
    n.name = name;
    n.group = group_;
    n.inputs = std::move(inputs);
    for (int i : n.inputs) {
      if (i < 0 || i >= static_cast<int>(nodes_.size())) {
        throw ContractError("ModelGraph: node '" + name + "' reads undefined input " +
                            std::to_string(i));
      }
    }
    return n;
  }

  int push(Node n) {
    if (precision_ != Precision::kFp) {
      throw ContractError("ModelGraph: cannot add nodes after prepare_qat");
    }
    if (n.kind != NodeKind::kInput && nodes_.empty()) {
      throw ContractError("ModelGraph: first node must be the input");
    }
    const int id = static_cast<int>(nodes_.size());
    last_use_.push_back(id);
    for (int i : n.inputs) last_use_.at(i) = id;
    nodes_.push_back(std::move(n));
    return id;
  }

  std::vector<std::vector<int>> consumer_lists() const {
    std::vector<std::vector<int>> c(nodes_.size());
    for (std::size_t i = 0; i < nodes_.size(); ++i)
      for (int k : nodes_[i].inputs) c[k].push_back(static_cast<int>(i));
    return c;
  }

  bool observers_live() const { return training_ || observing_; }

  /// Observes (when live) and fake-quantizes a node output.
  Var<float> quantize_out(Tape<float>& tape, Node& n, const Var<float>& y) {
    if (observers_live()) n.observer->observe(y->value);
    return quant::fake_quantize(tape, y, n.observer->stats());
  }

  Var<float> step(Tape<float>& tape, int i, std::vector<Var<float>>& v, const Tensor<float>& x) {
    Node& n = nodes_[i];
    const bool fq = precision_ == Precision::kFakeQuant;
    auto in = [&](std::size_t k) -> const Var<float>& { return v.at(n.inputs.at(k)); };
    switch (n.kind) {
      case NodeKind::kInput: {
        if (x.rank() != 4 || x.dim(1) != n.channels) {
          throw DimensionError("ModelGraph::forward", "channels",
                               "input " + to_string(x.shape()) + " for a " +
                                   std::to_string(n.channels) + "-channel graph");
        }
        auto y = make_var(x);
        return fq ? quantize_out(tape, n, y) : y;
      }
      case NodeKind::kConv:
        if (fq && n.quantized) return fused_conv(tape, n, in(0));
        return ops::conv2d(tape, in(0), n.weight, n.bias, n.stride, n.padding, n.groups);
      case NodeKind::kBatchNorm:
        if (n.absorbed) return in(0);
        return ops::batchnorm2d(tape, in(0), n.gamma, n.beta, n.bn, training_);
      case NodeKind::kAct: {
        if (n.absorbed) return in(0);
        auto y = ops::activation(tape, in(0), n.act);
        return fq ? quantize_out(tape, n, y) : y;
      }
      case NodeKind::kHardSigmoid: {
        auto y = ops::hard_sigmoid(tape, in(0));
        return fq ? quantize_out(tape, n, y) : y;
      }
      case NodeKind::kAdd: {
        auto y = ops::add(tape, in(0), in(1));
        return fq ? quantize_out(tape, n, y) : y;
      }
      case NodeKind::kConcat: {
        std::vector<Var<float>> xs;
        for (std::size_t k = 0; k < n.inputs.size(); ++k) xs.push_back(in(k));
        auto y = ops::concat_channels(tape, xs);
        return fq ? quantize_out(tape, n, y) : y;
      }
      case NodeKind::kMaxPool:
        return ops::maxpool2d(tape, in(0), n.pool_kernel, n.pool_stride);
      case NodeKind::kGlobalAvgPool: {
        auto y = ops::global_avgpool(tape, in(0));
        // Snap the mean back onto the producer's grid, as the integer pool does.
        return fq ? quant::fake_quantize(tape, y, output_stats(n.inputs[0])) : y;
      }
      case NodeKind::kChannelMul: {
        auto y = ops::mul_channels(tape, in(0), in(1));
        return fq ? quantize_out(tape, n, y) : y;
      }
      case NodeKind::kFlatten: {
        const auto& s = in(0)->value.shape();
        return ops::reshape(tape, in(0), {s[0], frostq::numel(s) / s[0]});
      }
      case NodeKind::kLinear:
        return ops::linear(tape, in(0), n.weight, n.bias);
    }
    throw ContractError("ModelGraph: unknown node kind");
  }

  /// Fake-quantized Conv-BN(-act). Training folds the batch-norm scale into
  /// the weight before quantizing and divides it back out so the batch
  /// statistics stay exact; eval uses the fully folded conv.
  Var<float> fused_conv(Tape<float>& tape, Node& n, const Var<float>& x) {
    Var<float> y;
    if (n.fused_bn >= 0 && training_) {
      Node& bn = nodes_[n.fused_bn];
      Tensor<float> inv_std(bn.bn.running_var.shape());
      for (std::int64_t c = 0; c < inv_std.numel(); ++c) {
        inv_std[c] = 1.f / std::sqrt(bn.bn.running_var[c] + bn.bn.eps);
      }
      auto s = ops::mul(tape, bn.gamma, make_var(std::move(inv_std)));
      auto ws = ops::scale_axis(tape, n.weight, s, 0);
      auto wq = quant::fake_quantize(tape, ws, quant::weight_qparams(ws->value));
      y = ops::conv2d(tape, x, wq, Var<float>{}, n.stride, n.padding, n.groups);
      y = ops::scale_axis(tape, y, ops::reciprocal(tape, s), 1);
      if (n.bias) {
        y = ops::add(tape, y, ops::scale_axis(tape, make_var(Tensor<float>(y->value.shape(), 1.f)),
                                              n.bias, 1));
      }
      y = ops::batchnorm2d(tape, y, bn.gamma, bn.beta, bn.bn, true);
    } else if (n.fused_bn >= 0) {
      const auto f = folded(n);
      auto wq = make_var(quant::fake_quantize_values(f.weight, quant::weight_qparams(f.weight)));
      y = ops::conv2d(tape, x, wq, make_var(f.bias), n.stride, n.padding, n.groups);
    } else {
      auto wq = quant::fake_quantize(tape, n.weight, quant::weight_qparams(n.weight->value));
      y = ops::conv2d(tape, x, wq, n.bias, n.stride, n.padding, n.groups);
    }
    y = ops::activation(tape, y, n.fused_act);
    return quantize_out(tape, n, y);
  }

  std::vector<Node> nodes_;
  std::vector<int> last_use_;
  std::vector<IntPayload> int_;
  std::vector<std::optional<quant::FusedConv<float>>> folded_;
  std::string group_ = "body";
  Precision precision_ = Precision::kFp;
  bool training_ = true;
  bool observing_ = false;
  Rng rng_;
};

}  // namespace frostq::model
