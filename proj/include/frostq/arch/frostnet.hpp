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

// FrostConv / MBConv block builders, the three reference architectures,
// width scaling and a JSON architecture description.

#include <cmath>
#include <cstdint>
#include <fstream>
#include <string>
#include <vector>

#include <json.hpp>  // vendored nlohmann::json

#include "frostq/model/graph.hpp"

namespace frostq::arch {

using frostq::to_string;

/// Width fed to the 1x1 expansion's output: `ef` times the block input, or
/// `ef` times the concatenated width (input plus squeeze).
enum class ExpandBase { kConcat, kInput };

inline const char* to_string(ExpandBase e) {
  return e == ExpandBase::kConcat ? "concat" : "input";
}

inline ExpandBase expand_base_from_string(const std::string& s) {
  if (s == "concat") return ExpandBase::kConcat;
  if (s == "input") return ExpandBase::kInput;
  throw ContractError("unknown expand base '" + s + "' (concat|input)");
}

struct FrostBlockSpec {
  std::int64_t in_ch = 0, out_ch = 0, kernel = 3, ef = 1, rf = 1, stride = 1;

  bool degenerate() const { return ef == 1 && rf == 1; }
  bool residual() const { return in_ch == out_ch && stride == 1; }
  std::int64_t squeeze() const { return in_ch / rf; }
  std::int64_t concat() const { return in_ch + squeeze(); }
  std::int64_t expand(ExpandBase base) const {
    if (degenerate()) return in_ch;
    return (base == ExpandBase::kConcat ? concat() : in_ch) * ef;
  }

  void validate() const {
    auto bad = [&](const std::string& why) {
      throw ContractError("FrostBlockSpec(" + std::to_string(in_ch) + "->" +
                          std::to_string(out_ch) + "): " + why);
    };
    if (in_ch < 1 || out_ch < 1) bad("channel counts must be positive");
    if (kernel != 3 && kernel != 5) bad("kernel must be 3 or 5");
    if (stride != 1 && stride != 2) bad("stride must be 1 or 2");
    if (ef < 1 || rf < 1) bad("ef and rf must be >= 1");
    if (!degenerate() && in_ch / rf < 1) bad("in_ch // rf must be >= 1");
  }

  bool operator==(const FrostBlockSpec&) const = default;
};

enum class Variant { kBase, kLarge, kSmall, kCustom };

inline const char* to_string(Variant v) {
  switch (v) {
    case Variant::kBase: return "base";
    case Variant::kLarge: return "large";
    case Variant::kSmall: return "small";
    case Variant::kCustom: return "custom";
  }
  return "?";
}

inline Variant variant_from_string(const std::string& s) {
  std::string l;
  for (char c : s) l += static_cast<char>(std::tolower(static_cast<unsigned char>(c)));
  if (l == "base") return Variant::kBase;
  if (l == "large") return Variant::kLarge;
  if (l == "small") return Variant::kSmall;
  if (l == "custom") return Variant::kCustom;
  throw ContractError("unknown variant '" + s + "' (base|large|small|custom)");
}

enum class BlockType { kFrost, kMBConv, kMBConvSE };

struct ArchSpec {
  Variant variant = Variant::kCustom;
  std::vector<FrostBlockSpec> blocks;
  std::int64_t stem_channels = 32;
  std::int64_t stem_stride = 2;
  std::int64_t head_channels = 1280;  // 0 drops the head conv
  std::int64_t num_classes = 1000;
  ExpandBase expand_base = ExpandBase::kConcat;
  BlockType block_type = BlockType::kFrost;
  ops::Activation act = ops::Activation::kRelu;

  std::int64_t total_stride() const {
    std::int64_t s = stem_stride;
    for (const auto& b : blocks) s *= b.stride;
    return s;
  }

  void validate() const {
    if (blocks.empty()) throw ContractError("ArchSpec: no blocks");
    if (num_classes < 2) throw ContractError("ArchSpec: num_classes must be >= 2");
    if (stem_channels < 1 || stem_stride < 1) throw ContractError("ArchSpec: bad stem");
    std::int64_t c = stem_channels;
    for (std::size_t i = 0; i < blocks.size(); ++i) {
      blocks[i].validate();
      if (blocks[i].in_ch != c) {
        throw DimensionError("ArchSpec", "channels",
                             "block " + std::to_string(i) + " expects " +
                                 std::to_string(blocks[i].in_ch) + " inputs, previous stage gives " +
                                 std::to_string(c));
      }
      c = blocks[i].out_ch;
    }
  }
};

// ------------------------------------------------------------------ tables

namespace detail {
using Row = FrostBlockSpec;
// (in, out, kernel, ef, rf, stride)
inline std::vector<Row> base_rows() {
  return {{32, 16, 3, 1, 1, 1},   {16, 24, 5, 6, 4, 2},   {24, 24, 3, 3, 4, 1},
          {24, 40, 5, 3, 4, 2},   {40, 40, 5, 3, 4, 1},   {40, 80, 5, 3, 4, 2},
          {80, 80, 3, 3, 4, 1},   {80, 96, 5, 3, 2, 1},   {96, 96, 3, 3, 4, 1},
          {96, 96, 5, 3, 4, 1},   {96, 96, 5, 3, 4, 1},   {96, 192, 5, 6, 2, 2},
          {192, 192, 5, 3, 2, 1}, {192, 192, 5, 3, 2, 1}, {192, 192, 5, 3, 2, 1},
          {192, 320, 5, 6, 2, 1}};
}
inline std::vector<Row> large_rows() {
  return {{32, 16, 3, 1, 1, 1},   {16, 24, 3, 6, 4, 2},   {24, 24, 3, 3, 4, 1},
          {24, 40, 5, 6, 4, 2},   {40, 40, 3, 3, 4, 1},   {40, 80, 5, 6, 4, 2},
          {80, 80, 5, 3, 4, 1},   {80, 80, 5, 3, 4, 1},   {80, 96, 5, 6, 4, 1},
          {96, 96, 5, 3, 4, 1},   {96, 96, 3, 3, 4, 1},   {96, 96, 3, 3, 4, 1},
          {96, 192, 5, 6, 2, 2},  {192, 192, 5, 6, 4, 1}, {192, 192, 5, 6, 4, 1},
          {192, 192, 5, 3, 4, 1}, {192, 192, 5, 3, 4, 1}, {192, 320, 5, 6, 2, 1}};
}
inline std::vector<Row> small_rows() {
  return {{32, 16, 3, 1, 1, 1},   {16, 24, 5, 6, 4, 2},   {24, 24, 3, 3, 4, 1},
          {24, 40, 5, 3, 4, 2},   {40, 40, 5, 3, 4, 1},   {40, 80, 5, 3, 4, 2},
          {80, 80, 3, 3, 4, 1},   {80, 96, 5, 3, 2, 1},   {96, 96, 3, 3, 4, 1},
          {96, 96, 5, 3, 4, 1},   {96, 192, 5, 6, 2, 2},  {192, 192, 5, 3, 2, 1},
          {192, 192, 5, 3, 2, 1}, {192, 320, 5, 6, 2, 1}};
}
}  // namespace detail

/// Rounds c*mult to a multiple of 8, at least 8 and at least 90% of c*mult.
inline std::int64_t scale_channels(std::int64_t c, double mult) {
  if (c < 1) throw ContractError("scale_channels: c must be >= 1");
  if (!(mult > 0.0) || !std::isfinite(mult)) throw ContractError("scale_channels: mult must be > 0");
  const double v = double(c) * mult;
  std::int64_t r = std::max<std::int64_t>(8, static_cast<std::int64_t>(v + 4.0) / 8 * 8);
  if (double(r) < 0.9 * v) r += 8;
  return r;
}

/// Reference block table for a variant at width 1.0.
inline std::vector<FrostBlockSpec> reference_blocks(Variant v) {
  switch (v) {
    case Variant::kBase: return detail::base_rows();
    case Variant::kLarge: return detail::large_rows();
    case Variant::kSmall: return detail::small_rows();
    case Variant::kCustom: break;
  }
  throw ContractError("reference_blocks: custom variant has no table");
}

/// Scales a block table's channels; the stem width feeding block 0 is kept.
inline std::vector<FrostBlockSpec> scale_blocks(std::vector<FrostBlockSpec> blocks, double mult,
                                                std::int64_t stem_channels) {
  std::int64_t prev = stem_channels;
  for (auto& b : blocks) {
    b.in_ch = prev;
    b.out_ch = scale_channels(b.out_ch, mult);
    prev = b.out_ch;
  }
  return blocks;
}

/// Architecture description for a reference variant.
inline ArchSpec frostnet_spec(Variant v, double width_mult = 1.0, std::int64_t num_classes = 1000,
                              std::int64_t stem_stride = 2) {
  ArchSpec a;
  a.variant = v;
  a.num_classes = num_classes;
  a.stem_stride = stem_stride;
  a.blocks = scale_blocks(reference_blocks(v), width_mult, a.stem_channels);
  return a;
}

// ----------------------------------------------------------------- builders

struct BlockTrace {
  int output = -1;
  std::int64_t squeeze = 0, concat = 0, expand = 0, project = 0;
  bool residual = false;
};

/// Appends a FrostConv block: squeeze, concatenate, expand, depthwise,
/// project, plus the identity shortcut when shapes agree.
inline BlockTrace build_frost_conv(model::ModelGraph& g, int x, const FrostBlockSpec& s,
                                   const std::string& name,
                                   ExpandBase base = ExpandBase::kConcat,
                                   ops::Activation act = ops::Activation::kRelu) {
  s.validate();
  if (g.channels(x) != s.in_ch) {
    throw DimensionError("build_frost_conv", "channels", name + ": input width mismatch");
  }
  BlockTrace t;
  int y = x;
  t.expand = s.expand(base);
  if (!s.degenerate()) {
    t.squeeze = s.squeeze();
    t.concat = s.concat();
    const int sq = g.conv_bn_act(x, t.squeeze, 1, 1, 1, act, name + ".squeeze");
    y = g.concat({x, sq}, name + ".concat");
    y = g.conv_bn_act(y, t.expand, 1, 1, 1, act, name + ".expand");
  }
  y = g.conv_bn_act(y, t.expand, s.kernel, s.stride, t.expand, act, name + ".dw");
  y = g.conv_bn_act(y, s.out_ch, 1, 1, 1, ops::Activation::kNone, name + ".project");
  t.project = s.out_ch;
  if (s.residual()) {
    y = g.add(x, y, name + ".add");
    t.residual = true;
  }
  t.output = y;
  return t;
}

/// Appends an inverted residual block, optionally with squeeze-excitation.
inline BlockTrace build_mbconv(model::ModelGraph& g, int x, std::int64_t in, std::int64_t out,
                               std::int64_t k, std::int64_t ef, std::int64_t stride, bool use_se,
                               const std::string& name,
                               ops::Activation act = ops::Activation::kRelu) {
  FrostBlockSpec probe{in, out, k, ef, 1, stride};
  probe.validate();
  if (g.channels(x) != in) {
    throw DimensionError("build_mbconv", "channels", name + ": input width mismatch");
  }
  BlockTrace t;
  const std::int64_t hid = in * ef;
  t.expand = hid;
  int y = x;
  if (ef != 1) y = g.conv_bn_act(x, hid, 1, 1, 1, act, name + ".expand");
  y = g.conv_bn_act(y, hid, k, stride, hid, act, name + ".dw");
  if (use_se) {
    const std::int64_t mid = scale_channels(hid, 0.25);
    int s = g.global_avgpool(y, name + ".se.pool");
    s = g.conv(s, mid, 1, 1, 1, true, name + ".se.reduce");
    s = g.activation(s, ops::Activation::kRelu, name + ".se.relu");
    s = g.conv(s, hid, 1, 1, 1, true, name + ".se.expand");
    s = g.hard_sigmoid(s, name + ".se.gate");
    y = g.mul_channels(y, s, name + ".se.mul");
    t.squeeze = mid;
  }
  y = g.conv_bn_act(y, out, 1, 1, 1, ops::Activation::kNone, name + ".project");
  t.project = out;
  if (in == out && stride == 1) {
    y = g.add(x, y, name + ".add");
    t.residual = true;
  }
  t.output = y;
  return t;
}

/// Stem, block stack, optional head, pooling and a 1x1 classifier conv.
/// Gradient groups: "stem", "stage1".. (one per resolution), "head".
inline model::ModelGraph build_from_spec(const ArchSpec& a, std::int64_t input_res,
                                         std::uint64_t seed = 0) {
  a.validate();
  if (input_res < 1 || input_res % a.total_stride() != 0) {
    throw ContractError("input resolution " + std::to_string(input_res) +
                        " must be a positive multiple of the total stride " +
                        std::to_string(a.total_stride()));
  }
  model::ModelGraph g(seed);
  int x = g.input(3);
  g.set_group("stem");
  x = g.conv_bn_act(x, a.stem_channels, 3, a.stem_stride, 1, a.act, "stem");
  int stage = 1;
  for (std::size_t i = 0; i < a.blocks.size(); ++i) {
    const auto& b = a.blocks[i];
    if (b.stride == 2 && i > 0) ++stage;
    g.set_group("stage" + std::to_string(stage));
    const std::string name = "block" + std::to_string(i);
    switch (a.block_type) {
      case BlockType::kFrost:
        x = build_frost_conv(g, x, b, name, a.expand_base, a.act).output;
        break;
      case BlockType::kMBConv:
      case BlockType::kMBConvSE:
        x = build_mbconv(g, x, b.in_ch, b.out_ch, b.kernel, b.ef, b.stride,
                         a.block_type == BlockType::kMBConvSE, name, a.act)
                .output;
        break;
    }
  }
  g.set_group("head");
  if (a.head_channels > 0) x = g.conv_bn_act(x, a.head_channels, 1, 1, 1, a.act, "head");
  x = g.global_avgpool(x, "pool");
  x = g.conv(x, a.num_classes, 1, 1, 1, true, "classifier");
  g.flatten(x, "logits");
  return g;
}

inline model::ModelGraph build_frostnet(Variant v, double width_mult, std::int64_t num_classes,
                                        std::int64_t input_res = 224, std::int64_t stem_stride = 2,
                                        std::uint64_t seed = 0) {
  return build_from_spec(frostnet_spec(v, width_mult, num_classes, stem_stride), input_res, seed);
}

struct Counts {
  std::int64_t params = 0;
  std::int64_t flops = 0;
};

inline Counts count(const ArchSpec& a, std::int64_t input_res = 224) {
  const auto g = build_from_spec(a, input_res);
  return {g.count_params(), g.count_flops(input_res)};
}

/// Ten identical stride-1 blocks on a fixed-width map, for latency work.
/// Six-block network small enough to train on one core in seconds per
/// epoch; used for desk-scale experiments and as the search skeleton.
inline ArchSpec desk_spec(std::int64_t num_classes = 10) {
  ArchSpec a;
  a.stem_channels = 16;
  a.stem_stride = 2;
  a.head_channels = 0;
  a.num_classes = num_classes;
  a.blocks = {{16, 16, 3, 1, 1, 1}, {16, 24, 3, 3, 4, 2}, {24, 24, 3, 3, 4, 1},
              {24, 40, 3, 3, 4, 2}, {40, 40, 3, 3, 4, 1}, {40, 64, 3, 3, 4, 2}};
  return a;
}

inline ArchSpec bench_stack(BlockType type, std::int64_t channels = 64, std::int64_t kernel = 3,
                            std::int64_t ef = 3, std::int64_t rf = 4, int depth = 10) {
  ArchSpec a;
  a.block_type = type;
  a.stem_channels = channels;
  a.stem_stride = 1;
  a.head_channels = 0;
  a.num_classes = 10;
  for (int i = 0; i < depth; ++i) a.blocks.push_back({channels, channels, kernel, ef, rf, 1});
  return a;
}

// --------------------------------------------------------------------- JSON

inline const char* to_string(BlockType b) {
  switch (b) {
    case BlockType::kFrost: return "frost";
    case BlockType::kMBConv: return "mbconv";
    case BlockType::kMBConvSE: return "mbconv_se";
  }
  return "?";
}

inline BlockType block_type_from_string(const std::string& s) {
  if (s == "frost") return BlockType::kFrost;
  if (s == "mbconv") return BlockType::kMBConv;
  if (s == "mbconv_se") return BlockType::kMBConvSE;
  throw ContractError("unknown block type '" + s + "'");
}

inline ops::Activation activation_from_string(const std::string& s) {
  if (s == "none") return ops::Activation::kNone;
  if (s == "relu") return ops::Activation::kRelu;
  if (s == "relu6") return ops::Activation::kRelu6;
  throw ContractError("unknown activation '" + s + "'");
}

inline nlohmann::json to_json(const ArchSpec& a) {
  nlohmann::json j;
  j["variant"] = to_string(a.variant);
  j["stem_channels"] = a.stem_channels;
  j["stem_stride"] = a.stem_stride;
  j["head_channels"] = a.head_channels;
  j["num_classes"] = a.num_classes;
  j["expand_base"] = to_string(a.expand_base);
  j["block_type"] = to_string(a.block_type);
  j["activation"] = ops::to_string(a.act);
  auto& bs = j["blocks"] = nlohmann::json::array();
  for (const auto& b : a.blocks) {
    bs.push_back({{"in", b.in_ch}, {"out", b.out_ch}, {"kernel", b.kernel}, {"ef", b.ef},
                  {"rf", b.rf}, {"stride", b.stride}});
  }
  return j;
}

inline ArchSpec arch_from_json(const nlohmann::json& j) {
  try {
    ArchSpec a;
    a.variant = variant_from_string(j.value("variant", "custom"));
    a.stem_channels = j.value("stem_channels", std::int64_t{32});
    a.stem_stride = j.value("stem_stride", std::int64_t{2});
    a.head_channels = j.value("head_channels", std::int64_t{1280});
    a.num_classes = j.value("num_classes", std::int64_t{1000});
    a.expand_base = expand_base_from_string(j.value("expand_base", "concat"));
    a.block_type = block_type_from_string(j.value("block_type", "frost"));
    a.act = activation_from_string(j.value("activation", "relu"));
    for (const auto& b : j.at("blocks")) {
      a.blocks.push_back({b.at("in").get<std::int64_t>(), b.at("out").get<std::int64_t>(),
                          b.at("kernel").get<std::int64_t>(), b.at("ef").get<std::int64_t>(),
                          b.at("rf").get<std::int64_t>(), b.at("stride").get<std::int64_t>()});
    }
    a.validate();
    return a;
  } catch (const nlohmann::json::exception& e) {
    throw ContractError(std::string("architecture JSON: ") + e.what());
  }
}

inline ArchSpec load_arch(const std::string& path) {
  std::ifstream f(path);
  if (!f) throw IoError("cannot open architecture file '" + path + "'");
  nlohmann::json j;
  try {
    f >> j;
  } catch (const nlohmann::json::exception& e) {
    throw ContractError("architecture file '" + path + "': " + e.what());
  }
  return arch_from_json(j);
}

inline void save_arch(const ArchSpec& a, const std::string& path) {
  std::ofstream f(path);
  if (!f) throw IoError("cannot write architecture file '" + path + "'");
  f << to_json(a).dump(2) << '\n';
}

}  // namespace frostq::arch
