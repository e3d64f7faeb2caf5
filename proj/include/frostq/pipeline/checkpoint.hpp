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

// Checkpoints: a JSON manifest (format version, architecture, precision,
// tensor index, observer statistics) next to a raw little-endian float32 blob.

#include <bit>
#include <cstdint>
#include <cstring>
#include <filesystem>
#include <fstream>
#include <optional>
#include <string>
#include <vector>

#include <json.hpp>  // vendored nlohmann::json

#include "frostq/arch/frostnet.hpp"
#include "frostq/model/graph.hpp"

namespace frostq::pipeline {

inline constexpr int kCheckpointVersion = 1;
inline constexpr const char* kCheckpointFormat = "frostq-checkpoint";

struct CheckpointMeta {
  arch::ArchSpec arch;
  std::int64_t input_res = 32;
  model::PrepareOptions prepare{};
  nlohmann::json extra = nlohmann::json::object();  // free-form run info
};

namespace detail {

static_assert(std::endian::native == std::endian::little,
              "checkpoint blobs are written in host order; big-endian hosts need a byte swap");

// Every persistent float tensor of the graph in a fixed order.
inline std::vector<std::pair<std::string, Tensor<float>*>> tensor_slots(model::ModelGraph& g) {
  std::vector<std::pair<std::string, Tensor<float>*>> out;
  for (auto& n : g.mutable_nodes()) {
    if (n.weight) out.emplace_back(n.name + ".weight", &n.weight->value);
    if (n.bias) out.emplace_back(n.name + ".bias", &n.bias->value);
    if (n.gamma) out.emplace_back(n.name + ".gamma", &n.gamma->value);
    if (n.beta) out.emplace_back(n.name + ".beta", &n.beta->value);
    if (n.kind == model::NodeKind::kBatchNorm) {
      out.emplace_back(n.name + ".running_mean", &n.bn.running_mean);
      out.emplace_back(n.name + ".running_var", &n.bn.running_var);
    }
  }
  return out;
}

}  // namespace detail

/// Writes <dir>/manifest.json and <dir>/tensors.bin.
inline void save_checkpoint(model::ModelGraph& g, const CheckpointMeta& meta,
                            const std::filesystem::path& dir) {
  std::error_code ec;
  std::filesystem::create_directories(dir, ec);
  if (ec) throw IoError("checkpoint: cannot create '" + dir.string() + "': " + ec.message());
  nlohmann::json m;
  m["format"] = kCheckpointFormat;
  m["version"] = kCheckpointVersion;
  m["precision"] = model::to_string(g.precision());
  m["arch"] = arch::to_json(meta.arch);
  m["input_res"] = meta.input_res;
  m["observer_averaging"] = meta.prepare.averaging;
  m["observer_mode"] = quant::to_string(meta.prepare.mode);
  m["extra"] = meta.extra;
  auto& idx = m["tensors"] = nlohmann::json::array();
  std::ofstream blob(dir / "tensors.bin", std::ios::binary);
  if (!blob) throw IoError("checkpoint: cannot write '" + (dir / "tensors.bin").string() + "'");
  std::int64_t offset = 0;
  for (auto& [name, t] : detail::tensor_slots(g)) {
    idx.push_back({{"name", name}, {"shape", t->shape()}, {"offset", offset}});
    blob.write(reinterpret_cast<const char*>(t->data()),
               static_cast<std::streamsize>(t->numel() * 4));
    offset += t->numel() * 4;
  }
  if (!blob) throw IoError("checkpoint: write failed for tensors.bin");
  m["blob_bytes"] = offset;
  auto& obs = m["observers"] = nlohmann::json::array();
  for (const auto& n : g.nodes()) {
    if (!n.observer) continue;
    nlohmann::json o{{"node", n.name},
                     {"min", n.observer->min_val()},
                     {"max", n.observer->max_val()},
                     {"count", n.observer->count()},
                     {"frozen", n.observer->frozen()}};
    if (n.observer->count() > 0) {
      const auto s = n.observer->stats();
      o["scale"] = s.scale;
      o["zero_point"] = s.zero_point;
    }
    obs.push_back(o);
  }
  std::ofstream mf(dir / "manifest.json");
  if (!mf) throw IoError("checkpoint: cannot write manifest.json");
  mf << m.dump(1) << '\n';
}

struct LoadedCheckpoint {
  model::ModelGraph model;
  CheckpointMeta meta;
};

/// Rebuilds the graph, replays fusion and conversion up to the stored
/// precision, and installs every tensor and observer bit-for-bit. With
/// `expect` set, a different stored precision is an error.
inline LoadedCheckpoint load_checkpoint(const std::filesystem::path& dir,
                                        std::optional<model::Precision> expect = std::nullopt) {
  const auto mpath = dir / "manifest.json";
  std::ifstream mf(mpath);
  if (!mf) throw IoError("checkpoint: no manifest at '" + mpath.string() + "'");
  nlohmann::json m;
  try {
    mf >> m;
  } catch (const nlohmann::json::exception& e) {
    throw IoError("checkpoint: manifest '" + mpath.string() + "' is not valid JSON: " + e.what());
  }
  auto bad = [&](const std::string& why) -> IoError {
    return IoError("checkpoint '" + dir.string() + "': " + why);
  };
  if (m.value("format", "") != kCheckpointFormat) throw bad("manifest format tag missing");
  const int version = m.value("version", -1);
  if (version != kCheckpointVersion) {
    throw bad("manifest version " + std::to_string(version) + ", this build reads version " +
              std::to_string(kCheckpointVersion) + " only");
  }
  LoadedCheckpoint out{model::ModelGraph(), {}};
  model::Precision prec;
  try {
    prec = model::precision_from_string(m.at("precision").get<std::string>());
    out.meta.arch = arch::arch_from_json(m.at("arch"));
    out.meta.input_res = m.at("input_res").get<std::int64_t>();
    out.meta.prepare.averaging = m.at("observer_averaging").get<double>();
    const auto mode = m.at("observer_mode").get<std::string>();
    out.meta.prepare.mode = mode == "absolute_min_max" ? quant::ObserverMode::kAbsoluteMinMax
                                                       : quant::ObserverMode::kMovingAverage;
    out.meta.extra = m.value("extra", nlohmann::json::object());
  } catch (const nlohmann::json::exception& e) {
    throw bad(std::string("manifest field error: ") + e.what());
  }
  if (expect && *expect != prec) {
    throw ContractError("checkpoint '" + dir.string() + "' holds a " + model::to_string(prec) +
                        " model, expected " + model::to_string(*expect));
  }
  out.model = arch::build_from_spec(out.meta.arch, out.meta.input_res);
  auto& g = out.model;
  if (prec != model::Precision::kFp) g.prepare_qat(out.meta.prepare);

  const auto bpath = dir / "tensors.bin";
  std::ifstream blob(bpath, std::ios::binary);
  if (!blob) throw bad("tensors.bin missing");
  std::error_code ec;
  const auto bytes = static_cast<std::int64_t>(std::filesystem::file_size(bpath, ec));
  if (ec || bytes != m.value("blob_bytes", std::int64_t{-1})) {
    throw bad("tensors.bin has " + std::to_string(bytes) + " bytes, manifest says " +
              std::to_string(m.value("blob_bytes", std::int64_t{-1})));
  }
  const auto& idx = m.at("tensors");
  auto slots = detail::tensor_slots(g);
  if (idx.size() != slots.size()) {
    throw bad("manifest lists " + std::to_string(idx.size()) + " tensors, architecture has " +
              std::to_string(slots.size()));
  }
  for (std::size_t i = 0; i < slots.size(); ++i) {
    auto& [name, t] = slots[i];
    const auto& e = idx[i];
    if (e.at("name").get<std::string>() != name) {
      throw bad("tensor " + std::to_string(i) + " is '" + e.at("name").get<std::string>() +
                "', expected '" + name + "'");
    }
    if (e.at("shape").get<Shape>() != t->shape()) {
      throw bad("tensor '" + name + "' stored as " + to_string(e.at("shape").get<Shape>()) +
                ", architecture needs " + to_string(t->shape()));
    }
    const auto off = e.at("offset").get<std::int64_t>();
    if (off < 0 || off + t->numel() * 4 > bytes) throw bad("tensor '" + name + "' out of range");
    blob.seekg(off);
    blob.read(reinterpret_cast<char*>(t->data()), static_cast<std::streamsize>(t->numel() * 4));
    if (!blob) throw bad("short read for tensor '" + name + "'");
  }
  auto& nodes = g.mutable_nodes();
  for (const auto& o : m.at("observers")) {
    const auto name = o.at("node").get<std::string>();
    auto it = std::find_if(nodes.begin(), nodes.end(),
                           [&](const model::Node& n) { return n.name == name; });
    if (it == nodes.end() || !it->observer) throw bad("observer for unknown node '" + name + "'");
    it->observer->restore(o.at("min").get<double>(), o.at("max").get<double>(),
                          o.at("count").get<std::int64_t>());
    if (o.value("frozen", false)) it->observer->freeze();
    if (o.contains("scale")) {
      const auto s = it->observer->stats();
      if (s.scale != o.at("scale").get<double>() ||
          s.zero_point != o.at("zero_point").get<std::int32_t>()) {
        throw bad("observer '" + name + "' statistics do not match its stored range");
      }
    }
  }
  if (prec == model::Precision::kInt8) g.convert_int8();
  return out;
}

}  // namespace frostq::pipeline
