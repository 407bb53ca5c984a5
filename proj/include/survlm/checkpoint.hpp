// Copyright (c) 2026, The survlm Authors
// SPDX-License-Identifier: Apache-2.0
//
// Checkpoint file: one JSON header line, then a little-endian float64
// payload holding every parameter in ModelParams::all() order followed by
// the optimizer's first and second moments for each tensor listed in the
// header. Reading and rewriting a checkpoint reproduces it byte for byte.

#pragma once

#include <bit>
#include <cstdint>
#include <cstring>
#include <filesystem>
#include <fstream>
#include <sstream>
#include <string>

#include <json.hpp>

#include "survlm/error.hpp"
#include "survlm/train.hpp"

namespace survlm {

inline constexpr const char* kCheckpointFormat = "survlm-checkpoint";
inline constexpr int kCheckpointVersion = 1;

namespace detail {

inline void put_f64_le(std::string& out, double d) {
  std::uint64_t u = std::bit_cast<std::uint64_t>(d);
  for (int i = 0; i < 8; ++i) out.push_back(static_cast<char>((u >> (8 * i)) & 0xFF));
}

inline double get_f64_le(const char* p) {
  std::uint64_t u = 0;
  for (int i = 0; i < 8; ++i) u |= static_cast<std::uint64_t>(static_cast<unsigned char>(p[i])) << (8 * i);
  return std::bit_cast<double>(u);
}

}  // namespace detail

inline std::string serialize_checkpoint(const TrainState& st) {
  nlohmann::json header;
  header["format"] = kCheckpointFormat;
  header["version"] = kCheckpointVersion;
  header["model_config"] = st.model;
  header["train_config"] = st.train;
  header["stage"] = to_string(st.train.stage);
  header["step"] = st.step;
  header["seed"] = st.train.seed;
  nlohmann::json frozen = nlohmann::json::object();
  for (auto g : kAllGroups) frozen[group_name(g)] = st.params.is_frozen(g);
  header["frozen"] = frozen;
  header["vocabulary"] = st.vocabulary;
  header["time_grid"] = st.grid ? nlohmann::json(st.grid->edges) : nlohmann::json(nullptr);
  header["sigma"] = st.sigma;

  std::string payload;
  nlohmann::json tensors = nlohmann::json::array();
  for (const auto& nt : st.params.all()) {
    tensors.push_back({{"name", nt.name}, {"shape", nt.tensor.shape()}});
    for (double v : nt.tensor.data()) detail::put_f64_le(payload, v);
  }
  header["tensors"] = tensors;
  nlohmann::json opt = nlohmann::json::array();
  for (const auto& [name, s] : st.optimizer.state) {
    opt.push_back({{"name", name}, {"t", s.t}, {"size", s.m.size()}});
    for (double v : s.m) detail::put_f64_le(payload, v);
    for (double v : s.v) detail::put_f64_le(payload, v);
  }
  header["optimizer"] = {{"beta1", st.optimizer.beta1},
                         {"beta2", st.optimizer.beta2},
                         {"eps", st.optimizer.eps},
                         {"weight_decay", st.optimizer.weight_decay},
                         {"state", opt}};
  header["payload_bytes"] = payload.size();
  return header.dump() + "\n" + payload;
}

inline TrainState deserialize_checkpoint(const std::string& bytes, const std::string& name = "checkpoint") {
  const auto nl = bytes.find('\n');
  if (nl == std::string::npos) throw DataError(name + ": missing checkpoint header");
  nlohmann::json h;
  try {
    h = nlohmann::json::parse(bytes.substr(0, nl));
  } catch (const nlohmann::json::exception& e) {
    throw DataError(name + ": bad checkpoint header: " + e.what());
  }
  try {
    if (h.at("format") != kCheckpointFormat) throw DataError(name + ": not a survlm checkpoint");
    if (h.at("version") != kCheckpointVersion)
      throw DataError(name + ": unsupported checkpoint version " + h.at("version").dump());
    const char* p = bytes.data() + nl + 1;
    const std::size_t size = bytes.size() - nl - 1;
    if (size != h.at("payload_bytes").get<std::size_t>())
      throw DataError(name + ": payload size mismatch");
    std::size_t offset = 0;
    auto read = [&](std::size_t n) {
      if (offset + 8 * n > size) throw DataError(name + ": truncated payload");
      std::vector<double> out(n);
      for (std::size_t i = 0; i < n; ++i) out[i] = detail::get_f64_le(p + offset + 8 * i);
      offset += 8 * n;
      return out;
    };

    TrainState st;
    st.model = h.at("model_config").get<ModelConfig>();
    st.train = h.at("train_config").get<TrainConfig>();
    st.step = h.at("step").get<std::size_t>();
    st.vocabulary = h.at("vocabulary").get<std::vector<std::string>>();
    if (!h.at("time_grid").is_null()) st.grid = TimeGrid{h.at("time_grid").get<std::vector<double>>()};
    st.sigma = h.at("sigma").get<double>();
    st.params = init_params(st.model);

    const auto handles = st.params.all();
    const auto& tensors = h.at("tensors");
    if (tensors.size() != handles.size()) throw DataError(name + ": tensor count does not match model config");
    for (std::size_t i = 0; i < handles.size(); ++i) {
      Tensor t = handles[i].tensor;
      if (tensors[i].at("name") != handles[i].name || tensors[i].at("shape").get<Shape>() != t.shape())
        throw DataError(name + ": tensor " + tensors[i].at("name").get<std::string>() +
                        " does not match model config");
      const auto values = read(t.numel());
      std::copy(values.begin(), values.end(), t.mutable_data().begin());
    }
    for (auto g : kAllGroups) st.params.set_frozen(g, h.at("frozen").at(group_name(g)).get<bool>());

    const auto& o = h.at("optimizer");
    st.optimizer.beta1 = o.at("beta1");
    st.optimizer.beta2 = o.at("beta2");
    st.optimizer.eps = o.at("eps");
    st.optimizer.weight_decay = o.at("weight_decay");
    for (const auto& e : o.at("state")) {
      AdamState s;
      s.t = e.at("t");
      const std::size_t n = e.at("size");
      s.m = read(n);
      s.v = read(n);
      st.optimizer.state[e.at("name").get<std::string>()] = std::move(s);
    }
    if (offset != size) throw DataError(name + ": trailing payload bytes");
    return st;
  } catch (const nlohmann::json::exception& e) {
    throw DataError(name + ": bad checkpoint header: " + e.what());
  }
}

// Writes through a temporary file and a rename so readers never see a
// partial checkpoint.
inline void write_checkpoint(const std::string& path, const TrainState& st) {
  namespace fs = std::filesystem;
  const fs::path target(path);
  if (target.has_parent_path()) fs::create_directories(target.parent_path());
  const fs::path tmp = target.string() + ".tmp";
  {
    std::ofstream f(tmp, std::ios::binary);
    if (!f) throw DataError("cannot write " + tmp.string());
    const auto bytes = serialize_checkpoint(st);
    f.write(bytes.data(), static_cast<std::streamsize>(bytes.size()));
    if (!f) throw DataError("failed writing " + tmp.string());
  }
  fs::rename(tmp, target);
}

inline TrainState read_checkpoint(const std::string& path) {
  std::ifstream f(path, std::ios::binary);
  if (!f) throw DataError("cannot open checkpoint " + path);
  std::ostringstream ss;
  ss << f.rdbuf();
  return deserialize_checkpoint(ss.str(), path);
}

// FNV-1a over the raw bytes of the given tensors.
inline std::uint64_t tensor_checksum(const std::vector<NamedTensor>& tensors) {
  std::uint64_t h = 1469598103934665603ULL;
  for (const auto& nt : tensors)
    for (double v : nt.tensor.data()) {
      const auto u = std::bit_cast<std::uint64_t>(v);
      for (int i = 0; i < 8; ++i) {
        h ^= (u >> (8 * i)) & 0xFF;
        h *= 1099511628211ULL;
      }
    }
  return h;
}

inline std::uint64_t group_checksum(const ModelParams& p, ParamGroupId g) { return tensor_checksum(p.group(g)); }

}  // namespace survlm
