// Copyright (c) 2026, The survlm Authors
// SPDX-License-Identifier: Apache-2.0
//
// CT volume container and its on-disk form: a JSON sidecar
// {"dims": [x, y, z], "spacing_mm": [a, b, c]} next to a raw payload of
// little-endian float32 values in x-fastest order.

#pragma once

#include <array>
#include <bit>
#include <cstdint>
#include <cstring>
#include <fstream>
#include <stdexcept>
#include <string>
#include <vector>

#include <json.hpp>

#include "survlm/error.hpp"

namespace survlm {

struct Volume {
  std::array<std::size_t, 3> dims{0, 0, 0};
  std::array<double, 3> spacing_mm{1.0, 1.0, 1.0};
  std::vector<double> data;  // x-fastest: index = x + X * (y + Y * z)

  Volume() = default;
  Volume(std::array<std::size_t, 3> d, std::array<double, 3> spacing, double fill = 0.0)
      : dims(d), spacing_mm(spacing), data(d[0] * d[1] * d[2], fill) {}

  std::size_t size() const { return dims[0] * dims[1] * dims[2]; }
  std::size_t index(std::size_t x, std::size_t y, std::size_t z) const {
    return x + dims[0] * (y + dims[1] * z);
  }
  double& at(std::size_t x, std::size_t y, std::size_t z) { return data[index(x, y, z)]; }
  double at(std::size_t x, std::size_t y, std::size_t z) const { return data[index(x, y, z)]; }
};

namespace detail {

inline void put_f32_le(std::string& out, float f) {
  auto bits = std::bit_cast<std::uint32_t>(f);
  for (int i = 0; i < 4; ++i) out.push_back(static_cast<char>((bits >> (8 * i)) & 0xFF));
}

inline float get_f32_le(const unsigned char* p) {
  std::uint32_t bits = 0;
  for (int i = 0; i < 4; ++i) bits |= static_cast<std::uint32_t>(p[i]) << (8 * i);
  return std::bit_cast<float>(bits);
}

}  // namespace detail

// Writes <stem>.json and <stem>.raw.
inline void write_volume(const std::string& stem, const Volume& v) {
  nlohmann::json side;
  side["dims"] = {v.dims[0], v.dims[1], v.dims[2]};
  side["spacing_mm"] = {v.spacing_mm[0], v.spacing_mm[1], v.spacing_mm[2]};
  {
    std::ofstream js(stem + ".json", std::ios::binary);
    if (!js) throw DataError("cannot write " + stem + ".json");
    js << side.dump() << '\n';
  }
  std::string payload;
  payload.reserve(v.data.size() * 4);
  for (double x : v.data) detail::put_f32_le(payload, static_cast<float>(x));
  std::ofstream raw(stem + ".raw", std::ios::binary);
  if (!raw) throw DataError("cannot write " + stem + ".raw");
  raw.write(payload.data(), static_cast<std::streamsize>(payload.size()));
}

inline Volume read_volume(const std::string& stem) {
  std::ifstream js(stem + ".json", std::ios::binary);
  if (!js) throw DataError("cannot open " + stem + ".json");
  nlohmann::json side;
  try {
    js >> side;
  } catch (const nlohmann::json::exception& e) {
    throw DataError(stem + ".json: " + e.what());
  }
  Volume v;
  try {
    for (int i = 0; i < 3; ++i) {
      v.dims[i] = side.at("dims").at(i).get<std::size_t>();
      v.spacing_mm[i] = side.at("spacing_mm").at(i).get<double>();
    }
  } catch (const nlohmann::json::exception& e) {
    throw DataError(stem + ".json: " + e.what());
  }
  std::ifstream raw(stem + ".raw", std::ios::binary);
  if (!raw) throw DataError("cannot open " + stem + ".raw");
  std::vector<unsigned char> bytes((std::istreambuf_iterator<char>(raw)),
                                   std::istreambuf_iterator<char>());
  if (bytes.size() != v.size() * 4)
    throw DataError(stem + ".raw: expected " + std::to_string(v.size() * 4) + " bytes, found " +
                    std::to_string(bytes.size()));
  v.data.resize(v.size());
  for (std::size_t i = 0; i < v.size(); ++i) v.data[i] = detail::get_f32_le(bytes.data() + 4 * i);
  return v;
}

}  // namespace survlm
