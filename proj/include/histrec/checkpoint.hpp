// SPDX-License-Identifier: Apache-2.0
//
// Checkpoint directory format: a JSON manifest naming every array (shape
// and float offset) plus one packed little-endian float32 blob. Model
// parameters, optimizer moments, quantizer state, and the training step
// all round-trip exactly, so a resumed run continues bit-identically.
#pragma once

#include <json.hpp>

#include <cstdint>
#include <cstdio>
#include <filesystem>
#include <fstream>
#include <string>
#include <utility>
#include <vector>

#include "histrec/config.hpp"
#include "histrec/rng.hpp"
#include "histrec/tensor.hpp"

namespace histrec::ckpt {

struct Checkpoint {
  int64_t step = 0;
  int64_t opt_t = 0;  // optimizer update counter
  std::string config_fingerprint;
  std::vector<std::pair<std::string, Tensor>> params;
  std::vector<std::pair<std::string, Tensor>> opt_m, opt_v;
  nlohmann::json quantizer;  // null when the model runs without one
  nlohmann::json extra = nlohmann::json::object();

  const Tensor* find(const std::string& name) const {
    for (const auto& [n, t] : params) {
      if (n == name) return &t;
    }
    return nullptr;
  }
};

inline std::string config_fingerprint(const Config& c) {
  char buf[17];
  std::snprintf(buf, sizeof(buf), "%016llx",
                static_cast<unsigned long long>(derive_seed(0x5eedf00d, c.to_text())));
  return buf;
}

namespace detail {

inline nlohmann::json describe_arrays(const std::vector<std::pair<std::string, Tensor>>& arrays,
                                      int64_t& offset) {
  nlohmann::json out = nlohmann::json::array();
  for (const auto& [name, t] : arrays) {
    out.push_back({{"name", name}, {"shape", t.shape()}, {"offset", offset}});
    offset += t.numel();
  }
  return out;
}

inline void append_arrays(std::ofstream& bin,
                          const std::vector<std::pair<std::string, Tensor>>& arrays) {
  for (const auto& [name, t] : arrays) {
    bin.write(reinterpret_cast<const char*>(t.data()),
              static_cast<std::streamsize>(sizeof(float)) * t.numel());
  }
}

inline std::vector<std::pair<std::string, Tensor>> read_arrays(const nlohmann::json& list,
                                                               std::ifstream& bin) {
  std::vector<std::pair<std::string, Tensor>> out;
  for (const auto& e : list) {
    const Shape shape = e.at("shape").get<Shape>();
    Tensor t(shape);
    bin.seekg(static_cast<std::streamoff>(e.at("offset").get<int64_t>()) *
              static_cast<std::streamoff>(sizeof(float)));
    bin.read(reinterpret_cast<char*>(t.data()),
             static_cast<std::streamsize>(sizeof(float)) * t.numel());
    if (!bin) throw DataError("checkpoint: truncated params.bin at '" +
                              e.at("name").get<std::string>() + "'");
    out.emplace_back(e.at("name").get<std::string>(), std::move(t));
  }
  return out;
}

}  // namespace detail

inline void save_checkpoint(const Checkpoint& c, const std::filesystem::path& dir) {
  std::filesystem::create_directories(dir);
  int64_t offset = 0;
  nlohmann::json manifest;
  manifest["format"] = "histrec-checkpoint-v1";
  manifest["dtype"] = "f32-le";
  manifest["step"] = c.step;
  manifest["config_fingerprint"] = c.config_fingerprint;
  manifest["params"] = detail::describe_arrays(c.params, offset);
  manifest["opt_t"] = c.opt_t;
  manifest["opt_m"] = detail::describe_arrays(c.opt_m, offset);
  manifest["opt_v"] = detail::describe_arrays(c.opt_v, offset);
  manifest["quantizer"] = c.quantizer;
  manifest["extra"] = c.extra;

  std::ofstream bin(dir / "params.bin", std::ios::binary | std::ios::trunc);
  if (!bin) throw DataError("checkpoint: cannot write " + (dir / "params.bin").string());
  detail::append_arrays(bin, c.params);
  detail::append_arrays(bin, c.opt_m);
  detail::append_arrays(bin, c.opt_v);
  bin.close();
  if (!bin) throw DataError("checkpoint: failed writing " + (dir / "params.bin").string());

  std::ofstream mf(dir / "manifest.json", std::ios::trunc);
  if (!mf) throw DataError("checkpoint: cannot write " + (dir / "manifest.json").string());
  mf << manifest.dump(2) << "\n";
}

inline Checkpoint load_checkpoint(const std::filesystem::path& dir) {
  std::ifstream mf(dir / "manifest.json");
  if (!mf) throw DataError("checkpoint: cannot open " + (dir / "manifest.json").string());
  nlohmann::json manifest;
  try {
    mf >> manifest;
  } catch (const nlohmann::json::exception& e) {
    throw DataError("checkpoint: bad manifest in " + dir.string() + ": " + e.what());
  }
  if (manifest.value("format", "") != "histrec-checkpoint-v1") {
    throw DataError("checkpoint: unknown format in " + dir.string());
  }
  std::ifstream bin(dir / "params.bin", std::ios::binary);
  if (!bin) throw DataError("checkpoint: cannot open " + (dir / "params.bin").string());

  Checkpoint c;
  c.step = manifest.at("step").get<int64_t>();
  c.opt_t = manifest.at("opt_t").get<int64_t>();
  c.config_fingerprint = manifest.at("config_fingerprint").get<std::string>();
  c.params = detail::read_arrays(manifest.at("params"), bin);
  c.opt_m = detail::read_arrays(manifest.at("opt_m"), bin);
  c.opt_v = detail::read_arrays(manifest.at("opt_v"), bin);
  c.quantizer = manifest.at("quantizer");
  c.extra = manifest.value("extra", nlohmann::json::object());
  return c;
}

}  // namespace histrec::ckpt
