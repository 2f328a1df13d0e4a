// Copyright 2026 The brakelab Authors
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

// Parameter checkpoint: one line of JSON (shape manifest plus caller
// metadata), a newline, then every parameter as little-endian float64 in
// manifest order.

#include <cstdint>
#include <cstring>
#include <filesystem>
#include <fstream>
#include <stdexcept>
#include <string>
#include <vector>

#include "brakelab/nn/tape.hpp"
#include "json.hpp"

namespace brakelab::nn {

inline constexpr const char* kCheckpointFormat = "brakelab.params/1";

class CheckpointError : public std::runtime_error {
 public:
  using std::runtime_error::runtime_error;
};

template <class T>
void save_checkpoint(const std::filesystem::path& path, const std::vector<Parameter<T>*>& params,
                     const nlohmann::ordered_json& meta = nlohmann::ordered_json::object()) {
  nlohmann::ordered_json manifest;
  manifest["format"] = kCheckpointFormat;
  manifest["dtype"] = "float64";
  manifest["params"] = nlohmann::ordered_json::array();
  for (const auto* p : params) {
    manifest["params"].push_back({{"name", p->name}, {"shape", {p->value.rows(), p->value.cols()}}});
  }
  manifest["meta"] = meta;

  const auto tmp = path.string() + ".tmp";
  {
    std::ofstream out(tmp, std::ios::binary | std::ios::trunc);
    if (!out) throw CheckpointError("cannot open checkpoint for writing: " + tmp);
    out << manifest.dump() << '\n';
    for (const auto* p : params) {
      for (Eigen::Index i = 0; i < p->value.size(); ++i) {
        const double v = static_cast<double>(p->value.data()[i]);
        char buf[sizeof(double)];
        std::memcpy(buf, &v, sizeof(double));
        out.write(buf, sizeof(double));
      }
    }
    if (!out) throw CheckpointError("write failed: " + tmp);
  }
  std::filesystem::rename(tmp, path);
}

// Reads a checkpoint into `params`, whose names and shapes must match the
// manifest exactly. Returns the caller metadata block.
template <class T>
nlohmann::ordered_json load_checkpoint(const std::filesystem::path& path,
                                       const std::vector<Parameter<T>*>& params) {
  std::ifstream in(path, std::ios::binary);
  if (!in) throw CheckpointError("cannot open checkpoint: " + path.string());
  std::string header;
  std::getline(in, header);
  nlohmann::ordered_json manifest;
  try {
    manifest = nlohmann::ordered_json::parse(header);
  } catch (const nlohmann::json::exception& e) {
    throw CheckpointError("malformed checkpoint manifest in " + path.string() + ": " + e.what());
  }
  if (manifest.value("format", "") != kCheckpointFormat) {
    throw CheckpointError("unsupported checkpoint format in " + path.string());
  }
  const auto& entries = manifest.at("params");
  if (entries.size() != params.size()) {
    throw CheckpointError("checkpoint holds " + std::to_string(entries.size()) + " tensors, expected " +
                          std::to_string(params.size()));
  }
  for (std::size_t i = 0; i < params.size(); ++i) {
    auto* p = params[i];
    const auto& e = entries[i];
    const auto name = e.at("name").get<std::string>();
    const auto rows = e.at("shape").at(0).get<Eigen::Index>();
    const auto cols = e.at("shape").at(1).get<Eigen::Index>();
    if (name != p->name || rows != p->value.rows() || cols != p->value.cols()) {
      throw CheckpointError("checkpoint tensor " + std::to_string(i) + " (" + name +
                            ") does not match " + p->name);
    }
    for (Eigen::Index k = 0; k < p->value.size(); ++k) {
      char buf[sizeof(double)];
      if (!in.read(buf, sizeof(double))) {
        throw CheckpointError("checkpoint truncated inside tensor " + name);
      }
      double v = 0.0;
      std::memcpy(&v, buf, sizeof(double));
      p->value.data()[k] = static_cast<T>(v);
    }
  }
  if (in.peek() != std::char_traits<char>::eof()) {
    throw CheckpointError("trailing bytes after last tensor in " + path.string());
  }
  return manifest.value("meta", nlohmann::ordered_json::object());
}

}  // namespace brakelab::nn
