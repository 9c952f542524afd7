#pragma once

#include <cstdint>
#include <filesystem>
#include <string>
#include <utility>
#include <vector>

#include <json.hpp>

#include "cle/nn.hpp"

namespace cle {

/// Serializable model snapshot: a JSON manifest followed by raw little-endian
/// float32 tensor payloads.
///
/// File layout:
///   8 bytes   magic "CLECKPT1"
///   8 bytes   manifest length L (uint64, little-endian)
///   L bytes   manifest (compact JSON, sorted keys)
///   payload   tensors back to back, in manifest order
struct Checkpoint {
  std::string kind;
  nlohmann::json config = nlohmann::json::object();  // layer specs and model settings
  uint64_t seed = 0;
  int64_t step = 0;
  std::vector<std::pair<std::string, Tensor>> tensors;

  const Tensor& tensor(const std::string& name) const;

  /// Manifest JSON as written to disk (includes per-tensor FNV-1a checksums).
  nlohmann::json manifest() const;
  std::string manifest_text() const { return manifest().dump(); }

  std::vector<uint8_t> encode() const;
  static Checkpoint decode(const std::vector<uint8_t>& bytes);

  void save(const std::filesystem::path& path) const;
  static Checkpoint load(const std::filesystem::path& path);
};

nlohmann::json layers_to_json(const std::vector<LayerSpec>& layers);
std::vector<LayerSpec> layers_from_json(const nlohmann::json& j);

/// Adds every parameter of `net` under `prefix`.
void add_network(Checkpoint& ckpt, const std::string& prefix, const Network& net);
/// Rebuilds a network from its stored layer specs and tensors.
Network read_network(const Checkpoint& ckpt, const std::string& prefix);

uint64_t fnv1a(const void* data, size_t size);

std::vector<uint8_t> read_file_bytes(const std::filesystem::path& path);
void write_file_bytes(const std::filesystem::path& path, const std::vector<uint8_t>& bytes);

}  // namespace cle
