#pragma once

#include "coar/common.hpp"

#include <nlohmann/json.hpp>

#include <cstdint>
#include <filesystem>
#include <span>
#include <string>
#include <vector>

namespace coar {

// Container layout (all integers little-endian):
//   "COARCKPT" | u32 version | u64 manifest_len | manifest JSON |
//   f64 payload (tensors in manifest order) | u64 FNV-1a checksum of payload
inline constexpr char kCheckpointMagic[8] = {'C', 'O', 'A', 'R', 'C', 'K', 'P', 'T'};
inline constexpr std::uint32_t kCheckpointVersion = 1;

struct Tensor {
  std::string name;
  std::vector<std::int64_t> shape;
  std::vector<double> data;

  std::int64_t numel() const;
};

struct Checkpoint {
  std::string kind;          // "backbone", "bank", "priors", ...
  nlohmann::json meta = nlohmann::json::object();
  std::vector<Tensor> tensors;

  const Tensor& tensor(const std::string& name) const;
};

std::vector<std::uint8_t> serialize(const Checkpoint& ckpt);
Checkpoint deserialize(std::span<const std::uint8_t> bytes);

// Returns the payload checksum.
std::uint64_t save_checkpoint(const Checkpoint& ckpt, const std::filesystem::path& path);
Checkpoint load_checkpoint(const std::filesystem::path& path);

std::uint64_t payload_checksum(std::span<const std::uint8_t> payload);
// FNV-1a over a whole file's bytes; used for manifest hashes.
std::uint64_t file_hash(const std::filesystem::path& path);
std::string hex64(std::uint64_t v);

Tensor tensor_from(const std::string& name, const Mat& m);
Mat matrix_from(const Tensor& t);

}  // namespace coar
