#pragma once

// Self-describing checkpoint files.
//
// Layout (little-endian):
//   "BVITCKPT"                       8-byte magic
//   u32 format_version               currently 1
//   u64 n, n bytes                   JSON metadata; "network" holds the NetworkConfig
//   u32 tensor count, then per tensor:
//     u32 n, n bytes name; u32 ndim; i32 dims[ndim]; f32 values[prod(dims)]

#include <filesystem>
#include <string>
#include <vector>

#include "bvit/core_types.hpp"
#include "bvit/network.hpp"
#include "json.hpp"

namespace bvit {

inline constexpr std::uint32_t kCheckpointFormatVersion = 1;

struct NamedTensor {
  std::string name;
  nn::Shape shape;
  std::vector<float> values;
};

struct Checkpoint {
  std::uint32_t format_version = kCheckpointFormatVersion;
  NetworkConfig config;
  nlohmann::json meta = nlohmann::json::object();  // free-form; "network" is reserved
  std::vector<NamedTensor> tensors;

  const NamedTensor* find(const std::string& name) const;
};

// Snapshot of every model parameter plus the config.
Checkpoint make_checkpoint(const BilateralViT& model, nlohmann::json meta = nlohmann::json::object());

// Atomic write (temp file + rename). Throws DataError on I/O failure.
void save_checkpoint(const std::filesystem::path& path, const Checkpoint& ckpt);

// Throws DataError on a missing/corrupt file or unsupported version.
Checkpoint load_checkpoint(const std::filesystem::path& path);

// Copies parameters by name; throws DataError on a missing name or shape mismatch.
void load_parameters(BilateralViT& model, const Checkpoint& ckpt);

BilateralViT model_from_checkpoint(const Checkpoint& ckpt);

}  // namespace bvit
