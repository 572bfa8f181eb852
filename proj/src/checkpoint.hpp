#pragma once

#include <cstdint>
#include <optional>
#include <string>
#include <utility>
#include <vector>

#include "encoder.hpp"

namespace stark {

inline constexpr std::uint32_t kCheckpointVersion = 1;

// Named tensors plus the RNG state and config digest they were produced under.
//
// File layout (all integers little-endian):
//   "STRK" | u32 version | records...
//   record: u32 name_len | name | u8 dtype (0 = f64, 1 = u64) | u32 rank |
//           u64 dims[rank] | raw little-endian elements
// The RNG state and config digest are stored as trailing u64 records named
// "__rng_state" and "__config_digest".
struct Checkpoint {
  std::vector<std::pair<std::string, Tensor>> tensors;
  std::uint64_t rng_state = 0;
  std::uint64_t config_digest = 0;

  const Tensor* find(const std::string& name) const;
};

Checkpoint make_checkpoint(const ModelParams& params, const GateSet* gates, std::uint64_t rng_state,
                           std::uint64_t config_digest);

std::string serialize(const Checkpoint& ckpt);
Checkpoint deserialize(const std::string& bytes);

void save_checkpoint(const std::string& path, const Checkpoint& ckpt);
Checkpoint load_checkpoint(const std::string& path);

// FNV-1a of the serialized bytes.
std::uint64_t checkpoint_hash(const Checkpoint& ckpt);

// Rebuilds the model from tensor names; the architecture is read off the names.
ModelParams params_from_checkpoint(const Checkpoint& ckpt);
// Gates if the checkpoint carries them.
std::optional<GateSet> gates_from_checkpoint(const Checkpoint& ckpt, const ModelParams& params);

}  // namespace stark
