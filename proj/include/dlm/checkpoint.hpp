// SPDX-License-Identifier: Apache-2.0
//
// Binary checkpoint: "DLM1", u32 version, u64 config length + JSON config,
// u64 tensor count, then per tensor: u64 name length, name bytes, u32 rank,
// rank x u64 dims, f32 values in row-major order. All integers and floats
// little-endian.

#pragma once

#include <cstdint>
#include <filesystem>
#include <iosfwd>
#include <optional>
#include <string>
#include <vector>

#include "dlm/tinylm.hpp"
#include "dlm/trainer.hpp"

namespace dlm {

inline constexpr std::uint32_t kCheckpointVersion = 1;

struct Checkpoint {
  ModelParams<float> params;
  std::optional<TrainConfig> train;
};

std::vector<std::uint8_t> serialize_checkpoint(const Checkpoint& checkpoint);
Checkpoint deserialize_checkpoint(const std::vector<std::uint8_t>& bytes);

void save_checkpoint(const std::filesystem::path& path, const Checkpoint& checkpoint);
/// Throws FormatError on bad magic, version mismatch, truncation, or
/// tensors that do not match the stored model config.
Checkpoint load_checkpoint(const std::filesystem::path& path);

}  // namespace dlm
