// SPDX-License-Identifier: Apache-2.0
//
// Keyed JSON configuration shared by the CLI and checkpoints. A config file
// is one flat object; every key is also a command-line flag of the same
// name, and flags win over file values.

#pragma once

#include <filesystem>
#include <set>
#include <string>
#include <string_view>
#include <vector>

#include "dlm/sampler.hpp"
#include "dlm/tinylm.hpp"
#include "dlm/trainer.hpp"
#include "json.hpp"

namespace dlm {

struct CliConfig {
  ModelConfig model;
  TrainConfig train;
  SamplerConfig sampler;
  /// Packing length for training corpora; 0 means model.max_seq_len.
  std::size_t block_len = 0;

  /// Keys given explicitly by a file or flag.
  std::set<std::string> explicit_keys;

  std::size_t effective_block_len() const { return block_len ? block_len : model.max_seq_len; }
};

/// All recognized keys in a stable order.
const std::vector<std::string>& config_keys();
bool is_config_key(std::string_view key);

/// Sets one key from its command-line text. Throws ConfigError for unknown
/// keys or unparsable values.
void set_config_value(CliConfig& config, std::string_view key, std::string_view text);

/// Applies a flat JSON object. Unknown keys throw ConfigError.
void apply_config_json(CliConfig& config, const nlohmann::json& object);
CliConfig load_config_file(const std::filesystem::path& path);

nlohmann::json config_to_json(const CliConfig& config);

/// Keys that were never set explicitly, in config_keys() order.
std::vector<std::string> defaulted_keys(const CliConfig& config);

nlohmann::json model_config_to_json(const ModelConfig& config);
ModelConfig model_config_from_json(const nlohmann::json& object);
nlohmann::json train_config_to_json(const TrainConfig& config);
TrainConfig train_config_from_json(const nlohmann::json& object);

std::string_view to_string(Objective objective);
Objective objective_from_string(std::string_view name);
std::string_view to_string(LogitAlignment alignment);
LogitAlignment alignment_from_string(std::string_view name);

}  // namespace dlm
