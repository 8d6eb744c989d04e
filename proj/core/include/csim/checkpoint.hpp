#pragma once

// Textual checkpoint container: format version, ModelConfig, seed and every
// parameter tensor by name and shape. Values are written with round-trip
// precision so a save/load cycle is bit-exact.

#include <filesystem>
#include <string>

#include "csim/model.hpp"

namespace csim {

inline constexpr int kCheckpointVersion = 1;

std::string serialize_checkpoint(const Model& model);
Model deserialize_checkpoint(const std::string& text);

void save_checkpoint(const Model& model, const std::filesystem::path& path);
/// Throws IoError on unreadable files and ConfigError on any version, name,
/// shape or config mismatch.
Model load_checkpoint(const std::filesystem::path& path);

std::string model_config_to_string(const ModelConfig& config);

}  // namespace csim
