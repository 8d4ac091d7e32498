#pragma once

#include <cstdint>
#include <filesystem>
#include <string>
#include <vector>

#include "dpec/training.hpp"

namespace dpec {

struct RunConfig {
  ModelConfig model;
  TrainConfig train;

  bool operator==(const RunConfig&) const = default;
};

/// Full-size network from the reference layout.
RunConfig default_config();
/// Small network that trains in seconds on 64x64 crops.
RunConfig desk_config();

/// `key = value` lines, `#` starts a comment. Keys not present keep the values
/// of `base`. Unknown or repeated keys and malformed values raise ConfigError
/// with the line number.
RunConfig parse_config(const std::string& text, const RunConfig& base = default_config());
RunConfig load_config(const std::filesystem::path& path, const RunConfig& base = default_config());
/// Every key, one per line, in a stable order; parse_config(serialize_config(c)) == c.
std::string serialize_config(const RunConfig& cfg);
std::vector<std::string> config_keys();

std::uint64_t config_hash(const RunConfig& cfg);

}  // namespace dpec
