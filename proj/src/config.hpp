#pragma once

#include <string>
#include <vector>

#include "federation.hpp"

namespace fedlora {

// Text config format: INI-style sections ([model], [federation], ...) with
// `key = value` lines and '#' comments. Every field of ExperimentConfig maps
// to one dotted key (section.key); lists use ';' separators.

ExperimentConfig parse_config(const std::string& text);       // throws ConfigError naming the key
ExperimentConfig load_config(const std::string& path);        // throws FormatError on IO

// Dotted-key access, e.g. set_config_value(cfg, "lora.rank", "8").
void set_config_value(ExperimentConfig& cfg, const std::string& key, const std::string& value);
std::string get_config_value(const ExperimentConfig& cfg, const std::string& key);
std::vector<std::string> config_keys();

// Canonical serialization: fixed section/key order, %.17g doubles. Equal
// configs serialize identically, so the digest is stable.
std::string serialize_config(const ExperimentConfig& cfg);

// 64-bit FNV-1a over the canonical serialization. The seed is not a config
// field, so all seeds of one experiment share a digest.
uint64_t config_digest(const ExperimentConfig& cfg);

}  // namespace fedlora
