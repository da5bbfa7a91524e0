#pragma once

#include <string>

#include "dihc/trainer.hpp"

namespace dihc {

// Flat `key = value` files exposing the TrainConfig/BatchSpec/EnsembleConfig
// keys; unknown keys or malformed values raise ConfigError.
void apply_config_file(TrainConfig& cfg, const std::string& path);
void apply_config_line(TrainConfig& cfg, const std::string& key, const std::string& value);

std::string dump_config(const TrainConfig& cfg);

}  // namespace dihc
