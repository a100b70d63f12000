#pragma once

#include <cstdint>
#include <filesystem>
#include <stdexcept>
#include <string>
#include <vector>

#include "etm/data/domain.hpp"
#include "etm/trainer/trainer.hpp"
#include "json.hpp"

namespace etm::cli {

/// Bad configuration or usage; commands map it to exit code 1.
class ConfigError : public std::runtime_error {
 public:
  using std::runtime_error::runtime_error;
};

/// File-system failure; exit code 2.
class IoError : public std::runtime_error {
 public:
  using std::runtime_error::runtime_error;
};

enum class TrainMode { Continual, SourceOnly };

struct ExperimentConfig {
  trainer::TrainConfig train;
  TrainMode mode = TrainMode::Continual;
  std::vector<data::DomainSpec> domains;  // source first
  std::uint64_t data_seed = 7;
};

/// The etm-toy benchmark with the default training setup.
ExperimentConfig default_experiment();

/// Parses and validates. Unknown keys anywhere are rejected. A "preset" key
/// ("etm-toy") may stand in for the domain list. Throws ConfigError.
ExperimentConfig parse_config(const nlohmann::json& j);
ExperimentConfig load_config(const std::filesystem::path& path);

/// Full, canonical form of the config (every field spelled out).
nlohmann::json to_json(const ExperimentConfig& cfg);

/// CRC32 of the canonical JSON, as 8 lowercase hex digits.
std::string config_hash(const ExperimentConfig& cfg);

/// Throws ConfigError on the first inconsistency.
void validate(const ExperimentConfig& cfg);

/// Seed of the generator for domain `index` (0 = source).
std::uint64_t domain_seed(const ExperimentConfig& cfg, int index);

std::uint32_t crc32_of(const void* data, std::size_t size);

}  // namespace etm::cli
