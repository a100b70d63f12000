#pragma once

#include <cstdint>
#include <filesystem>
#include <stdexcept>
#include <string>
#include <vector>

#include "etm/trainer/trainer.hpp"

namespace etm::cli {

inline constexpr int kBundleVersion = 1;

/// Integrity or format problem in a saved bundle.
class CheckpointError : public std::runtime_error {
 public:
  using std::runtime_error::runtime_error;
};

/// One tensor blob: 16-byte header ("ETMT", dtype, rank, reserved; u32 LE),
/// rank int64 LE dims, then float32 LE values.
std::vector<std::uint8_t> encode_tensor(const Tensor& t);
Tensor decode_tensor(const std::vector<std::uint8_t>& bytes, const std::string& what);

/// What a bundle holds: the network, every stored TM, the history and enough
/// configuration to rebuild the modules. Discriminators are never saved.
struct Bundle {
  std::string config_hash;
  models::SegNetConfig segnet_config;
  models::TmBranches branches;
  bool use_tm = true;
  trainer::ContinualState state;
};

/// Writes manifest.json and tensors/NNNN.bin into `dir`, replacing any previous
/// bundle there. The write goes to a sibling directory first and is renamed.
void save_bundle(const std::filesystem::path& dir, const trainer::ContinualState& state,
                 const trainer::TrainConfig& cfg, const std::string& config_hash);

/// Throws CheckpointError on version mismatch, CRC failure (naming the blob)
/// or shape disagreement.
Bundle load_bundle(const std::filesystem::path& dir);

}  // namespace etm::cli
