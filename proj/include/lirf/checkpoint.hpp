#pragma once

#include <filesystem>
#include <optional>
#include <string>
#include <vector>

#include "lirf/adam.hpp"

namespace lirf {

// Binary parameter store: magic "LIRF", format version, config digest, then
// named shape-tagged little-endian entries plus an optional optimizer-state
// section and a trailing checksum. Round-trips are bit-exact.
struct CheckpointData {
  std::uint32_t version = 0;
  std::uint64_t config_digest = 0;
  std::uint64_t step = 0;
  std::vector<std::pair<std::string, Tensor>> params;
  bool has_optimizer = false;
  std::vector<Storage> opt_m, opt_v;
  std::int64_t opt_step = 0;
};

void save_checkpoint(const std::filesystem::path& path, const ParamStore& params,
                     std::uint64_t config_digest, std::uint64_t step,
                     const Adam* optimizer = nullptr);

CheckpointData load_checkpoint(const std::filesystem::path& path);

// Copies values into matching parameters (all must exist with equal shapes)
// and restores optimizer state when both sides carry it.
void apply_checkpoint(const CheckpointData& data, ParamStore& params,
                      Adam* optimizer = nullptr);

}  // namespace lirf
