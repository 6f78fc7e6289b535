#pragma once

#include <filesystem>
#include <string>
#include <utility>
#include <vector>

#include "sptnet/core.hpp"
#include "sptnet/schedule.hpp"

namespace sptnet {

// <dir>/manifest.txt lists `tensor <name> <rows> <cols> <offset>` (offset in floats) plus `meta` and
// `config` lines; <dir>/tensors.bin holds every tensor back to back as little-endian float32.
struct Archive {
  std::vector<std::pair<std::string, std::string>> meta;
  std::string config;  // resolved `key = value` document
  std::vector<std::pair<std::string, Matrix<float>>> tensors;

  const std::string& meta_value(const std::string& key) const;
  const Matrix<float>& tensor(const std::string& name) const;
};

void save_archive(const std::filesystem::path& dir, const Archive& archive);
Archive load_archive(const std::filesystem::path& dir);

/// Parameters, momentum buffers and schedule position.
Archive to_archive(const TrainState& state, const std::string& config);

/// Fills a state built from the same config; names and shapes must match exactly.
void restore_state(const Archive& archive, TrainState& state);

}  // namespace sptnet
