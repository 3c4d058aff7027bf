#pragma once

#include <string>

#include "feainf/model.hpp"
#include "feainf/training.hpp"

namespace feainf {

/// Single binary file: magic "FEIN", u32 format version, then named sections
/// each with a u64 length prefix. Unknown sections are skipped on load, so
/// the format can grow without breaking old readers.
struct Checkpoint {
    ModelState model;
    TrainConfig train_config;
};

inline constexpr uint32_t kCheckpointVersion = 1;

void save_checkpoint(const std::string& path, const ModelState& model, const TrainConfig& train_config);
Checkpoint load_checkpoint(const std::string& path);

} // namespace feainf
