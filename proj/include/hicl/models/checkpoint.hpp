#pragma once

#include <filesystem>
#include <string>

#include "hicl/models/model.hpp"
#include "json.hpp"

namespace hicl {

inline constexpr int kCheckpointFormat = 1;

struct CheckpointMeta {
  std::size_t step = 0;
  RngState rng;
  // Free-form context stored verbatim (task, run id, ...).
  nlohmann::json extra = nlohmann::json::object();
};

// A checkpoint is a directory holding manifest.json and params.bin. The blob
// is little-endian IEEE floats of the model's precision, tensors in name order.
template <typename T>
void save_checkpoint(const std::filesystem::path& dir, const Model<T>& model,
                     const CheckpointMeta& meta);

// Loads into precision T, converting if the blob was written at the other one.
template <typename T>
Model<T> load_checkpoint(const std::filesystem::path& dir, CheckpointMeta* meta = nullptr);

nlohmann::json read_manifest(const std::filesystem::path& dir);
int checkpoint_precision(const std::filesystem::path& dir);

nlohmann::json to_json(const ArchitectureSpec& spec);
nlohmann::json to_json(const BlockConfig& cfg);
ArchitectureSpec architecture_from_json(const nlohmann::json& j);
BlockConfig block_config_from_json(const nlohmann::json& j);

}  // namespace hicl
