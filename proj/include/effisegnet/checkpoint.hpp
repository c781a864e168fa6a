#pragma once

#include <filesystem>
#include <optional>

#include <nlohmann/json.hpp>

#include "effisegnet/model.hpp"

namespace effisegnet {

/// Sidecar metadata stored next to every checkpoint.
struct CheckpointManifest {
  std::string variant;
  uint64_t seed = 0;
  int64_t epoch = 0;
  std::string config_hash;
  nlohmann::json metrics = nlohmann::json::object();
  FusionHeadConfig head;
  std::string weights_sha256;  // filled in by save_checkpoint
  std::string created_at;      // ISO-8601 UTC, filled in by save_checkpoint
  nlohmann::json extra = nlohmann::json::object();
};

void to_json(nlohmann::json& j, const CheckpointManifest& m);
void from_json(const nlohmann::json& j, CheckpointManifest& m);

/// Writes every parameter and buffer of the model (safetensors layout) and
/// the manifest `<path>.manifest.json`. Both writes are atomic.
void save_checkpoint(EffiSegNetImpl& model, const std::filesystem::path& path, CheckpointManifest manifest);

CheckpointManifest read_checkpoint_manifest(const std::filesystem::path& path);

/// Rebuilds the network described by the manifest and restores its weights.
/// Throws ConfigError if `expected` is given and differs from the manifest's
/// variant, LoadError for hash mismatches, truncation or missing tensors.
EffiSegNet load_checkpoint(const std::filesystem::path& path, std::optional<Variant> expected = std::nullopt);

/// Current UTC time as "YYYY-MM-DDTHH:MM:SSZ".
std::string utc_timestamp();

}  // namespace effisegnet
