#include "effisegnet/checkpoint.hpp"

#include <chrono>
#include <ctime>

#include "effisegnet/errors.hpp"
#include "effisegnet/tensor_io.hpp"

namespace effisegnet {

std::string utc_timestamp() {
  const std::time_t now = std::chrono::system_clock::to_time_t(std::chrono::system_clock::now());
  std::tm tm{};
  gmtime_r(&now, &tm);
  char buf[32];
  std::strftime(buf, sizeof buf, "%Y-%m-%dT%H:%M:%SZ", &tm);
  return buf;
}

void to_json(nlohmann::json& j, const CheckpointManifest& m) {
  j = {{"variant", m.variant},           {"seed", m.seed},       {"epoch", m.epoch},
       {"config_hash", m.config_hash},   {"metrics", m.metrics}, {"head", m.head},
       {"weights_sha256", m.weights_sha256}, {"created_at", m.created_at}, {"extra", m.extra}};
}

void from_json(const nlohmann::json& j, CheckpointManifest& m) {
  m.variant = j.at("variant").get<std::string>();
  m.seed = j.value("seed", uint64_t{0});
  m.epoch = j.value("epoch", int64_t{0});
  m.config_hash = j.value("config_hash", "");
  m.metrics = j.value("metrics", nlohmann::json::object());
  if (j.contains("head")) m.head = j["head"].get<FusionHeadConfig>();
  m.weights_sha256 = j.value("weights_sha256", "");
  m.created_at = j.value("created_at", "");
  m.extra = j.value("extra", nlohmann::json::object());
}

void save_checkpoint(EffiSegNetImpl& model, const std::filesystem::path& path, CheckpointManifest manifest) {
  NamedTensors tensors;
  for (const auto& item : model.named_parameters()) tensors.emplace_back(item.key(), item.value());
  for (const auto& item : model.named_buffers()) tensors.emplace_back(item.key(), item.value());
  manifest.variant = model.variant().name();
  manifest.head = model.head().config();
  write_safetensors(path, tensors, {{"format", "effisegnet-checkpoint"}, {"variant", manifest.variant}});
  manifest.weights_sha256 = sha256_file(path);
  manifest.created_at = utc_timestamp();
  write_file_atomic(manifest_path_for(path), nlohmann::json(manifest).dump(2) + "\n");
}

CheckpointManifest read_checkpoint_manifest(const std::filesystem::path& path) {
  const auto mpath = manifest_path_for(path);
  if (!std::filesystem::exists(mpath)) throw LoadError("checkpoint " + path.string() + " has no manifest " + mpath.string());
  try {
    return read_json_file(mpath).get<CheckpointManifest>();
  } catch (const nlohmann::json::exception& e) {
    throw LoadError("malformed checkpoint manifest " + mpath.string() + ": " + e.what());
  }
}

EffiSegNet load_checkpoint(const std::filesystem::path& path, std::optional<Variant> expected) {
  if (!std::filesystem::exists(path)) throw LoadError("checkpoint " + path.string() + " does not exist");
  const CheckpointManifest manifest = read_checkpoint_manifest(path);
  const Variant variant = parse_variant(manifest.variant);
  if (expected && *expected != variant)
    throw ConfigError("checkpoint " + path.string() + " was trained as EffiSegNet-" + manifest.variant +
                      ", refusing to use it as EffiSegNet-" + variant_name(*expected));

  const std::string digest = sha256_file(path);
  if (!manifest.weights_sha256.empty() && digest != manifest.weights_sha256)
    throw LoadError("checkpoint " + path.string() + " does not match its manifest hash (manifest " +
                    manifest.weights_sha256.substr(0, 12) + "..., file " + digest.substr(0, 12) +
                    "...): file is corrupt or was modified");
  const SafetensorsFile file = read_safetensors(path);

  ModelOptions options;
  options.variant = variant;
  options.seed = manifest.seed;
  options.head = manifest.head;
  EffiSegNet model = build_model(options);

  torch::NoGradGuard no_grad;
  auto restore = [&](const std::string& name, torch::Tensor& dst) {
    auto it = file.tensors.find(name);
    if (it == file.tensors.end()) throw LoadError("checkpoint " + path.string() + " lacks tensor '" + name + "'");
    if (it->second.sizes() != dst.sizes())
      throw LoadError("checkpoint " + path.string() + ": tensor '" + name + "' has the wrong shape");
    dst.copy_(it->second);
  };
  for (auto& item : model->named_parameters()) restore(item.key(), item.value());
  for (auto& item : model->named_buffers()) restore(item.key(), item.value());
  return model;
}

}  // namespace effisegnet
