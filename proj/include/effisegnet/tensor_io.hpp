#pragma once

#include <torch/torch.h>

#include <filesystem>
#include <map>
#include <string>
#include <string_view>
#include <utility>
#include <vector>

#include <nlohmann/json.hpp>

namespace effisegnet {

namespace fs = std::filesystem;

using NamedTensors = std::vector<std::pair<std::string, torch::Tensor>>;

/// Writes tensors in the safetensors layout: little-endian u64 header length,
/// a JSON header (dtype, shape, data_offsets per tensor, optional
/// "__metadata__" string map), then the packed raw data. Supported dtypes:
/// F32, F64, I64. The file is written atomically.
void write_safetensors(const fs::path& path, const NamedTensors& tensors,
                       const std::map<std::string, std::string>& metadata = {});

struct SafetensorsFile {
  std::map<std::string, torch::Tensor> tensors;
  std::map<std::string, std::string> metadata;
};

/// Throws LoadError on a missing, truncated or malformed file.
SafetensorsFile read_safetensors(const fs::path& path);

/// Hex SHA-256 of a file's bytes / of a string.
std::string sha256_file(const fs::path& path);
std::string sha256_hex(std::string_view bytes);

/// Write-temp-then-rename.
void write_file_atomic(const fs::path& path, std::string_view contents);

std::string read_text_file(const fs::path& path);

/// Sidecar manifest path for a weights/checkpoint file: "<file>.manifest.json".
fs::path manifest_path_for(const fs::path& weights);

nlohmann::json read_json_file(const fs::path& path);

/// NumPy .npy (format 1.0) writer for float32 tensors, C order.
void write_npy(const fs::path& path, const torch::Tensor& tensor);

}  // namespace effisegnet
