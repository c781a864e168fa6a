#pragma once

#include <torch/torch.h>

#include <array>
#include <filesystem>
#include <string>
#include <vector>

#include "effisegnet/encoder.hpp"

namespace effisegnet::testing {

/// Writes `count` polyp-like samples in the images/ + masks/ layout: a
/// textured reddish background with one brighter elliptical blob per image.
/// Returns the sample ids in sorted order.
std::vector<std::string> write_blob_dataset(const std::filesystem::path& root, int count, int width, int height,
                                            unsigned seed);

/// Fresh empty directory under the system temp dir.
std::filesystem::path scratch_dir(const std::string& name);

/// Random stage pyramid for an input of `size` x `size`: stage s has
/// ceil(size / 2^s) pixels per side, like the EfficientNet strides.
StagePyramid random_pyramid(const std::array<int64_t, kNetworkDepth>& channels, int64_t batch, int64_t size);

/// Gives every batch-norm layer of `module` non-trivial affine parameters and
/// running statistics, so eval-mode checks exercise the full formula.
void randomize_batch_norm(torch::nn::Module& module);

}  // namespace effisegnet::testing
