#pragma once

#include <torch/torch.h>

#include <array>

#include <nlohmann/json.hpp>

#include "effisegnet/encoder.hpp"

namespace effisegnet {

enum class UpsampleMode { kNearest };

struct FusionHeadConfig {
  int64_t fusion_channels = 32;
  int64_t projection_kernel = 3;
  UpsampleMode upsample_mode = UpsampleMode::kNearest;
  int64_t ghost_ratio = 2;
  int64_t ghost_kernel_primary = 3;
  int64_t ghost_kernel_cheap = 3;

  /// Throws ConfigError: non-positive width, even kernels, ratio < 2 or a
  /// width that the ratio does not divide.
  void validate() const;
};

void to_json(nlohmann::json& j, const FusionHeadConfig& cfg);
void from_json(const nlohmann::json& j, FusionHeadConfig& cfg);

/// F_s: stride-1 same-padded convolution (no bias) followed by batch norm.
/// No activation; the stages are summed linearly.
class StageProjectionImpl : public torch::nn::Module {
 public:
  StageProjectionImpl(int64_t in_channels, const FusionHeadConfig& cfg);

  /// Throws ShapeError when the input channel count differs from the declared one.
  torch::Tensor forward(const torch::Tensor& x);

  int64_t in_channels() const { return in_channels_; }
  torch::nn::Conv2d& conv() { return conv_; }
  torch::nn::BatchNorm2d& norm() { return norm_; }

 private:
  int64_t in_channels_;
  torch::nn::Conv2d conv_{nullptr};
  torch::nn::BatchNorm2d norm_{nullptr};
};
TORCH_MODULE(StageProjection);

/// Nearest-neighbour resize to exactly (height, width):
/// out[y, x] = in[floor(y * h_in / height), floor(x * w_in / width)].
/// Returns `map` itself when it is already at the target size.
/// Throws ContractError when the target is smaller than the source.
torch::Tensor upsample_to_input(const torch::Tensor& map, int64_t height, int64_t width);

/// GhostNet block: a primary convolution yields C/ratio intrinsic maps, a
/// depthwise "cheap" convolution derives the remaining maps from them, and the
/// two are concatenated. BN + ReLU follow each convolution.
class GhostModuleImpl : public torch::nn::Module {
 public:
  explicit GhostModuleImpl(const FusionHeadConfig& cfg);
  torch::Tensor forward(const torch::Tensor& x);

  int64_t intrinsic_channels() const { return intrinsic_; }

 private:
  int64_t channels_;
  int64_t intrinsic_;
  torch::nn::Sequential primary_{nullptr};
  torch::nn::Sequential cheap_{nullptr};
};
TORCH_MODULE(GhostModule);

/// The decoder: six stage projections summed at input resolution, two Ghost
/// modules, a 1x1 convolution to one channel and a sigmoid.
class FusionHeadImpl : public torch::nn::Module {
 public:
  FusionHeadImpl(const std::array<int64_t, kNetworkDepth>& stage_channels, const FusionHeadConfig& cfg);

  /// sum_{s=1..5} up(F_s(x_s)) + F_0(x_0), shaped N x C x H x W at the
  /// resolution of stage 0. Throws ContractError if any stage is missing.
  torch::Tensor fuse(const StagePyramid& pyramid);

  /// Pre-sigmoid output, N x 1 x H x W.
  torch::Tensor logits(const StagePyramid& pyramid);
  torch::Tensor forward(const StagePyramid& pyramid) { return torch::sigmoid(logits(pyramid)); }

  StageProjectionImpl& projection(int stage);
  GhostModuleImpl& ghost(int index);
  torch::nn::Conv2d& output_conv() { return output_; }
  const FusionHeadConfig& config() const { return cfg_; }

 private:
  FusionHeadConfig cfg_;
  torch::nn::ModuleList projections_{nullptr};
  GhostModule ghost1_{nullptr};
  GhostModule ghost2_{nullptr};
  torch::nn::Conv2d output_{nullptr};
};
TORCH_MODULE(FusionHead);

}  // namespace effisegnet
