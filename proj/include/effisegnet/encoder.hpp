#pragma once

#include <torch/torch.h>

#include <array>
#include <filesystem>
#include <memory>
#include <optional>

#include "effisegnet/variant.hpp"

namespace effisegnet {

/// Encoder output consumed by the fusion head: the full-resolution input
/// (stage 0) plus the last feature map at each of the five resolutions
/// 1/2 .. 1/32 (stages 1..5).
struct StagePyramid {
  torch::Tensor stage0_input;
  std::array<torch::Tensor, kNetworkDepth> stages;

  static constexpr int depth = kNetworkDepth;

  /// Stage s in 0..5; 0 is the input image.
  const torch::Tensor& at(int s) const;
};

/// Any multi-stage classifier body that can feed the fusion head.
class BackboneEncoder : public torch::nn::Module {
 public:
  using torch::nn::Module::Module;

  virtual StagePyramid encode_stages(const torch::Tensor& batch) = 0;
  virtual std::array<int64_t, kNetworkDepth> stage_channels() const = 0;
  virtual int64_t input_resolution() const = 0;
};

/// EfficientNet B0..B7 body without its pooling/classifier head. Module
/// names mirror torchvision's `features` container (`features.4.1.block.0.1.weight`)
/// so pretrained weights convert one-to-one.
class EfficientNetEncoder : public BackboneEncoder {
 public:
  explicit EfficientNetEncoder(const VariantConfig& variant);

  /// Throws ShapeError unless batch is N x 3 x R x R with R the variant resolution.
  StagePyramid encode_stages(const torch::Tensor& batch) override;
  std::array<int64_t, kNetworkDepth> stage_channels() const override { return variant_.stage_channels; }
  int64_t input_resolution() const override { return variant_.input_resolution; }

  const VariantConfig& variant() const { return variant_; }
  torch::nn::Sequential& features() { return features_; }

 private:
  VariantConfig variant_;
  torch::nn::Sequential features_{nullptr};
};

struct EncoderOptions {
  bool pretrained = false;
  /// Seed for the default initialization (scratch) and stochastic depth.
  uint64_t seed = 0;
  /// Explicit weights file; otherwise resolved from the weight cache.
  std::optional<std::filesystem::path> weights_path;
};

/// Environment variable naming the pretrained-weight cache directory.
inline constexpr const char* kWeightsDirEnv = "EFFISEGNET_WEIGHTS_DIR";

/// `<cache>/efficientnet_bN.safetensors`, where the cache is $EFFISEGNET_WEIGHTS_DIR
/// or ~/.cache/effisegnet/weights.
std::filesystem::path resolve_pretrained_path(const VariantConfig& variant);

std::shared_ptr<EfficientNetEncoder> build_encoder(const VariantConfig& variant,
                                                   const EncoderOptions& options = {});

/// Copies every backbone parameter and buffer from a weights file (keys
/// "features.*"; classifier keys are ignored). The sidecar manifest must name
/// the same variant and match the file's SHA-256. Throws LoadError naming the
/// source on any mismatch.
void load_backbone_weights(EfficientNetEncoder& encoder, const std::filesystem::path& path);

}  // namespace effisegnet
