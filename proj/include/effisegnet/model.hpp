#pragma once

#include <torch/torch.h>

#include <filesystem>
#include <memory>
#include <optional>

#include "effisegnet/encoder.hpp"
#include "effisegnet/fusion_head.hpp"
#include "effisegnet/variant.hpp"

namespace effisegnet {

/// Full network: backbone encoder + fusion head. `forward` returns per-pixel
/// foreground probabilities N x 1 x H x W.
class EffiSegNetImpl : public torch::nn::Module {
 public:
  EffiSegNetImpl(const VariantConfig& variant, std::shared_ptr<BackboneEncoder> encoder,
                 const FusionHeadConfig& head_cfg = {});

  torch::Tensor forward(const torch::Tensor& batch);
  torch::Tensor logits(const torch::Tensor& batch);

  const VariantConfig& variant() const { return variant_; }
  BackboneEncoder& encoder() { return *encoder_; }
  const BackboneEncoder& encoder() const { return *encoder_; }
  FusionHeadImpl& head() { return *head_; }
  const FusionHeadImpl& head() const { return *head_; }

 private:
  VariantConfig variant_;
  std::shared_ptr<BackboneEncoder> encoder_;
  FusionHead head_{nullptr};
};
TORCH_MODULE(EffiSegNet);

struct ModelOptions {
  Variant variant = Variant::kB0;
  bool pretrained = false;
  uint64_t seed = 0;
  std::optional<std::filesystem::path> weights_path;
  FusionHeadConfig head;
};

/// Seeds the global generator with `options.seed`, then builds encoder and head.
EffiSegNet build_model(const ModelOptions& options);

/// Learnable weights split by origin. `pretrained` counts the backbone
/// whether or not weights were actually loaded, so the split depends only on
/// the architecture.
struct ParamCount {
  int64_t pretrained = 0;
  int64_t random = 0;

  int64_t total() const { return pretrained + random; }
  /// random / pretrained.
  double ratio() const { return pretrained == 0 ? 0.0 : static_cast<double>(random) / static_cast<double>(pretrained); }
};

ParamCount count_parameters(const EffiSegNetImpl& model);

/// Eval-mode, no-grad forward pass. The model's training flag is restored
/// afterwards.
torch::Tensor predict_mask_probabilities(EffiSegNetImpl& model, const torch::Tensor& batch);

}  // namespace effisegnet
