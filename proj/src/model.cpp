#include "effisegnet/model.hpp"

#include "effisegnet/errors.hpp"

namespace effisegnet {
namespace {

int64_t numel_of(const std::vector<torch::Tensor>& params) {
  int64_t n = 0;
  for (const auto& p : params) n += p.numel();
  return n;
}

}  // namespace

EffiSegNetImpl::EffiSegNetImpl(const VariantConfig& variant, std::shared_ptr<BackboneEncoder> encoder,
                               const FusionHeadConfig& head_cfg)
    : variant_(variant) {
  if (!encoder) throw ContractError("EffiSegNet needs an encoder");
  encoder_ = register_module("encoder", std::move(encoder));
  head_ = register_module("head", FusionHead(encoder_->stage_channels(), head_cfg));
}

torch::Tensor EffiSegNetImpl::logits(const torch::Tensor& batch) {
  return head_->logits(encoder_->encode_stages(batch));
}

torch::Tensor EffiSegNetImpl::forward(const torch::Tensor& batch) { return torch::sigmoid(logits(batch)); }

EffiSegNet build_model(const ModelOptions& options) {
  const VariantConfig variant = variant_config(options.variant);
  options.head.validate();
  auto encoder = build_encoder(variant, {options.pretrained, options.seed, options.weights_path});
  return EffiSegNet(variant, std::move(encoder), options.head);
}

ParamCount count_parameters(const EffiSegNetImpl& model) {
  return {numel_of(model.encoder().parameters()), numel_of(model.head().parameters())};
}

torch::Tensor predict_mask_probabilities(EffiSegNetImpl& model, const torch::Tensor& batch) {
  const bool was_training = model.is_training();
  model.eval();
  torch::Tensor out;
  {
    torch::NoGradGuard no_grad;
    out = model.forward(batch);
  }
  if (was_training) model.train();
  return out;
}

}  // namespace effisegnet
