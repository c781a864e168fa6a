#include "effisegnet/fusion_head.hpp"

#include <sstream>

#include "effisegnet/errors.hpp"

namespace effisegnet {
namespace nn = torch::nn;

void FusionHeadConfig::validate() const {
  if (fusion_channels <= 0) throw ConfigError("fusion_channels must be positive");
  for (int64_t k : {projection_kernel, ghost_kernel_primary, ghost_kernel_cheap})
    if (k <= 0 || k % 2 == 0) throw ConfigError("fusion head kernels must be odd and positive, got " + std::to_string(k));
  if (ghost_ratio < 2) throw ConfigError("ghost_ratio must be at least 2");
  if (fusion_channels % ghost_ratio != 0)
    throw ConfigError("fusion_channels (" + std::to_string(fusion_channels) + ") is not divisible by ghost_ratio (" +
                      std::to_string(ghost_ratio) + ")");
}

void to_json(nlohmann::json& j, const FusionHeadConfig& cfg) {
  j = {{"fusion_channels", cfg.fusion_channels},
       {"projection_kernel", cfg.projection_kernel},
       {"upsample_mode", "nearest"},
       {"ghost_ratio", cfg.ghost_ratio},
       {"ghost_kernel_primary", cfg.ghost_kernel_primary},
       {"ghost_kernel_cheap", cfg.ghost_kernel_cheap}};
}

void from_json(const nlohmann::json& j, FusionHeadConfig& cfg) {
  for (const auto& [key, value] : j.items()) {
    if (key == "fusion_channels") cfg.fusion_channels = value.get<int64_t>();
    else if (key == "projection_kernel") cfg.projection_kernel = value.get<int64_t>();
    else if (key == "ghost_ratio") cfg.ghost_ratio = value.get<int64_t>();
    else if (key == "ghost_kernel_primary") cfg.ghost_kernel_primary = value.get<int64_t>();
    else if (key == "ghost_kernel_cheap") cfg.ghost_kernel_cheap = value.get<int64_t>();
    else if (key == "upsample_mode") {
      if (value.get<std::string>() != "nearest") throw ConfigError("upsample_mode must be 'nearest'");
    } else {
      throw ConfigError("unknown fusion head config key '" + key + "'");
    }
  }
}

StageProjectionImpl::StageProjectionImpl(int64_t in_channels, const FusionHeadConfig& cfg)
    : in_channels_(in_channels) {
  conv_ = register_module("conv", nn::Conv2d(nn::Conv2dOptions(in_channels, cfg.fusion_channels, cfg.projection_kernel)
                                                 .padding(cfg.projection_kernel / 2)
                                                 .bias(false)));
  norm_ = register_module("norm", nn::BatchNorm2d(cfg.fusion_channels));
}

torch::Tensor StageProjectionImpl::forward(const torch::Tensor& x) {
  if (x.dim() != 4 || x.size(1) != in_channels_) {
    std::ostringstream os;
    os << "stage projection expects " << in_channels_ << " input channels, got tensor " << x.sizes();
    throw ShapeError(os.str());
  }
  return norm_->forward(conv_->forward(x));
}

torch::Tensor upsample_to_input(const torch::Tensor& map, int64_t height, int64_t width) {
  if (map.dim() != 4) throw ContractError("upsample_to_input expects an N x C x H x W tensor");
  const int64_t h = map.size(2);
  const int64_t w = map.size(3);
  if (height < h || width < w) {
    std::ostringstream os;
    os << "upsample target " << height << "x" << width << " is smaller than source " << h << "x" << w;
    throw ContractError(os.str());
  }
  if (height == h && width == w) return map;
  auto index = torch::TensorOptions().dtype(torch::kInt64).device(map.device());
  auto rows = torch::arange(height, index).mul_(h).div_(height, "floor");
  auto cols = torch::arange(width, index).mul_(w).div_(width, "floor");
  return map.index_select(2, rows).index_select(3, cols);
}

GhostModuleImpl::GhostModuleImpl(const FusionHeadConfig& cfg) : channels_(cfg.fusion_channels) {
  cfg.validate();
  intrinsic_ = cfg.fusion_channels / cfg.ghost_ratio;
  const int64_t cheap_out = intrinsic_ * (cfg.ghost_ratio - 1);

  nn::Sequential primary;
  primary->push_back(nn::Conv2d(nn::Conv2dOptions(channels_, intrinsic_, cfg.ghost_kernel_primary)
                                    .padding(cfg.ghost_kernel_primary / 2)
                                    .bias(false)));
  primary->push_back(nn::BatchNorm2d(intrinsic_));
  primary->push_back(nn::ReLU());
  primary_ = register_module("primary", primary);

  nn::Sequential cheap;
  cheap->push_back(nn::Conv2d(nn::Conv2dOptions(intrinsic_, cheap_out, cfg.ghost_kernel_cheap)
                                  .padding(cfg.ghost_kernel_cheap / 2)
                                  .groups(intrinsic_)
                                  .bias(false)));
  cheap->push_back(nn::BatchNorm2d(cheap_out));
  cheap->push_back(nn::ReLU());
  cheap_ = register_module("cheap", cheap);
}

torch::Tensor GhostModuleImpl::forward(const torch::Tensor& x) {
  if (x.dim() != 4 || x.size(1) != channels_) {
    std::ostringstream os;
    os << "ghost module expects " << channels_ << " channels, got tensor " << x.sizes();
    throw ShapeError(os.str());
  }
  auto intrinsic = primary_->forward(x);
  auto ghost = cheap_->forward(intrinsic);
  return torch::cat({intrinsic, ghost}, 1);
}

FusionHeadImpl::FusionHeadImpl(const std::array<int64_t, kNetworkDepth>& stage_channels, const FusionHeadConfig& cfg)
    : cfg_(cfg) {
  cfg_.validate();
  projections_ = register_module("projections", nn::ModuleList());
  projections_->push_back(StageProjection(3, cfg_));
  for (int64_t c : stage_channels) projections_->push_back(StageProjection(c, cfg_));
  ghost1_ = register_module("ghost1", GhostModule(cfg_));
  ghost2_ = register_module("ghost2", GhostModule(cfg_));
  output_ = register_module("output", nn::Conv2d(nn::Conv2dOptions(cfg_.fusion_channels, 1, 1).bias(true)));
}

StageProjectionImpl& FusionHeadImpl::projection(int stage) {
  if (stage < 0 || stage > kNetworkDepth) throw ContractError("projection index outside 0..5");
  return *projections_->ptr<StageProjectionImpl>(static_cast<std::size_t>(stage));
}

GhostModuleImpl& FusionHeadImpl::ghost(int index) {
  if (index == 0) return *ghost1_;
  if (index == 1) return *ghost2_;
  throw ContractError("ghost module index must be 0 or 1");
}

torch::Tensor FusionHeadImpl::fuse(const StagePyramid& pyramid) {
  for (int s = 0; s <= kNetworkDepth; ++s)
    if (!pyramid.at(s).defined()) throw ContractError("stage pyramid is missing stage " + std::to_string(s));
  const int64_t height = pyramid.stage0_input.size(2);
  const int64_t width = pyramid.stage0_input.size(3);
  torch::Tensor fused = projection(0).forward(pyramid.stage0_input);
  for (int s = 1; s <= kNetworkDepth; ++s)
    fused = fused + upsample_to_input(projection(s).forward(pyramid.at(s)), height, width);
  return fused;
}

torch::Tensor FusionHeadImpl::logits(const StagePyramid& pyramid) {
  return output_->forward(ghost2_->forward(ghost1_->forward(fuse(pyramid))));
}

}  // namespace effisegnet
