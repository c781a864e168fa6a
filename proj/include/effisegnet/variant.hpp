#pragma once

#include <array>
#include <cstdint>
#include <span>
#include <string>
#include <string_view>

namespace effisegnet {

enum class Variant { kB0, kB1, kB2, kB3, kB4, kB5, kB6, kB7 };

inline constexpr int kNetworkDepth = 5;

/// One EffiSegNet scale. Everything here is derived from the EfficientNet
/// compound-scaling coefficients of the backbone.
struct VariantConfig {
  Variant variant = Variant::kB0;
  int64_t input_resolution = 224;
  double width_mult = 1.0;
  double depth_mult = 1.0;
  /// Channels of the five extracted stages, finest (1/2) to coarsest (1/32).
  std::array<int64_t, kNetworkDepth> stage_channels{};
  /// Weight-set identifier, e.g. "torchvision:efficientnet_b0".
  std::string pretrained_source;

  std::string name() const;  // "b0".."b7"
};

VariantConfig variant_config(Variant v);

/// Accepts "b4", "B4", "effisegnet-b4". Throws ConfigError otherwise.
Variant parse_variant(std::string_view text);

std::string variant_name(Variant v);

std::span<const Variant> all_variants();

/// EfficientNet channel rounding: scale by `width_mult`, round to a multiple
/// of 8, never drop more than 10% below the scaled value.
int64_t round_channels(int64_t channels, double width_mult);

/// EfficientNet depth scaling: ceil(layers * depth_mult).
int64_t round_repeats(int64_t layers, double depth_mult);

}  // namespace effisegnet
