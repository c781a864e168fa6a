#include "effisegnet/variant.hpp"

#include <algorithm>
#include <cctype>
#include <cmath>

#include "effisegnet/errors.hpp"

namespace effisegnet {
namespace {

struct Scaling {
  double width;
  double depth;
  int64_t resolution;
};

constexpr std::array<Scaling, 8> kScaling{{
    {1.0, 1.0, 224},
    {1.0, 1.1, 240},
    {1.1, 1.2, 260},
    {1.2, 1.4, 300},
    {1.4, 1.8, 380},
    {1.6, 2.2, 456},
    {1.8, 2.6, 528},
    {2.0, 3.1, 600},
}};

constexpr std::array<Variant, 8> kAll{Variant::kB0, Variant::kB1, Variant::kB2, Variant::kB3,
                                      Variant::kB4, Variant::kB5, Variant::kB6, Variant::kB7};

// Output widths of the MBConv stages whose final map is extracted
// (stages 1, 2, 3, 5 and 7 of the seven-stage EfficientNet body).
constexpr std::array<int64_t, kNetworkDepth> kBaseStageChannels{16, 24, 40, 112, 320};

}  // namespace

int64_t round_channels(int64_t channels, double width_mult) {
  constexpr int64_t divisor = 8;
  const double scaled = static_cast<double>(channels) * width_mult;
  int64_t rounded = std::max<int64_t>(
      divisor, static_cast<int64_t>(scaled + divisor / 2.0) / divisor * divisor);
  if (static_cast<double>(rounded) < 0.9 * scaled) rounded += divisor;
  return rounded;
}

int64_t round_repeats(int64_t layers, double depth_mult) {
  return static_cast<int64_t>(std::ceil(static_cast<double>(layers) * depth_mult));
}

std::string variant_name(Variant v) { return "b" + std::to_string(static_cast<int>(v)); }

std::string VariantConfig::name() const { return variant_name(variant); }

VariantConfig variant_config(Variant v) {
  const auto idx = static_cast<std::size_t>(v);
  if (idx >= kScaling.size()) throw ConfigError("unknown variant index " + std::to_string(idx));
  const Scaling& s = kScaling[idx];
  VariantConfig cfg;
  cfg.variant = v;
  cfg.input_resolution = s.resolution;
  cfg.width_mult = s.width;
  cfg.depth_mult = s.depth;
  for (std::size_t i = 0; i < kBaseStageChannels.size(); ++i)
    cfg.stage_channels[i] = round_channels(kBaseStageChannels[i], s.width);
  cfg.pretrained_source = "torchvision:efficientnet_" + variant_name(v);
  return cfg;
}

Variant parse_variant(std::string_view text) {
  std::string s(text);
  std::transform(s.begin(), s.end(), s.begin(), [](unsigned char c) { return std::tolower(c); });
  constexpr std::string_view prefix = "effisegnet-";
  if (s.starts_with(prefix)) s.erase(0, prefix.size());
  if (s.size() == 2 && s[0] == 'b' && s[1] >= '0' && s[1] <= '7')
    return static_cast<Variant>(s[1] - '0');
  throw ConfigError("unknown variant '" + std::string(text) + "' (expected b0..b7)");
}

std::span<const Variant> all_variants() { return kAll; }

}  // namespace effisegnet
