#include <opencv2/imgproc.hpp>

#include <cmath>

#include "effisegnet/data.hpp"
#include "effisegnet/errors.hpp"

namespace effisegnet {
namespace {

double uniform(std::mt19937_64& rng, double lo, double hi) {
  if (lo == hi) return lo;
  return std::uniform_real_distribution<double>(lo, hi)(rng);
}

bool coin(std::mt19937_64& rng, double p) { return std::uniform_real_distribution<double>(0.0, 1.0)(rng) < p; }

void clamp01(cv::Mat& img) {
  cv::min(img, 1.0, img);
  cv::max(img, 0.0, img);
}

cv::Mat grayscale(const cv::Mat& rgb) {
  cv::Mat gray;
  cv::cvtColor(rgb, gray, cv::COLOR_RGB2GRAY);
  return gray;
}

void adjust_brightness(cv::Mat& img, double factor) {
  img *= factor;
  clamp01(img);
}

void adjust_contrast(cv::Mat& img, double factor) {
  const double mean = cv::mean(grayscale(img))[0];
  img.convertTo(img, CV_32FC3, factor, mean * (1.0 - factor));
  clamp01(img);
}

void adjust_saturation(cv::Mat& img, double factor) {
  cv::Mat gray3;
  cv::cvtColor(grayscale(img), gray3, cv::COLOR_GRAY2RGB);
  cv::addWeighted(img, factor, gray3, 1.0 - factor, 0.0, img);
  clamp01(img);
}

// `shift` is a fraction of the hue circle.
void adjust_hue(cv::Mat& img, double shift) {
  cv::Mat hsv;
  cv::cvtColor(img, hsv, cv::COLOR_RGB2HSV);  // float: H in [0, 360)
  for (int y = 0; y < hsv.rows; ++y) {
    auto* row = hsv.ptr<cv::Vec3f>(y);
    for (int x = 0; x < hsv.cols; ++x) {
      float h = row[x][0] + static_cast<float>(shift * 360.0);
      h = std::fmod(h, 360.0f);
      if (h < 0.0f) h += 360.0f;
      row[x][0] = h;
    }
  }
  cv::cvtColor(hsv, img, cv::COLOR_HSV2RGB);
  clamp01(img);
}

void require_range(const std::array<double, 2>& r, const char* name) {
  if (!(r[0] <= r[1])) throw ConfigError(std::string(name) + " range is inverted");
}

void require_prob(double p, const char* name) {
  if (!(p >= 0.0 && p <= 1.0)) throw ConfigError(std::string(name) + " must lie in [0, 1]");
}

}  // namespace

AugmentationConfig AugmentationConfig::identity() {
  AugmentationConfig cfg;
  cfg.hflip_prob = 0.0;
  cfg.vflip_prob = 0.0;
  cfg.brightness_range = {1.0, 1.0};
  cfg.contrast_factor = 0.0;
  cfg.saturation_factor = 0.0;
  cfg.hue_factor = 0.0;
  cfg.affine_scale_range = {1.0, 1.0};
  cfg.affine_translate_frac = 0.0;
  cfg.affine_rotate_deg = {0.0, 0.0};
  cfg.elastic_alpha = 0.0;
  return cfg;
}

void AugmentationConfig::validate() const {
  require_prob(hflip_prob, "hflip_prob");
  require_prob(vflip_prob, "vflip_prob");
  require_range(brightness_range, "brightness");
  require_range(affine_scale_range, "affine_scale");
  require_range(affine_rotate_deg, "affine_rotate_deg");
  if (brightness_range[0] < 0.0 || affine_scale_range[0] <= 0.0)
    throw ConfigError("brightness and scale ranges must be positive");
  if (contrast_factor < 0.0 || saturation_factor < 0.0 || affine_translate_frac < 0.0 || elastic_sigma < 0.0 ||
      elastic_alpha < 0.0)
    throw ConfigError("augmentation factors must be non-negative");
  if (hue_factor < 0.0 || hue_factor > 0.5) throw ConfigError("hue_factor must lie in [0, 0.5]");
}

void to_json(nlohmann::json& j, const AugmentationConfig& c) {
  j = {{"hflip_prob", c.hflip_prob},
       {"vflip_prob", c.vflip_prob},
       {"brightness_range", c.brightness_range},
       {"contrast_factor", c.contrast_factor},
       {"saturation_factor", c.saturation_factor},
       {"hue_factor", c.hue_factor},
       {"affine_scale_range", c.affine_scale_range},
       {"affine_translate_frac", c.affine_translate_frac},
       {"affine_rotate_deg", c.affine_rotate_deg},
       {"elastic_sigma", c.elastic_sigma},
       {"elastic_alpha", c.elastic_alpha},
       {"elastic_interpolation", "lanczos"}};
}

void from_json(const nlohmann::json& j, AugmentationConfig& c) {
  for (const auto& [key, v] : j.items()) {
    if (key == "hflip_prob") c.hflip_prob = v.get<double>();
    else if (key == "vflip_prob") c.vflip_prob = v.get<double>();
    else if (key == "brightness_range") c.brightness_range = v.get<std::array<double, 2>>();
    else if (key == "contrast_factor") c.contrast_factor = v.get<double>();
    else if (key == "saturation_factor") c.saturation_factor = v.get<double>();
    else if (key == "hue_factor") c.hue_factor = v.get<double>();
    else if (key == "affine_scale_range") c.affine_scale_range = v.get<std::array<double, 2>>();
    else if (key == "affine_translate_frac") c.affine_translate_frac = v.get<double>();
    else if (key == "affine_rotate_deg") c.affine_rotate_deg = v.get<std::array<double, 2>>();
    else if (key == "elastic_sigma") c.elastic_sigma = v.get<double>();
    else if (key == "elastic_alpha") c.elastic_alpha = v.get<double>();
    else if (key == "elastic_interpolation") {
      if (v.get<std::string>() != "lanczos") throw ConfigError("elastic_interpolation must be 'lanczos'");
    } else {
      throw ConfigError("unknown augmentation config key '" + key + "'");
    }
  }
}

cv::Matx23d affine_matrix(const AffineParams& p, cv::Size size) {
  const cv::Point2f centre(static_cast<float>(size.width - 1) / 2.0f, static_cast<float>(size.height - 1) / 2.0f);
  cv::Mat m = cv::getRotationMatrix2D(centre, p.angle_deg, p.scale);
  m.at<double>(0, 2) += p.tx;
  m.at<double>(1, 2) += p.ty;
  return cv::Matx23d(m);
}

void apply_affine(cv::Mat& image, cv::Mat& mask, const AffineParams& params) {
  if (params.is_identity()) return;
  const cv::Matx23d m = affine_matrix(params, image.size());
  cv::Mat warped_image;
  cv::Mat warped_mask;
  cv::warpAffine(image, warped_image, m, image.size(), cv::INTER_LINEAR, cv::BORDER_CONSTANT, cv::Scalar::all(0));
  cv::warpAffine(mask, warped_mask, m, mask.size(), cv::INTER_NEAREST, cv::BORDER_CONSTANT, cv::Scalar::all(0));
  image = warped_image;
  mask = warped_mask;
}

std::pair<cv::Mat, cv::Mat> elastic_displacement(cv::Size size, double sigma, double alpha, std::mt19937_64& rng) {
  std::normal_distribution<float> normal(0.0f, 1.0f);
  auto field = [&] {
    cv::Mat noise(size, CV_32FC1);
    for (int y = 0; y < size.height; ++y) {
      auto* row = noise.ptr<float>(y);
      for (int x = 0; x < size.width; ++x) row[x] = normal(rng);
    }
    cv::Mat smooth;
    cv::GaussianBlur(noise, smooth, cv::Size(0, 0), sigma, sigma, cv::BORDER_REFLECT_101);
    return cv::Mat(smooth * alpha);
  };
  cv::Mat dx = field();
  cv::Mat dy = field();
  return {dx, dy};
}

void apply_displacement(cv::Mat& image, cv::Mat& mask, const cv::Mat& dx, const cv::Mat& dy) {
  cv::Mat map_x(dx.size(), CV_32FC1);
  cv::Mat map_y(dy.size(), CV_32FC1);
  for (int y = 0; y < dx.rows; ++y) {
    const auto* dxr = dx.ptr<float>(y);
    const auto* dyr = dy.ptr<float>(y);
    auto* mx = map_x.ptr<float>(y);
    auto* my = map_y.ptr<float>(y);
    for (int x = 0; x < dx.cols; ++x) {
      mx[x] = static_cast<float>(x) + dxr[x];
      my[x] = static_cast<float>(y) + dyr[x];
    }
  }
  cv::Mat warped_image;
  cv::Mat warped_mask;
  cv::remap(image, warped_image, map_x, map_y, cv::INTER_LANCZOS4, cv::BORDER_REFLECT_101);
  cv::remap(mask, warped_mask, map_x, map_y, cv::INTER_NEAREST, cv::BORDER_REFLECT_101);
  clamp01(warped_image);
  image = warped_image;
  mask = warped_mask;
}

void augment(cv::Mat& image, cv::Mat& mask, const AugmentationConfig& cfg, std::mt19937_64& rng) {
  if (image.type() != CV_32FC3) throw ContractError("augment expects a CV_32FC3 image in [0,1]");
  if (mask.type() != CV_8UC1 || mask.size() != image.size())
    throw ContractError("augment expects a CV_8UC1 mask the size of the image");

  // All parameters are drawn up front in a fixed order so the stream position
  // never depends on which stages end up being no-ops.
  const bool hflip = coin(rng, cfg.hflip_prob);
  const bool vflip = coin(rng, cfg.vflip_prob);
  const double brightness = std::max(0.0, uniform(rng, cfg.brightness_range[0], cfg.brightness_range[1]));
  const double contrast = std::max(0.0, uniform(rng, 1.0 - cfg.contrast_factor, 1.0 + cfg.contrast_factor));
  const double saturation = std::max(0.0, uniform(rng, 1.0 - cfg.saturation_factor, 1.0 + cfg.saturation_factor));
  const double hue = uniform(rng, -cfg.hue_factor, cfg.hue_factor);
  AffineParams affine;
  affine.angle_deg = uniform(rng, cfg.affine_rotate_deg[0], cfg.affine_rotate_deg[1]);
  affine.scale = std::max(1e-3, uniform(rng, cfg.affine_scale_range[0], cfg.affine_scale_range[1]));
  affine.tx = uniform(rng, -cfg.affine_translate_frac, cfg.affine_translate_frac) * image.cols;
  affine.ty = uniform(rng, -cfg.affine_translate_frac, cfg.affine_translate_frac) * image.rows;

  if (hflip) {
    cv::flip(image, image, 1);
    cv::flip(mask, mask, 1);
  }
  if (vflip) {
    cv::flip(image, image, 0);
    cv::flip(mask, mask, 0);
  }
  if (brightness != 1.0) adjust_brightness(image, brightness);
  if (contrast != 1.0) adjust_contrast(image, contrast);
  if (saturation != 1.0) adjust_saturation(image, saturation);
  if (hue != 0.0) adjust_hue(image, hue);
  apply_affine(image, mask, affine);
  if (cfg.elastic_alpha > 0.0 && cfg.elastic_sigma > 0.0) {
    auto [dx, dy] = elastic_displacement(image.size(), cfg.elastic_sigma, cfg.elastic_alpha, rng);
    apply_displacement(image, mask, dx, dy);
  }
  cv::threshold(mask, mask, 0, 1, cv::THRESH_BINARY);
}

std::mt19937_64 sample_rng(uint64_t run_seed, const std::string& sample_id, int64_t epoch) {
  // FNV-1a keeps the id hash stable across standard libraries.
  uint64_t h = 1469598103934665603ULL;
  for (unsigned char c : sample_id) {
    h ^= c;
    h *= 1099511628211ULL;
  }
  const auto e = static_cast<uint64_t>(epoch);
  std::seed_seq seq{static_cast<uint32_t>(run_seed), static_cast<uint32_t>(run_seed >> 32),
                    static_cast<uint32_t>(h), static_cast<uint32_t>(h >> 32), static_cast<uint32_t>(e),
                    static_cast<uint32_t>(e >> 32)};
  return std::mt19937_64(seq);
}

}  // namespace effisegnet
