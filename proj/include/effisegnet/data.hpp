#pragma once

#include <torch/torch.h>

#include <opencv2/core.hpp>

#include <array>
#include <cstdint>
#include <filesystem>
#include <random>
#include <string>
#include <utility>
#include <vector>

#include <nlohmann/json.hpp>

#include "effisegnet/variant.hpp"

namespace effisegnet {

struct SampleEntry {
  std::string id;  // file stem shared by image and mask
  std::filesystem::path image_path;
  std::filesystem::path mask_path;
};

/// Dataset in the `<root>/images`, `<root>/masks` layout, sorted by id.
struct SampleIndex {
  std::filesystem::path source_root;
  std::vector<SampleEntry> entries;

  const SampleEntry& find(const std::string& id) const;  // throws DataError
  bool contains(const std::string& id) const;
  std::size_t size() const { return entries.size(); }
};

/// Throws DataError on a missing directory, an empty dataset, or orphan
/// images/masks (all offending ids are listed).
SampleIndex index_dataset(const std::filesystem::path& root);

struct DatasetSplit {
  std::vector<std::string> train;
  std::vector<std::string> validation;
  std::vector<std::string> test;
};

/// `spec` is either a JSON file with "train", "validation" and "test" id
/// arrays, or "generate:<seed>" for a seeded 80/10/10 shuffle of the index.
/// Throws DataError for ids absent from the index or overlapping lists.
DatasetSplit load_split(const SampleIndex& index, const std::string& spec);

DatasetSplit generate_split(const SampleIndex& index, uint64_t seed);
void save_split(const DatasetSplit& split, const std::filesystem::path& path);

inline constexpr std::array<float, 3> kImageNetMean{0.485f, 0.456f, 0.406f};
inline constexpr std::array<float, 3> kImageNetStd{0.229f, 0.224f, 0.225f};

/// Image as 8-bit RGB (CV_8UC3) and mask as CV_8UC1 with values {0,1}.
struct RawSample {
  cv::Mat image;
  cv::Mat mask;
};

/// Reads an image (must have exactly three colour channels) and converts
/// it to RGB. Throws DataError otherwise.
cv::Mat read_rgb_image(const std::filesystem::path& path);

/// Reads a mask as grayscale and binarizes it at half intensity.
cv::Mat read_binary_mask(const std::filesystem::path& path);

RawSample load_sample(const SampleEntry& entry);

/// Lanczos-resizes the image and nearest-resizes + re-binarizes the mask to
/// resolution x resolution. Both stay 8-bit.
RawSample resize_sample(const RawSample& sample, int64_t resolution);

/// CV_8UC3 or CV_32FC3 RGB in [0,1] -> normalized float tensor 3 x H x W.
torch::Tensor normalize_image(const cv::Mat& rgb);

/// Inverse of normalize_image: 3 x H x W tensor -> values in [0,1].
torch::Tensor denormalize_image(const torch::Tensor& normalized);

/// Binary CV_8UC1 -> float tensor 1 x H x W of {0,1}.
torch::Tensor mask_to_tensor(const cv::Mat& mask);

/// Evaluation-time preprocessing: resize to the variant resolution then
/// normalize. Throws DataError if the image is not three-channel or the mask
/// is not single-channel.
std::pair<torch::Tensor, torch::Tensor> preprocess(const cv::Mat& image_rgb, const cv::Mat& mask,
                                                   const VariantConfig& variant);

// ---------------------------------------------------------------------------
// Augmentation

struct AugmentationConfig {
  double hflip_prob = 0.5;
  double vflip_prob = 0.5;
  std::array<double, 2> brightness_range{0.6, 1.6};
  double contrast_factor = 0.2;
  double saturation_factor = 0.1;
  double hue_factor = 0.01;
  std::array<double, 2> affine_scale_range{0.5, 1.5};
  double affine_translate_frac = 0.125;
  std::array<double, 2> affine_rotate_deg{-90.0, 90.0};
  double elastic_sigma = 50.0;
  double elastic_alpha = 1.0;

  /// Every stage disabled: no flips, unit brightness, no jitter/affine/elastic.
  static AugmentationConfig identity();

  /// Throws ConfigError for inverted ranges or probabilities outside [0,1].
  void validate() const;
};

void to_json(nlohmann::json& j, const AugmentationConfig& cfg);
void from_json(const nlohmann::json& j, AugmentationConfig& cfg);

/// Rotation (degrees, counter-clockwise), isotropic scale and translation in
/// pixels, about the image centre ((W-1)/2, (H-1)/2).
struct AffineParams {
  double angle_deg = 0.0;
  double scale = 1.0;
  double tx = 0.0;
  double ty = 0.0;

  bool is_identity() const { return angle_deg == 0.0 && scale == 1.0 && tx == 0.0 && ty == 0.0; }
};

/// 2x3 forward map (source pixel -> destination pixel).
cv::Matx23d affine_matrix(const AffineParams& params, cv::Size size);

/// Image in bilinear, mask in nearest neighbour; outside the frame the image
/// is zero and the mask is background.
void apply_affine(cv::Mat& image, cv::Mat& mask, const AffineParams& params);

/// Displacement fields (dx, dy), CV_32FC1: standard-normal noise smoothed by
/// a Gaussian of `sigma` and scaled by `alpha`.
std::pair<cv::Mat, cv::Mat> elastic_displacement(cv::Size size, double sigma, double alpha, std::mt19937_64& rng);

/// Warps by the displacement field: image with Lanczos, mask with nearest.
void apply_displacement(cv::Mat& image, cv::Mat& mask, const cv::Mat& dx, const cv::Mat& dy);

/// Flips -> colour jitter (image only) -> affine -> elastic. `image` is
/// CV_32FC3 RGB in [0,1], `mask` is binary CV_8UC1; both are updated in
/// place and the mask stays binary. Stages whose sampled parameters are the
/// identity are skipped, so an identity config returns the input unchanged.
void augment(cv::Mat& image, cv::Mat& mask, const AugmentationConfig& cfg, std::mt19937_64& rng);

/// Independent stream per (run seed, sample id, epoch).
std::mt19937_64 sample_rng(uint64_t run_seed, const std::string& sample_id, int64_t epoch);

}  // namespace effisegnet
