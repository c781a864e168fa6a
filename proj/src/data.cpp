#include "effisegnet/data.hpp"

#include <opencv2/imgcodecs.hpp>
#include <opencv2/imgproc.hpp>

#include <algorithm>
#include <cctype>
#include <charconv>
#include <cmath>
#include <map>
#include <set>
#include <sstream>

#include "effisegnet/errors.hpp"
#include "effisegnet/tensor_io.hpp"

namespace effisegnet {
namespace fs = std::filesystem;
namespace {

bool is_image_file(const fs::path& p) {
  std::string ext = p.extension().string();
  std::transform(ext.begin(), ext.end(), ext.begin(), [](unsigned char c) { return std::tolower(c); });
  return ext == ".jpg" || ext == ".jpeg" || ext == ".png" || ext == ".bmp" || ext == ".tif" || ext == ".tiff";
}

std::map<std::string, fs::path> collect_by_stem(const fs::path& dir) {
  std::map<std::string, fs::path> out;
  for (const auto& e : fs::directory_iterator(dir)) {
    if (!e.is_regular_file() || !is_image_file(e.path())) continue;
    const std::string stem = e.path().stem().string();
    if (!out.emplace(stem, e.path()).second)
      throw DataError("duplicate sample id '" + stem + "' in " + dir.string());
  }
  return out;
}

std::string join_ids(const std::vector<std::string>& ids, std::size_t limit = 20) {
  std::ostringstream os;
  for (std::size_t i = 0; i < ids.size() && i < limit; ++i) os << (i ? ", " : "") << ids[i];
  if (ids.size() > limit) os << ", ... (" << ids.size() << " total)";
  return os.str();
}

std::vector<std::string> read_id_list(const nlohmann::json& doc, const char* key, const fs::path& file) {
  if (!doc.contains(key) || !doc[key].is_array())
    throw DataError("split file " + file.string() + " has no '" + key + "' array");
  std::vector<std::string> ids;
  for (const auto& v : doc[key]) {
    if (!v.is_string()) throw DataError("split file " + file.string() + ": ids must be strings");
    ids.push_back(v.get<std::string>());
  }
  return ids;
}

}  // namespace

const SampleEntry& SampleIndex::find(const std::string& id) const {
  auto it = std::lower_bound(entries.begin(), entries.end(), id,
                             [](const SampleEntry& e, const std::string& key) { return e.id < key; });
  if (it == entries.end() || it->id != id) throw DataError("sample id '" + id + "' is not in the dataset index");
  return *it;
}

bool SampleIndex::contains(const std::string& id) const {
  auto it = std::lower_bound(entries.begin(), entries.end(), id,
                             [](const SampleEntry& e, const std::string& key) { return e.id < key; });
  return it != entries.end() && it->id == id;
}

SampleIndex index_dataset(const fs::path& root) {
  const fs::path images = root / "images";
  const fs::path masks = root / "masks";
  if (!fs::is_directory(root)) throw DataError("dataset root " + root.string() + " does not exist");
  if (!fs::is_directory(images)) throw DataError("dataset root " + root.string() + " has no images/ directory");
  if (!fs::is_directory(masks)) throw DataError("dataset root " + root.string() + " has no masks/ directory");

  const auto by_image = collect_by_stem(images);
  const auto by_mask = collect_by_stem(masks);

  std::vector<std::string> orphan_images;
  std::vector<std::string> orphan_masks;
  for (const auto& [id, _] : by_image)
    if (!by_mask.contains(id)) orphan_images.push_back(id);
  for (const auto& [id, _] : by_mask)
    if (!by_image.contains(id)) orphan_masks.push_back(id);
  if (!orphan_images.empty() || !orphan_masks.empty()) {
    std::string msg = "unpaired samples in " + root.string() + ":";
    if (!orphan_images.empty()) msg += " images without mask [" + join_ids(orphan_images) + "]";
    if (!orphan_masks.empty()) msg += " masks without image [" + join_ids(orphan_masks) + "]";
    throw DataError(msg);
  }
  if (by_image.empty()) throw DataError("dataset root " + root.string() + " contains no samples");

  SampleIndex index;
  index.source_root = root;
  for (const auto& [id, image] : by_image) index.entries.push_back({id, image, by_mask.at(id)});
  return index;  // std::map iteration already yields sorted ids
}

DatasetSplit generate_split(const SampleIndex& index, uint64_t seed) {
  std::vector<std::string> ids;
  ids.reserve(index.size());
  for (const auto& e : index.entries) ids.push_back(e.id);
  std::mt19937_64 rng(seed);
  std::shuffle(ids.begin(), ids.end(), rng);

  const auto n = static_cast<double>(ids.size());
  const auto n_train = static_cast<std::size_t>(std::llround(0.8 * n));
  const auto n_val = static_cast<std::size_t>(std::llround(0.1 * n));
  DatasetSplit split;
  split.train.assign(ids.begin(), ids.begin() + static_cast<std::ptrdiff_t>(n_train));
  split.validation.assign(ids.begin() + static_cast<std::ptrdiff_t>(n_train),
                          ids.begin() + static_cast<std::ptrdiff_t>(std::min(ids.size(), n_train + n_val)));
  if (n_train + n_val < ids.size())
    split.test.assign(ids.begin() + static_cast<std::ptrdiff_t>(n_train + n_val), ids.end());
  return split;
}

DatasetSplit load_split(const SampleIndex& index, const std::string& spec) {
  constexpr std::string_view kGenerate = "generate:";
  if (spec.starts_with(kGenerate)) {
    const std::string_view digits = std::string_view(spec).substr(kGenerate.size());
    uint64_t seed = 0;
    auto [ptr, ec] = std::from_chars(digits.data(), digits.data() + digits.size(), seed);
    if (ec != std::errc() || ptr != digits.data() + digits.size() || digits.empty())
      throw ConfigError("bad split seed in '" + spec + "'");
    return generate_split(index, seed);
  }

  const fs::path file(spec);
  if (!fs::exists(file)) throw DataError("split file " + spec + " does not exist");
  nlohmann::json doc;
  try {
    doc = nlohmann::json::parse(read_text_file(file));
  } catch (const nlohmann::json::exception& e) {
    throw DataError("split file " + spec + " is not valid JSON: " + e.what());
  }
  DatasetSplit split{read_id_list(doc, "train", file), read_id_list(doc, "validation", file),
                     read_id_list(doc, "test", file)};

  std::set<std::string> seen;
  std::vector<std::string> unknown;
  std::vector<std::string> repeated;
  for (const auto* list : {&split.train, &split.validation, &split.test}) {
    for (const auto& id : *list) {
      if (!index.contains(id)) unknown.push_back(id);
      if (!seen.insert(id).second) repeated.push_back(id);
    }
  }
  if (!unknown.empty()) throw DataError("split file " + spec + " references unknown ids [" + join_ids(unknown) + "]");
  if (!repeated.empty()) throw DataError("split file " + spec + " lists ids more than once [" + join_ids(repeated) + "]");
  return split;
}

void save_split(const DatasetSplit& split, const fs::path& path) {
  nlohmann::json doc = {{"train", split.train}, {"validation", split.validation}, {"test", split.test}};
  write_file_atomic(path, doc.dump(2) + "\n");
}

cv::Mat read_rgb_image(const fs::path& path) {
  cv::Mat raw = cv::imread(path.string(), cv::IMREAD_UNCHANGED);
  if (raw.empty()) throw DataError("cannot read image " + path.string());
  if (raw.depth() != CV_8U || raw.channels() != 3)
    throw DataError("image " + path.string() + " is not 8-bit RGB (" + std::to_string(raw.channels()) + " channels)");
  cv::Mat rgb;
  cv::cvtColor(raw, rgb, cv::COLOR_BGR2RGB);
  return rgb;
}

cv::Mat read_binary_mask(const fs::path& path) {
  cv::Mat gray = cv::imread(path.string(), cv::IMREAD_GRAYSCALE);
  if (gray.empty()) throw DataError("cannot read mask " + path.string());
  cv::Mat mask;
  cv::threshold(gray, mask, 127, 1, cv::THRESH_BINARY);  // >= 128 of 255, i.e. >= 0.5
  return mask;
}

RawSample load_sample(const SampleEntry& entry) {
  return {read_rgb_image(entry.image_path), read_binary_mask(entry.mask_path)};
}

RawSample resize_sample(const RawSample& sample, int64_t resolution) {
  const cv::Size size(static_cast<int>(resolution), static_cast<int>(resolution));
  RawSample out;
  cv::resize(sample.image, out.image, size, 0, 0, cv::INTER_LANCZOS4);
  cv::resize(sample.mask, out.mask, size, 0, 0, cv::INTER_NEAREST);
  cv::threshold(out.mask, out.mask, 0, 1, cv::THRESH_BINARY);
  return out;
}

torch::Tensor normalize_image(const cv::Mat& rgb) {
  if (rgb.channels() != 3) throw DataError("normalize_image expects a three-channel image");
  cv::Mat f;
  if (rgb.depth() == CV_8U) rgb.convertTo(f, CV_32FC3, 1.0 / 255.0);
  else if (rgb.depth() == CV_32F) f = rgb.isContinuous() ? rgb : rgb.clone();
  else throw DataError("normalize_image expects 8-bit or float32 pixels");
  auto t = torch::from_blob(f.data, {f.rows, f.cols, 3}, torch::kFloat32).permute({2, 0, 1}).clone();
  auto mean = torch::tensor({kImageNetMean[0], kImageNetMean[1], kImageNetMean[2]}).view({3, 1, 1});
  auto std = torch::tensor({kImageNetStd[0], kImageNetStd[1], kImageNetStd[2]}).view({3, 1, 1});
  return (t - mean) / std;
}

torch::Tensor denormalize_image(const torch::Tensor& normalized) {
  auto mean = torch::tensor({kImageNetMean[0], kImageNetMean[1], kImageNetMean[2]}).view({3, 1, 1});
  auto std = torch::tensor({kImageNetStd[0], kImageNetStd[1], kImageNetStd[2]}).view({3, 1, 1});
  return normalized * std + mean;
}

torch::Tensor mask_to_tensor(const cv::Mat& mask) {
  if (mask.type() != CV_8UC1) throw DataError("masks must be single-channel 8-bit");
  cv::Mat m = mask.isContinuous() ? mask : mask.clone();
  return torch::from_blob(m.data, {1, m.rows, m.cols}, torch::kUInt8).to(torch::kFloat32);
}

std::pair<torch::Tensor, torch::Tensor> preprocess(const cv::Mat& image_rgb, const cv::Mat& mask,
                                                   const VariantConfig& variant) {
  if (image_rgb.type() != CV_8UC3) throw DataError("preprocess expects an 8-bit RGB image");
  if (mask.type() != CV_8UC1) throw DataError("preprocess expects a single-channel 8-bit mask");
  // Accept both {0,1} masks and raw 0..255 intensities.
  double max_value = 0.0;
  cv::minMaxLoc(mask, nullptr, &max_value);
  cv::Mat binary;
  cv::threshold(mask, binary, max_value > 1.0 ? 127 : 0, 1, cv::THRESH_BINARY);
  const RawSample resized = resize_sample({image_rgb, binary}, variant.input_resolution);
  return {normalize_image(resized.image), mask_to_tensor(resized.mask)};
}

}  // namespace effisegnet
