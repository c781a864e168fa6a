#pragma once

#include <torch/torch.h>

#include <filesystem>
#include <functional>
#include <string>
#include <vector>

#include <nlohmann/json.hpp>

#include "effisegnet/data.hpp"
#include "effisegnet/variant.hpp"

namespace effisegnet {

class EffiSegNetImpl;

inline constexpr double kDefaultThreshold = 0.5;

struct ConfusionCounts {
  int64_t tp = 0;
  int64_t fp = 0;
  int64_t fn = 0;
  int64_t tn = 0;

  int64_t total() const { return tp + fp + fn + tn; }
  ConfusionCounts& operator+=(const ConfusionCounts& o) {
    tp += o.tp;
    fp += o.fp;
    fn += o.fn;
    tn += o.tn;
    return *this;
  }
  bool operator==(const ConfusionCounts&) const = default;
};

/// Pixels with probability >= threshold are foreground; ground truth is
/// foreground where > 0.5. Throws ContractError on shape mismatch.
ConfusionCounts confusion_counts(const torch::Tensor& pred_probs, const torch::Tensor& gt,
                                 double threshold = kDefaultThreshold);

struct MicroMetrics {
  double precision = 0.0;
  double recall = 0.0;
  double f1 = 0.0;
};

/// Ratios from pooled counts. A zero denominator gives 0, except that
/// tp = fp = fn = 0 (nothing predicted, nothing present) gives 1 everywhere.
MicroMetrics micro_metrics(const ConfusionCounts& counts);

struct Overlap {
  double dice = 0.0;
  double iou = 0.0;
};

/// iou = tp / (tp + fp + fn) and dice = 2 iou / (1 + iou), which equals
/// 2tp / (2tp + fp + fn). Both are 1 for an empty prediction on an empty mask.
Overlap per_image_overlap(const ConfusionCounts& counts);
Overlap per_image_overlap(const torch::Tensor& pred_probs, const torch::Tensor& gt,
                          double threshold = kDefaultThreshold);

struct ImageScore {
  std::string id;
  double dice = 0.0;
  double iou = 0.0;
};

/// F1 / precision / recall are pooled over every pixel of the split;
/// mDice / mIoU are means of the per-image scores.
struct MetricsReport {
  std::string model;
  double f1 = 0.0;
  double mdice = 0.0;
  double miou = 0.0;
  double precision = 0.0;
  double recall = 0.0;
  std::vector<ImageScore> per_image;
  ConfusionCounts aggregate_counts;
  double threshold = kDefaultThreshold;

  nlohmann::json to_json() const;
  static std::string csv_header();  // model,F1,mDice,mIoU,Precision,Recall
  std::string csv_row() const;
};

/// Order-independent accumulation of per-image results.
class MetricsAccumulator {
 public:
  explicit MetricsAccumulator(double threshold = kDefaultThreshold) : threshold_(threshold) {}

  void add(const std::string& id, const torch::Tensor& pred_probs, const torch::Tensor& gt);
  void add_counts(const std::string& id, const ConfusionCounts& counts);
  std::size_t size() const { return per_image_.size(); }

  /// Throws ContractError if nothing was added.
  MetricsReport report(const std::string& model_name = "") const;

 private:
  double threshold_;
  ConfusionCounts pooled_;
  std::vector<ImageScore> per_image_;
};

/// Maps (sample id, normalized 3 x R x R image) to probabilities 1 x R x R.
using Predictor = std::function<torch::Tensor(const std::string& id, const torch::Tensor& image)>;

/// Preprocesses every listed sample (no augmentation), predicts, scores.
/// Throws ContractError for an empty id list.
MetricsReport evaluate(const Predictor& predictor, const std::vector<std::string>& ids, const SampleIndex& index,
                       const VariantConfig& variant, double threshold = kDefaultThreshold);

/// Same, for a network in eval mode. The model's parameters and BN
/// statistics are not modified.
MetricsReport evaluate(EffiSegNetImpl& model, const std::vector<std::string>& ids, const SampleIndex& index,
                       double threshold = kDefaultThreshold, int64_t batch_size = 4);

/// Writes `<dir>/metrics.json` and `<dir>/metrics.csv` (header + one row).
void write_report(const MetricsReport& report, const std::filesystem::path& dir);

}  // namespace effisegnet
