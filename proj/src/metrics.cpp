#include "effisegnet/metrics.hpp"

#include <cstdio>
#include <sstream>

#include "effisegnet/errors.hpp"
#include "effisegnet/model.hpp"
#include "effisegnet/tensor_io.hpp"

namespace effisegnet {
namespace {

double ratio_or(int64_t num, int64_t den, double fallback) {
  return den == 0 ? fallback : static_cast<double>(num) / static_cast<double>(den);
}

std::string fmt4(double v) {
  char buf[32];
  std::snprintf(buf, sizeof buf, "%.4f", v);
  return buf;
}

}  // namespace

ConfusionCounts confusion_counts(const torch::Tensor& pred_probs, const torch::Tensor& gt, double threshold) {
  if (pred_probs.sizes() != gt.sizes()) {
    std::ostringstream os;
    os << "prediction " << pred_probs.sizes() << " and ground truth " << gt.sizes() << " differ in shape";
    throw ContractError(os.str());
  }
  const auto pred = pred_probs.ge(threshold);
  const auto truth = gt.gt(0.5);
  ConfusionCounts c;
  c.tp = (pred & truth).sum().item<int64_t>();
  c.fp = (pred & ~truth).sum().item<int64_t>();
  c.fn = (~pred & truth).sum().item<int64_t>();
  c.tn = pred.numel() - c.tp - c.fp - c.fn;
  return c;
}

MicroMetrics micro_metrics(const ConfusionCounts& c) {
  if (c.tp + c.fp + c.fn == 0) return {1.0, 1.0, 1.0};
  MicroMetrics m;
  m.precision = ratio_or(c.tp, c.tp + c.fp, 0.0);
  m.recall = ratio_or(c.tp, c.tp + c.fn, 0.0);
  const double sum = m.precision + m.recall;
  m.f1 = sum > 0.0 ? 2.0 * m.precision * m.recall / sum : 0.0;
  return m;
}

Overlap per_image_overlap(const ConfusionCounts& c) {
  const int64_t uni = c.tp + c.fp + c.fn;
  if (uni == 0) return {1.0, 1.0};
  const double iou = static_cast<double>(c.tp) / static_cast<double>(uni);
  return {2.0 * iou / (1.0 + iou), iou};
}

Overlap per_image_overlap(const torch::Tensor& pred_probs, const torch::Tensor& gt, double threshold) {
  return per_image_overlap(confusion_counts(pred_probs, gt, threshold));
}

nlohmann::json MetricsReport::to_json() const {
  nlohmann::json images = nlohmann::json::array();
  for (const auto& s : per_image) images.push_back({{"id", s.id}, {"dice", s.dice}, {"iou", s.iou}});
  return {{"model", model},
          {"f1", f1},
          {"mdice", mdice},
          {"miou", miou},
          {"precision", precision},
          {"recall", recall},
          {"threshold", threshold},
          {"aggregation",
           {{"f1_precision_recall", "micro: pixel counts pooled over the split"},
            {"mdice_miou", "mean of per-image scores"},
            {"note", "aggregation rules are this implementation's reconstruction"}}},
          {"aggregate_counts",
           {{"tp", aggregate_counts.tp}, {"fp", aggregate_counts.fp}, {"fn", aggregate_counts.fn},
            {"tn", aggregate_counts.tn}}},
          {"per_image", images}};
}

std::string MetricsReport::csv_header() { return "model,F1,mDice,mIoU,Precision,Recall"; }

std::string MetricsReport::csv_row() const {
  return model + "," + fmt4(f1) + "," + fmt4(mdice) + "," + fmt4(miou) + "," + fmt4(precision) + "," + fmt4(recall);
}

void MetricsAccumulator::add(const std::string& id, const torch::Tensor& pred_probs, const torch::Tensor& gt) {
  add_counts(id, confusion_counts(pred_probs, gt, threshold_));
}

void MetricsAccumulator::add_counts(const std::string& id, const ConfusionCounts& counts) {
  pooled_ += counts;
  const Overlap o = per_image_overlap(counts);
  per_image_.push_back({id, o.dice, o.iou});
}

MetricsReport MetricsAccumulator::report(const std::string& model_name) const {
  if (per_image_.empty()) throw ContractError("cannot report metrics over an empty split");
  MetricsReport r;
  r.model = model_name;
  r.threshold = threshold_;
  r.aggregate_counts = pooled_;
  r.per_image = per_image_;
  const MicroMetrics micro = micro_metrics(pooled_);
  r.precision = micro.precision;
  r.recall = micro.recall;
  r.f1 = micro.f1;
  double dice_sum = 0.0;
  double iou_sum = 0.0;
  for (const auto& s : per_image_) {
    dice_sum += s.dice;
    iou_sum += s.iou;
  }
  r.mdice = dice_sum / static_cast<double>(per_image_.size());
  r.miou = iou_sum / static_cast<double>(per_image_.size());
  return r;
}

MetricsReport evaluate(const Predictor& predictor, const std::vector<std::string>& ids, const SampleIndex& index,
                       const VariantConfig& variant, double threshold) {
  if (ids.empty()) throw ContractError("evaluation split is empty");
  MetricsAccumulator acc(threshold);
  for (const auto& id : ids) {
    const RawSample raw = load_sample(index.find(id));
    auto [image, mask] = preprocess(raw.image, raw.mask, variant);
    acc.add(id, predictor(id, image), mask);
  }
  return acc.report("EffiSegNet-" + variant.name());
}

MetricsReport evaluate(EffiSegNetImpl& model, const std::vector<std::string>& ids, const SampleIndex& index,
                       double threshold, int64_t batch_size) {
  if (ids.empty()) throw ContractError("evaluation split is empty");
  if (batch_size < 1) throw ContractError("batch_size must be positive");
  const VariantConfig& variant = model.variant();
  MetricsAccumulator acc(threshold);
  for (std::size_t start = 0; start < ids.size(); start += static_cast<std::size_t>(batch_size)) {
    const std::size_t end = std::min(ids.size(), start + static_cast<std::size_t>(batch_size));
    std::vector<torch::Tensor> images;
    std::vector<torch::Tensor> masks;
    for (std::size_t i = start; i < end; ++i) {
      const RawSample raw = load_sample(index.find(ids[i]));
      auto [image, mask] = preprocess(raw.image, raw.mask, variant);
      images.push_back(image);
      masks.push_back(mask);
    }
    const auto probs = predict_mask_probabilities(model, torch::stack(images));
    for (std::size_t i = start; i < end; ++i) acc.add(ids[i], probs[static_cast<int64_t>(i - start)], masks[i - start]);
  }
  return acc.report("EffiSegNet-" + variant.name());
}

void write_report(const MetricsReport& report, const std::filesystem::path& dir) {
  std::filesystem::create_directories(dir);
  write_file_atomic(dir / "metrics.json", report.to_json().dump(2) + "\n");
  write_file_atomic(dir / "metrics.csv", MetricsReport::csv_header() + "\n" + report.csv_row() + "\n");
}

}  // namespace effisegnet
