#include <doctest.h>

#include <map>

#include "effisegnet/errors.hpp"
#include "effisegnet/metrics.hpp"
#include "effisegnet/model.hpp"
#include "effisegnet/tensor_io.hpp"
#include "oracles.hpp"
#include "synthetic.hpp"

using namespace effisegnet;

namespace {

torch::Tensor t4(std::vector<float> v) { return torch::tensor(v).reshape({2, 2}); }

}  // namespace

TEST_SUITE("metrics") {
  TEST_CASE("confusion counts") {
    auto gt = t4({1, 0, 1, 0});
    CHECK(confusion_counts(t4({1, 1, 0, 0}), gt) == ConfusionCounts{1, 1, 1, 1});
    auto same = confusion_counts(gt, gt);
    CHECK(same.fp == 0);
    CHECK(same.fn == 0);
    auto half = confusion_counts(torch::full({2, 2}, 0.5), gt);
    CHECK(half.tp + half.fp == 4);
    CHECK_THROWS_AS(confusion_counts(torch::zeros({3}), gt), ContractError);
  }

  TEST_CASE("micro metrics") {
    auto m = micro_metrics({8, 2, 2, 0});
    CHECK(m.precision == doctest::Approx(0.8));
    CHECK(m.recall == doctest::Approx(0.8));
    CHECK(m.f1 == doctest::Approx(0.8));
    auto e = micro_metrics({0, 0, 0, 10});
    CHECK(e.precision == 1.0);
    CHECK(e.recall == 1.0);
    CHECK(e.f1 == 1.0);
    CHECK(micro_metrics({0, 3, 0, 1}).precision == 0.0);
    CHECK(micro_metrics({0, 0, 3, 1}).recall == 0.0);
  }

  TEST_CASE("per-image overlap") {
    auto gt = t4({1, 1, 0, 0});
    CHECK(per_image_overlap(gt, gt).dice == 1.0);
    CHECK(per_image_overlap(gt, gt).iou == 1.0);
    auto disjoint = per_image_overlap(t4({0, 0, 1, 1}), gt);
    CHECK(disjoint.dice == 0.0);
    CHECK(disjoint.iou == 0.0);
    auto o = per_image_overlap(ConfusionCounts{2, 1, 1, 0});
    CHECK(o.dice == doctest::Approx(4.0 / 6.0));
    CHECK(o.iou == 0.5);
    CHECK(o.dice == 2 * o.iou / (1 + o.iou));
    auto empty = per_image_overlap(torch::zeros({2, 2}), torch::zeros({2, 2}));
    CHECK(empty.dice == 1.0);
    CHECK(empty.iou == 1.0);
  }

  TEST_CASE("report is order independent and serializes") {
    torch::manual_seed(2);
    std::vector<torch::Tensor> preds, gts;
    for (int i = 0; i < 5; ++i) {
      preds.push_back(torch::rand({8, 8}));
      gts.push_back((torch::rand({8, 8}) > 0.6).to(torch::kFloat32));
    }
    MetricsAccumulator fwd, rev;
    for (int i = 0; i < 5; ++i) fwd.add(std::to_string(i), preds[i], gts[i]);
    for (int i = 4; i >= 0; --i) rev.add(std::to_string(i), preds[i], gts[i]);
    auto a = fwd.report("m"), b = rev.report("m");
    CHECK(a.f1 == b.f1);
    CHECK(a.aggregate_counts == b.aggregate_counts);
    CHECK(a.mdice == doctest::Approx(b.mdice).epsilon(1e-15));
    if (a.precision + a.recall > 0)
      CHECK(a.f1 == doctest::Approx(2 * a.precision * a.recall / (a.precision + a.recall)));

    CHECK(MetricsReport::csv_header() == "model,F1,mDice,mIoU,Precision,Recall");
    auto j = a.to_json();
    CHECK(j["threshold"] == 0.5);
    CHECK(j["per_image"].size() == 5);
    auto dir = testing::scratch_dir("report");
    write_report(a, dir);
    CHECK(read_json_file(dir / "metrics.json")["f1"].get<double>() == a.f1);
    CHECK(read_text_file(dir / "metrics.csv").rfind("model,F1", 0) == 0);
    CHECK_THROWS_AS(MetricsAccumulator().report(), ContractError);
  }

  TEST_CASE("evaluate with oracle predictors") {
    auto root = testing::scratch_dir("eval");
    auto ids = testing::write_blob_dataset(root, 3, 50, 40, 8);
    auto index = index_dataset(root);
    const auto variant = variant_config(Variant::kB0);
    std::map<std::string, torch::Tensor> truth;
    for (const auto& id : ids) {
      auto raw = load_sample(index.find(id));
      truth[id] = preprocess(raw.image, raw.mask, variant).second;
    }

    auto perfect = evaluate([&](const std::string& id, const torch::Tensor&) { return truth[id]; }, ids, index, variant);
    CHECK(perfect.f1 == 1.0);
    CHECK(perfect.mdice == 1.0);
    CHECK(perfect.miou == 1.0);
    CHECK(perfect.precision == 1.0);
    CHECK(perfect.recall == 1.0);

    auto blank = evaluate([&](const std::string& id, const torch::Tensor&) { return torch::zeros_like(truth[id]); }, ids,
                          index, variant);
    CHECK(blank.recall == 0.0);

    torch::manual_seed(4);
    std::map<std::string, torch::Tensor> noisy;
    for (const auto& id : ids) noisy[id] = (truth[id] * 0.7 + torch::rand_like(truth[id]) * 0.5).clamp(0, 1);
    auto report = evaluate([&](const std::string& id, const torch::Tensor&) { return noisy[id]; }, ids, index, variant);
    std::vector<torch::Tensor> p, g;
    for (const auto& id : ids) {
      p.push_back(noisy[id]);
      g.push_back(truth[id]);
    }
    auto ref = testing::loop_metrics(p, g, 0.5);
    CHECK(report.aggregate_counts == ConfusionCounts{ref.pooled[0], ref.pooled[1], ref.pooled[2], ref.pooled[3]});
    CHECK(std::abs(report.f1 - ref.f1) < 1e-12);
    CHECK(std::abs(report.mdice - ref.mdice) < 1e-12);
    CHECK(std::abs(report.miou - ref.miou) < 1e-12);
    CHECK(std::abs(report.precision - ref.precision) < 1e-12);
    CHECK(std::abs(report.recall - ref.recall) < 1e-12);

    CHECK_THROWS_AS(evaluate([](const std::string&, const torch::Tensor& x) { return x; }, {}, index, variant),
                    ContractError);
  }

  TEST_CASE("model evaluation leaves the model unchanged") {
    auto root = testing::scratch_dir("eval-model");
    auto ids = testing::write_blob_dataset(root, 2, 40, 40, 9);
    auto index = index_dataset(root);
    auto model = build_model({.variant = Variant::kB0, .seed = 3});
    model->train();
    std::vector<torch::Tensor> before;
    for (const auto& b : model->buffers()) before.push_back(b.clone());
    auto report = evaluate(*model, ids, index);
    CHECK(report.per_image.size() == 2);
    CHECK(report.model == "EffiSegNet-b0");
    CHECK(model->is_training());
    std::size_t i = 0;
    for (const auto& b : model->buffers()) CHECK(torch::equal(b, before[i++]));
  }
}
