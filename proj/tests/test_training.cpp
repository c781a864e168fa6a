#include <doctest.h>

#include <cmath>
#include <fstream>

#include "effisegnet/checkpoint.hpp"
#include "effisegnet/errors.hpp"
#include "effisegnet/losses.hpp"
#include "effisegnet/tensor_io.hpp"
#include "effisegnet/trainer.hpp"
#include "oracles.hpp"
#include "synthetic.hpp"

using namespace effisegnet;

namespace {

std::string slurp(const std::filesystem::path& p) {
  std::ifstream in(p, std::ios::binary);
  return {std::istreambuf_iterator<char>(in), {}};
}

TrainConfig tiny_config() {
  TrainConfig cfg;
  cfg.variant = Variant::kB0;
  cfg.pretrained = false;
  cfg.epochs = 2;
  cfg.batch_size = 2;
  cfg.seed = 5;
  return cfg;
}

}  // namespace

TEST_SUITE("training") {
  TEST_CASE("dice loss examples") {
    auto t = torch::zeros({1, 1, 4, 4});
    t.index_put_({0, 0, torch::indexing::Slice(0, 2)}, 1.0);
    CHECK(dice_loss(t, t).item<double>() <= 1e-6);
    CHECK(dice_loss(1 - t, t).item<double>() == doctest::Approx(1.0).epsilon(1e-6));
    CHECK(dice_loss(torch::full_like(t, 0.5), t).item<double>() == doctest::Approx(0.5).epsilon(1e-6));
    CHECK_THROWS_AS(dice_loss(torch::zeros({1, 1, 4, 5}), t), ContractError);
    // Empty target, empty prediction: smoothing makes it a perfect score.
    CHECK(dice_loss(torch::zeros({1, 1, 3, 3}), torch::zeros({1, 1, 3, 3})).item<double>() == doctest::Approx(0.0));
  }

  TEST_CASE("combined loss examples") {
    auto t = (torch::rand({2, 1, 6, 6}) > 0.5).to(torch::kFloat32);
    CHECK(combined_loss(t, t).item<double>() < 1e-5);
    CHECK(bce_loss(torch::full_like(t, 0.5), t).item<double>() == doctest::Approx(std::log(2.0)).epsilon(1e-6));
    CHECK(bce_loss(torch::full_like(t, 0.5), 1 - t).item<double>() == doctest::Approx(std::log(2.0)).epsilon(1e-6));
    CHECK_THROWS_AS(combined_loss(t, t.squeeze(1)), ContractError);
  }

  TEST_CASE("combined loss equals the pixel loop") {
    torch::manual_seed(21);
    for (int i = 0; i < 10; ++i) {
      auto p = torch::rand({3, 1, 6, 6}, torch::kFloat64);
      auto t = (torch::rand({3, 1, 6, 6}) > 0.5).to(torch::kFloat64);
      const double got = combined_loss(p, t).item<double>();
      const double want = testing::loop_combined_loss(p, t, kDefaultDiceSmooth);
      CHECK(std::abs(got - want) / want < 1e-6);
    }
  }

  TEST_CASE("cosine schedule") {
    CHECK(lr_at_epoch(0, 300, 1e-4, 1e-5) == 1e-4);
    CHECK(lr_at_epoch(300, 300, 1e-4, 1e-5) == 1e-5);
    CHECK(std::abs(lr_at_epoch(150, 300, 1e-4, 1e-5) - 5.5e-5) < 1e-12);
    double prev = 1.0;
    for (int e = 0; e <= 300; ++e) {
      const double lr = lr_at_epoch(e, 300, 1e-4, 1e-5);
      CHECK(lr <= prev);
      prev = lr;
    }
    CHECK_THROWS_AS(lr_at_epoch(301, 300, 1e-4, 1e-5), ContractError);
    CHECK_THROWS_AS(lr_at_epoch(-1, 300, 1e-4, 1e-5), ContractError);
  }

  TEST_CASE("weight decay is decoupled") {
    TrainConfig cfg;
    cfg.weight_decay = 0.05;
    auto w = torch::randn({4, 4}).requires_grad_(true);
    const auto before = w.detach().clone();
    auto opt = make_optimizer({w}, cfg);
    w.mutable_grad() = torch::zeros_like(w);
    opt.step();
    CHECK(torch::allclose(w.detach(), before * (1.0 - cfg.lr_initial * cfg.weight_decay), 0.0, 1e-9));
  }

  TEST_CASE("batch-size search") {
    int probes = 0;
    auto thirteen = [&](int64_t b) {
      ++probes;
      return b <= 13;
    };
    CHECK(find_max_batch_size(thirteen, 64) == 13);
    CHECK(probes <= 7);
    CHECK(find_max_batch_size([](int64_t) { return true; }, 8) == 8);
    CHECK(find_max_batch_size([](int64_t b) { return b == 1; }, 1) == 1);
    CHECK_THROWS_AS(find_max_batch_size([](int64_t) { return false; }, 8), ResourceError);
    CHECK_THROWS_AS(find_max_batch_size([](int64_t) { return true; }, 0), ContractError);
  }

  TEST_CASE("batch-size probe leaves the model untouched") {
    auto model = build_model({.variant = Variant::kB0, .seed = 8});
    std::vector<torch::Tensor> before;
    for (const auto& p : model->parameters()) before.push_back(p.detach().clone());
    for (const auto& b : model->buffers()) before.push_back(b.detach().clone());
    CHECK(find_max_batch_size(*model, 224, 2) == 2);
    std::size_t i = 0;
    for (const auto& p : model->parameters()) {
      CHECK(torch::equal(p, before[i++]));
      CHECK_FALSE(p.grad().defined());
    }
    for (const auto& b : model->buffers()) CHECK(torch::equal(b, before[i++]));
  }

  TEST_CASE("config json") {
    TrainConfig cfg;
    nlohmann::json j = cfg;
    auto back = j.get<TrainConfig>();
    CHECK(config_hash(back) == config_hash(cfg));
    CHECK(back.epochs == 300);
    CHECK(back.batch_size == 8);
    j["batch_size"] = "auto";
    CHECK_FALSE(j.get<TrainConfig>().batch_size.has_value());
    j["learning_rate"] = 0.1;
    try {
      (void)j.get<TrainConfig>();
      FAIL("expected ConfigError");
    } catch (const ConfigError& e) {
      CHECK(std::string(e.what()).find("learning_rate") != std::string::npos);
    }
    cfg.lr_final = 1.0;
    CHECK_THROWS_AS(cfg.validate(), ConfigError);
  }

  TEST_CASE("checkpoint round trip") {
    auto dir = testing::scratch_dir("checkpoint");
    auto model = build_model({.variant = Variant::kB0, .seed = 9});
    testing::randomize_batch_norm(*model);
    CheckpointManifest m;
    m.seed = 9;
    m.epoch = 3;
    m.config_hash = "abc";
    m.metrics = {{"val_mdice", 0.5}};
    save_checkpoint(*model, dir / "m.safetensors", m);

    auto manifest = read_checkpoint_manifest(dir / "m.safetensors");
    CHECK(manifest.variant == "b0");
    CHECK(manifest.epoch == 3);
    CHECK(manifest.config_hash == "abc");
    CHECK(manifest.weights_sha256 == sha256_file(dir / "m.safetensors"));

    auto loaded = load_checkpoint(dir / "m.safetensors", Variant::kB0);
    auto x = torch::randn({1, 3, 224, 224});
    CHECK(torch::equal(predict_mask_probabilities(*model, x), predict_mask_probabilities(*loaded, x)));

    CHECK_THROWS_AS(load_checkpoint(dir / "m.safetensors", Variant::kB4), ConfigError);

    std::filesystem::copy_file(dir / "m.safetensors", dir / "t.safetensors");
    std::filesystem::copy_file(manifest_path_for(dir / "m.safetensors"), manifest_path_for(dir / "t.safetensors"));
    std::filesystem::resize_file(dir / "t.safetensors", std::filesystem::file_size(dir / "t.safetensors") / 2);
    CHECK_THROWS_AS(load_checkpoint(dir / "t.safetensors"), LoadError);
    CHECK_THROWS_AS(load_checkpoint(dir / "missing.safetensors"), LoadError);
  }

  TEST_CASE("zero epochs saves only the initial weights") {
    auto root = testing::scratch_dir("fit-zero");
    testing::write_blob_dataset(root / "data", 4, 64, 48, 1);
    auto index = index_dataset(root / "data");
    DatasetSplit split{{"sample000", "sample001"}, {"sample002"}, {"sample003"}};
    auto cfg = tiny_config();
    cfg.epochs = 0;
    auto model = build_model({.variant = Variant::kB0, .seed = 1});
    auto run = fit(*model, index, split, cfg, root / "run");
    CHECK(run.history.empty());
    CHECK(std::filesystem::exists(root / "run/checkpoints/last.safetensors"));
    CHECK_FALSE(std::filesystem::exists(root / "run/checkpoints/best.safetensors"));
    CHECK_FALSE(run.best_epoch.has_value());
    CHECK(slurp(root / "run/history.csv") == "epoch,train_loss,val_loss,val_mdice,lr\n");
  }

  TEST_CASE("training is deterministic and follows the schedule") {
    auto root = testing::scratch_dir("fit-determinism");
    testing::write_blob_dataset(root / "data", 4, 80, 64, 2);
    auto index = index_dataset(root / "data");
    DatasetSplit split{{"sample000", "sample001", "sample002"}, {"sample003"}, {}};
    auto cfg = tiny_config();

    std::vector<EpochRecord> seen;
    auto a = build_model({.variant = Variant::kB0, .seed = cfg.seed});
    auto run_a = fit(*a, index, split, cfg, root / "a", [&](const EpochRecord& r) { seen.push_back(r); });
    auto b = build_model({.variant = Variant::kB0, .seed = cfg.seed});
    auto run_b = fit(*b, index, split, cfg, root / "b");

    REQUIRE(run_a.history.size() == 2);
    CHECK(seen.size() == 2);
    CHECK(slurp(root / "a/history.csv") == slurp(root / "b/history.csv"));
    for (const auto& r : run_a.history) {
      CHECK(r.lr == lr_at_epoch(r.epoch, cfg));
      CHECK(std::isfinite(r.train_loss));
      CHECK(r.val_mdice >= 0.0);
      CHECK(r.val_mdice <= 1.0);
    }
    REQUIRE(run_a.best_epoch.has_value());
    auto best = read_checkpoint_manifest(root / "a/checkpoints/best.safetensors");
    CHECK(best.epoch == *run_a.best_epoch + 1);
    CHECK(read_checkpoint_manifest(root / "a/checkpoints/last.safetensors").epoch == 2);

    auto wrong = cfg;
    wrong.variant = Variant::kB1;
    CHECK_THROWS_AS(fit(*a, index, split, wrong, root / "c"), ConfigError);
    DatasetSplit empty;
    CHECK_THROWS_AS(fit(*a, index, empty, cfg, root / "d"), DataError);
  }

  TEST_CASE("non-finite loss aborts with diagnostics") {
    auto root = testing::scratch_dir("fit-nan");
    testing::write_blob_dataset(root / "data", 2, 32, 32, 3);
    auto index = index_dataset(root / "data");
    DatasetSplit split{{"sample000", "sample001"}, {}, {}};
    auto cfg = tiny_config();
    cfg.epochs = 1;
    auto model = build_model({.variant = Variant::kB0, .seed = 1});
    {
      torch::NoGradGuard ng;
      model->head().output_conv()->bias.fill_(std::numeric_limits<float>::quiet_NaN());
    }
    try {
      fit(*model, index, split, cfg, root / "run");
      FAIL("expected NumericalError");
    } catch (const NumericalError& e) {
      CHECK(std::string(e.what()).find("epoch 0") != std::string::npos);
      CHECK(std::string(e.what()).find("step 0") != std::string::npos);
    }
  }
}
