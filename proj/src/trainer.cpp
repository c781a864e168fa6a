#include "effisegnet/trainer.hpp"

#include <ATen/Parallel.h>

#include <cmath>
#include <cstdio>
#include <numbers>
#include <sstream>

#include "effisegnet/checkpoint.hpp"
#include "effisegnet/errors.hpp"
#include "effisegnet/losses.hpp"
#include "effisegnet/metrics.hpp"
#include "effisegnet/tensor_io.hpp"

namespace effisegnet {
namespace fs = std::filesystem;
namespace {

struct CachedSample {
  std::string id;
  RawSample resized;  // 8-bit image, binary mask, at the variant resolution
};

std::vector<CachedSample> load_resized(const SampleIndex& index, const std::vector<std::string>& ids,
                                       int64_t resolution) {
  std::vector<CachedSample> out;
  out.reserve(ids.size());
  for (const auto& id : ids) out.push_back({id, resize_sample(load_sample(index.find(id)), resolution)});
  return out;
}

std::pair<torch::Tensor, torch::Tensor> make_batch(const std::vector<const CachedSample*>& samples,
                                                   const TrainConfig& cfg, int64_t epoch, bool augment) {
  std::vector<torch::Tensor> images;
  std::vector<torch::Tensor> masks;
  images.reserve(samples.size());
  masks.reserve(samples.size());
  for (const CachedSample* s : samples) {
    cv::Mat image;
    s->resized.image.convertTo(image, CV_32FC3, 1.0 / 255.0);
    cv::Mat mask = s->resized.mask.clone();
    if (augment) {
      auto rng = sample_rng(cfg.seed, s->id, epoch);
      effisegnet::augment(image, mask, cfg.augmentation, rng);
    }
    images.push_back(normalize_image(image));
    masks.push_back(mask_to_tensor(mask));
  }
  return {torch::stack(images), torch::stack(masks)};
}

std::string fmt_double(double v) {
  char buf[40];
  std::snprintf(buf, sizeof buf, "%.17g", v);
  return buf;
}

struct ValidationResult {
  double loss = std::numeric_limits<double>::quiet_NaN();
  double mdice = std::numeric_limits<double>::quiet_NaN();
};

ValidationResult validate(EffiSegNetImpl& model, const std::vector<CachedSample>& samples, const TrainConfig& cfg,
                          int64_t batch_size) {
  ValidationResult r;
  if (samples.empty()) return r;
  double loss_sum = 0.0;
  MetricsAccumulator acc(cfg.threshold);
  for (std::size_t start = 0; start < samples.size(); start += static_cast<std::size_t>(batch_size)) {
    const std::size_t end = std::min(samples.size(), start + static_cast<std::size_t>(batch_size));
    std::vector<const CachedSample*> batch;
    for (std::size_t i = start; i < end; ++i) batch.push_back(&samples[i]);
    auto [x, y] = make_batch(batch, cfg, 0, false);
    const auto probs = predict_mask_probabilities(model, x);
    loss_sum += combined_loss(probs, y, cfg.dice_smooth).item<double>() * static_cast<double>(batch.size());
    for (std::size_t i = 0; i < batch.size(); ++i)
      acc.add(batch[i]->id, probs[static_cast<int64_t>(i)], y[static_cast<int64_t>(i)]);
  }
  r.loss = loss_sum / static_cast<double>(samples.size());
  r.mdice = acc.report().mdice;
  return r;
}

}  // namespace

void TrainConfig::validate() const {
  if (epochs < 0) throw ConfigError("epochs must be non-negative");
  if (batch_size && *batch_size < 1) throw ConfigError("batch_size must be positive or 'auto'");
  if (batch_search_upper < 1) throw ConfigError("batch_search_upper must be positive");
  if (!(lr_initial > 0.0) || !(lr_final >= 0.0) || lr_final > lr_initial)
    throw ConfigError("learning rates must satisfy 0 <= lr_final <= lr_initial, lr_initial > 0");
  if (weight_decay < 0.0) throw ConfigError("weight_decay must be non-negative");
  if (!(beta1 >= 0.0 && beta1 < 1.0 && beta2 >= 0.0 && beta2 < 1.0)) throw ConfigError("betas must lie in [0, 1)");
  if (!(adam_eps > 0.0) || !(dice_smooth > 0.0)) throw ConfigError("adam_eps and dice_smooth must be positive");
  if (!(threshold > 0.0 && threshold < 1.0)) throw ConfigError("threshold must lie in (0, 1)");
  if (threads < 0) throw ConfigError("threads must be non-negative (0 = library default)");
  augmentation.validate();
  head.validate();
}

void to_json(nlohmann::json& j, const TrainConfig& c) {
  j = {{"variant", variant_name(c.variant)},
       {"pretrained", c.pretrained},
       {"weights_path", c.weights_path ? nlohmann::json(c.weights_path->string()) : nlohmann::json(nullptr)},
       {"epochs", c.epochs},
       {"batch_size", c.batch_size ? nlohmann::json(*c.batch_size) : nlohmann::json("auto")},
       {"batch_search_upper", c.batch_search_upper},
       {"lr_initial", c.lr_initial},
       {"lr_final", c.lr_final},
       {"weight_decay", c.weight_decay},
       {"beta1", c.beta1},
       {"beta2", c.beta2},
       {"adam_eps", c.adam_eps},
       {"dice_smooth", c.dice_smooth},
       {"seed", c.seed},
       {"augment", c.augment},
       {"augmentation", c.augmentation},
       {"head", c.head},
       {"threshold", c.threshold},
       {"threads", c.threads}};
}

void from_json(const nlohmann::json& j, TrainConfig& c) {
  if (!j.is_object()) throw ConfigError("training config must be a JSON object");
  try {
    for (const auto& [key, v] : j.items()) {
      if (key == "variant") c.variant = parse_variant(v.get<std::string>());
      else if (key == "pretrained") c.pretrained = v.get<bool>();
      else if (key == "weights_path") c.weights_path = v.is_null() ? std::nullopt : std::optional<fs::path>(v.get<std::string>());
      else if (key == "epochs") c.epochs = v.get<int64_t>();
      else if (key == "batch_size") {
        if (v.is_string() && v.get<std::string>() == "auto") c.batch_size.reset();
        else c.batch_size = v.get<int64_t>();
      } else if (key == "batch_search_upper") c.batch_search_upper = v.get<int64_t>();
      else if (key == "lr_initial") c.lr_initial = v.get<double>();
      else if (key == "lr_final") c.lr_final = v.get<double>();
      else if (key == "weight_decay") c.weight_decay = v.get<double>();
      else if (key == "beta1") c.beta1 = v.get<double>();
      else if (key == "beta2") c.beta2 = v.get<double>();
      else if (key == "adam_eps") c.adam_eps = v.get<double>();
      else if (key == "dice_smooth") c.dice_smooth = v.get<double>();
      else if (key == "seed") c.seed = v.get<uint64_t>();
      else if (key == "augment") c.augment = v.get<bool>();
      else if (key == "augmentation") c.augmentation = v.get<AugmentationConfig>();
      else if (key == "head") c.head = v.get<FusionHeadConfig>();
      else if (key == "threshold") c.threshold = v.get<double>();
      else if (key == "threads") c.threads = v.get<int>();
      else throw ConfigError("unknown training config key '" + key + "'");
    }
  } catch (const nlohmann::json::exception& e) {
    throw ConfigError(std::string("bad value in training config: ") + e.what());
  }
}

std::string config_hash(const TrainConfig& cfg) { return sha256_hex(nlohmann::json(cfg).dump()); }

double lr_at_epoch(int64_t epoch, int64_t total_epochs, double lr_initial, double lr_final) {
  if (total_epochs < 0 || epoch < 0 || epoch > total_epochs)
    throw ContractError("epoch " + std::to_string(epoch) + " outside [0, " + std::to_string(total_epochs) + "]");
  if (total_epochs == 0) return lr_initial;
  const double phase = std::numbers::pi * static_cast<double>(epoch) / static_cast<double>(total_epochs);
  const double w = 0.5 * (1.0 + std::cos(phase));
  // Convex-combination form keeps both endpoints exact.
  return lr_initial * w + lr_final * (1.0 - w);
}

double lr_at_epoch(int64_t epoch, const TrainConfig& cfg) {
  return lr_at_epoch(epoch, cfg.epochs, cfg.lr_initial, cfg.lr_final);
}

torch::optim::AdamW make_optimizer(const std::vector<torch::Tensor>& params, const TrainConfig& cfg) {
  return torch::optim::AdamW(params, torch::optim::AdamWOptions(cfg.lr_initial)
                                         .betas({cfg.beta1, cfg.beta2})
                                         .eps(cfg.adam_eps)
                                         .weight_decay(cfg.weight_decay));
}

std::string history_csv(const std::vector<EpochRecord>& history) {
  std::string out = "epoch,train_loss,val_loss,val_mdice,lr\n";
  for (const auto& r : history)
    out += std::to_string(r.epoch) + "," + fmt_double(r.train_loss) + "," + fmt_double(r.val_loss) + "," +
           fmt_double(r.val_mdice) + "," + fmt_double(r.lr) + "\n";
  return out;
}

bool is_out_of_memory(const std::exception& e) {
  if (dynamic_cast<const std::bad_alloc*>(&e)) return true;
  const std::string what = e.what();
  return what.find("can't allocate memory") != std::string::npos ||
         what.find("out of memory") != std::string::npos || what.find("Out of memory") != std::string::npos;
}

int64_t find_max_batch_size(const std::function<bool(int64_t)>& fits, int64_t upper_bound) {
  if (upper_bound < 1) throw ContractError("batch size upper bound must be at least 1");
  // Invariant: `good` fits (0 stands for "nothing fits yet"), `bad` does not.
  int64_t good = 0;
  int64_t bad = upper_bound + 1;
  while (bad - good > 1) {
    const int64_t mid = good + (bad - good) / 2;
    if (fits(mid)) good = mid;
    else bad = mid;
  }
  if (good == 0) throw ResourceError("a single-sample training step does not fit in memory");
  return good;
}

int64_t find_max_batch_size(EffiSegNetImpl& model, int64_t resolution, int64_t upper_bound) {
  std::vector<torch::Tensor> snapshot;
  {
    torch::NoGradGuard no_grad;
    for (const auto& p : model.parameters()) snapshot.push_back(p.detach().clone());
    for (const auto& b : model.buffers()) snapshot.push_back(b.detach().clone());
  }
  const bool was_training = model.is_training();
  auto restore = [&] {
    torch::NoGradGuard no_grad;
    std::size_t i = 0;
    for (auto& p : model.parameters()) {
      p.copy_(snapshot[i++]);
      p.mutable_grad() = torch::Tensor();
    }
    for (auto& b : model.buffers()) b.copy_(snapshot[i++]);
    model.train(was_training);
  };
  auto probe = [&](int64_t b) {
    try {
      model.train();
      auto x = torch::randn({b, 3, resolution, resolution});
      auto y = (torch::rand({b, 1, resolution, resolution}) > 0.5).to(torch::kFloat32);
      combined_loss(model.forward(x), y).backward();
      restore();
      return true;
    } catch (const std::exception& e) {
      restore();
      if (is_out_of_memory(e)) return false;
      throw;
    }
  };
  return find_max_batch_size(probe, upper_bound);
}

TrainingRun fit(EffiSegNetImpl& model, const SampleIndex& index, const DatasetSplit& split, const TrainConfig& cfg,
                const fs::path& run_dir, const EpochCallback& on_epoch) {
  cfg.validate();
  if (split.train.empty()) throw DataError("training split is empty");
  if (model.variant().variant != cfg.variant)
    throw ConfigError("model is EffiSegNet-" + model.variant().name() + " but the config asks for " +
                      variant_name(cfg.variant));
  if (cfg.threads > 0) at::set_num_threads(cfg.threads);
  at::globalContext().setDeterministicAlgorithms(true, /*warn_only=*/true);
  torch::manual_seed(cfg.seed);

  const int64_t resolution = model.variant().input_resolution;
  const auto train_samples = load_resized(index, split.train, resolution);
  const auto val_samples = load_resized(index, split.validation, resolution);

  TrainingRun run;
  run.batch_size = cfg.batch_size ? *cfg.batch_size
                                  : find_max_batch_size(model, resolution, cfg.batch_search_upper);

  const fs::path ckpt_dir = run_dir / "checkpoints";
  fs::create_directories(ckpt_dir);
  run.last_checkpoint = ckpt_dir / "last.safetensors";
  const fs::path best_path = ckpt_dir / "best.safetensors";
  const std::string hash = config_hash(cfg);

  auto manifest_for = [&](int64_t completed, const nlohmann::json& metrics) {
    CheckpointManifest m;
    m.seed = cfg.seed;
    m.epoch = completed;
    m.config_hash = hash;
    m.metrics = metrics;
    m.extra = {{"selection_rule", "highest validation mDice, earliest epoch on ties"},
               {"weight_decay", cfg.weight_decay},
               {"batch_size", run.batch_size},
               {"pretrained", cfg.pretrained}};
    return m;
  };

  write_file_atomic(run_dir / "history.csv", history_csv(run.history));
  if (cfg.epochs == 0) {
    save_checkpoint(model, run.last_checkpoint, manifest_for(0, nlohmann::json::object()));
    return run;
  }

  auto optimizer = make_optimizer(model.parameters(), cfg);

  double best_mdice = -1.0;
  std::vector<const CachedSample*> order;
  for (const auto& s : train_samples) order.push_back(&s);

  for (int64_t epoch = 0; epoch < cfg.epochs; ++epoch) {
    const double lr = lr_at_epoch(epoch, cfg);
    for (auto& group : optimizer.param_groups()) group.options().set_lr(lr);

    std::seed_seq shuffle_seed{static_cast<uint32_t>(cfg.seed), static_cast<uint32_t>(cfg.seed >> 32),
                               static_cast<uint32_t>(epoch), 0x5eedu};
    std::mt19937_64 shuffle_rng(shuffle_seed);
    std::shuffle(order.begin(), order.end(), shuffle_rng);

    model.train();
    double loss_sum = 0.0;
    int64_t step = 0;
    for (std::size_t start = 0; start < order.size(); start += static_cast<std::size_t>(run.batch_size), ++step) {
      const std::size_t end = std::min(order.size(), start + static_cast<std::size_t>(run.batch_size));
      const std::vector<const CachedSample*> batch(order.begin() + static_cast<std::ptrdiff_t>(start),
                                                   order.begin() + static_cast<std::ptrdiff_t>(end));
      try {
        auto [x, y] = make_batch(batch, cfg, epoch, cfg.augment);
        auto loss = combined_loss(model.forward(x), y, cfg.dice_smooth);
        const double value = loss.item<double>();
        if (!std::isfinite(value))
          throw NumericalError("non-finite loss (" + std::to_string(value) + ") at epoch " + std::to_string(epoch) +
                               ", step " + std::to_string(step) + ", lr " + fmt_double(lr));
        optimizer.zero_grad();
        loss.backward();
        optimizer.step();
        loss_sum += value * static_cast<double>(batch.size());
      } catch (const Error&) {
        throw;
      } catch (const std::exception& e) {
        if (!is_out_of_memory(e)) throw;
        throw ResourceError("out of memory at batch size " + std::to_string(run.batch_size) +
                            (cfg.batch_size ? "; retry with --batch-size auto" : ""));
      }
    }

    const ValidationResult val = validate(model, val_samples, cfg, run.batch_size);
    EpochRecord rec{epoch, loss_sum / static_cast<double>(order.size()), val.loss, val.mdice, lr};
    run.history.push_back(rec);
    write_file_atomic(run_dir / "history.csv", history_csv(run.history));

    const nlohmann::json metrics = {{"train_loss", rec.train_loss},
                                    {"val_loss", std::isfinite(rec.val_loss) ? nlohmann::json(rec.val_loss) : nlohmann::json(nullptr)},
                                    {"val_mdice", std::isfinite(rec.val_mdice) ? nlohmann::json(rec.val_mdice) : nlohmann::json(nullptr)}};
    save_checkpoint(model, run.last_checkpoint, manifest_for(epoch + 1, metrics));
    if (std::isfinite(val.mdice) && val.mdice > best_mdice) {
      best_mdice = val.mdice;
      run.best_epoch = epoch;
      run.best_checkpoint = best_path;
      save_checkpoint(model, best_path, manifest_for(epoch + 1, metrics));
    }
    if (on_epoch) on_epoch(rec);
  }
  return run;
}

}  // namespace effisegnet
