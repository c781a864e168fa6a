#pragma once

#include <filesystem>
#include <functional>
#include <optional>
#include <string>
#include <vector>

#include <nlohmann/json.hpp>

#include "effisegnet/data.hpp"
#include "effisegnet/fusion_head.hpp"
#include "effisegnet/model.hpp"
#include "effisegnet/variant.hpp"

namespace effisegnet {

/// Full training recipe. Defaults reproduce the published setup where it
/// states a value (batch 8, 300 epochs, 1e-4 -> 1e-5 cosine, Dice+BCE).
struct TrainConfig {
  Variant variant = Variant::kB4;
  bool pretrained = true;
  std::optional<std::filesystem::path> weights_path;
  int64_t epochs = 300;
  std::optional<int64_t> batch_size = 8;  // nullopt = search for the largest that fits
  int64_t batch_search_upper = 8;
  double lr_initial = 1e-4;
  double lr_final = 1e-5;
  double weight_decay = 1e-4;
  double beta1 = 0.9;
  double beta2 = 0.999;
  double adam_eps = 1e-8;
  double dice_smooth = 1e-6;
  uint64_t seed = 42;
  bool augment = true;
  AugmentationConfig augmentation;
  FusionHeadConfig head;
  double threshold = 0.5;
  int threads = 1;  // libtorch intra-op threads; part of the determinism contract

  /// Throws ConfigError on violated invariants.
  void validate() const;
};

void to_json(nlohmann::json& j, const TrainConfig& cfg);
/// Unknown keys raise ConfigError naming the key.
void from_json(const nlohmann::json& j, TrainConfig& cfg);

/// SHA-256 of the canonical JSON form.
std::string config_hash(const TrainConfig& cfg);

/// Cosine annealing from lr_initial (epoch 0) to lr_final (epoch E):
///   lr_final + (lr_initial - lr_final) (1 + cos(pi e / E)) / 2.
/// Throws ContractError unless 0 <= e <= E.
double lr_at_epoch(int64_t epoch, int64_t total_epochs, double lr_initial, double lr_final);
double lr_at_epoch(int64_t epoch, const TrainConfig& cfg);

/// AdamW (decoupled weight decay) with the config's betas, eps and decay,
/// starting at lr_initial.
torch::optim::AdamW make_optimizer(const std::vector<torch::Tensor>& params, const TrainConfig& cfg);

struct EpochRecord {
  int64_t epoch = 0;  // zero-based; lr is lr_at_epoch(epoch)
  double train_loss = 0.0;
  double val_loss = 0.0;
  double val_mdice = 0.0;
  double lr = 0.0;
};

struct TrainingRun {
  std::vector<EpochRecord> history;
  std::filesystem::path last_checkpoint;
  std::optional<std::filesystem::path> best_checkpoint;
  std::optional<int64_t> best_epoch;
  int64_t batch_size = 0;
};

/// "epoch,train_loss,val_loss,val_mdice,lr" plus one line per record.
std::string history_csv(const std::vector<EpochRecord>& history);

using EpochCallback = std::function<void(const EpochRecord&)>;

/// Mini-batch AdamW on the combined loss with a per-epoch cosine schedule.
/// Validates every epoch, keeps `<run_dir>/checkpoints/last` and `best` (by
/// validation mDice) and rewrites `<run_dir>/history.csv` after each epoch.
/// With zero epochs only the initial weights are saved as `last`.
///
/// Throws ResourceError when a fixed batch size does not fit in memory and
/// NumericalError on a non-finite loss.
TrainingRun fit(EffiSegNetImpl& model, const SampleIndex& index, const DatasetSplit& split, const TrainConfig& cfg,
                const std::filesystem::path& run_dir, const EpochCallback& on_epoch = {});

/// Largest b in [1, upper_bound] for which `fits(b)` holds, assuming the
/// predicate is monotone. Binary search; throws ResourceError if b = 1 fails.
int64_t find_max_batch_size(const std::function<bool(int64_t)>& fits, int64_t upper_bound);

/// Probes one forward + backward training step at each candidate size. The
/// model's weights, BN statistics and gradients are restored afterwards.
int64_t find_max_batch_size(EffiSegNetImpl& model, int64_t resolution, int64_t upper_bound);

/// True for allocation failures reported by libtorch or the C++ runtime.
bool is_out_of_memory(const std::exception& e);

}  // namespace effisegnet
