#include "effisegnet/cli.hpp"

#include <CLI11.hpp>
#include <opencv2/imgcodecs.hpp>
#include <opencv2/imgproc.hpp>

#include <cstdio>
#include <optional>

#include "effisegnet/checkpoint.hpp"
#include "effisegnet/errors.hpp"
#include "effisegnet/metrics.hpp"
#include "effisegnet/model.hpp"
#include "effisegnet/tensor_io.hpp"
#include "effisegnet/trainer.hpp"
#include "effisegnet/version.hpp"

namespace effisegnet {
namespace fs = std::filesystem;
namespace {

std::string format(const char* fmt, double v) {
  char buf[64];
  std::snprintf(buf, sizeof buf, fmt, v);
  return buf;
}

/// Written before a command does any work and rewritten when it finishes,
/// so an interrupted run still leaves an inspectable record.
class RunManifest {
 public:
  RunManifest(fs::path path, std::string command, const std::vector<std::string>& argv)
      : path_(std::move(path)) {
    doc_ = {{"command", std::move(command)},
            {"argv", argv},
            {"code_version", kVersion},
            {"started_at", utc_timestamp()},
            {"status", "running"}};
  }

  nlohmann::json& doc() { return doc_; }
  void write() { write_file_atomic(path_, doc_.dump(2) + "\n"); }
  void finish(const std::string& status) {
    doc_["status"] = status;
    doc_["finished_at"] = utc_timestamp();
    write();
  }

 private:
  fs::path path_;
  nlohmann::json doc_;
};

template <typename Fn>
int guarded(RunManifest* manifest, std::ostream& err, Fn&& fn) {
  try {
    fn();
    if (manifest) manifest->finish("completed");
    return 0;
  } catch (const Error& e) {
    err << "error: " << e.what() << "\n";
    if (manifest) manifest->finish(std::string("failed: ") + e.what());
    return exit_code(e.error_class());
  } catch (const std::exception& e) {
    err << "error: " << e.what() << "\n";
    if (manifest) manifest->finish(std::string("failed: ") + e.what());
    return 1;
  }
}

struct TrainArgs {
  std::string config_file;
  std::optional<std::string> variant;
  std::optional<bool> pretrained;
  std::optional<std::string> weights;
  std::string data_root;
  std::string split;
  std::optional<uint64_t> seed;
  std::optional<int64_t> epochs;
  std::optional<std::string> batch_size;
  std::optional<int> threads;
  std::optional<double> weight_decay;
  bool no_augment = false;
  std::string out;
};

struct EvalArgs {
  std::string checkpoint;
  std::optional<std::string> variant;
  std::string data_root;
  std::string split;
  std::string subset = "test";
  double threshold = kDefaultThreshold;
  std::string out;
};

struct PredictArgs {
  std::string checkpoint;
  std::optional<std::string> variant;
  std::vector<std::string> images;
  std::string out;
  bool probs = false;
  double threshold = kDefaultThreshold;
};

TrainConfig resolve_train_config(const TrainArgs& a) {
  TrainConfig cfg;
  if (!a.config_file.empty()) {
    const fs::path file(a.config_file);
    if (!fs::exists(file)) throw ConfigError("config file " + a.config_file + " does not exist");
    nlohmann::json doc;
    try {
      doc = nlohmann::json::parse(read_text_file(file));
    } catch (const nlohmann::json::exception& e) {
      throw ConfigError("config file " + a.config_file + " is not valid JSON: " + e.what());
    }
    cfg = doc.get<TrainConfig>();
  }
  if (a.variant) cfg.variant = parse_variant(*a.variant);
  if (a.pretrained) cfg.pretrained = *a.pretrained;
  if (a.weights) cfg.weights_path = *a.weights;
  if (a.seed) cfg.seed = *a.seed;
  if (a.epochs) cfg.epochs = *a.epochs;
  if (a.threads) cfg.threads = *a.threads;
  if (a.weight_decay) cfg.weight_decay = *a.weight_decay;
  if (a.no_augment) cfg.augment = false;
  if (a.batch_size) {
    if (*a.batch_size == "auto") {
      cfg.batch_size.reset();
    } else {
      try {
        std::size_t used = 0;
        cfg.batch_size = std::stoll(*a.batch_size, &used);
        if (used != a.batch_size->size()) throw std::invalid_argument("trailing characters");
      } catch (const std::exception&) {
        throw ConfigError("--batch-size must be a positive integer or 'auto', got '" + *a.batch_size + "'");
      }
    }
  }
  cfg.validate();
  return cfg;
}

void cmd_train(const TrainArgs& a, RunManifest& manifest, std::ostream& out) {
  const TrainConfig cfg = resolve_train_config(a);
  const fs::path run_dir(a.out);
  manifest.doc()["config"] = cfg;
  manifest.doc()["seed"] = cfg.seed;
  manifest.doc()["variant"] = variant_name(cfg.variant);
  manifest.doc()["split"] = a.split;
  manifest.doc()["data_root"] = a.data_root;
  manifest.write();
  write_file_atomic(run_dir / "config.json", nlohmann::json(cfg).dump(2) + "\n");

  const SampleIndex index = index_dataset(a.data_root);
  manifest.doc()["dataset_root_hash"] = dataset_hash(index);
  manifest.doc()["split_file_hash"] =
      a.split.starts_with("generate:") ? sha256_hex(a.split) : sha256_file(a.split);
  manifest.write();
  const DatasetSplit split = load_split(index, a.split);
  save_split(split, run_dir / "split.json");

  ModelOptions options;
  options.variant = cfg.variant;
  options.pretrained = cfg.pretrained;
  options.seed = cfg.seed;
  options.weights_path = cfg.weights_path;
  options.head = cfg.head;
  EffiSegNet model = build_model(options);

  out << "training EffiSegNet-" << variant_name(cfg.variant) << (cfg.pretrained ? " (pretrained)" : " (scratch)")
      << " on " << split.train.size() << " images, validating on " << split.validation.size() << "\n";
  const TrainingRun run = fit(*model, index, split, cfg, run_dir, [&](const EpochRecord& r) {
    out << "epoch " << r.epoch + 1 << "/" << cfg.epochs << "  lr " << format("%.3e", r.lr) << "  train "
        << format("%.4f", r.train_loss) << "  val " << format("%.4f", r.val_loss) << "  val mDice "
        << format("%.4f", r.val_mdice) << "\n";
  });
  manifest.doc()["batch_size"] = run.batch_size;
  if (run.best_epoch) manifest.doc()["best_epoch"] = *run.best_epoch;
  out << "run directory: " << run_dir.string() << "\n";
}

void cmd_evaluate(const EvalArgs& a, RunManifest& manifest, std::ostream& out) {
  manifest.doc()["checkpoint"] = a.checkpoint;
  manifest.doc()["split"] = a.split;
  manifest.write();
  const std::optional<Variant> expected = a.variant ? std::optional(parse_variant(*a.variant)) : std::nullopt;
  EffiSegNet model = load_checkpoint(a.checkpoint, expected);
  const SampleIndex index = index_dataset(a.data_root);
  manifest.doc()["dataset_root_hash"] = dataset_hash(index);
  const DatasetSplit split = load_split(index, a.split);
  const std::vector<std::string>* ids = nullptr;
  if (a.subset == "test") ids = &split.test;
  else if (a.subset == "validation") ids = &split.validation;
  else if (a.subset == "train") ids = &split.train;
  else throw ConfigError("--subset must be train, validation or test");

  const MetricsReport report = evaluate(*model, *ids, index, a.threshold);
  write_report(report, a.out);
  out << MetricsReport::csv_header() << "\n" << report.csv_row() << "\n";
}

int cmd_predict(const PredictArgs& a, RunManifest& manifest, std::ostream& out, std::ostream& err) {
  manifest.doc()["checkpoint"] = a.checkpoint;
  manifest.write();
  if (a.images.empty()) {
    err << "warning: no input images given, nothing to do\n";
    return 0;
  }
  const std::optional<Variant> expected = a.variant ? std::optional(parse_variant(*a.variant)) : std::nullopt;
  EffiSegNet model = load_checkpoint(a.checkpoint, expected);
  const int64_t r = model->variant().input_resolution;
  const fs::path out_dir(a.out);
  fs::create_directories(out_dir);

  int failures = 0;
  for (const auto& path : a.images) {
    try {
      const cv::Mat image = read_rgb_image(path);
      cv::Mat resized;
      cv::resize(image, resized, cv::Size(static_cast<int>(r), static_cast<int>(r)), 0, 0, cv::INTER_LANCZOS4);
      const auto probs = predict_mask_probabilities(*model, normalize_image(resized).unsqueeze(0))[0][0].contiguous();

      cv::Mat small(static_cast<int>(r), static_cast<int>(r), CV_32FC1, probs.data_ptr<float>());
      cv::Mat full;
      cv::resize(small, full, image.size(), 0, 0, cv::INTER_NEAREST);
      cv::Mat mask;
      cv::compare(full, a.threshold, mask, cv::CMP_GE);  // 0 / 255

      const std::string stem = fs::path(path).stem().string();
      const fs::path mask_path = out_dir / (stem + "_mask.png");
      if (!cv::imwrite(mask_path.string(), mask)) throw DataError("cannot write " + mask_path.string());
      if (a.probs) {
        auto t = torch::from_blob(full.data, {full.rows, full.cols}, torch::kFloat32);
        write_npy(out_dir / (stem + "_probs.npy"), t);
      }
      out << path << " -> " << mask_path.string() << "\n";
    } catch (const Error& e) {
      ++failures;
      err << "error: " << path << ": " << e.what() << "\n";
    }
  }
  manifest.doc()["failed_images"] = failures;
  return failures == 0 ? 0 : exit_code(ErrorClass::kData);
}

}  // namespace

std::string dataset_hash(const SampleIndex& index) {
  std::string acc;
  for (const auto& e : index.entries)
    acc += e.id + ":" + sha256_file(e.image_path) + ":" + sha256_file(e.mask_path) + "\n";
  return sha256_hex(acc);
}

std::string parameter_table(const std::vector<Variant>& variants) {
  std::string table = "variant        pretrained  random  ratio  pretrained_exact  random_exact\n";
  torch::NoGradGuard no_grad;
  for (Variant v : variants) {
    ModelOptions options;
    options.variant = v;
    EffiSegNet model = build_model(options);
    const ParamCount c = count_parameters(*model);
    char line[160];
    std::snprintf(line, sizeof line, "%-13s  %9.1fM  %5.2fM  %4.1f%%  %16lld  %12lld\n",
                  ("EffiSegNet-B" + std::to_string(static_cast<int>(v))).c_str(), c.pretrained / 1e6,
                  c.random / 1e6, 100.0 * c.ratio(), static_cast<long long>(c.pretrained),
                  static_cast<long long>(c.random));
    table += line;
  }
  return table;
}

int run_cli(const std::vector<std::string>& args, std::ostream& out, std::ostream& err) {
  CLI::App app{"EffiSegNet: segmentation with a pretrained EfficientNet encoder and a full-scale additive decoder"};
  app.require_subcommand(1);
  app.set_version_flag("--version", std::string(kVersion));

  std::string params_target = "all";
  auto* params = app.add_subcommand("params", "Print pretrained / randomly initialized parameter counts");
  params->add_option("variant", params_target, "b0..b7 or 'all'");

  TrainArgs train_args;
  auto* train = app.add_subcommand("train", "Train a network and write a run directory");
  train->add_option("--config", train_args.config_file, "JSON training config");
  train->add_option("--variant", train_args.variant, "b0..b7");
  train->add_flag("--pretrained,!--no-pretrained", train_args.pretrained, "Initialize the encoder from ImageNet weights");
  train->add_option("--weights", train_args.weights, "Explicit pretrained weights file");
  train->add_option("--data-root", train_args.data_root, "Dataset root with images/ and masks/")->required();
  train->add_option("--split", train_args.split, "Split file (JSON) or generate:<seed>")->required();
  train->add_option("--seed", train_args.seed);
  train->add_option("--epochs", train_args.epochs);
  train->add_option("--batch-size", train_args.batch_size, "N or 'auto'");
  train->add_option("--threads", train_args.threads, "Intra-op threads (0 = library default)");
  train->add_option("--weight-decay", train_args.weight_decay);
  train->add_flag("--no-augment", train_args.no_augment, "Disable training augmentation");
  train->add_option("--out", train_args.out, "Run directory")->required();

  EvalArgs eval_args;
  auto* evaluate_cmd = app.add_subcommand("evaluate", "Score a checkpoint on a split");
  evaluate_cmd->add_option("--checkpoint", eval_args.checkpoint)->required();
  evaluate_cmd->add_option("--variant", eval_args.variant, "Refuse checkpoints of another variant");
  evaluate_cmd->add_option("--data-root", eval_args.data_root)->required();
  evaluate_cmd->add_option("--split", eval_args.split)->required();
  evaluate_cmd->add_option("--subset", eval_args.subset, "train, validation or test");
  evaluate_cmd->add_option("--threshold", eval_args.threshold);
  evaluate_cmd->add_option("--out", eval_args.out, "Report directory")->required();

  PredictArgs predict_args;
  auto* predict = app.add_subcommand("predict", "Write binary masks for images");
  predict->add_option("--checkpoint", predict_args.checkpoint)->required();
  predict->add_option("--variant", predict_args.variant);
  predict->add_option("--out", predict_args.out)->required();
  predict->add_flag("--probs", predict_args.probs, "Also write probability maps (.npy)");
  predict->add_option("--threshold", predict_args.threshold);
  predict->add_option("images", predict_args.images, "Input images");

  std::vector<char*> argv;
  std::vector<std::string> storage = args.empty() ? std::vector<std::string>{"effisegnet"} : args;
  for (auto& s : storage) argv.push_back(s.data());
  try {
    app.parse(static_cast<int>(argv.size()), argv.data());
  } catch (const CLI::ParseError& e) {
    const int rc = app.exit(e, out, err);
    return rc == 0 ? 0 : exit_code(ErrorClass::kConfig);
  }

  if (params->parsed()) {
    return guarded(nullptr, err, [&] {
      std::vector<Variant> variants;
      if (params_target == "all") variants.assign(all_variants().begin(), all_variants().end());
      else variants.push_back(parse_variant(params_target));
      out << parameter_table(variants);
    });
  }
  if (train->parsed()) {
    fs::create_directories(train_args.out);
    RunManifest manifest(fs::path(train_args.out) / "manifest.json", "train", storage);
    manifest.write();
    return guarded(&manifest, err, [&] { cmd_train(train_args, manifest, out); });
  }
  if (evaluate_cmd->parsed()) {
    fs::create_directories(eval_args.out);
    RunManifest manifest(fs::path(eval_args.out) / "manifest.json", "evaluate", storage);
    manifest.write();
    return guarded(&manifest, err, [&] { cmd_evaluate(eval_args, manifest, out); });
  }
  fs::create_directories(predict_args.out);
  RunManifest manifest(fs::path(predict_args.out) / "manifest.json", "predict", storage);
  manifest.write();
  int rc = 0;
  const int guard_rc = guarded(&manifest, err, [&] { rc = cmd_predict(predict_args, manifest, out, err); });
  return guard_rc != 0 ? guard_rc : rc;
}

}  // namespace effisegnet
