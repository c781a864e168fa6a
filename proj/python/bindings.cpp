#include <pybind11/functional.h>
#include <pybind11/numpy.h>
#include <pybind11/pybind11.h>
#include <pybind11/stl.h>
#include <pybind11/stl/filesystem.h>

#include "effisegnet/checkpoint.hpp"
#include "effisegnet/cli.hpp"
#include "effisegnet/data.hpp"
#include "effisegnet/errors.hpp"
#include "effisegnet/losses.hpp"
#include "effisegnet/metrics.hpp"
#include "effisegnet/model.hpp"
#include "effisegnet/trainer.hpp"
#include "effisegnet/version.hpp"

namespace py = pybind11;
using namespace effisegnet;

namespace {

using FloatArray = py::array_t<float, py::array::c_style | py::array::forcecast>;

torch::Tensor to_tensor(const FloatArray& a) {
  std::vector<int64_t> shape(a.shape(), a.shape() + a.ndim());
  return torch::from_blob(const_cast<float*>(a.data()), shape, torch::kFloat32).clone();
}

FloatArray to_array(const torch::Tensor& t) {
  auto c = t.detach().to(torch::kFloat32).contiguous();
  std::vector<py::ssize_t> shape(c.sizes().begin(), c.sizes().end());
  FloatArray out(shape);
  std::memcpy(out.mutable_data(), c.data_ptr<float>(), static_cast<std::size_t>(c.numel()) * sizeof(float));
  return out;
}

py::dict variant_dict(const VariantConfig& v) {
  py::dict d;
  d["name"] = v.name();
  d["input_resolution"] = v.input_resolution;
  d["width_mult"] = v.width_mult;
  d["depth_mult"] = v.depth_mult;
  d["stage_channels"] = std::vector<int64_t>(v.stage_channels.begin(), v.stage_channels.end());
  d["pretrained_source"] = v.pretrained_source;
  return d;
}

py::dict counts_dict(const ConfusionCounts& c) {
  py::dict d;
  d["tp"] = c.tp;
  d["fp"] = c.fp;
  d["fn"] = c.fn;
  d["tn"] = c.tn;
  return d;
}

class PyModel {
 public:
  explicit PyModel(EffiSegNet model) : model_(std::move(model)) {}

  static PyModel build(const std::string& variant, bool pretrained, uint64_t seed,
                       std::optional<std::filesystem::path> weights) {
    ModelOptions o;
    o.variant = parse_variant(variant);
    o.pretrained = pretrained;
    o.seed = seed;
    o.weights_path = std::move(weights);
    return PyModel(build_model(o));
  }

  static PyModel load(const std::filesystem::path& path, std::optional<std::string> variant) {
    std::optional<Variant> expected;
    if (variant) expected = parse_variant(*variant);
    return PyModel(load_checkpoint(path, expected));
  }

  FloatArray predict(const FloatArray& batch) {
    auto x = to_tensor(batch);
    torch::Tensor probs;
    {
      py::gil_scoped_release release;
      probs = predict_mask_probabilities(*model_, x);
    }
    return to_array(probs);
  }

  std::vector<FloatArray> stages(const FloatArray& batch) {
    auto x = to_tensor(batch);
    StagePyramid p;
    {
      py::gil_scoped_release release;
      torch::NoGradGuard ng;
      const bool was_training = model_->is_training();
      model_->eval();
      p = model_->encoder().encode_stages(x);
      model_->train(was_training);
    }
    std::vector<FloatArray> out;
    for (const auto& s : p.stages) out.push_back(to_array(s));
    return out;
  }

  void save(const std::filesystem::path& path, uint64_t seed, int64_t epoch) {
    CheckpointManifest m;
    m.seed = seed;
    m.epoch = epoch;
    save_checkpoint(*model_, path, m);
  }

  std::string variant() const { return model_->variant().name(); }
  int64_t resolution() const { return model_->variant().input_resolution; }
  py::dict parameters() const {
    const auto c = count_parameters(*model_);
    py::dict d;
    d["pretrained"] = c.pretrained;
    d["random"] = c.random;
    d["ratio"] = c.ratio();
    return d;
  }

 private:
  EffiSegNet model_;
};

}  // namespace

PYBIND11_MODULE(_core, m) {
  m.doc() = "EffiSegNet core operations";
  m.attr("__version__") = kVersion;

  auto base = py::register_exception<Error>(m, "Error", PyExc_RuntimeError);
  py::register_exception<ConfigError>(m, "ConfigError", base.ptr());
  py::register_exception<DataError>(m, "DataError", base.ptr());
  py::register_exception<ResourceError>(m, "ResourceError", base.ptr());
  py::register_exception<NumericalError>(m, "NumericalError", base.ptr());
  auto contract = py::register_exception<ContractError>(m, "ContractError", base.ptr());
  py::register_exception<ShapeError>(m, "ShapeError", contract.ptr());
  py::register_exception<LoadError>(m, "LoadError", base.ptr());

  m.def("variants", [] {
    std::vector<std::string> names;
    for (Variant v : all_variants()) names.push_back(variant_name(v));
    return names;
  });
  m.def("variant_config", [](const std::string& v) { return variant_dict(variant_config(parse_variant(v))); },
        py::arg("variant"));
  m.def("parameter_table", [](const std::string& which) {
    std::vector<Variant> vs;
    if (which == "all") vs.assign(all_variants().begin(), all_variants().end());
    else vs.push_back(parse_variant(which));
    return parameter_table(vs);
  }, py::arg("variant") = "all");

  m.def("lr_at_epoch", py::overload_cast<int64_t, int64_t, double, double>(&lr_at_epoch), py::arg("epoch"),
        py::arg("total_epochs"), py::arg("lr_initial") = 1e-4, py::arg("lr_final") = 1e-5);

  m.def("dice_loss", [](const FloatArray& p, const FloatArray& t, double smooth) {
    return dice_loss(to_tensor(p), to_tensor(t), smooth).item<double>();
  }, py::arg("probs"), py::arg("target"), py::arg("smooth") = kDefaultDiceSmooth);
  m.def("combined_loss", [](const FloatArray& p, const FloatArray& t, double smooth) {
    return combined_loss(to_tensor(p), to_tensor(t), smooth).item<double>();
  }, py::arg("probs"), py::arg("target"), py::arg("smooth") = kDefaultDiceSmooth);

  m.def("confusion_counts", [](const FloatArray& p, const FloatArray& g, double thr) {
    return counts_dict(confusion_counts(to_tensor(p), to_tensor(g), thr));
  }, py::arg("pred"), py::arg("gt"), py::arg("threshold") = kDefaultThreshold);
  m.def("per_image_overlap", [](const FloatArray& p, const FloatArray& g, double thr) {
    const auto o = per_image_overlap(to_tensor(p), to_tensor(g), thr);
    return std::make_pair(o.dice, o.iou);
  }, py::arg("pred"), py::arg("gt"), py::arg("threshold") = kDefaultThreshold);
  m.def("score", [](const std::vector<FloatArray>& preds, const std::vector<FloatArray>& gts, double thr) {
    if (preds.size() != gts.size()) throw ContractError("pred and gt lists differ in length");
    MetricsAccumulator acc(thr);
    for (std::size_t i = 0; i < preds.size(); ++i) acc.add(std::to_string(i), to_tensor(preds[i]), to_tensor(gts[i]));
    const auto r = acc.report();
    py::dict d;
    d["f1"] = r.f1;
    d["mdice"] = r.mdice;
    d["miou"] = r.miou;
    d["precision"] = r.precision;
    d["recall"] = r.recall;
    d["counts"] = counts_dict(r.aggregate_counts);
    return d;
  }, py::arg("preds"), py::arg("gts"), py::arg("threshold") = kDefaultThreshold,
     "F1/precision/recall pooled over all pixels, mDice/mIoU averaged per image.");

  m.def("find_max_batch_size", py::overload_cast<const std::function<bool(int64_t)>&, int64_t>(&find_max_batch_size),
        py::arg("fits"), py::arg("upper_bound"));

  m.def("index_dataset", [](const std::filesystem::path& root) {
    std::vector<std::string> ids;
    for (const auto& e : index_dataset(root).entries) ids.push_back(e.id);
    return ids;
  }, py::arg("root"));
  m.def("load_split", [](const std::filesystem::path& root, const std::string& spec) {
    const auto s = load_split(index_dataset(root), spec);
    py::dict d;
    d["train"] = s.train;
    d["validation"] = s.validation;
    d["test"] = s.test;
    return d;
  }, py::arg("root"), py::arg("spec"));

  m.def("run_cli", [](std::vector<std::string> args) {
    args.insert(args.begin(), "effisegnet");
    py::gil_scoped_release release;
    return run_cli(args);
  }, py::arg("args"), "Runs an `effisegnet` command; returns its exit code.");

  py::class_<PyModel>(m, "Model")
      .def(py::init(&PyModel::build), py::arg("variant"), py::arg("pretrained") = false, py::arg("seed") = 0,
           py::arg("weights") = std::nullopt)
      .def_static("load", &PyModel::load, py::arg("path"), py::arg("variant") = std::nullopt)
      .def("predict", &PyModel::predict, py::arg("batch"), "N x 3 x R x R normalized images -> N x 1 x R x R probabilities")
      .def("stages", &PyModel::stages, py::arg("batch"), "Encoder feature maps for stages 1..5 (eval mode)")
      .def("save", &PyModel::save, py::arg("path"), py::arg("seed") = 0, py::arg("epoch") = 0)
      .def_property_readonly("variant", &PyModel::variant)
      .def_property_readonly("resolution", &PyModel::resolution)
      .def_property_readonly("parameters", &PyModel::parameters);
}
