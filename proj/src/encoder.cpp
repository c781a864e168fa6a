#include "effisegnet/encoder.hpp"

#include <cstdlib>

#include "effisegnet/errors.hpp"
#include "effisegnet/tensor_io.hpp"

namespace effisegnet {
namespace nn = torch::nn;
namespace {

struct BlockSpec {
  int64_t expand_ratio;
  int64_t kernel;
  int64_t stride;
  int64_t in_channels;
  int64_t out_channels;
  int64_t layers;
};

// EfficientNet-B0 body; other variants scale channels and layer counts.
constexpr std::array<BlockSpec, 7> kB0Body{{
    {1, 3, 1, 32, 16, 1},
    {6, 3, 2, 16, 24, 2},
    {6, 5, 2, 24, 40, 2},
    {6, 3, 2, 40, 80, 3},
    {6, 5, 1, 80, 112, 3},
    {6, 5, 2, 112, 192, 4},
    {6, 3, 1, 192, 320, 1},
}};

// Indices into `features` whose output is the last map before the next
// stride-2 operation (or the last block, for the 1/32 stage).
constexpr std::array<int, kNetworkDepth> kExtractAfter{1, 2, 3, 5, 7};

constexpr double kStochasticDepthProb = 0.2;

// Sequential with a concrete forward signature so it can nest inside another
// Sequential (the templated forward of nn::Sequential cannot).
class StackImpl : public nn::SequentialImpl {
 public:
  using nn::SequentialImpl::SequentialImpl;
  torch::Tensor forward(torch::Tensor x) { return nn::SequentialImpl::forward(std::move(x)); }
};
TORCH_MODULE(Stack);

struct NormSpec {
  double eps;
  double momentum;
};

NormSpec norm_for(Variant v) {
  // Larger variants were trained with a smaller BN momentum and larger eps.
  if (v >= Variant::kB5) return {1e-3, 0.01};
  return {1e-5, 0.1};
}

Stack conv_norm_act(int64_t in, int64_t out, int64_t kernel, int64_t stride, int64_t groups,
                    bool activation, NormSpec norm) {
  Stack seq;
  seq->push_back(nn::Conv2d(nn::Conv2dOptions(in, out, kernel)
                                .stride(stride)
                                .padding((kernel - 1) / 2)
                                .groups(groups)
                                .bias(false)));
  seq->push_back(nn::BatchNorm2d(nn::BatchNorm2dOptions(out).eps(norm.eps).momentum(norm.momentum)));
  if (activation) seq->push_back(nn::SiLU());
  return seq;
}

class SqueezeExcitationImpl : public nn::Module {
 public:
  SqueezeExcitationImpl(int64_t channels, int64_t squeeze)
      : fc1_(register_module("fc1", nn::Conv2d(nn::Conv2dOptions(channels, squeeze, 1)))),
        fc2_(register_module("fc2", nn::Conv2d(nn::Conv2dOptions(squeeze, channels, 1)))) {}

  torch::Tensor forward(const torch::Tensor& x) {
    auto scale = torch::adaptive_avg_pool2d(x, {1, 1});
    scale = torch::sigmoid(fc2_->forward(torch::silu(fc1_->forward(scale))));
    return x * scale;
  }

 private:
  nn::Conv2d fc1_;
  nn::Conv2d fc2_;
};
TORCH_MODULE(SqueezeExcitation);

class MBConvImpl : public nn::Module {
 public:
  MBConvImpl(int64_t in, int64_t out, int64_t kernel, int64_t stride, int64_t expand_ratio,
             double drop_prob, NormSpec norm)
      : residual_(stride == 1 && in == out), drop_prob_(drop_prob) {
    nn::Sequential block;
    const int64_t expanded = in * expand_ratio;
    if (expanded != in) block->push_back(conv_norm_act(in, expanded, 1, 1, 1, true, norm));
    block->push_back(conv_norm_act(expanded, expanded, kernel, stride, expanded, true, norm));
    block->push_back(SqueezeExcitation(expanded, std::max<int64_t>(1, in / 4)));
    block->push_back(conv_norm_act(expanded, out, 1, 1, 1, false, norm));
    block_ = register_module("block", block);
  }

  torch::Tensor forward(const torch::Tensor& x) {
    torch::Tensor y = block_->forward(x);
    if (!residual_) return y;
    return x + stochastic_depth(y);
  }

 private:
  // Row-wise stochastic depth: drops the residual branch per sample.
  torch::Tensor stochastic_depth(const torch::Tensor& y) const {
    if (!is_training() || drop_prob_ <= 0.0) return y;
    const double survival = 1.0 - drop_prob_;
    auto keep = torch::empty({y.size(0), 1, 1, 1}, y.options()).bernoulli_(survival);
    return y * keep.div_(survival);
  }

  bool residual_;
  double drop_prob_;
  nn::Sequential block_{nullptr};
};
TORCH_MODULE(MBConv);

void init_like_reference(nn::Module& module) {
  torch::NoGradGuard no_grad;
  for (auto& m : module.modules(/*include_self=*/false)) {
    if (auto* conv = m->as<nn::Conv2d>()) {
      nn::init::kaiming_normal_(conv->weight, 0.0, torch::kFanOut);
      if (conv->bias.defined()) conv->bias.zero_();
    } else if (auto* bn = m->as<nn::BatchNorm2d>()) {
      bn->weight.fill_(1.0);
      bn->bias.zero_();
    }
  }
}

}  // namespace

const torch::Tensor& StagePyramid::at(int s) const {
  if (s < 0 || s > depth) throw ContractError("stage index " + std::to_string(s) + " outside 0..5");
  return s == 0 ? stage0_input : stages[static_cast<std::size_t>(s - 1)];
}

EfficientNetEncoder::EfficientNetEncoder(const VariantConfig& variant) : variant_(variant) {
  const NormSpec norm = norm_for(variant.variant);
  const double w = variant.width_mult;
  const double d = variant.depth_mult;

  int64_t total_blocks = 0;
  for (const auto& spec : kB0Body) total_blocks += round_repeats(spec.layers, d);

  nn::Sequential features;
  const int64_t stem = round_channels(kB0Body.front().in_channels, w);
  features->push_back(conv_norm_act(3, stem, 3, 2, 1, true, norm));

  int64_t block_id = 0;
  for (const auto& spec : kB0Body) {
    Stack stage;
    const int64_t out = round_channels(spec.out_channels, w);
    int64_t in = round_channels(spec.in_channels, w);
    const int64_t repeats = round_repeats(spec.layers, d);
    for (int64_t r = 0; r < repeats; ++r) {
      const double drop = kStochasticDepthProb * static_cast<double>(block_id) / static_cast<double>(total_blocks);
      stage->push_back(MBConv(in, out, spec.kernel, r == 0 ? spec.stride : 1, spec.expand_ratio, drop, norm));
      in = out;
      ++block_id;
    }
    features->push_back(stage);
  }

  // 1x1 head convolution of the classifier body. It is part of the pretrained
  // weight set but not on the path to any extracted stage.
  const int64_t last_in = round_channels(kB0Body.back().out_channels, w);
  features->push_back(conv_norm_act(last_in, 4 * last_in, 1, 1, 1, true, norm));

  features_ = register_module("features", features);
  init_like_reference(*this);
}

StagePyramid EfficientNetEncoder::encode_stages(const torch::Tensor& batch) {
  const int64_t r = variant_.input_resolution;
  if (batch.dim() != 4 || batch.size(1) != 3 || batch.size(2) != r || batch.size(3) != r) {
    std::ostringstream os;
    os << "EffiSegNet-" << variant_.name() << " expects N x 3 x " << r << " x " << r
       << " input, got " << batch.sizes();
    throw ShapeError(os.str());
  }
  StagePyramid pyramid;
  pyramid.stage0_input = batch;
  torch::Tensor x = batch;
  std::size_t next = 0;
  for (int i = 0; i <= kExtractAfter.back(); ++i) {
    x = features_->at<StackImpl>(static_cast<std::size_t>(i)).forward(x);
    if (i == kExtractAfter[next]) pyramid.stages[next++] = x;
  }
  return pyramid;
}

std::filesystem::path resolve_pretrained_path(const VariantConfig& variant) {
  std::filesystem::path dir;
  if (const char* env = std::getenv(kWeightsDirEnv); env && *env) {
    dir = env;
  } else if (const char* home = std::getenv("HOME"); home && *home) {
    dir = std::filesystem::path(home) / ".cache" / "effisegnet" / "weights";
  } else {
    dir = ".effisegnet-weights";
  }
  return dir / ("efficientnet_" + variant.name() + ".safetensors");
}

void load_backbone_weights(EfficientNetEncoder& encoder, const std::filesystem::path& path) {
  const std::string source = path.string();
  if (!std::filesystem::exists(path))
    throw LoadError("pretrained weights not found: " + source + " (set " + kWeightsDirEnv +
                    " or pass an explicit weights path)");
  const auto manifest_file = manifest_path_for(path);
  if (!std::filesystem::exists(manifest_file))
    throw LoadError("pretrained weights " + source + " have no manifest " + manifest_file.string());

  const auto manifest = read_json_file(manifest_file);
  const std::string expected = encoder.variant().name();
  if (manifest.value("variant", "") != expected)
    throw LoadError("pretrained weights " + source + " are for variant '" + manifest.value("variant", "?") +
                    "', not '" + expected + "'");
  const std::string digest = sha256_file(path);
  if (manifest.contains("sha256") && manifest["sha256"].get<std::string>() != digest)
    throw LoadError("pretrained weights " + source + " do not match their manifest hash (corrupt download?)");

  SafetensorsFile file;
  try {
    file = read_safetensors(path);
  } catch (const LoadError& e) {
    throw LoadError("cannot load pretrained weights " + source + ": " + e.what());
  }

  torch::NoGradGuard no_grad;
  auto copy_into = [&](const std::string& name, torch::Tensor& dst) {
    auto it = file.tensors.find(name);
    if (it == file.tensors.end()) throw LoadError("pretrained weights " + source + " lack tensor '" + name + "'");
    if (it->second.sizes() != dst.sizes()) {
      std::ostringstream os;
      os << "pretrained weights " << source << ": tensor '" << name << "' has shape " << it->second.sizes()
         << ", expected " << dst.sizes();
      throw LoadError(os.str());
    }
    dst.copy_(it->second);
  };
  for (auto& item : encoder.named_parameters()) copy_into(item.key(), item.value());
  for (auto& item : encoder.named_buffers()) copy_into(item.key(), item.value());
}

std::shared_ptr<EfficientNetEncoder> build_encoder(const VariantConfig& variant, const EncoderOptions& options) {
  torch::manual_seed(options.seed);
  auto encoder = std::make_shared<EfficientNetEncoder>(variant);
  if (options.pretrained)
    load_backbone_weights(*encoder, options.weights_path.value_or(resolve_pretrained_path(variant)));
  return encoder;
}

}  // namespace effisegnet
