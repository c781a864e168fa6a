#pragma once

// Slow, loop-based reference computations. They deliberately avoid the
// library's tensor code paths so they can check them.

#include <torch/torch.h>

#include <array>
#include <cmath>
#include <functional>
#include <vector>

#include "effisegnet/fusion_head.hpp"

namespace effisegnet::testing {

/// out[n][c][y][x] = in[n][c][floor(y*h/H)][floor(x*w/W)], integer arithmetic.
inline torch::Tensor loop_nearest_upsample(const torch::Tensor& in, int64_t height, int64_t width) {
  auto src = in.to(torch::kFloat64).contiguous();
  auto out = torch::empty({src.size(0), src.size(1), height, width}, torch::kFloat64);
  auto a = src.accessor<double, 4>();
  auto b = out.accessor<double, 4>();
  const int64_t h = src.size(2), w = src.size(3);
  for (int64_t n = 0; n < src.size(0); ++n)
    for (int64_t c = 0; c < src.size(1); ++c)
      for (int64_t y = 0; y < height; ++y)
        for (int64_t x = 0; x < width; ++x) b[n][c][y][x] = a[n][c][(y * h) / height][(x * w) / width];
  return out;
}

/// Same-padded stride-1 convolution (no bias) + eval-mode batch norm, in
/// explicit loops over the projection's weights.
inline torch::Tensor loop_projection(StageProjectionImpl& proj, const torch::Tensor& input) {
  auto x = input.to(torch::kFloat64).contiguous();
  auto w = proj.conv()->weight.detach().to(torch::kFloat64).contiguous();
  auto& bn = proj.norm();
  auto gamma = bn->weight.detach().to(torch::kFloat64);
  auto beta = bn->bias.detach().to(torch::kFloat64);
  auto mean = bn->running_mean.to(torch::kFloat64);
  auto var = bn->running_var.to(torch::kFloat64);
  const double eps = bn->options.eps();

  const int64_t N = x.size(0), C = x.size(1), H = x.size(2), W = x.size(3);
  const int64_t O = w.size(0), K = w.size(2), pad = K / 2;
  auto out = torch::zeros({N, O, H, W}, torch::kFloat64);
  auto xi = x.accessor<double, 4>();
  auto wi = w.accessor<double, 4>();
  auto oi = out.accessor<double, 4>();
  auto g = gamma.accessor<double, 1>();
  auto be = beta.accessor<double, 1>();
  auto mu = mean.accessor<double, 1>();
  auto va = var.accessor<double, 1>();
  for (int64_t n = 0; n < N; ++n)
    for (int64_t o = 0; o < O; ++o)
      for (int64_t y = 0; y < H; ++y)
        for (int64_t xx = 0; xx < W; ++xx) {
          double acc = 0.0;
          for (int64_t c = 0; c < C; ++c)
            for (int64_t ky = 0; ky < K; ++ky)
              for (int64_t kx = 0; kx < K; ++kx) {
                const int64_t sy = y + ky - pad, sx = xx + kx - pad;
                if (sy < 0 || sy >= H || sx < 0 || sx >= W) continue;
                acc += wi[o][c][ky][kx] * xi[n][c][sy][sx];
              }
          oi[n][o][y][xx] = (acc - mu[o]) / std::sqrt(va[o] + eps) * g[o] + be[o];
        }
  return out;
}

/// The six fusion terms up(F_s(x_s)), s = 0..5, each computed separately.
inline std::array<torch::Tensor, 6> loop_fusion_terms(FusionHeadImpl& head, const StagePyramid& pyramid) {
  const int64_t H = pyramid.stage0_input.size(2), W = pyramid.stage0_input.size(3);
  std::array<torch::Tensor, 6> terms;
  for (int s = 0; s <= 5; ++s)
    terms[static_cast<std::size_t>(s)] = loop_nearest_upsample(loop_projection(head.projection(s), pyramid.at(s)), H, W);
  return terms;
}

/// Mean over the batch of per-image soft Dice loss plus pixel-mean BCE, halved.
inline double loop_combined_loss(const torch::Tensor& probs, const torch::Tensor& target, double smooth) {
  auto p = probs.to(torch::kFloat64).reshape({probs.size(0), -1}).contiguous();
  auto t = target.to(torch::kFloat64).reshape({probs.size(0), -1}).contiguous();
  auto pa = p.accessor<double, 2>();
  auto ta = t.accessor<double, 2>();
  double dice_sum = 0.0, bce_sum = 0.0;
  const int64_t N = p.size(0), M = p.size(1);
  for (int64_t n = 0; n < N; ++n) {
    double inter = 0.0, sp = 0.0, st = 0.0;
    for (int64_t i = 0; i < M; ++i) {
      inter += pa[n][i] * ta[n][i];
      sp += pa[n][i];
      st += ta[n][i];
      const double q = std::min(std::max(pa[n][i], 1e-7), 1.0 - 1e-7);
      bce_sum += -(ta[n][i] * std::log(q) + (1.0 - ta[n][i]) * std::log(1.0 - q));
    }
    dice_sum += 1.0 - (2.0 * inter + smooth) / (sp + st + smooth);
  }
  return 0.5 * (dice_sum / N + bce_sum / (N * M));
}

struct ReferenceMetrics {
  std::vector<std::array<int64_t, 4>> counts;  // tp, fp, fn, tn per image
  std::vector<double> dice, iou;
  double f1 = 0, mdice = 0, miou = 0, precision = 0, recall = 0;
  std::array<int64_t, 4> pooled{};
};

/// Per-pixel script: threshold with >=, count, then pooled P/R/F1 and
/// per-image Dice = 2tp/(2tp+fp+fn), IoU = tp/(tp+fp+fn).
inline ReferenceMetrics loop_metrics(const std::vector<torch::Tensor>& preds, const std::vector<torch::Tensor>& gts,
                                     double threshold) {
  ReferenceMetrics r;
  for (std::size_t i = 0; i < preds.size(); ++i) {
    auto p = preds[i].to(torch::kFloat64).flatten().contiguous();
    auto g = gts[i].to(torch::kFloat64).flatten().contiguous();
    auto pa = p.accessor<double, 1>();
    auto ga = g.accessor<double, 1>();
    std::array<int64_t, 4> c{};
    for (int64_t k = 0; k < p.size(0); ++k) {
      const bool pred = pa[k] >= threshold, truth = ga[k] > 0.5;
      if (pred && truth) ++c[0];
      else if (pred) ++c[1];
      else if (truth) ++c[2];
      else ++c[3];
    }
    r.counts.push_back(c);
    for (int j = 0; j < 4; ++j) r.pooled[j] += c[j];
    const double denom = static_cast<double>(2 * c[0] + c[1] + c[2]);
    r.dice.push_back(denom == 0 ? 1.0 : 2.0 * c[0] / denom);
    const double uni = static_cast<double>(c[0] + c[1] + c[2]);
    r.iou.push_back(uni == 0 ? 1.0 : c[0] / uni);
  }
  for (double d : r.dice) r.mdice += d / r.dice.size();
  for (double v : r.iou) r.miou += v / r.iou.size();
  const auto [tp, fp, fn, tn] = r.pooled;
  if (tp + fp + fn == 0) {
    r.precision = r.recall = r.f1 = 1.0;
  } else {
    r.precision = tp + fp == 0 ? 0.0 : static_cast<double>(tp) / (tp + fp);
    r.recall = tp + fn == 0 ? 0.0 : static_cast<double>(tp) / (tp + fn);
    r.f1 = (2 * tp + fp + fn) == 0 ? 0.0 : 2.0 * tp / static_cast<double>(2 * tp + fp + fn);
  }
  return r;
}

/// Largest relative disagreement between autograd and central differences
/// over every entry of every parameter. `loss` must recompute from scratch.
inline double max_gradient_error(const std::vector<torch::Tensor>& params, const std::function<torch::Tensor()>& loss,
                                 double step) {
  for (auto p : params) p.mutable_grad() = torch::Tensor();
  loss().backward();
  double worst = 0.0;
  torch::NoGradGuard no_grad;
  for (auto p : params) {
    auto analytic = p.grad().clone();
    auto flat = p.view(-1);
    auto ga = analytic.view(-1);
    for (int64_t i = 0; i < flat.size(0); ++i) {
      const double orig = flat[i].item<double>();
      flat[i] = orig + step;
      const double up = loss().item<double>();
      flat[i] = orig - step;
      const double down = loss().item<double>();
      flat[i] = orig;
      const double numeric = (up - down) / (2.0 * step);
      const double a = ga[i].item<double>();
      const double scale = std::max({std::abs(a), std::abs(numeric), 1e-6});
      worst = std::max(worst, std::abs(a - numeric) / scale);
    }
  }
  return worst;
}

}  // namespace effisegnet::testing
