#include "effisegnet/losses.hpp"

#include <sstream>

#include "effisegnet/errors.hpp"

namespace effisegnet {
namespace {

void require_same_shape(const torch::Tensor& probs, const torch::Tensor& target) {
  if (probs.sizes() != target.sizes()) {
    std::ostringstream os;
    os << "loss inputs differ in shape: " << probs.sizes() << " vs " << target.sizes();
    throw ContractError(os.str());
  }
  if (probs.dim() < 2) throw ContractError("loss inputs need a leading batch dimension");
}

}  // namespace

torch::Tensor dice_loss(const torch::Tensor& probs, const torch::Tensor& target, double smooth) {
  require_same_shape(probs, target);
  const auto p = probs.flatten(1);
  const auto t = target.to(probs.dtype()).flatten(1);
  const auto intersection = (p * t).sum(1);
  const auto denom = p.sum(1) + t.sum(1);
  const auto dice = (2.0 * intersection + smooth) / (denom + smooth);
  return (1.0 - dice).mean();
}

torch::Tensor bce_loss(const torch::Tensor& probs, const torch::Tensor& target) {
  require_same_shape(probs, target);
  const auto p = probs.clamp(kProbabilityClamp, 1.0 - kProbabilityClamp);
  const auto t = target.to(probs.dtype());
  return -(t * torch::log(p) + (1.0 - t) * torch::log(1.0 - p)).mean();
}

torch::Tensor combined_loss(const torch::Tensor& probs, const torch::Tensor& target, double smooth) {
  return 0.5 * (dice_loss(probs, target, smooth) + bce_loss(probs, target));
}

}  // namespace effisegnet
