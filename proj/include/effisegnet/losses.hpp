#pragma once

#include <torch/torch.h>

namespace effisegnet {

inline constexpr double kDefaultDiceSmooth = 1e-6;
inline constexpr double kProbabilityClamp = 1e-7;

/// Soft Dice loss per image, averaged over the batch:
///   1 - (2 sum(p t) + smooth) / (sum p + sum t + smooth).
/// Throws ContractError on shape mismatch.
torch::Tensor dice_loss(const torch::Tensor& probs, const torch::Tensor& target,
                        double smooth = kDefaultDiceSmooth);

/// Mean pixel BCE with probabilities clamped to [1e-7, 1 - 1e-7].
torch::Tensor bce_loss(const torch::Tensor& probs, const torch::Tensor& target);

/// (dice_loss + bce_loss) / 2.
torch::Tensor combined_loss(const torch::Tensor& probs, const torch::Tensor& target,
                            double smooth = kDefaultDiceSmooth);

}  // namespace effisegnet
