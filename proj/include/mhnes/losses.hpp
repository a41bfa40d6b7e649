#pragma once

#include <span>

#include "mhnes/tensor.hpp"

namespace mhnes {

/// Row-wise mean of the member probability matrices.
Tensor ensemble_average(std::span<const Tensor> head_probs);

/// Sum of the per-head cross-entropies plus the cross-entropy of the averaged
/// prediction, each batch-averaged. Logs are clamped at 1e-12.
Tensor ensemble_train_loss(std::span<const Tensor> head_probs, const Tensor& ensemble_probs, std::span<const int> labels,
                           double label_smoothing = 0.0);

/// Batch mean of (1/M) sum_i KL(F || f_i) with F the averaged prediction.
Tensor jsd_diversity(std::span<const Tensor> head_probs);
Tensor jsd_diversity(std::span<const Tensor> head_probs, const Tensor& ensemble_probs);

/// ensemble_train_loss - lambda * jsd_diversity.
Tensor arch_val_loss(std::span<const Tensor> head_probs, const Tensor& ensemble_probs, std::span<const int> labels,
                     double lambda_jsd);

}  // namespace mhnes
