#include "mhnes/losses.hpp"

#include <fmt/format.h>

#include <stdexcept>

#include "mhnes/ops.hpp"

namespace mhnes {

namespace {

constexpr double kFloor = 1e-12;

}  // namespace

Tensor ensemble_average(std::span<const Tensor> head_probs) {
    if (head_probs.empty()) throw std::invalid_argument("ensemble_average: no members");
    if (head_probs.size() == 1) return head_probs[0];
    Tensor total = head_probs[0];
    for (std::size_t i = 1; i < head_probs.size(); ++i) {
        if (head_probs[i].shape() != head_probs[0].shape()) {
            throw std::invalid_argument(fmt::format("ensemble_average: member {} has shape {}, expected {}", i,
                                                    shape_to_string(head_probs[i].shape()),
                                                    shape_to_string(head_probs[0].shape())));
        }
        total = add(total, head_probs[i]);
    }
    return scale(total, 1.0 / static_cast<double>(head_probs.size()));
}

Tensor ensemble_train_loss(std::span<const Tensor> head_probs, const Tensor& ensemble_probs, std::span<const int> labels,
                           double label_smoothing) {
    Tensor loss = nll_loss(ensemble_probs, labels, label_smoothing, kFloor);
    for (const auto& p : head_probs) loss = add(loss, nll_loss(p, labels, label_smoothing, kFloor));
    return loss;
}

Tensor jsd_diversity(std::span<const Tensor> head_probs, const Tensor& ensemble_probs) {
    if (head_probs.empty()) throw std::invalid_argument("jsd_diversity: no members");
    if (head_probs.size() == 1) return Tensor::scalar(0.0);
    const Tensor log_f = log_clamped(ensemble_probs, kFloor);
    Tensor total;
    for (const auto& p : head_probs) {
        Tensor kl = sum(mul(ensemble_probs, sub(log_f, log_clamped(p, kFloor))));
        total = total.defined() ? add(total, kl) : kl;
    }
    const double rows = static_cast<double>(ensemble_probs.dim(0));
    return scale(total, 1.0 / (rows * static_cast<double>(head_probs.size())));
}

Tensor jsd_diversity(std::span<const Tensor> head_probs) {
    return jsd_diversity(head_probs, ensemble_average(head_probs));
}

Tensor arch_val_loss(std::span<const Tensor> head_probs, const Tensor& ensemble_probs, std::span<const int> labels,
                     double lambda_jsd) {
    if (lambda_jsd < 0.0) throw std::invalid_argument("arch_val_loss: lambda_jsd must be non-negative");
    Tensor loss = ensemble_train_loss(head_probs, ensemble_probs, labels);
    if (lambda_jsd == 0.0) return loss;
    return sub(loss, scale(jsd_diversity(head_probs, ensemble_probs), lambda_jsd));
}

}  // namespace mhnes
