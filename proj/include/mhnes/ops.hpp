#pragma once

#include <cstddef>
#include <span>
#include <vector>

#include "mhnes/tensor.hpp"

namespace mhnes {

// Elementwise. `b` may be a one-element tensor, in which case it is broadcast.
Tensor add(const Tensor& a, const Tensor& b);
Tensor sub(const Tensor& a, const Tensor& b);
Tensor mul(const Tensor& a, const Tensor& b);
Tensor scale(const Tensor& a, double factor);
Tensor add_scalar(const Tensor& a, double value);

inline Tensor operator+(const Tensor& a, const Tensor& b) { return add(a, b); }
inline Tensor operator-(const Tensor& a, const Tensor& b) { return sub(a, b); }
inline Tensor operator*(const Tensor& a, const Tensor& b) { return mul(a, b); }
inline Tensor operator*(const Tensor& a, double s) { return scale(a, s); }
inline Tensor operator*(double s, const Tensor& a) { return scale(a, s); }

Tensor relu(const Tensor& x);
Tensor exp(const Tensor& x);
/// log(max(x, floor)); the gradient is zero where the clamp is active.
Tensor log_clamped(const Tensor& x, double floor = 1e-12);

Tensor sum(const Tensor& x);
Tensor mean(const Tensor& x);
Tensor sum_axis(const Tensor& x, std::size_t axis);
Tensor mean_axis(const Tensor& x, std::size_t axis);
Tensor reshape(const Tensor& x, Shape shape);

Tensor matmul(const Tensor& a, const Tensor& b);
/// x[N,F] + bias[F] broadcast over rows.
Tensor add_row_bias(const Tensor& x, const Tensor& bias);
/// x[N,C,H,W] * gamma[C] + beta[C].
Tensor channel_affine(const Tensor& x, const Tensor& gamma, const Tensor& beta);

struct Conv2dGeometry {
    std::size_t stride = 1;
    std::size_t padding = 0;
    std::size_t dilation = 1;
    std::size_t groups = 1;
};

/// Output extent along one spatial axis; throws when non-positive.
std::size_t conv_output_extent(std::size_t input, std::size_t kernel, const Conv2dGeometry& geometry);

/// x[N,C,H,W] with kernel[O, C/groups, k, k]. No bias.
Tensor conv2d(const Tensor& x, const Tensor& kernel, const Conv2dGeometry& geometry);

enum class PoolKind { max, avg };

/// Padding cells are excluded from both kinds: max ignores them and avg divides
/// by the number of in-bounds cells. Max ties route to the first row-major index.
Tensor pool2d(PoolKind kind, const Tensor& x, std::size_t window, std::size_t stride, std::size_t padding);

/// Per-channel standardization over (N,H,W) with batch statistics.
/// When `batch_mean` / `batch_var` are given they receive the statistics used.
Tensor normalize_no_affine(const Tensor& x, double eps = 1e-5, std::vector<double>* batch_mean = nullptr,
                           std::vector<double>* batch_var = nullptr);
/// Standardization with fixed statistics; differentiable in x only.
Tensor normalize_with_stats(const Tensor& x, std::span<const double> mean, std::span<const double> var,
                            double eps = 1e-5);

Tensor softmax(const Tensor& x, std::size_t axis);
Tensor log_softmax(const Tensor& x, std::size_t axis);

Tensor concat(std::span<const Tensor> parts, std::size_t axis);
/// Gathers channels (axis 1) of x[N,C,...] in the given order.
Tensor select_channels(const Tensor& x, std::span<const std::size_t> channels);
/// Gathers one row of a 2-D tensor as a 1-D tensor.
Tensor row(const Tensor& x, std::size_t index);
/// Flat gather: out[i] = x.flat[index[i]], shape [index.size()].
Tensor gather(const Tensor& x, std::span<const std::size_t> index);

/// sum_i weights.flat[index[i]] * terms[i]; all terms share one shape.
Tensor weighted_sum(std::span<const Tensor> terms, const Tensor& weights, std::span<const std::size_t> index);

/// Categorical cross-entropy on probability rows, batch-averaged:
/// -[(1-s) log p_y + (s/C) sum_c log p_c], probabilities clamped at `floor`.
Tensor nll_loss(const Tensor& probs, std::span<const int> labels, double label_smoothing = 0.0,
                double floor = 1e-12);

}  // namespace mhnes
