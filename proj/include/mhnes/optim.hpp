#pragma once

#include <cstddef>
#include <vector>

#include "mhnes/tensor.hpp"

namespace mhnes {

/// eta0 * (1 + cos(pi t / T)) / 2 for 0 <= t <= T.
double cosine_lr(std::size_t t, std::size_t total, double eta0);

/// SGD with heavy-ball momentum: g += wd * w; v = momentum * v + g; w -= lr * v.
/// Parameters without a gradient buffer are treated as having zero gradient.
class Sgd {
public:
    Sgd(std::vector<Tensor> params, double momentum, double weight_decay);
    void step(double lr);
    void zero_grad();
    const std::vector<Tensor>& params() const { return params_; }
    const std::vector<std::vector<double>>& velocity() const { return velocity_; }

private:
    std::vector<Tensor> params_;
    std::vector<std::vector<double>> velocity_;
    double momentum_, weight_decay_;
};

/// Adam with L2 weight decay added to the gradient and bias correction.
class Adam {
public:
    Adam(std::vector<Tensor> params, double beta1, double beta2, double weight_decay, double eps = 1e-8);
    void step(double lr);
    void zero_grad();
    std::size_t steps() const { return t_; }

private:
    std::vector<Tensor> params_;
    std::vector<std::vector<double>> m_, v_;
    double beta1_, beta2_, weight_decay_, eps_;
    std::size_t t_ = 0;
};

/// Single-tensor forms of the two updates on raw buffers.
void sgd_momentum_step(std::span<double> w, std::span<const double> g, std::span<double> velocity, double lr,
                       double momentum, double weight_decay);
void adam_step(std::span<double> w, std::span<const double> g, std::span<double> m, std::span<double> v, std::size_t t,
               double lr, double beta1, double beta2, double weight_decay, double eps = 1e-8);

}  // namespace mhnes
