#include "mhnes/optim.hpp"

#include <fmt/format.h>

#include <cmath>
#include <numbers>
#include <stdexcept>

namespace mhnes {

namespace {

void check_sizes(std::size_t a, std::size_t b, const char* what) {
    if (a != b) throw std::invalid_argument(fmt::format("{}: state has {} entries, parameter has {}", what, b, a));
}

std::span<const double> grad_or_empty(const Tensor& t) { return t.has_grad() ? t.grad() : std::span<const double>(); }

}  // namespace

double cosine_lr(std::size_t t, std::size_t total, double eta0) {
    if (total == 0) throw std::invalid_argument("cosine_lr: total steps must be positive");
    if (t > total) throw std::invalid_argument(fmt::format("cosine_lr: step {} beyond total {}", t, total));
    if (t == total) return 0.0;
    return eta0 * 0.5 * (1.0 + std::cos(std::numbers::pi * static_cast<double>(t) / static_cast<double>(total)));
}

void sgd_momentum_step(std::span<double> w, std::span<const double> g, std::span<double> velocity, double lr,
                       double momentum, double weight_decay) {
    check_sizes(w.size(), velocity.size(), "sgd_momentum_step");
    if (!g.empty()) check_sizes(w.size(), g.size(), "sgd_momentum_step gradient");
    for (std::size_t i = 0; i < w.size(); ++i) {
        const double grad = (g.empty() ? 0.0 : g[i]) + weight_decay * w[i];
        velocity[i] = momentum * velocity[i] + grad;
        w[i] -= lr * velocity[i];
    }
}

void adam_step(std::span<double> w, std::span<const double> g, std::span<double> m, std::span<double> v, std::size_t t,
               double lr, double beta1, double beta2, double weight_decay, double eps) {
    check_sizes(w.size(), m.size(), "adam_step");
    check_sizes(w.size(), v.size(), "adam_step");
    if (!g.empty()) check_sizes(w.size(), g.size(), "adam_step gradient");
    if (t == 0) throw std::invalid_argument("adam_step: step counter starts at 1");
    const double c1 = 1.0 - std::pow(beta1, static_cast<double>(t));
    const double c2 = 1.0 - std::pow(beta2, static_cast<double>(t));
    for (std::size_t i = 0; i < w.size(); ++i) {
        const double grad = (g.empty() ? 0.0 : g[i]) + weight_decay * w[i];
        m[i] = beta1 * m[i] + (1.0 - beta1) * grad;
        v[i] = beta2 * v[i] + (1.0 - beta2) * grad * grad;
        w[i] -= lr * (m[i] / c1) / (std::sqrt(v[i] / c2) + eps);
    }
}

Sgd::Sgd(std::vector<Tensor> params, double momentum, double weight_decay)
    : params_(std::move(params)), momentum_(momentum), weight_decay_(weight_decay) {
    for (const auto& p : params_) velocity_.emplace_back(p.numel(), 0.0);
}

void Sgd::step(double lr) {
    for (std::size_t i = 0; i < params_.size(); ++i) {
        sgd_momentum_step(params_[i].mutable_data(), grad_or_empty(params_[i]), velocity_[i], lr, momentum_,
                          weight_decay_);
    }
}

void Sgd::zero_grad() {
    for (auto& p : params_) p.zero_grad();
}

Adam::Adam(std::vector<Tensor> params, double beta1, double beta2, double weight_decay, double eps)
    : params_(std::move(params)), beta1_(beta1), beta2_(beta2), weight_decay_(weight_decay), eps_(eps) {
    for (const auto& p : params_) {
        m_.emplace_back(p.numel(), 0.0);
        v_.emplace_back(p.numel(), 0.0);
    }
}

void Adam::step(double lr) {
    ++t_;
    for (std::size_t i = 0; i < params_.size(); ++i) {
        adam_step(params_[i].mutable_data(), grad_or_empty(params_[i]), m_[i], v_[i], t_, lr, beta1_, beta2_,
                  weight_decay_, eps_);
    }
}

void Adam::zero_grad() {
    for (auto& p : params_) p.zero_grad();
}

}  // namespace mhnes
