#pragma once

#include <functional>
#include <span>
#include <string>
#include <vector>

#include "mhnes/search.hpp"

namespace mhnes {

using GradientFn = std::function<std::vector<double>(std::span<const double> alpha)>;
using LinearOperator = std::function<std::vector<double>(std::span<const double> v)>;

/// 1e-3 * (1 + |alpha|).
double default_hvp_eps(std::span<const double> alpha);

/// Symmetric-difference Hessian-vector product from first-order gradients:
/// (g(a + eps u) - g(a - eps u)) / (2 eps) * |v| with u = v / |v|.
std::vector<double> hvp_fd(const GradientFn& grad, std::span<const double> alpha, std::span<const double> v, double eps);

struct EigResult {
    double value = 0.0;
    double residual = 0.0;
    std::size_t iters = 0;
    bool converged = false;
};

/// Power iteration from a seeded Gaussian start; the estimate is the
/// largest-magnitude Ritz value on the span of the last two iterates, and
/// iteration stops once |H u - value u| < tol for the unit Ritz vector u.
/// One operator application per iteration.
EigResult dominant_eig(const LinearOperator& op, std::size_t dim, double tol = 1e-6, std::size_t max_iter = 200,
                       std::uint64_t seed = 0);

struct EigPoint {
    std::size_t epoch = 0;
    EigResult eig;
};

struct EigTrace {
    std::vector<EigPoint> points;
    std::string to_csv() const;
};

struct EigProbeOptions {
    double lambda_jsd = 0.1;
    double tol = 1e-3;
    std::size_t max_iter = 20;
    std::uint64_t seed = 0;
};

/// Gradient of the probed loss at a given architecture; the default probes
/// arch_val_loss on the state's fixed validation batch.
using ProbeGradient = std::function<std::vector<double>(SearchState& state, std::span<const double> alpha)>;

/// Epoch hook appending the dominant Hessian eigenvalue of the probed loss
/// with respect to the flattened architecture. The architecture is restored
/// bit-exactly after each probe.
EpochHook eig_trace_hook(EigTrace& trace, EigProbeOptions options, ProbeGradient gradient = {});

struct RegretEntry {
    std::size_t m = 0;
    std::size_t sample_id = 0;
    std::uint64_t seed = 0;
    double val_nll = 0.0;
    double regret = 0.0;
};

struct RegretSummary {
    std::size_t m = 0;
    double mean = 0.0;
    double std = 0.0;  // sample standard deviation
    std::vector<double> sorted_regret;
};

struct RegretStudy {
    std::vector<RegretEntry> entries;
    std::vector<RegretSummary> summaries;

    const RegretSummary& summary(std::size_t m) const;
    std::string to_csv() const;
};

/// For every ensemble size, trains `samples_per_m` random genotypes with the
/// given budget and records their validation NLL.
RegretStudy regret_study(const DatasetBundle& data, const ModelSpec& spec, std::span<const std::size_t> m_list,
                         std::size_t samples_per_m, const TrainHyperparams& budget, std::uint64_t seed);

/// Summaries from raw entries; fills in regrets.
RegretStudy summarize_regret(std::vector<RegretEntry> entries);

using DistanceMatrix = std::vector<std::vector<std::size_t>>;

DistanceMatrix hamming_matrix(std::span<const MultiHeadGenotype> genotypes);
std::string distance_csv(const DistanceMatrix& matrix);

}  // namespace mhnes
