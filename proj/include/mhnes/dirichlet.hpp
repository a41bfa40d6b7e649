#pragma once

#include "mhnes/rng.hpp"
#include "mhnes/tensor.hpp"

namespace mhnes {

/// One Dirichlet draw per row of `concentrations` [rows, k], differentiable
/// in the concentrations. Each coordinate is X = G(c + 1) * U^(1/c) with G
/// drawn by inverting the Gamma CDF, so for fixed random numbers the draw is
/// a smooth function of c; the row is softmax(log X).
Tensor sample_dirichlet(const Tensor& concentrations, Rng& rng);

/// log X of the draw above; exposed for tests.
Tensor sample_log_gamma(const Tensor& concentrations, Rng& rng);

}  // namespace mhnes
