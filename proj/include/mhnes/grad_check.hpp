#pragma once

#include <functional>
#include <vector>

#include "mhnes/tensor.hpp"

namespace mhnes {

using ScalarFunction = std::function<Tensor(const std::vector<Tensor>&)>;

struct GradCheckReport {
    double max_error = 0.0;
    std::size_t worst_input = 0;
    std::size_t worst_index = 0;
};

/// Compares reverse-mode gradients of `f` at `point` against central
/// differences. Error per coordinate is |analytic - numeric| / max(1, |analytic|).
GradCheckReport grad_check_report(const ScalarFunction& f, const std::vector<Tensor>& point, double eps = 1e-5);

inline double grad_check(const ScalarFunction& f, const std::vector<Tensor>& point, double eps = 1e-5) {
    return grad_check_report(f, point, eps).max_error;
}

}  // namespace mhnes
