#include "mhnes/grad_check.hpp"

#include <algorithm>
#include <cmath>
#include <stdexcept>

namespace mhnes {

GradCheckReport grad_check_report(const ScalarFunction& f, const std::vector<Tensor>& point, double eps) {
    std::vector<Tensor> leaves;
    leaves.reserve(point.size());
    for (const auto& t : point) leaves.push_back(Tensor::from(t.shape(), {t.data().begin(), t.data().end()}, true));

    Tensor loss = f(leaves);
    if (loss.numel() != 1) throw std::invalid_argument("grad_check: function must be scalar-valued");
    backward(loss);

    GradCheckReport report;
    NoGradGuard no_grad;
    for (std::size_t k = 0; k < leaves.size(); ++k) {
        std::vector<double> analytic = leaves[k].has_grad() ? std::vector<double>(leaves[k].grad().begin(), leaves[k].grad().end())
                                                            : std::vector<double>(leaves[k].numel(), 0.0);
        auto values = leaves[k].mutable_data();
        for (std::size_t i = 0; i < values.size(); ++i) {
            const double saved = values[i];
            values[i] = saved + eps;
            const double up = f(leaves).item();
            values[i] = saved - eps;
            const double down = f(leaves).item();
            values[i] = saved;
            const double numeric = (up - down) / (2.0 * eps);
            const double err = std::abs(analytic[i] - numeric) / std::max(1.0, std::abs(analytic[i]));
            if (err > report.max_error || std::isnan(err)) {
                report.max_error = std::isnan(err) ? INFINITY : err;
                report.worst_input = k;
                report.worst_index = i;
            }
        }
    }
    return report;
}

}  // namespace mhnes
