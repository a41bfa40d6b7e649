#include "mhnes/dirichlet.hpp"

#include <boost/math/special_functions/gamma.hpp>
#include <fmt/format.h>

#include <cmath>
#include <stdexcept>

#include "mhnes/ops.hpp"

namespace mhnes {

namespace {

double open_uniform(Rng& rng) {
    double u = 0.0;
    while (u <= 0.0 || u >= 1.0) u = uniform01(rng);
    return u;
}

// d/da of the quantile x(a) solving P(a, x) = u, holding u fixed.
double gamma_quantile_shape_derivative(double a, double x) {
    const double h = 1e-5 * a;
    const double dp_da = (boost::math::gamma_p(a + h, x) - boost::math::gamma_p(a - h, x)) / (2.0 * h);
    return -dp_da / boost::math::gamma_p_derivative(a, x);
}

}  // namespace

Tensor sample_log_gamma(const Tensor& concentrations, Rng& rng) {
    const auto c = concentrations.data();
    std::vector<double> out(c.size()), dout(c.size());
    for (std::size_t i = 0; i < c.size(); ++i) {
        if (!(c[i] > 0.0)) throw std::invalid_argument(fmt::format("concentration {} at index {} is not positive", c[i], i));
        const double a = c[i] + 1.0;
        const double g = boost::math::gamma_p_inv(a, open_uniform(rng));
        const double log_u = std::log(open_uniform(rng));
        out[i] = std::log(g) + log_u / c[i];
        dout[i] = gamma_quantile_shape_derivative(a, g) / g - log_u / (c[i] * c[i]);
    }
    return make_result(concentrations.shape(), std::move(out), {concentrations},
                       [dout = std::move(dout)](TensorImpl& o) {
                           if (!o.inputs[0]->requires_grad) return;
                           auto gc = o.inputs[0]->grad_buffer();
                           for (std::size_t i = 0; i < gc.size(); ++i) gc[i] += o.grad[i] * dout[i];
                       });
}

Tensor sample_dirichlet(const Tensor& concentrations, Rng& rng) {
    if (concentrations.rank() != 2) throw std::invalid_argument("sample_dirichlet expects [rows, k] concentrations");
    return softmax(sample_log_gamma(concentrations, rng), 1);
}

}  // namespace mhnes
