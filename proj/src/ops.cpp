#include "mhnes/ops.hpp"

#include <fmt/format.h>

#include <algorithm>
#include <cmath>
#include <limits>
#include <stdexcept>

namespace mhnes {

namespace {

std::span<double> input_grad(TensorImpl& out, std::size_t i) {
    TensorImpl& in = *out.inputs[i];
    if (!in.requires_grad) return {};
    return in.grad_buffer();
}

const std::vector<double>& input_data(const TensorImpl& out, std::size_t i) { return out.inputs[i]->data; }

bool is_broadcast_scalar(const Tensor& a, const Tensor& b) { return a.shape() != b.shape() && b.numel() == 1; }

void check_elementwise(const char* name, const Tensor& a, const Tensor& b) {
    if (a.shape() == b.shape() || b.numel() == 1) return;
    throw std::invalid_argument(fmt::format("{}: shape mismatch {} vs {}", name, shape_to_string(a.shape()),
                                            shape_to_string(b.shape())));
}

struct AxisSplit {
    std::size_t outer = 1;
    std::size_t extent = 1;
    std::size_t inner = 1;
};

AxisSplit split_axis(const Shape& shape, std::size_t axis) {
    if (axis >= shape.size()) {
        throw std::invalid_argument(fmt::format("axis {} invalid for shape {}", axis, shape_to_string(shape)));
    }
    AxisSplit s;
    for (std::size_t i = 0; i < axis; ++i) s.outer *= shape[i];
    s.extent = shape[axis];
    for (std::size_t i = axis + 1; i < shape.size(); ++i) s.inner *= shape[i];
    return s;
}

void require_rank(const char* name, const Tensor& x, std::size_t rank) {
    if (x.rank() != rank) {
        throw std::invalid_argument(fmt::format("{}: expected rank {}, got shape {}", name, rank,
                                                shape_to_string(x.shape())));
    }
}

// Outputs o in [lo, hi) satisfy 0 <= o * stride + offset < extent.
std::pair<long, long> valid_range(long out_extent, long extent, long stride, long offset) {
    long lo = offset >= 0 ? 0 : (-offset + stride - 1) / stride;
    long last = extent - 1 - offset;
    long hi = last >= 0 ? last / stride + 1 : 0;
    hi = std::min(hi, out_extent);
    return {lo, std::max(lo, hi)};
}

}  // namespace

Tensor add(const Tensor& a, const Tensor& b) {
    check_elementwise("add", a, b);
    const bool bcast = is_broadcast_scalar(a, b);
    std::vector<double> out(a.data().begin(), a.data().end());
    auto bd = b.data();
    for (std::size_t i = 0; i < out.size(); ++i) out[i] += bcast ? bd[0] : bd[i];
    return make_result(a.shape(), std::move(out), {a, b}, [bcast](TensorImpl& o) {
        if (auto ga = input_grad(o, 0); !ga.empty())
            for (std::size_t i = 0; i < ga.size(); ++i) ga[i] += o.grad[i];
        if (auto gb = input_grad(o, 1); !gb.empty()) {
            if (bcast) {
                for (double g : o.grad) gb[0] += g;
            } else {
                for (std::size_t i = 0; i < gb.size(); ++i) gb[i] += o.grad[i];
            }
        }
    });
}

Tensor sub(const Tensor& a, const Tensor& b) {
    check_elementwise("sub", a, b);
    const bool bcast = is_broadcast_scalar(a, b);
    std::vector<double> out(a.data().begin(), a.data().end());
    auto bd = b.data();
    for (std::size_t i = 0; i < out.size(); ++i) out[i] -= bcast ? bd[0] : bd[i];
    return make_result(a.shape(), std::move(out), {a, b}, [bcast](TensorImpl& o) {
        if (auto ga = input_grad(o, 0); !ga.empty())
            for (std::size_t i = 0; i < ga.size(); ++i) ga[i] += o.grad[i];
        if (auto gb = input_grad(o, 1); !gb.empty()) {
            if (bcast) {
                for (double g : o.grad) gb[0] -= g;
            } else {
                for (std::size_t i = 0; i < gb.size(); ++i) gb[i] -= o.grad[i];
            }
        }
    });
}

Tensor mul(const Tensor& a, const Tensor& b) {
    check_elementwise("mul", a, b);
    const bool bcast = is_broadcast_scalar(a, b);
    std::vector<double> out(a.data().begin(), a.data().end());
    auto bd = b.data();
    for (std::size_t i = 0; i < out.size(); ++i) out[i] *= bcast ? bd[0] : bd[i];
    return make_result(a.shape(), std::move(out), {a, b}, [bcast](TensorImpl& o) {
        const auto& ad = input_data(o, 0);
        const auto& bd = input_data(o, 1);
        if (auto ga = input_grad(o, 0); !ga.empty())
            for (std::size_t i = 0; i < ga.size(); ++i) ga[i] += o.grad[i] * (bcast ? bd[0] : bd[i]);
        if (auto gb = input_grad(o, 1); !gb.empty()) {
            if (bcast) {
                double acc = 0.0;
                for (std::size_t i = 0; i < ad.size(); ++i) acc += o.grad[i] * ad[i];
                gb[0] += acc;
            } else {
                for (std::size_t i = 0; i < gb.size(); ++i) gb[i] += o.grad[i] * ad[i];
            }
        }
    });
}

Tensor scale(const Tensor& a, double factor) {
    std::vector<double> out(a.data().begin(), a.data().end());
    for (double& v : out) v *= factor;
    return make_result(a.shape(), std::move(out), {a}, [factor](TensorImpl& o) {
        auto ga = input_grad(o, 0);
        for (std::size_t i = 0; i < ga.size(); ++i) ga[i] += o.grad[i] * factor;
    });
}

Tensor add_scalar(const Tensor& a, double value) {
    std::vector<double> out(a.data().begin(), a.data().end());
    for (double& v : out) v += value;
    return make_result(a.shape(), std::move(out), {a}, [](TensorImpl& o) {
        auto ga = input_grad(o, 0);
        for (std::size_t i = 0; i < ga.size(); ++i) ga[i] += o.grad[i];
    });
}

Tensor relu(const Tensor& x) {
    std::vector<double> out(x.data().begin(), x.data().end());
    for (double& v : out) v = v > 0.0 ? v : 0.0;
    return make_result(x.shape(), std::move(out), {x}, [](TensorImpl& o) {
        auto gx = input_grad(o, 0);
        for (std::size_t i = 0; i < gx.size(); ++i)
            if (o.data[i] > 0.0) gx[i] += o.grad[i];
    });
}

Tensor exp(const Tensor& x) {
    std::vector<double> out(x.data().begin(), x.data().end());
    for (double& v : out) v = std::exp(v);
    return make_result(x.shape(), std::move(out), {x}, [](TensorImpl& o) {
        auto gx = input_grad(o, 0);
        for (std::size_t i = 0; i < gx.size(); ++i) gx[i] += o.grad[i] * o.data[i];
    });
}

Tensor log_clamped(const Tensor& x, double floor) {
    std::vector<double> out(x.data().begin(), x.data().end());
    for (double& v : out) v = std::log(std::max(v, floor));
    return make_result(x.shape(), std::move(out), {x}, [floor](TensorImpl& o) {
        const auto& xd = input_data(o, 0);
        auto gx = input_grad(o, 0);
        for (std::size_t i = 0; i < gx.size(); ++i)
            if (xd[i] > floor) gx[i] += o.grad[i] / xd[i];
    });
}

Tensor sum(const Tensor& x) {
    double acc = 0.0;
    for (double v : x.data()) acc += v;
    return make_result({}, {acc}, {x}, [](TensorImpl& o) {
        auto gx = input_grad(o, 0);
        for (double& g : gx) g += o.grad[0];
    });
}

Tensor mean(const Tensor& x) {
    if (x.numel() == 0) throw std::invalid_argument("mean of empty tensor");
    return scale(sum(x), 1.0 / static_cast<double>(x.numel()));
}

Tensor sum_axis(const Tensor& x, std::size_t axis) {
    const AxisSplit s = split_axis(x.shape(), axis);
    Shape shape = x.shape();
    shape.erase(shape.begin() + static_cast<long>(axis));
    std::vector<double> out(s.outer * s.inner, 0.0);
    auto xd = x.data();
    for (std::size_t a = 0; a < s.outer; ++a)
        for (std::size_t k = 0; k < s.extent; ++k)
            for (std::size_t b = 0; b < s.inner; ++b) out[a * s.inner + b] += xd[(a * s.extent + k) * s.inner + b];
    return make_result(std::move(shape), std::move(out), {x}, [s](TensorImpl& o) {
        auto gx = input_grad(o, 0);
        for (std::size_t a = 0; a < s.outer; ++a)
            for (std::size_t k = 0; k < s.extent; ++k)
                for (std::size_t b = 0; b < s.inner; ++b) gx[(a * s.extent + k) * s.inner + b] += o.grad[a * s.inner + b];
    });
}

Tensor mean_axis(const Tensor& x, std::size_t axis) {
    const std::size_t extent = split_axis(x.shape(), axis).extent;
    if (extent == 0) throw std::invalid_argument("mean_axis over empty axis");
    return scale(sum_axis(x, axis), 1.0 / static_cast<double>(extent));
}

Tensor reshape(const Tensor& x, Shape shape) {
    if (shape_numel(shape) != x.numel()) {
        throw std::invalid_argument(fmt::format("reshape: {} to {}", shape_to_string(x.shape()), shape_to_string(shape)));
    }
    std::vector<double> out(x.data().begin(), x.data().end());
    return make_result(std::move(shape), std::move(out), {x}, [](TensorImpl& o) {
        auto gx = input_grad(o, 0);
        for (std::size_t i = 0; i < gx.size(); ++i) gx[i] += o.grad[i];
    });
}

Tensor matmul(const Tensor& a, const Tensor& b) {
    require_rank("matmul", a, 2);
    require_rank("matmul", b, 2);
    const std::size_t m = a.dim(0), k = a.dim(1), n = b.dim(1);
    if (b.dim(0) != k) {
        throw std::invalid_argument(fmt::format("matmul: inner extent mismatch {} vs {}", shape_to_string(a.shape()),
                                                shape_to_string(b.shape())));
    }
    std::vector<double> out(m * n, 0.0);
    auto ad = a.data();
    auto bd = b.data();
    for (std::size_t i = 0; i < m; ++i)
        for (std::size_t p = 0; p < k; ++p) {
            const double av = ad[i * k + p];
            for (std::size_t j = 0; j < n; ++j) out[i * n + j] += av * bd[p * n + j];
        }
    return make_result({m, n}, std::move(out), {a, b}, [m, k, n](TensorImpl& o) {
        const auto& ad = input_data(o, 0);
        const auto& bd = input_data(o, 1);
        if (auto ga = input_grad(o, 0); !ga.empty())
            for (std::size_t i = 0; i < m; ++i)
                for (std::size_t p = 0; p < k; ++p) {
                    double acc = 0.0;
                    for (std::size_t j = 0; j < n; ++j) acc += o.grad[i * n + j] * bd[p * n + j];
                    ga[i * k + p] += acc;
                }
        if (auto gb = input_grad(o, 1); !gb.empty())
            for (std::size_t i = 0; i < m; ++i)
                for (std::size_t p = 0; p < k; ++p) {
                    const double av = ad[i * k + p];
                    for (std::size_t j = 0; j < n; ++j) gb[p * n + j] += av * o.grad[i * n + j];
                }
    });
}

Tensor add_row_bias(const Tensor& x, const Tensor& bias) {
    require_rank("add_row_bias", x, 2);
    const std::size_t rows = x.dim(0), cols = x.dim(1);
    if (bias.numel() != cols) {
        throw std::invalid_argument(fmt::format("add_row_bias: bias {} for input {}", shape_to_string(bias.shape()),
                                                shape_to_string(x.shape())));
    }
    std::vector<double> out(x.data().begin(), x.data().end());
    auto bd = bias.data();
    for (std::size_t r = 0; r < rows; ++r)
        for (std::size_t c = 0; c < cols; ++c) out[r * cols + c] += bd[c];
    return make_result(x.shape(), std::move(out), {x, bias}, [rows, cols](TensorImpl& o) {
        if (auto gx = input_grad(o, 0); !gx.empty())
            for (std::size_t i = 0; i < gx.size(); ++i) gx[i] += o.grad[i];
        if (auto gb = input_grad(o, 1); !gb.empty())
            for (std::size_t r = 0; r < rows; ++r)
                for (std::size_t c = 0; c < cols; ++c) gb[c] += o.grad[r * cols + c];
    });
}

Tensor channel_affine(const Tensor& x, const Tensor& gamma, const Tensor& beta) {
    require_rank("channel_affine", x, 4);
    const std::size_t n = x.dim(0), c = x.dim(1), hw = x.dim(2) * x.dim(3);
    if (gamma.numel() != c || beta.numel() != c) throw std::invalid_argument("channel_affine: parameter extent mismatch");
    std::vector<double> out(x.numel());
    auto xd = x.data();
    auto gd = gamma.data();
    auto bd = beta.data();
    for (std::size_t i = 0; i < n; ++i)
        for (std::size_t ch = 0; ch < c; ++ch) {
            const std::size_t base = (i * c + ch) * hw;
            for (std::size_t p = 0; p < hw; ++p) out[base + p] = xd[base + p] * gd[ch] + bd[ch];
        }
    return make_result(x.shape(), std::move(out), {x, gamma, beta}, [n, c, hw](TensorImpl& o) {
        const auto& xd = input_data(o, 0);
        const auto& gd = input_data(o, 1);
        auto gx = input_grad(o, 0);
        auto gg = input_grad(o, 1);
        auto gb = input_grad(o, 2);
        for (std::size_t i = 0; i < n; ++i)
            for (std::size_t ch = 0; ch < c; ++ch) {
                const std::size_t base = (i * c + ch) * hw;
                for (std::size_t p = 0; p < hw; ++p) {
                    const double g = o.grad[base + p];
                    if (!gx.empty()) gx[base + p] += g * gd[ch];
                    if (!gg.empty()) gg[ch] += g * xd[base + p];
                    if (!gb.empty()) gb[ch] += g;
                }
            }
    });
}

std::size_t conv_output_extent(std::size_t input, std::size_t kernel, const Conv2dGeometry& geometry) {
    if (geometry.stride == 0 || geometry.dilation == 0) throw std::invalid_argument("conv: stride and dilation must be positive");
    const long span = static_cast<long>(geometry.dilation * (kernel - 1) + 1);
    const long padded = static_cast<long>(input + 2 * geometry.padding);
    if (padded < span) {
        throw std::invalid_argument(fmt::format("non-positive output extent: input {} kernel {} padding {} dilation {}",
                                                input, kernel, geometry.padding, geometry.dilation));
    }
    return static_cast<std::size_t>((padded - span) / static_cast<long>(geometry.stride)) + 1;
}

Tensor conv2d(const Tensor& x, const Tensor& kernel, const Conv2dGeometry& geometry) {
    require_rank("conv2d input", x, 4);
    require_rank("conv2d kernel", kernel, 4);
    const std::size_t n = x.dim(0), c = x.dim(1), h = x.dim(2), w = x.dim(3);
    const std::size_t oc = kernel.dim(0), kh = kernel.dim(2), kw = kernel.dim(3);
    const std::size_t groups = geometry.groups;
    if (groups == 0 || c % groups != 0 || oc % groups != 0) {
        throw std::invalid_argument(fmt::format("conv2d: channels {} / outputs {} not divisible by groups {}", c, oc, groups));
    }
    const std::size_t cin_g = c / groups, cout_g = oc / groups;
    if (kernel.dim(1) != cin_g) {
        throw std::invalid_argument(fmt::format("conv2d: kernel {} does not match {} input channels per group",
                                                shape_to_string(kernel.shape()), cin_g));
    }
    if (kh % 2 == 0 || kw % 2 == 0) throw std::invalid_argument("conv2d: kernel extents must be odd");
    const std::size_t oh = conv_output_extent(h, kh, geometry);
    const std::size_t ow = conv_output_extent(w, kw, geometry);

    struct Plan {
        std::size_t n, c, h, w, oc, kh, kw, oh, ow, cin_g, cout_g;
        long stride, pad, dil;
    };
    const Plan p{n, c, h, w, oc, kh, kw, oh, ow, cin_g, cout_g, static_cast<long>(geometry.stride),
                 static_cast<long>(geometry.padding), static_cast<long>(geometry.dilation)};

    // Visits every (input, output, weight) triple; shared by forward and backward.
    auto visit = [](const Plan& p, auto&& fn) {
        for (std::size_t b = 0; b < p.n; ++b)
            for (std::size_t o = 0; o < p.oc; ++o) {
                const std::size_t g = o / p.cout_g;
                const std::size_t out_base = (b * p.oc + o) * p.oh * p.ow;
                for (std::size_t ci = 0; ci < p.cin_g; ++ci) {
                    const std::size_t in_base = (b * p.c + g * p.cin_g + ci) * p.h * p.w;
                    for (std::size_t y = 0; y < p.kh; ++y) {
                        const long off_y = static_cast<long>(y) * p.dil - p.pad;
                        auto [y0, y1] = valid_range(static_cast<long>(p.oh), static_cast<long>(p.h), p.stride, off_y);
                        for (std::size_t xk = 0; xk < p.kw; ++xk) {
                            const std::size_t widx = ((o * p.cin_g + ci) * p.kh + y) * p.kw + xk;
                            const long off_x = static_cast<long>(xk) * p.dil - p.pad;
                            auto [x0, x1] = valid_range(static_cast<long>(p.ow), static_cast<long>(p.w), p.stride, off_x);
                            for (long r = y0; r < y1; ++r) {
                                const std::size_t in_row = in_base + static_cast<std::size_t>(r * p.stride + off_y) * p.w;
                                const std::size_t out_row = out_base + static_cast<std::size_t>(r) * p.ow;
                                fn(widx, in_row, out_row, x0, x1, off_x);
                            }
                        }
                    }
                }
            }
    };

    std::vector<double> out(n * oc * oh * ow, 0.0);
    {
        auto xd = x.data();
        auto kd = kernel.data();
        visit(p, [&](std::size_t widx, std::size_t in_row, std::size_t out_row, long x0, long x1, long off_x) {
            const double wv = kd[widx];
            for (long q = x0; q < x1; ++q) out[out_row + q] += wv * xd[in_row + q * p.stride + off_x];
        });
    }
    return make_result({n, oc, oh, ow}, std::move(out), {x, kernel}, [p, visit](TensorImpl& o) {
        const auto& xd = input_data(o, 0);
        const auto& kd = input_data(o, 1);
        auto gx = input_grad(o, 0);
        auto gk = input_grad(o, 1);
        const auto& g = o.grad;
        visit(p, [&](std::size_t widx, std::size_t in_row, std::size_t out_row, long x0, long x1, long off_x) {
            if (!gx.empty()) {
                const double wv = kd[widx];
                for (long q = x0; q < x1; ++q) gx[in_row + q * p.stride + off_x] += wv * g[out_row + q];
            }
            if (!gk.empty()) {
                double acc = 0.0;
                for (long q = x0; q < x1; ++q) acc += g[out_row + q] * xd[in_row + q * p.stride + off_x];
                gk[widx] += acc;
            }
        });
    });
}

Tensor pool2d(PoolKind kind, const Tensor& x, std::size_t window, std::size_t stride, std::size_t padding) {
    require_rank("pool2d", x, 4);
    if (window == 0) throw std::invalid_argument("pool2d: window must be positive");
    const std::size_t n = x.dim(0), c = x.dim(1), h = x.dim(2), w = x.dim(3);
    const Conv2dGeometry geom{stride, padding, 1, 1};
    const std::size_t oh = conv_output_extent(h, window, geom);
    const std::size_t ow = conv_output_extent(w, window, geom);
    std::vector<double> out(n * c * oh * ow);
    // For max: the routed input index; for avg: the in-bounds cell count.
    std::vector<std::size_t> route(out.size());
    auto xd = x.data();
    for (std::size_t plane = 0; plane < n * c; ++plane) {
        const std::size_t in_base = plane * h * w;
        for (std::size_t r = 0; r < oh; ++r)
            for (std::size_t q = 0; q < ow; ++q) {
                const std::size_t oi = (plane * oh + r) * ow + q;
                double best = -std::numeric_limits<double>::infinity();
                std::size_t best_idx = 0, count = 0;
                double acc = 0.0;
                for (std::size_t dy = 0; dy < window; ++dy) {
                    const long iy = static_cast<long>(r * stride + dy) - static_cast<long>(padding);
                    if (iy < 0 || iy >= static_cast<long>(h)) continue;
                    for (std::size_t dx = 0; dx < window; ++dx) {
                        const long ix = static_cast<long>(q * stride + dx) - static_cast<long>(padding);
                        if (ix < 0 || ix >= static_cast<long>(w)) continue;
                        const std::size_t idx = in_base + static_cast<std::size_t>(iy) * w + static_cast<std::size_t>(ix);
                        const double v = xd[idx];
                        if (count == 0 || v > best) {
                            best = v;
                            best_idx = idx;
                        }
                        acc += v;
                        ++count;
                    }
                }
                if (count == 0) throw std::invalid_argument("pool2d: window covers only padding");
                if (kind == PoolKind::max) {
                    out[oi] = best;
                    route[oi] = best_idx;
                } else {
                    out[oi] = acc / static_cast<double>(count);
                    route[oi] = count;
                }
            }
    }
    return make_result({n, c, oh, ow}, std::move(out), {x},
                       [kind, route = std::move(route), n, c, h, w, oh, ow, window, stride, padding](TensorImpl& o) {
                           auto gx = input_grad(o, 0);
                           if (gx.empty()) return;
                           if (kind == PoolKind::max) {
                               for (std::size_t oi = 0; oi < route.size(); ++oi) gx[route[oi]] += o.grad[oi];
                               return;
                           }
                           for (std::size_t plane = 0; plane < n * c; ++plane)
                               for (std::size_t r = 0; r < oh; ++r)
                                   for (std::size_t q = 0; q < ow; ++q) {
                                       const std::size_t oi = (plane * oh + r) * ow + q;
                                       const double share = o.grad[oi] / static_cast<double>(route[oi]);
                                       for (std::size_t dy = 0; dy < window; ++dy) {
                                           const long iy = static_cast<long>(r * stride + dy) - static_cast<long>(padding);
                                           if (iy < 0 || iy >= static_cast<long>(h)) continue;
                                           for (std::size_t dx = 0; dx < window; ++dx) {
                                               const long ix = static_cast<long>(q * stride + dx) - static_cast<long>(padding);
                                               if (ix < 0 || ix >= static_cast<long>(w)) continue;
                                               gx[plane * h * w + static_cast<std::size_t>(iy) * w + static_cast<std::size_t>(ix)] += share;
                                           }
                                       }
                                   }
                       });
}

Tensor normalize_no_affine(const Tensor& x, double eps, std::vector<double>* batch_mean, std::vector<double>* batch_var) {
    require_rank("normalize_no_affine", x, 4);
    const std::size_t n = x.dim(0), c = x.dim(1), hw = x.dim(2) * x.dim(3);
    const std::size_t count = n * hw;
    if (count == 0) throw std::invalid_argument("normalize_no_affine: empty channel");
    std::vector<double> out(x.numel());
    std::vector<double> inv_std(c);
    std::vector<double> means(c), vars(c);
    auto xd = x.data();
    for (std::size_t ch = 0; ch < c; ++ch) {
        double m = 0.0;
        for (std::size_t i = 0; i < n; ++i)
            for (std::size_t p = 0; p < hw; ++p) m += xd[(i * c + ch) * hw + p];
        m /= static_cast<double>(count);
        double r = 0.0;
        for (std::size_t i = 0; i < n; ++i)
            for (std::size_t p = 0; p < hw; ++p) r += xd[(i * c + ch) * hw + p] - m;
        m += r / static_cast<double>(count);
        double v = 0.0;
        for (std::size_t i = 0; i < n; ++i)
            for (std::size_t p = 0; p < hw; ++p) {
                const double d = xd[(i * c + ch) * hw + p] - m;
                v += d * d;
            }
        v /= static_cast<double>(count);
        const double inv = 1.0 / std::sqrt(v + eps);
        for (std::size_t i = 0; i < n; ++i)
            for (std::size_t p = 0; p < hw; ++p) {
                const std::size_t idx = (i * c + ch) * hw + p;
                out[idx] = (xd[idx] - m) * inv;
            }
        inv_std[ch] = inv;
        means[ch] = m;
        vars[ch] = v;
    }
    if (batch_mean) *batch_mean = means;
    if (batch_var) *batch_var = vars;
    return make_result(x.shape(), std::move(out), {x}, [inv_std = std::move(inv_std), n, c, hw](TensorImpl& o) {
        auto gx = input_grad(o, 0);
        if (gx.empty()) return;
        const double count = static_cast<double>(n * hw);
        for (std::size_t ch = 0; ch < c; ++ch) {
            double mean_g = 0.0, mean_gy = 0.0;
            for (std::size_t i = 0; i < n; ++i)
                for (std::size_t p = 0; p < hw; ++p) {
                    const std::size_t idx = (i * c + ch) * hw + p;
                    mean_g += o.grad[idx];
                    mean_gy += o.grad[idx] * o.data[idx];
                }
            mean_g /= count;
            mean_gy /= count;
            for (std::size_t i = 0; i < n; ++i)
                for (std::size_t p = 0; p < hw; ++p) {
                    const std::size_t idx = (i * c + ch) * hw + p;
                    gx[idx] += inv_std[ch] * (o.grad[idx] - mean_g - o.data[idx] * mean_gy);
                }
        }
    });
}

Tensor normalize_with_stats(const Tensor& x, std::span<const double> mean, std::span<const double> var, double eps) {
    require_rank("normalize_with_stats", x, 4);
    const std::size_t n = x.dim(0), c = x.dim(1), hw = x.dim(2) * x.dim(3);
    if (mean.size() != c || var.size() != c) throw std::invalid_argument("normalize_with_stats: statistics extent mismatch");
    std::vector<double> inv_std(c);
    for (std::size_t ch = 0; ch < c; ++ch) inv_std[ch] = 1.0 / std::sqrt(var[ch] + eps);
    std::vector<double> out(x.numel());
    auto xd = x.data();
    for (std::size_t i = 0; i < n; ++i)
        for (std::size_t ch = 0; ch < c; ++ch)
            for (std::size_t p = 0; p < hw; ++p) {
                const std::size_t idx = (i * c + ch) * hw + p;
                out[idx] = (xd[idx] - mean[ch]) * inv_std[ch];
            }
    return make_result(x.shape(), std::move(out), {x}, [inv_std = std::move(inv_std), n, c, hw](TensorImpl& o) {
        auto gx = input_grad(o, 0);
        for (std::size_t i = 0; i < n && !gx.empty(); ++i)
            for (std::size_t ch = 0; ch < c; ++ch)
                for (std::size_t p = 0; p < hw; ++p) {
                    const std::size_t idx = (i * c + ch) * hw + p;
                    gx[idx] += o.grad[idx] * inv_std[ch];
                }
    });
}

Tensor softmax(const Tensor& x, std::size_t axis) {
    const AxisSplit s = split_axis(x.shape(), axis);
    if (s.extent == 0) throw std::invalid_argument("softmax over empty axis");
    std::vector<double> out(x.numel());
    auto xd = x.data();
    for (std::size_t a = 0; a < s.outer; ++a)
        for (std::size_t b = 0; b < s.inner; ++b) {
            double mx = -std::numeric_limits<double>::infinity();
            for (std::size_t k = 0; k < s.extent; ++k) mx = std::max(mx, xd[(a * s.extent + k) * s.inner + b]);
            double z = 0.0;
            for (std::size_t k = 0; k < s.extent; ++k) {
                const std::size_t idx = (a * s.extent + k) * s.inner + b;
                out[idx] = std::exp(xd[idx] - mx);
                z += out[idx];
            }
            for (std::size_t k = 0; k < s.extent; ++k) out[(a * s.extent + k) * s.inner + b] /= z;
        }
    return make_result(x.shape(), std::move(out), {x}, [s](TensorImpl& o) {
        auto gx = input_grad(o, 0);
        for (std::size_t a = 0; a < s.outer && !gx.empty(); ++a)
            for (std::size_t b = 0; b < s.inner; ++b) {
                double dot = 0.0;
                for (std::size_t k = 0; k < s.extent; ++k) {
                    const std::size_t idx = (a * s.extent + k) * s.inner + b;
                    dot += o.grad[idx] * o.data[idx];
                }
                for (std::size_t k = 0; k < s.extent; ++k) {
                    const std::size_t idx = (a * s.extent + k) * s.inner + b;
                    gx[idx] += o.data[idx] * (o.grad[idx] - dot);
                }
            }
    });
}

Tensor log_softmax(const Tensor& x, std::size_t axis) {
    const AxisSplit s = split_axis(x.shape(), axis);
    if (s.extent == 0) throw std::invalid_argument("log_softmax over empty axis");
    std::vector<double> out(x.numel());
    auto xd = x.data();
    for (std::size_t a = 0; a < s.outer; ++a)
        for (std::size_t b = 0; b < s.inner; ++b) {
            double mx = -std::numeric_limits<double>::infinity();
            for (std::size_t k = 0; k < s.extent; ++k) mx = std::max(mx, xd[(a * s.extent + k) * s.inner + b]);
            double z = 0.0;
            for (std::size_t k = 0; k < s.extent; ++k) z += std::exp(xd[(a * s.extent + k) * s.inner + b] - mx);
            const double lse = mx + std::log(z);
            for (std::size_t k = 0; k < s.extent; ++k) {
                const std::size_t idx = (a * s.extent + k) * s.inner + b;
                out[idx] = xd[idx] - lse;
            }
        }
    return make_result(x.shape(), std::move(out), {x}, [s](TensorImpl& o) {
        auto gx = input_grad(o, 0);
        for (std::size_t a = 0; a < s.outer && !gx.empty(); ++a)
            for (std::size_t b = 0; b < s.inner; ++b) {
                double total = 0.0;
                for (std::size_t k = 0; k < s.extent; ++k) total += o.grad[(a * s.extent + k) * s.inner + b];
                for (std::size_t k = 0; k < s.extent; ++k) {
                    const std::size_t idx = (a * s.extent + k) * s.inner + b;
                    gx[idx] += o.grad[idx] - std::exp(o.data[idx]) * total;
                }
            }
    });
}

Tensor concat(std::span<const Tensor> parts, std::size_t axis) {
    if (parts.empty()) throw std::invalid_argument("concat of zero tensors");
    const Shape& ref = parts.front().shape();
    if (axis >= ref.size()) throw std::invalid_argument(fmt::format("concat: axis {} invalid for {}", axis, shape_to_string(ref)));
    std::vector<std::size_t> extents;
    std::size_t total = 0;
    for (const auto& part : parts) {
        Shape a = part.shape(), b = ref;
        if (a.size() != b.size()) throw std::invalid_argument("concat: rank mismatch");
        extents.push_back(a[axis]);
        total += a[axis];
        a[axis] = b[axis] = 0;
        if (a != b) {
            throw std::invalid_argument(fmt::format("concat: shape mismatch {} vs {}", shape_to_string(part.shape()),
                                                    shape_to_string(ref)));
        }
    }
    AxisSplit s = split_axis(ref, axis);
    Shape shape = ref;
    shape[axis] = total;
    std::vector<double> out(s.outer * total * s.inner);
    std::size_t offset = 0;
    for (std::size_t pi = 0; pi < parts.size(); ++pi) {
        auto d = parts[pi].data();
        const std::size_t chunk = extents[pi] * s.inner;
        for (std::size_t a = 0; a < s.outer; ++a)
            std::copy_n(d.begin() + static_cast<long>(a * chunk), chunk,
                        out.begin() + static_cast<long>(a * total * s.inner + offset * s.inner));
        offset += extents[pi];
    }
    std::vector<Tensor> inputs(parts.begin(), parts.end());
    return make_result(std::move(shape), std::move(out), std::move(inputs),
                       [extents = std::move(extents), outer = s.outer, inner = s.inner, total](TensorImpl& o) {
                           std::size_t offset = 0;
                           for (std::size_t pi = 0; pi < extents.size(); ++pi) {
                               auto g = input_grad(o, pi);
                               const std::size_t chunk = extents[pi] * inner;
                               if (!g.empty())
                                   for (std::size_t a = 0; a < outer; ++a)
                                       for (std::size_t i = 0; i < chunk; ++i)
                                           g[a * chunk + i] += o.grad[a * total * inner + offset * inner + i];
                               offset += extents[pi];
                           }
                       });
}

Tensor select_channels(const Tensor& x, std::span<const std::size_t> channels) {
    if (x.rank() < 2) throw std::invalid_argument("select_channels: rank < 2");
    const std::size_t n = x.dim(0), c = x.dim(1);
    const std::size_t inner = x.numel() / std::max<std::size_t>(1, n * c);
    for (auto ch : channels)
        if (ch >= c) throw std::out_of_range(fmt::format("select_channels: channel {} of {}", ch, c));
    Shape shape = x.shape();
    shape[1] = channels.size();
    std::vector<double> out(n * channels.size() * inner);
    auto xd = x.data();
    for (std::size_t i = 0; i < n; ++i)
        for (std::size_t k = 0; k < channels.size(); ++k)
            std::copy_n(xd.begin() + static_cast<long>((i * c + channels[k]) * inner), inner,
                        out.begin() + static_cast<long>((i * channels.size() + k) * inner));
    std::vector<std::size_t> idx(channels.begin(), channels.end());
    return make_result(std::move(shape), std::move(out), {x}, [idx = std::move(idx), n, c, inner](TensorImpl& o) {
        auto gx = input_grad(o, 0);
        for (std::size_t i = 0; i < n && !gx.empty(); ++i)
            for (std::size_t k = 0; k < idx.size(); ++k)
                for (std::size_t p = 0; p < inner; ++p)
                    gx[(i * c + idx[k]) * inner + p] += o.grad[(i * idx.size() + k) * inner + p];
    });
}

Tensor row(const Tensor& x, std::size_t index) {
    require_rank("row", x, 2);
    const std::size_t cols = x.dim(1);
    if (index >= x.dim(0)) throw std::out_of_range(fmt::format("row {} of {}", index, x.dim(0)));
    std::vector<double> out(x.data().begin() + static_cast<long>(index * cols),
                            x.data().begin() + static_cast<long>((index + 1) * cols));
    return make_result({cols}, std::move(out), {x}, [index, cols](TensorImpl& o) {
        auto gx = input_grad(o, 0);
        for (std::size_t j = 0; j < cols && !gx.empty(); ++j) gx[index * cols + j] += o.grad[j];
    });
}

Tensor gather(const Tensor& x, std::span<const std::size_t> index) {
    auto xd = x.data();
    std::vector<double> out(index.size());
    for (std::size_t i = 0; i < index.size(); ++i) {
        if (index[i] >= xd.size()) throw std::out_of_range(fmt::format("gather: index {} of {}", index[i], xd.size()));
        out[i] = xd[index[i]];
    }
    std::vector<std::size_t> idx(index.begin(), index.end());
    return make_result({idx.size()}, std::move(out), {x}, [idx](TensorImpl& o) {
        auto gx = input_grad(o, 0);
        for (std::size_t i = 0; i < idx.size() && !gx.empty(); ++i) gx[idx[i]] += o.grad[i];
    });
}

Tensor weighted_sum(std::span<const Tensor> terms, const Tensor& weights, std::span<const std::size_t> index) {
    if (terms.empty()) throw std::invalid_argument("weighted_sum of zero terms");
    if (terms.size() != index.size()) {
        throw std::invalid_argument(fmt::format("weighted_sum: {} terms but {} weight indices", terms.size(), index.size()));
    }
    const Shape& shape = terms.front().shape();
    auto wd = weights.data();
    std::vector<double> out(terms.front().numel(), 0.0);
    for (std::size_t t = 0; t < terms.size(); ++t) {
        if (terms[t].shape() != shape) {
            throw std::invalid_argument(fmt::format("weighted_sum: term shape {} vs {}", shape_to_string(terms[t].shape()),
                                                    shape_to_string(shape)));
        }
        if (index[t] >= wd.size()) throw std::out_of_range("weighted_sum: weight index out of range");
        const double wv = wd[index[t]];
        auto d = terms[t].data();
        for (std::size_t i = 0; i < out.size(); ++i) out[i] += wv * d[i];
    }
    std::vector<Tensor> inputs(terms.begin(), terms.end());
    inputs.push_back(weights);
    std::vector<std::size_t> idx(index.begin(), index.end());
    return make_result(shape, std::move(out), std::move(inputs), [idx = std::move(idx)](TensorImpl& o) {
        const std::size_t nt = idx.size();
        const auto& wd = input_data(o, nt);
        auto gw = input_grad(o, nt);
        for (std::size_t t = 0; t < nt; ++t) {
            const auto& d = input_data(o, t);
            if (auto gt = input_grad(o, t); !gt.empty())
                for (std::size_t i = 0; i < gt.size(); ++i) gt[i] += wd[idx[t]] * o.grad[i];
            if (!gw.empty()) {
                double acc = 0.0;
                for (std::size_t i = 0; i < d.size(); ++i) acc += o.grad[i] * d[i];
                gw[idx[t]] += acc;
            }
        }
    });
}

Tensor nll_loss(const Tensor& probs, std::span<const int> labels, double label_smoothing, double floor) {
    require_rank("nll_loss", probs, 2);
    const std::size_t rows = probs.dim(0), cols = probs.dim(1);
    if (labels.size() != rows) {
        throw std::invalid_argument(fmt::format("nll_loss: {} labels for {} rows", labels.size(), rows));
    }
    for (std::size_t r = 0; r < rows; ++r)
        if (labels[r] < 0 || static_cast<std::size_t>(labels[r]) >= cols) {
            throw std::out_of_range(fmt::format("nll_loss: label {} out of range for {} classes at row {}", labels[r], cols, r));
        }
    if (rows == 0) throw std::invalid_argument("nll_loss: empty batch");
    auto pd = probs.data();
    const double s = label_smoothing;
    double total = 0.0;
    for (std::size_t r = 0; r < rows; ++r) {
        double loss = -(1.0 - s) * std::log(std::max(pd[r * cols + static_cast<std::size_t>(labels[r])], floor));
        if (s != 0.0) {
            double acc = 0.0;
            for (std::size_t c = 0; c < cols; ++c) acc += std::log(std::max(pd[r * cols + c], floor));
            loss -= s / static_cast<double>(cols) * acc;
        }
        total += loss;
    }
    std::vector<int> lab(labels.begin(), labels.end());
    return make_result({}, {total / static_cast<double>(rows)}, {probs},
                       [lab = std::move(lab), rows, cols, s, floor](TensorImpl& o) {
                           auto gp = input_grad(o, 0);
                           if (gp.empty()) return;
                           const auto& pd = input_data(o, 0);
                           const double g = o.grad[0] / static_cast<double>(rows);
                           for (std::size_t r = 0; r < rows; ++r)
                               for (std::size_t c = 0; c < cols; ++c) {
                                   const double p = pd[r * cols + c];
                                   if (p <= floor) continue;
                                   double coef = s / static_cast<double>(cols);
                                   if (static_cast<int>(c) == lab[r]) coef += 1.0 - s;
                                   gp[r * cols + c] -= g * coef / p;
                               }
                       });
}

}  // namespace mhnes
