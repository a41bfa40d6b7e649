#include "mhnes/analysis.hpp"

#include <fmt/format.h>

#include <algorithm>
#include <cmath>
#include <limits>
#include <map>
#include <numeric>
#include <stdexcept>

namespace mhnes {

namespace {

double dot(std::span<const double> a, std::span<const double> b) {
    double s = 0.0;
    for (std::size_t i = 0; i < a.size(); ++i) s += a[i] * b[i];
    return s;
}

double norm(std::span<const double> a) { return std::sqrt(dot(a, a)); }

void scale_in_place(std::vector<double>& v, double f) {
    for (double& x : v) x *= f;
}

void check_dim(std::size_t got, std::size_t want) {
    if (got != want) throw std::invalid_argument(fmt::format("operator returned {} entries, expected {}", got, want));
}

}  // namespace

double default_hvp_eps(std::span<const double> alpha) { return 1e-3 * (1.0 + norm(alpha)); }

std::vector<double> hvp_fd(const GradientFn& grad, std::span<const double> alpha, std::span<const double> v, double eps) {
    if (v.size() != alpha.size()) throw std::invalid_argument("hvp_fd: direction and point differ in size");
    const double vn = norm(v);
    if (!(vn > 0.0)) throw std::invalid_argument("hvp_fd: direction must be non-zero");
    if (!(eps > 0.0)) throw std::invalid_argument("hvp_fd: eps must be positive");
    std::vector<double> plus(alpha.begin(), alpha.end()), minus(alpha.begin(), alpha.end());
    for (std::size_t i = 0; i < v.size(); ++i) {
        plus[i] += eps * v[i] / vn;
        minus[i] -= eps * v[i] / vn;
    }
    auto gp = grad(plus);
    auto gm = grad(minus);
    check_dim(gp.size(), alpha.size());
    check_dim(gm.size(), alpha.size());
    std::vector<double> out(alpha.size());
    for (std::size_t i = 0; i < out.size(); ++i) out[i] = (gp[i] - gm[i]) / (2.0 * eps) * vn;
    return out;
}

EigResult dominant_eig(const LinearOperator& op, std::size_t dim, double tol, std::size_t max_iter, std::uint64_t seed) {
    if (dim == 0) throw std::invalid_argument("dominant_eig: dimension must be positive");
    Rng rng(seed);
    std::vector<double> v(dim);
    for (double& x : v) x = standard_normal(rng);
    scale_in_place(v, 1.0 / norm(v));
    std::vector<double> hv = op(v);
    check_dim(hv.size(), dim);

    EigResult out;
    out.value = dot(v, hv);
    out.iters = 1;
    auto residual_of = [&](double value, std::span<const double> u, std::span<const double> hu) {
        double r = 0.0;
        for (std::size_t i = 0; i < dim; ++i) r += (hu[i] - value * u[i]) * (hu[i] - value * u[i]);
        return std::sqrt(r);
    };
    out.residual = residual_of(out.value, v, hv);
    out.converged = out.residual < tol;

    while (!out.converged && out.iters < max_iter) {
        const double hn = norm(hv);
        if (hn == 0.0) {  // v lies in the null space; zero is the Ritz value
            out.value = 0.0;
            out.residual = 0.0;
            out.converged = true;
            break;
        }
        std::vector<double> next = hv;
        scale_in_place(next, 1.0 / hn);
        std::vector<double> hnext = op(next);
        check_dim(hnext.size(), dim);
        ++out.iters;

        // Orthonormal basis {v, q} of span{v, next} with H applied to both.
        const double c = dot(v, next);
        std::vector<double> q(dim), hq(dim);
        for (std::size_t i = 0; i < dim; ++i) {
            q[i] = next[i] - c * v[i];
            hq[i] = hnext[i] - c * hv[i];
        }
        const double qn = norm(q);
        double theta;
        std::vector<double> u, hu;
        if (qn < 1e-12) {
            theta = dot(next, hnext);
            u = next;
            hu = hnext;
        } else {
            scale_in_place(q, 1.0 / qn);
            scale_in_place(hq, 1.0 / qn);
            const double a = dot(v, hv), b = 0.5 * (dot(q, hv) + dot(v, hq)), d = dot(q, hq);
            const double mid = 0.5 * (a + d), rad = std::sqrt(0.25 * (a - d) * (a - d) + b * b);
            const double l1 = mid + rad, l2 = mid - rad;
            theta = std::abs(l1) >= std::abs(l2) ? l1 : l2;
            // Eigenvector of [[a, b], [b, d]] for theta.
            double y1 = b, y2 = theta - a;
            if (std::abs(y1) + std::abs(y2) < 1e-300) {
                y1 = theta - d;
                y2 = b;
            }
            if (std::abs(y1) + std::abs(y2) < 1e-300) {
                y1 = 1.0;
                y2 = 0.0;
            }
            const double yn = std::hypot(y1, y2);
            y1 /= yn;
            y2 /= yn;
            u.resize(dim);
            hu.resize(dim);
            for (std::size_t i = 0; i < dim; ++i) {
                u[i] = y1 * v[i] + y2 * q[i];
                hu[i] = y1 * hv[i] + y2 * hq[i];
            }
        }
        out.value = theta;
        out.residual = residual_of(theta, u, hu);
        out.converged = out.residual < tol;
        v = std::move(next);
        hv = std::move(hnext);
    }
    return out;
}

std::string EigTrace::to_csv() const {
    std::string out = "epoch,eig,residual,iters,converged\n";
    for (const auto& p : points)
        out += fmt::format("{},{:.17g},{:.17g},{},{}\n", p.epoch, p.eig.value, p.eig.residual, p.eig.iters,
                           p.eig.converged ? 1 : 0);
    return out;
}

EpochHook eig_trace_hook(EigTrace& trace, EigProbeOptions options, ProbeGradient gradient) {
    if (!gradient) {
        gradient = [options](SearchState& state, std::span<const double> alpha) {
            state.arch.assign(alpha);
            return arch_val_gradient(state, state.probe_x, state.probe_y, options.lambda_jsd,
                                     derive_seed(options.seed, 77));
        };
    }
    return [&trace, options, gradient](std::size_t epoch, SearchState& state) {
        const std::vector<double> alpha = state.arch.flatten();
        double eps = default_hvp_eps(alpha);
        if (state.arch.mode == ArchMode::drnas) {
            // Keep perturbed concentrations positive.
            eps = std::min(eps, 0.5 * *std::min_element(alpha.begin(), alpha.end()));
        }
        GradientFn g = [&](std::span<const double> a) { return gradient(state, a); };
        LinearOperator h = [&](std::span<const double> v) { return hvp_fd(g, alpha, v, eps); };
        EigPoint p{epoch, dominant_eig(h, alpha.size(), options.tol, options.max_iter, derive_seed(options.seed, epoch))};
        state.arch.assign(alpha);
        trace.points.push_back(p);
    };
}

const RegretSummary& RegretStudy::summary(std::size_t m) const {
    for (const auto& s : summaries)
        if (s.m == m) return s;
    throw std::out_of_range(fmt::format("regret study has no ensemble size {}", m));
}

std::string RegretStudy::to_csv() const {
    std::string out = "M,sample_id,seed,val_nll,regret\n";
    for (const auto& e : entries)
        out += fmt::format("{},{},{},{:.17g},{:.17g}\n", e.m, e.sample_id, e.seed, e.val_nll, e.regret);
    return out;
}

RegretStudy summarize_regret(std::vector<RegretEntry> entries) {
    RegretStudy out;
    std::map<std::size_t, std::vector<RegretEntry*>> by_m;
    for (auto& e : entries) by_m[e.m].push_back(&e);
    for (auto& [m, group] : by_m) {
        double best = std::numeric_limits<double>::infinity(), sum = 0.0;
        for (auto* e : group) {
            best = std::min(best, e->val_nll);
            sum += e->val_nll;
        }
        RegretSummary s;
        s.m = m;
        s.mean = sum / static_cast<double>(group.size());
        double ss = 0.0;
        for (auto* e : group) {
            e->regret = e->val_nll - best;
            ss += (e->val_nll - s.mean) * (e->val_nll - s.mean);
            s.sorted_regret.push_back(e->regret);
        }
        s.std = group.size() > 1 ? std::sqrt(ss / static_cast<double>(group.size() - 1)) : 0.0;
        std::sort(s.sorted_regret.begin(), s.sorted_regret.end());
        out.summaries.push_back(std::move(s));
    }
    out.entries = std::move(entries);
    return out;
}

RegretStudy regret_study(const DatasetBundle& data, const ModelSpec& spec, std::span<const std::size_t> m_list,
                         std::size_t samples_per_m, const TrainHyperparams& budget, std::uint64_t seed) {
    if (samples_per_m < 2) throw std::invalid_argument("regret_study: samples_per_m must be at least 2");
    std::vector<RegretEntry> entries;
    for (std::size_t m : m_list) {
        if (m == 0) throw std::invalid_argument("regret_study: ensemble size must be positive");
        ModelSpec s = spec;
        s.genotype.heads = m;
        for (std::size_t i = 0; i < samples_per_m; ++i) {
            const std::uint64_t tag = 1000 * m + i;
            auto g = sample_random_genotype(derive_seed(seed, tag), s.genotype, s.backbone);
            const std::uint64_t train_seed = derive_seed(seed, tag + 500);
            auto model = train_discrete(g, data, s, budget, train_seed, false);
            entries.push_back({m, i, train_seed, nll(ensemble_average(model.val_predictions), model.val_predictions.labels), 0.0});
        }
    }
    return summarize_regret(std::move(entries));
}

DistanceMatrix hamming_matrix(std::span<const MultiHeadGenotype> genotypes) {
    DistanceMatrix out(genotypes.size(), std::vector<std::size_t>(genotypes.size(), 0));
    for (std::size_t i = 0; i < genotypes.size(); ++i)
        for (std::size_t j = i + 1; j < genotypes.size(); ++j) out[i][j] = out[j][i] = hamming(genotypes[i], genotypes[j]);
    return out;
}

std::string distance_csv(const DistanceMatrix& matrix) {
    std::string out;
    for (std::size_t i = 0; i < matrix.size(); ++i) {
        out += i == 0 ? "" : "\n";
        for (std::size_t j = 0; j < matrix[i].size(); ++j) out += fmt::format("{}{}", j ? "," : "", matrix[i][j]);
    }
    return out + "\n";
}

}  // namespace mhnes
