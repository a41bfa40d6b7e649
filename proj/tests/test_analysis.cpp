#include <doctest.h>

#include <Eigen/Dense>
#include <cmath>

#include "mhnes/analysis.hpp"

using namespace mhnes;

namespace {

GradientFn quadratic_grad(const Eigen::MatrixXd& a) {
    return [a](std::span<const double> x) {
        Eigen::VectorXd v = Eigen::Map<const Eigen::VectorXd>(x.data(), static_cast<Eigen::Index>(x.size()));
        Eigen::VectorXd g = a * v;
        return std::vector<double>(g.data(), g.data() + g.size());
    };
}

LinearOperator matrix_op(const Eigen::MatrixXd& a) {
    return [a](std::span<const double> x) {
        Eigen::VectorXd v = Eigen::Map<const Eigen::VectorXd>(x.data(), static_cast<Eigen::Index>(x.size()));
        Eigen::VectorXd y = a * v;
        return std::vector<double>(y.data(), y.data() + y.size());
    };
}

Eigen::MatrixXd random_symmetric(std::size_t n, Rng& rng) {
    Eigen::MatrixXd m(n, n);
    for (std::size_t i = 0; i < n; ++i)
        for (std::size_t j = 0; j < n; ++j) m(i, j) = standard_normal(rng);
    return 0.5 * (m + m.transpose());
}

double dense_dominant(const Eigen::MatrixXd& a) {
    Eigen::SelfAdjointEigenSolver<Eigen::MatrixXd> es(a);
    const auto& ev = es.eigenvalues();
    double best = ev(0);
    for (Eigen::Index i = 1; i < ev.size(); ++i)
        if (std::abs(ev(i)) > std::abs(best)) best = ev(i);
    return best;
}

}  // namespace

TEST_CASE("hvp on quadratics and linear losses") {
    Eigen::MatrixXd d(2, 2);
    d << 3, 0, 0, 1;
    std::vector<double> alpha{0.4, -1.3};
    auto h = hvp_fd(quadratic_grad(d), alpha, std::vector<double>{1, 0}, default_hvp_eps(alpha));
    CHECK(std::abs(h[0] - 3) < 1e-6);
    CHECK(std::abs(h[1]) < 1e-6);

    Eigen::MatrixXd a(2, 2);
    a << 2, 1, 1, 2;
    std::vector<double> v{0.3, -2.0};
    h = hvp_fd(quadratic_grad(a), alpha, v, 1e-3);
    CHECK(std::abs(h[0] - (2 * 0.3 - 2.0)) < 1e-6);
    CHECK(std::abs(h[1] - (0.3 - 4.0)) < 1e-6);

    GradientFn linear = [](std::span<const double>) { return std::vector<double>{1.5, -0.5}; };
    h = hvp_fd(linear, alpha, v, 1e-3);
    CHECK(std::abs(h[0]) < 1e-6);
    CHECK(std::abs(h[1]) < 1e-6);
    CHECK_THROWS_AS(hvp_fd(linear, alpha, std::vector<double>{0, 0}, 1e-3), std::invalid_argument);

    // Random quadratics: relative error within 10 eps.
    Rng rng(3);
    for (int t = 0; t < 20; ++t) {
        auto m = random_symmetric(6, rng);
        std::vector<double> x(6), dir(6);
        for (auto& e : x) e = standard_normal(rng);
        for (auto& e : dir) e = standard_normal(rng);
        const double eps = default_hvp_eps(x);
        auto got = hvp_fd(quadratic_grad(m), x, dir, eps);
        Eigen::VectorXd want = m * Eigen::Map<Eigen::VectorXd>(dir.data(), 6);
        double err = 0;
        for (int i = 0; i < 6; ++i) err = std::max(err, std::abs(got[static_cast<std::size_t>(i)] - want(i)));
        CHECK(err <= 10 * eps * want.cwiseAbs().maxCoeff());
    }
}

TEST_CASE("dominant eigenvalue of small operators") {
    auto id = dominant_eig([](std::span<const double> x) { return std::vector<double>(x.begin(), x.end()); }, 5);
    CHECK(id.value == doctest::Approx(1.0).epsilon(1e-12));
    CHECK(id.converged);
    Eigen::MatrixXd d(2, 2);
    d << 3, 0, 0, 1;
    auto r = dominant_eig(matrix_op(d), 2);
    CHECK(std::abs(r.value - 3) < 1e-6);
    Eigen::MatrixXd neg(3, 3);
    neg << -5, 0, 0, 0, 2, 0, 0, 0, 1;
    CHECK(std::abs(dominant_eig(matrix_op(neg), 3).value + 5) < 1e-6);
    auto zero = dominant_eig([](std::span<const double> x) { return std::vector<double>(x.size(), 0.0); }, 4);
    CHECK(zero.value == 0.0);
    CHECK_THROWS(dominant_eig(matrix_op(d), 0));
}

TEST_CASE("dominant eigenvalue matches a dense solver on random symmetric matrices") {
    Rng rng(11);
    for (int t = 0; t < 100; ++t) {
        auto m = random_symmetric(10, rng);
        const double want = dense_dominant(m);
        auto got = dominant_eig(matrix_op(m), 10, 1e-6, 200, static_cast<std::uint64_t>(t));
        INFO("matrix ", t);
        CHECK(std::abs(got.value - want) <= 1e-6 * std::abs(want));
    }
}

TEST_CASE("non-convergence is flagged, not thrown") {
    Eigen::MatrixXd m(3, 3);
    m << 1, 0, 0, 0, 0.999, 0, 0, 0, -0.5;
    auto r = dominant_eig(matrix_op(m), 3, 1e-14, 3, 1);
    CHECK(r.iters == 3);
    CHECK_FALSE(r.converged);
    CHECK(std::isfinite(r.value));
}

TEST_CASE("dominant eigenvalue is seed-invariant given a spectral gap") {
    Rng rng(5);
    for (int t = 0; t < 10; ++t) {
        auto m = random_symmetric(8, rng);
        Eigen::SelfAdjointEigenSolver<Eigen::MatrixXd> es(m);
        Eigen::VectorXd ev = es.eigenvalues().cwiseAbs();
        std::vector<double> mags(ev.data(), ev.data() + ev.size());
        std::sort(mags.rbegin(), mags.rend());
        if (mags[0] - mags[1] <= 0.1) continue;
        const double first = dominant_eig(matrix_op(m), 8, 1e-8, 500, 0).value;
        for (std::uint64_t s = 1; s < 5; ++s) CHECK(std::abs(dominant_eig(matrix_op(m), 8, 1e-8, 500, s).value - first) < 1e-6);
    }
}

namespace {

ModelSpec tiny_spec() {
    ModelSpec spec;
    spec.num_classes = 3;
    spec.image_size = 8;
    spec.backbone = {1, 4};
    spec.genotype.heads = 2;
    spec.genotype.cells = 1;
    spec.genotype.nodes = 2;
    spec.genotype.head_width = 4;
    return spec;
}

SearchHyperparams tiny_search() {
    SearchHyperparams hp;
    hp.search_epochs = 3;
    hp.warmstart_epochs = 1;
    hp.search_batch = 16;
    hp.partial = 2;
    hp.drnas_stage_epochs = 2;
    hp.drnas_warmstart_epochs = 1;
    hp.drnas_stage2_partial = 1;
    return hp;
}

}  // namespace

TEST_CASE("eigenvalue tracing does not perturb the search") {
    auto data = gen_synthetic(3, 96, 48, 48, 8, 5);
    for (bool drnas : {false, true}) {
        INFO("drnas ", drnas);
        EigTrace trace;
        EigProbeOptions opt;
        opt.max_iter = 4;
        auto hook = eig_trace_hook(trace, opt);
        SearchResult traced, plain;
        if (drnas) {
            traced = drnas_search(data, tiny_spec(), tiny_search(), 2, hook);
            plain = drnas_search(data, tiny_spec(), tiny_search(), 2);
        } else {
            traced = pcdarts_search(data, tiny_spec(), tiny_search(), 2, hook);
            plain = pcdarts_search(data, tiny_spec(), tiny_search(), 2);
        }
        CHECK(traced.genotype == plain.genotype);
        CHECK(traced.arch.flatten() == plain.arch.flatten());
        CHECK(trace.points.size() == (drnas ? 4 : 3));
        for (std::size_t i = 0; i < trace.points.size(); ++i) {
            CHECK(trace.points[i].epoch == i + 1);
            CHECK(std::isfinite(trace.points[i].eig.value));
        }
        CHECK(trace.to_csv().rfind("epoch,eig,residual,iters,converged\n", 0) == 0);
    }
}

TEST_CASE("tracing a frozen quadratic surrogate gives a constant trace") {
    auto data = gen_synthetic(3, 96, 48, 48, 8, 5);
    EigTrace trace;
    ProbeGradient surrogate = [](SearchState&, std::span<const double> a) {
        std::vector<double> g(a.size());
        for (std::size_t i = 0; i < a.size(); ++i) g[i] = (i == 0 ? 4.0 : 1.0 + 1e-3 * static_cast<double>(i % 7)) * a[i];
        return g;
    };
    EigProbeOptions opt;
    opt.tol = 1e-6;
    opt.max_iter = 200;
    pcdarts_search(data, tiny_spec(), tiny_search(), 1, eig_trace_hook(trace, opt, surrogate));
    REQUIRE(trace.points.size() == 3);
    for (const auto& p : trace.points) CHECK(p.eig.value == doctest::Approx(4.0).epsilon(1e-6));
}

TEST_CASE("regret summaries") {
    std::vector<RegretEntry> entries{{1, 0, 1, 0.9, 0}, {1, 1, 2, 0.7, 0}, {1, 2, 3, 1.1, 0}, {3, 0, 4, 0.5, 0}, {3, 1, 5, 0.6, 0}};
    auto study = summarize_regret(entries);
    const auto& s1 = study.summary(1);
    CHECK(s1.mean == doctest::Approx(0.9));
    CHECK(s1.std == doctest::Approx(0.2));
    CHECK(s1.sorted_regret == std::vector<double>{0.0, 0.9 - 0.7, 1.1 - 0.7});
    for (std::size_t m : {1u, 3u}) {
        int zeros = 0;
        for (const auto& e : study.entries)
            if (e.m == m) {
                CHECK(e.regret >= 0.0);
                zeros += e.regret == 0.0;
            }
        CHECK(zeros == 1);
    }
    CHECK_THROWS(study.summary(2));
    CHECK(study.to_csv().rfind("M,sample_id,seed,val_nll,regret\n1,0,1,", 0) == 0);
}

TEST_CASE("regret study trains every sample deterministically") {
    auto data = gen_synthetic(3, 64, 32, 32, 8, 5);
    TrainHyperparams budget;
    budget.epochs = 1;
    budget.batch = 32;
    std::vector<std::size_t> ms{1, 2};
    auto a = regret_study(data, tiny_spec(), ms, 2, budget, 9);
    auto b = regret_study(data, tiny_spec(), ms, 2, budget, 9);
    REQUIRE(a.entries.size() == 4);
    for (std::size_t i = 0; i < 4; ++i) CHECK(a.entries[i].val_nll == b.entries[i].val_nll);
    CHECK(a.summaries.size() == 2);
    CHECK_THROWS_AS(regret_study(data, tiny_spec(), ms, 1, budget, 9), std::invalid_argument);
}

TEST_CASE("hamming matrix") {
    GenotypeSpec spec;
    std::vector<MultiHeadGenotype> same(3, sample_random_genotype(1, spec, {}));
    for (const auto& row : hamming_matrix(same))
        for (auto v : row) CHECK(v == 0);

    std::vector<MultiHeadGenotype> gs;
    for (std::uint64_t s = 0; s < 6; ++s) gs.push_back(sample_random_genotype(s, spec, {}));
    auto m = hamming_matrix(gs);
    for (std::size_t i = 0; i < gs.size(); ++i) {
        CHECK(m[i][i] == 0);
        for (std::size_t j = 0; j < gs.size(); ++j) {
            CHECK(m[i][j] == m[j][i]);
            // Slot scan: every (head, node, input/op) position.
            std::size_t naive = 0;
            for (std::size_t h = 0; h < spec.heads; ++h)
                for (std::size_t n = 0; n < spec.nodes; ++n)
                    for (std::size_t k = 0; k < 2; ++k)
                        naive += gs[i].heads[h][n].inputs[k] != gs[j].heads[h][n].inputs[k] ||
                                 gs[i].heads[h][n].ops[k] != gs[j].heads[h][n].ops[k];
            CHECK(m[i][j] == naive);
        }
    }
    auto csv = distance_csv(m);
    CHECK(std::count(csv.begin(), csv.end(), '\n') == 6);
    GenotypeSpec other = spec;
    other.heads = 2;
    gs.push_back(sample_random_genotype(1, other, {}));
    CHECK_THROWS_AS(hamming_matrix(gs), std::invalid_argument);
}
