#include <doctest.h>

#include <algorithm>
#include <cmath>
#include <limits>
#include <numeric>

#include "mhnes/losses.hpp"
#include "mhnes/ops.hpp"
#include "mhnes/search.hpp"

using namespace mhnes;

namespace {

ModelSpec tiny_spec(std::size_t heads = 2) {
    ModelSpec spec;
    spec.num_classes = 3;
    spec.image_size = 8;
    spec.backbone = {1, 4};
    spec.genotype.heads = heads;
    spec.genotype.cells = 1;
    spec.genotype.nodes = 2;
    spec.genotype.head_width = 4;
    return spec;
}

const DatasetBundle& tiny_data() {
    static const DatasetBundle data = gen_synthetic(3, 96, 48, 48, 8, 5);
    return data;
}

SearchHyperparams tiny_search() {
    SearchHyperparams hp;
    hp.search_epochs = 2;
    hp.warmstart_epochs = 1;
    hp.search_batch = 16;
    hp.partial = 2;
    hp.drnas_stage_epochs = 2;
    hp.drnas_warmstart_epochs = 1;
    hp.drnas_stage2_partial = 1;
    hp.eval_samples = 3;
    return hp;
}

TrainHyperparams tiny_train(std::size_t epochs = 2) {
    TrainHyperparams hp;
    hp.epochs = epochs;
    hp.batch = 32;
    return hp;
}

std::vector<std::size_t> first_n(std::size_t n) {
    std::vector<std::size_t> idx(n);
    std::iota(idx.begin(), idx.end(), 0);
    return idx;
}

ProbMatrix random_probs(std::size_t rows, std::size_t cols, double sharpness, Rng& rng) {
    ProbMatrix p{rows, cols, std::vector<double>(rows * cols)};
    for (std::size_t r = 0; r < rows; ++r) {
        double total = 0.0;
        for (std::size_t c = 0; c < cols; ++c) total += p.values[r * cols + c] = std::exp(sharpness * standard_normal(rng));
        for (std::size_t c = 0; c < cols; ++c) p.values[r * cols + c] /= total;
    }
    return p;
}

double subset_nll(const PredictionMatrix& pool, std::span<const std::size_t> members) {
    PredictionMatrix sub;
    sub.labels = pool.labels;
    for (std::size_t i : members) sub.members.push_back(pool.members[i]);
    return nll(ensemble_average(sub), sub.labels);
}

// Minimum NLL over all M-subsets, by recursion over index combinations.
double exhaustive_best(const PredictionMatrix& pool, std::size_t m) {
    double best = std::numeric_limits<double>::infinity();
    std::vector<std::size_t> pick;
    std::function<void(std::size_t)> rec = [&](std::size_t start) {
        if (pick.size() == m) {
            best = std::min(best, subset_nll(pool, pick));
            return;
        }
        for (std::size_t i = start; i < pool.size(); ++i) {
            pick.push_back(i);
            rec(i + 1);
            pick.pop_back();
        }
    };
    rec(0);
    return best;
}

}  // namespace

TEST_CASE("hyperparameter validation") {
    CHECK_NOTHROW(SearchHyperparams{}.validate());
    CHECK_NOTHROW(TrainHyperparams{}.validate());
    SearchHyperparams bad;
    bad.warmstart_epochs = bad.search_epochs;
    CHECK_THROWS_AS(bad.validate(), std::invalid_argument);
    bad = {};
    bad.a_lr = 0.0;
    CHECK_THROWS_AS(bad.validate(), std::invalid_argument);
    TrainHyperparams tbad;
    tbad.epochs = 0;
    CHECK_THROWS_AS(tbad.validate(), std::invalid_argument);
}

TEST_CASE("frozen one-hot search reduces to plain network training") {
    ModelSpec spec = tiny_spec(1);
    const auto& data = tiny_data();
    SearchHyperparams hp = tiny_search();
    hp.lambda_jsd = 0.0;
    auto genotype = sample_random_genotype(4, spec.genotype, spec.backbone);

    SearchState state = make_search_state(spec, ArchMode::pcdarts, 0, hp, 3);
    state.frozen = genotype;
    Rng rng(99);
    DiscreteNet net(genotype, spec, NormOptions::search(), rng);
    copy_parameters(net, *state.net);
    Sgd opt(net.parameters().tensors(), hp.w_momentum, hp.w_weight_decay);
    Rng noise(1);
    ForwardContext ctx{true, &noise};

    const auto before = state.arch.flatten();
    Rng batch_rng(2);
    std::size_t t = 0;
    for (int epoch = 0; epoch < 2; ++epoch) {
        for (const auto& b : epoch_batches(data.train.size(), 16, batch_rng)) {
            const double lr = cosine_lr(t++, 12, 0.1);
            auto x = data.train.images(b);
            auto y = data.train.labels_at(b);
            auto losses = bilevel_search_step(state, x, y, x, y, hp, lr, true);
            const double plain = train_step(net, opt, x, y, lr, 0.0, ctx);
            CHECK(losses.train_loss == doctest::Approx(plain).epsilon(1e-10));
            CHECK(std::abs(losses.train_loss - plain) < 1e-10);
            CHECK(std::isnan(losses.val_loss));
        }
    }
    CHECK(state.arch.flatten() == before);
    CHECK(state.steps == t);
}

TEST_CASE("warmstart steps leave the architecture bit-identical") {
    ModelSpec spec = tiny_spec();
    SearchHyperparams hp = tiny_search();
    for (ArchMode mode : {ArchMode::pcdarts, ArchMode::drnas}) {
        SearchState state = make_search_state(spec, mode, 2, hp, 8);
        const auto before = state.arch.flatten();
        auto idx = first_n(16);
        auto x = tiny_data().train.images(idx);
        auto y = tiny_data().train.labels_at(idx);
        for (int i = 0; i < 3; ++i) bilevel_search_step(state, x, y, x, y, hp, 0.1, false);
        CHECK(state.arch.flatten() == before);
        CHECK(state.steps == 3);
        bilevel_search_step(state, x, y, x, y, hp, 0.1, true);
        CHECK(state.arch.flatten() != before);
        CHECK(state.steps == 5);
    }
}

TEST_CASE("architecture gradient matches finite differences of the validation loss") {
    ModelSpec spec = tiny_spec();
    SearchHyperparams hp = tiny_search();
    auto idx = first_n(12);
    auto x = tiny_data().val.images(idx);
    auto y = tiny_data().val.labels_at(idx);
    for (ArchMode mode : {ArchMode::pcdarts, ArchMode::drnas}) {
        SearchState state = make_search_state(spec, mode, 2, hp, 21);
        // Move away from the symmetric initialization.
        Rng rng(4);
        auto a = state.arch.flatten();
        for (double& v : a) v = mode == ArchMode::drnas ? 0.5 + 1.5 * uniform01(rng) : standard_normal(rng);
        state.arch.assign(a);
        auto grad = arch_val_gradient(state, x, y, 0.3, 77);
        double worst = 0.0;
        for (std::size_t i = 0; i < a.size(); i += 3) {
            const double h = 1e-6;
            auto up = a, down = a;
            up[i] += h;
            down[i] -= h;
            double lu = 0.0, ld = 0.0;
            state.arch.assign(up);
            arch_val_gradient(state, x, y, 0.3, 77, &lu);
            state.arch.assign(down);
            arch_val_gradient(state, x, y, 0.3, 77, &ld);
            const double fd = (lu - ld) / (2 * h);
            worst = std::max(worst, std::abs(grad[i] - fd) / std::max(1e-3, std::abs(fd)));
        }
        state.arch.assign(a);
        INFO(arch_mode_name(mode));
        CHECK(worst < 1e-4);
    }
}

TEST_CASE("gradient probes do not disturb the search state") {
    ModelSpec spec = tiny_spec();
    SearchHyperparams hp = tiny_search();
    SearchState a = make_search_state(spec, ArchMode::drnas, 2, hp, 5);
    SearchState b = make_search_state(spec, ArchMode::drnas, 2, hp, 5);
    auto idx = first_n(16);
    auto x = tiny_data().train.images(idx);
    auto y = tiny_data().train.labels_at(idx);
    for (int i = 0; i < 3; ++i) {
        auto la = bilevel_search_step(a, x, y, x, y, hp, 0.05, true);
        arch_val_gradient(b, x, y, hp.lambda_jsd, 123);
        auto lb = bilevel_search_step(b, x, y, x, y, hp, 0.05, true);
        CHECK(la.train_loss == lb.train_loss);
        CHECK(la.val_loss == lb.val_loss);
    }
    CHECK(a.arch.flatten() == b.arch.flatten());
}

TEST_CASE("pcdarts search is deterministic, valid, and counts its steps") {
    ModelSpec spec = tiny_spec();
    SearchHyperparams hp = tiny_search();
    std::size_t calls = 0;
    auto r1 = pcdarts_search(tiny_data(), spec, hp, 3, [&](std::size_t epoch, SearchState& s) {
        CHECK(epoch == ++calls);
        CHECK(s.probe_x.dim(0) == 48);
    });
    auto r2 = pcdarts_search(tiny_data(), spec, hp, 3);
    CHECK(calls == hp.search_epochs);
    CHECK_NOTHROW(r1.genotype.validate());
    CHECK(r1.genotype == r2.genotype);
    CHECK(r1.arch.flatten() == r2.arch.flatten());
    CHECK(r1.steps == plan_budget(Method::pcdarts, hp, {}, tiny_data().train.size(), 48, 2).search_steps);

    ModelSpec odd = spec;
    odd.genotype.head_width = 5;
    CHECK_THROWS_AS(pcdarts_search(tiny_data(), odd, hp, 3), std::invalid_argument);
}

TEST_CASE("drnas search prunes to the kept ops and widens") {
    ModelSpec spec = tiny_spec();
    SearchHyperparams hp = tiny_search();
    std::size_t calls = 0;
    auto r = drnas_search(tiny_data(), spec, hp, 4, [&](std::size_t, SearchState&) { ++calls; });
    CHECK(calls == 2 * hp.drnas_stage_epochs);
    CHECK_NOTHROW(r.genotype.validate());
    for (const auto& ops : r.head_ops) {
        CHECK(ops.size() == 4);
        std::size_t pos = 0;
        for (OpKind op : ops) {
            auto it = std::find(spec.genotype.ops.begin() + static_cast<std::ptrdiff_t>(pos), spec.genotype.ops.end(), op);
            REQUIRE(it != spec.genotype.ops.end());
            pos = static_cast<std::size_t>(it - spec.genotype.ops.begin()) + 1;
        }
    }
    for (std::size_t h = 0; h < r.genotype.heads.size(); ++h)
        for (const auto& node : r.genotype.heads[h])
            for (OpKind op : node.ops)
                CHECK(std::find(r.head_ops[h].begin(), r.head_ops[h].end(), op) != r.head_ops[h].end());
    for (double c : r.arch.flatten()) CHECK(c >= ArchParams::concentration_floor);
    CHECK(r.steps == plan_budget(Method::drnas, hp, {}, tiny_data().train.size(), 48, 2).search_steps);
    CHECK(drnas_search(tiny_data(), spec, hp, 4).genotype == r.genotype);
}

TEST_CASE("concentration pruning keeps the top means in original order") {
    HeadArch head;
    head.ops = default_ops();
    std::vector<double> c(2 * 7, 1.0);
    // Means: op0 1, op1 3, op2 1, op3 2, op4 5, op5 1, op6 2.
    for (auto [o, v] : std::vector<std::pair<int, double>>{{1, 3}, {3, 2}, {4, 5}, {6, 2}}) c[o] = c[7 + o] = v;
    head.op_params = Tensor::from({2, 7}, c);
    CHECK(prune_by_concentration(head, 4) == std::vector<std::size_t>{1, 3, 4, 6});
    CHECK(prune_by_concentration(head, 2) == std::vector<std::size_t>{1, 4});
    // Tie between op3 and op6 resolves to the lower index.
    CHECK(prune_by_concentration(head, 3) == std::vector<std::size_t>{1, 3, 4});
    CHECK(prune_by_concentration(head, 10).size() == 7);
}

TEST_CASE("randomnas returns the lowest-nll candidate") {
    ModelSpec spec = tiny_spec();
    SearchHyperparams hp = tiny_search();
    hp.eval_samples = 1;
    auto one = randomnas_search(tiny_data(), spec, hp, 6);
    REQUIRE(one.candidates.size() == 1);
    CHECK(one.genotype == one.candidates[0]);

    hp.eval_samples = 5;
    auto r = randomnas_search(tiny_data(), spec, hp, 6);
    CHECK(r.candidate_nll.size() == 5);
    const auto best = std::min_element(r.candidate_nll.begin(), r.candidate_nll.end()) - r.candidate_nll.begin();
    CHECK(r.genotype == r.candidates[static_cast<std::size_t>(best)]);
    CHECK(r.steps == plan_budget(Method::randomnas, hp, {}, 96, 48, 2).search_steps);
    CHECK(r.eval_batches == plan_budget(Method::randomnas, hp, {}, 96, 48, 2).eval_batches);
    CHECK(randomnas_search(tiny_data(), spec, hp, 6).candidate_nll == r.candidate_nll);

    CHECK(argmin_first(std::vector<double>{3.0, 1.0, 2.0, 1.0}) == 1);
    CHECK(argmin_first(std::vector<double>{0.5}) == 0);
    CHECK_THROWS(argmin_first(std::vector<double>{}));
}

TEST_CASE("discrete training lowers the loss and is deterministic") {
    ModelSpec spec = tiny_spec();
    auto data = gen_synthetic(3, 240, 60, 60, 8, 2);
    auto g = sample_random_genotype(1, spec.genotype, spec.backbone);
    TrainHyperparams hp = tiny_train(5);
    hp.lr = 0.05;
    auto a = train_discrete(g, data, spec, hp, 10);
    REQUIRE(a.epoch_loss.size() == 5);
    for (std::size_t e = 1; e < 5; ++e) CHECK(a.epoch_loss[e] < a.epoch_loss[e - 1]);
    CHECK(a.steps == 5 * steps_per_epoch(240, 32));
    auto b = train_discrete(g, data, spec, hp, 10);
    CHECK(a.test.nll == b.test.nll);
    CHECK(a.val.ece == b.val.ece);
    CHECK(a.train.error == b.train.error);
    CHECK(a.epoch_loss == b.epoch_loss);
    CHECK(a.params == a.net->parameters().count());
    CHECK(a.val.member_nll.size() == 2);
}

TEST_CASE("single-head ensemble loss is twice the cross-entropy with the same gradient direction") {
    ModelSpec spec = tiny_spec(1);
    auto g = sample_random_genotype(2, spec.genotype, spec.backbone);
    Rng rng(5);
    DiscreteNet net(g, spec, NormOptions::train(), rng);
    auto idx = first_n(20);
    auto x = tiny_data().train.images(idx);
    auto y = tiny_data().train.labels_at(idx);
    ForwardContext ctx{true, nullptr};
    auto params = net.parameters().tensors();

    auto probs = net.forward(x, ctx);
    Tensor ens = ensemble_train_loss(probs, ensemble_average(probs), y);
    backward(ens);
    std::vector<double> g_ens;
    for (auto& p : params) g_ens.insert(g_ens.end(), p.grad().begin(), p.grad().end());
    for (auto& p : params) p.zero_grad();

    probs = net.forward(x, ctx);
    Tensor ce = nll_loss(probs[0], y);
    backward(ce);
    std::vector<double> g_ce;
    for (auto& p : params) g_ce.insert(g_ce.end(), p.grad().begin(), p.grad().end());

    CHECK(ens.item() == doctest::Approx(2 * ce.item()).epsilon(1e-12));
    double dot = 0, na = 0, nb = 0;
    for (std::size_t i = 0; i < g_ens.size(); ++i) {
        dot += g_ens[i] * g_ce[i];
        na += g_ens[i] * g_ens[i];
        nb += g_ce[i] * g_ce[i];
    }
    CHECK(std::abs(dot / std::sqrt(na * nb) - 1.0) < 1e-10);
}

TEST_CASE("forward selection against exhaustive search") {
    Rng rng(17);
    int optimal = 0;
    for (int inst = 0; inst < 50; ++inst) {
        const std::size_t pool_size = 3 + inst % 4, m = 1 + inst % 3, rows = 40, cols = 4;
        if (m > pool_size) continue;
        PredictionMatrix pool;
        for (std::size_t i = 0; i < rows; ++i) pool.labels.push_back(static_cast<int>(uniform_index(rng, cols)));
        for (std::size_t i = 0; i < pool_size; ++i) pool.members.push_back(random_probs(rows, cols, 1.5, rng));
        auto picked = forward_select(pool, m);
        CHECK(picked.size() == m);
        std::vector<std::size_t> sorted = picked;
        std::sort(sorted.begin(), sorted.end());
        CHECK(std::adjacent_find(sorted.begin(), sorted.end()) == sorted.end());
        const double greedy = subset_nll(pool, picked), best = exhaustive_best(pool, m);
        CHECK(greedy <= 1.05 * best);
        optimal += greedy == best;
        if (m == 1) CHECK(greedy == best);
    }
    CHECK(optimal > 0);
}

TEST_CASE("forward selection on constructed pools") {
    // Member 1 puts more mass on the true label on every row.
    PredictionMatrix dom;
    dom.labels = {0, 1, 1};
    dom.members.push_back({3, 2, {0.6, 0.4, 0.5, 0.5, 0.3, 0.7}});
    dom.members.push_back({3, 2, {0.9, 0.1, 0.2, 0.8, 0.1, 0.9}});
    dom.members.push_back({3, 2, {0.5, 0.5, 0.5, 0.5, 0.5, 0.5}});
    CHECK(forward_select(dom, 1)[0] == 1);

    // Two specialists, perfect on disjoint halves and uninformative elsewhere,
    // and one mediocre generalist listed first.
    PredictionMatrix spec;
    spec.labels = {0, 1, 0, 1};
    spec.members.push_back({4, 2, {0.6, 0.4, 0.4, 0.6, 0.6, 0.4, 0.4, 0.6}});
    spec.members.push_back({4, 2, {1.0, 0.0, 0.0, 1.0, 0.5, 0.5, 0.5, 0.5}});
    spec.members.push_back({4, 2, {0.5, 0.5, 0.5, 0.5, 1.0, 0.0, 0.0, 1.0}});
    auto picked = forward_select(spec, 2);
    std::sort(picked.begin(), picked.end());
    CHECK(picked == std::vector<std::size_t>{1, 2});
    CHECK(subset_nll(spec, picked) == doctest::Approx(exhaustive_best(spec, 2)).epsilon(1e-15));

    // Identical members tie; the lowest index wins.
    PredictionMatrix tie;
    tie.labels = {0};
    tie.members.assign(3, {1, 2, {0.7, 0.3}});
    CHECK(forward_select(tie, 2) == std::vector<std::size_t>{0, 1});
    CHECK(forward_select(tie, 3, true) == std::vector<std::size_t>{0, 0, 0});
    CHECK_THROWS_AS(forward_select(tie, 4), std::invalid_argument);
    CHECK_THROWS_AS(forward_select(tie, 0), std::invalid_argument);
}

TEST_CASE("method names round trip") {
    for (Method m : {Method::pcdarts, Method::drnas, Method::randomnas, Method::mhe_rs, Method::mhe_sample, Method::nes_rs,
                     Method::deepens_sample, Method::deepens_rs, Method::hyperdeepens_rs})
        CHECK(method_from_name(method_name(m)) == m);
    CHECK_THROWS_AS(method_from_name("bohb"), std::invalid_argument);
}

TEST_CASE("budget plan: random-search pools cost at least three one-shot searches at default settings") {
    SearchHyperparams shp;
    TrainHyperparams thp;
    const std::size_t n_train = 2000, n_val = 500;
    const auto nes = plan_budget(Method::nes_rs, shp, thp, n_train, n_val, 3);
    const auto drnas = plan_budget(Method::drnas, shp, thp, n_train, n_val, 3);
    const auto pc = plan_budget(Method::pcdarts, shp, thp, n_train, n_val, 3);
    // Hand count: 15 search steps and 15 train steps per epoch.
    CHECK(drnas.search_steps == 2 * 15 * (10 + 2 * 15));
    CHECK(pc.search_steps == 15 * (15 + 2 * 35));
    CHECK(nes.train_steps == 25 * 100 * 15);
    CHECK(nes.total_steps() >= 3 * drnas.total_steps());
    CHECK(pc.total_steps() <= (shp.search_epochs * 2 + thp.epochs) * 15);
}

TEST_CASE("baselines consume exactly their planned steps") {
    ModelSpec spec = tiny_spec();
    TrainHyperparams hp = tiny_train(1);
    const auto& data = tiny_data();
    for (Method kind : {Method::deepens_sample, Method::deepens_rs, Method::nes_rs, Method::hyperdeepens_rs,
                        Method::mhe_sample, Method::mhe_rs}) {
        INFO(method_name(kind));
        auto r = build_baseline(kind, data, spec, hp, 3, 2);
        CHECK(r.budget == plan_budget(kind, {}, hp, data.train.size(), data.val.size(), 2, 3));
        const bool multi_head = kind == Method::mhe_rs || kind == Method::mhe_sample;
        CHECK(r.ensemble.models.size() == (multi_head ? 1 : 2));
        CHECK(r.ensemble.predict(data.val, 256, 1).size() == 2);
        CHECK(std::isfinite(r.test.nll));
    }
    CHECK_THROWS_AS(build_baseline(Method::pcdarts, data, spec, hp, 3, 2), std::invalid_argument);
}

TEST_CASE("identical-seed deep ensemble equals its single member") {
    ModelSpec spec = tiny_spec(1);
    auto g = sample_random_genotype(8, spec.genotype, spec.backbone);
    TrainHyperparams hp = tiny_train(1);
    Ensemble ens;
    for (int i = 0; i < 3; ++i) ens.models.push_back(std::move(train_discrete(g, tiny_data(), spec, hp, 4, false).net));
    auto single = train_discrete(g, tiny_data(), spec, hp, 4, false);
    auto e = evaluate(ens.predict(tiny_data().test, 256, 1));
    CHECK(e.nll == doctest::Approx(single.test.nll).epsilon(1e-12));
    CHECK(e.error == single.test.error);
    CHECK(e.ece == doctest::Approx(single.test.ece).epsilon(1e-12));
}
