#include "mhnes/search.hpp"

#include <fmt/format.h>

#include <algorithm>
#include <cmath>
#include <limits>
#include <numeric>
#include <stdexcept>

#include "mhnes/dirichlet.hpp"
#include "mhnes/losses.hpp"
#include "mhnes/ops.hpp"

namespace mhnes {

namespace {

void require(bool ok, const std::string& what) {
    if (!ok) throw std::invalid_argument(what);
}

void check_divisible(const ModelSpec& spec, std::size_t partial) {
    if (partial > 0 && spec.genotype.head_width % partial != 0) {
        throw std::invalid_argument(
            fmt::format("head width {} is not divisible by partial-channel factor {}", spec.genotype.head_width, partial));
    }
}

void append_rows(ProbMatrix& dst, const Tensor& probs) {
    dst.cols = probs.dim(1);
    dst.rows += probs.dim(0);
    dst.values.insert(dst.values.end(), probs.data().begin(), probs.data().end());
}

template <typename Forward>
PredictionMatrix predict_batches(const ImageSet& data, std::size_t batch, Forward&& forward) {
    PredictionMatrix out;
    out.labels = data.labels;
    NoGradGuard guard;
    for (std::size_t start = 0; start < data.size(); start += batch) {
        std::vector<std::size_t> idx(std::min(batch, data.size() - start));
        std::iota(idx.begin(), idx.end(), start);
        auto probs = forward(data.images(idx));
        if (out.members.empty()) out.members.resize(probs.size());
        for (std::size_t m = 0; m < probs.size(); ++m) append_rows(out.members[m], probs[m]);
    }
    return out;
}

std::size_t ceil_div(std::size_t a, std::size_t b) { return (a + b - 1) / b; }

Adam make_arch_optimizer(const ArchParams& arch, const SearchHyperparams& hp) {
    return Adam(arch.tensors(), hp.a_beta1, hp.a_beta2, hp.a_weight_decay);
}

struct SearchData {
    ImageSet train, val;
};

SearchData search_split(const DatasetBundle& data, std::uint64_t seed) {
    auto [a, b] = split_half(data.train, derive_seed(seed, 21));
    return {std::move(a), std::move(b)};
}

void set_probe(SearchState& state, const ImageSet& val) {
    std::vector<std::size_t> idx(std::min<std::size_t>(256, val.size()));
    std::iota(idx.begin(), idx.end(), 0);
    state.probe_x = val.images(idx);
    state.probe_y = val.labels_at(idx);
}

// Runs `epochs` bilevel epochs with the architecture frozen for the first `warmstart`.
void run_stage(SearchState& state, const SearchData& data, std::size_t epochs, std::size_t warmstart,
               const SearchHyperparams& hp, Rng& batch_rng, std::size_t& epoch_counter, const EpochHook& hook,
               std::vector<double>& trace) {
    const std::size_t spe = steps_per_epoch(data.train.size(), hp.search_batch);
    const std::size_t total = epochs * spe;
    std::size_t t = 0;
    for (std::size_t e = 0; e < epochs; ++e) {
        auto train_batches = epoch_batches(data.train.size(), hp.search_batch, batch_rng);
        auto val_batches = epoch_batches(data.val.size(), hp.search_batch, batch_rng);
        double loss_sum = 0.0;
        for (std::size_t s = 0; s < spe; ++s) {
            const auto& tb = train_batches[s];
            const auto& vb = val_batches[s % val_batches.size()];
            auto losses = bilevel_search_step(state, data.train.images(tb), data.train.labels_at(tb), data.val.images(vb),
                                              data.val.labels_at(vb), hp, cosine_lr(t, total, hp.w_lr), e >= warmstart);
            loss_sum += losses.train_loss;
            ++t;
        }
        trace.push_back(loss_sum / static_cast<double>(spe));
        ++epoch_counter;
        if (hook) hook(epoch_counter, state);
    }
}

GenotypeSpec single_head(const GenotypeSpec& spec) {
    GenotypeSpec out = spec;
    out.heads = 1;
    return out;
}

double model_val_nll(const TrainedModel& model) {
    return nll(ensemble_average(model.val_predictions), model.val_predictions.labels);
}

}  // namespace

void SearchHyperparams::validate() const {
    require(search_epochs >= 1, "search.search_epochs must be at least 1");
    require(search_batch >= 1, "search.search_batch must be at least 1");
    require(w_lr > 0 && a_lr > 0, "search learning rates must be positive");
    require(w_momentum >= 0 && w_momentum < 1, "search.w_momentum must be in [0, 1)");
    require(w_weight_decay >= 0 && a_weight_decay >= 0, "search weight decay must be non-negative");
    require(a_beta1 >= 0 && a_beta1 < 1 && a_beta2 >= 0 && a_beta2 < 1, "search Adam betas must be in [0, 1)");
    require(warmstart_epochs < search_epochs, "search.warmstart_epochs must be below search_epochs");
    require(drnas_stage_epochs >= 1, "search.drnas_stage_epochs must be at least 1");
    require(drnas_warmstart_epochs < drnas_stage_epochs, "search.drnas_warmstart_epochs must be below drnas_stage_epochs");
    require(drnas_keep_ops >= 1, "search.drnas_keep_ops must be at least 1");
    require(lambda_jsd >= 0, "search.lambda_jsd must be non-negative");
    require(eval_samples >= 1, "search.eval_samples must be at least 1");
}

void TrainHyperparams::validate() const {
    require(epochs >= 1, "train.epochs must be at least 1");
    require(batch >= 1, "train.batch must be at least 1");
    require(lr > 0, "train.lr must be positive");
    require(momentum >= 0 && momentum < 1, "train.momentum must be in [0, 1)");
    require(weight_decay >= 0, "train.weight_decay must be non-negative");
    require(label_smoothing >= 0 && label_smoothing < 1, "train.label_smoothing must be in [0, 1)");
}

SearchState make_search_state(const ModelSpec& spec, ArchMode mode, std::size_t partial, const SearchHyperparams& hp,
                              std::uint64_t seed, std::vector<std::vector<OpKind>> head_ops) {
    check_divisible(spec, partial);
    SearchState state;
    Rng init(derive_seed(seed, 11));
    state.arch = ArchParams::init(mode, spec.genotype.heads, spec.genotype.nodes, spec.genotype.ops, init);
    state.net = std::make_unique<Supernet>(spec, partial, NormOptions::search(), init, std::move(head_ops));
    state.w_opt = std::make_unique<Sgd>(state.net->parameters().tensors(), hp.w_momentum, hp.w_weight_decay);
    state.a_opt = std::make_unique<Adam>(make_arch_optimizer(state.arch, hp));
    state.sample_rng.seed(derive_seed(seed, 12));
    state.noise_rng.seed(derive_seed(seed, 13));
    return state;
}

std::vector<EdgeWeights> search_edge_weights(SearchState& state) {
    if (state.frozen) return genotype_edge_weights(*state.frozen, state.net->head_ops());
    if (state.arch.mode != ArchMode::drnas) return continuous_edge_weights(state.arch);
    std::vector<EdgeWeights> out;
    for (const auto& head : state.arch.heads) out.push_back({sample_dirichlet(head.op_params, state.sample_rng), Tensor()});
    return out;
}

StepLosses bilevel_search_step(SearchState& state, const Tensor& train_x, std::span<const int> train_y,
                               const Tensor& val_x, std::span<const int> val_y, const SearchHyperparams& hp, double lr,
                               bool update_arch) {
    StepLosses out;
    out.val_loss = std::numeric_limits<double>::quiet_NaN();
    ForwardContext ctx{true, &state.noise_rng};
    if (update_arch && !state.frozen) {
        state.arch.zero_grad();
        auto weights = search_edge_weights(state);
        auto probs = state.net->forward(val_x, weights, ctx);
        Tensor loss = arch_val_loss(probs, ensemble_average(probs), val_y, hp.lambda_jsd);
        backward(loss);
        state.a_opt->step(hp.a_lr);
        if (state.arch.mode == ArchMode::drnas) state.arch.clamp_concentrations();
        out.val_loss = loss.item();
        ++state.steps;
    }
    state.w_opt->zero_grad();
    std::vector<EdgeWeights> weights;
    {
        NoGradGuard guard;
        weights = search_edge_weights(state);
    }
    auto probs = state.net->forward(train_x, weights, ctx);
    Tensor loss = ensemble_train_loss(probs, ensemble_average(probs), train_y);
    backward(loss);
    state.w_opt->step(lr);
    out.train_loss = loss.item();
    ++state.steps;
    return out;
}

std::vector<double> arch_val_gradient(SearchState& state, const Tensor& x, std::span<const int> y, double lambda_jsd,
                                      std::uint64_t draw_seed, double* loss_out) {
    auto tensors = state.arch.tensors();
    std::vector<std::vector<double>> saved;
    for (auto& t : tensors) saved.push_back(t.impl()->grad);
    state.arch.zero_grad();

    Rng noise(derive_seed(draw_seed, 1));
    Rng sample(derive_seed(draw_seed, 2));
    std::swap(state.sample_rng, sample);
    ForwardContext ctx{true, &noise};
    auto weights = search_edge_weights(state);
    std::swap(state.sample_rng, sample);

    auto probs = state.net->forward(x, weights, ctx);
    Tensor loss = arch_val_loss(probs, ensemble_average(probs), y, lambda_jsd);
    backward(loss);
    if (loss_out) *loss_out = loss.item();
    auto grad = state.arch.flatten_grad();

    for (std::size_t i = 0; i < tensors.size(); ++i) tensors[i].impl()->grad = std::move(saved[i]);
    state.w_opt->zero_grad();
    return grad;
}

std::vector<std::size_t> prune_by_concentration(const HeadArch& head, std::size_t keep) {
    const std::size_t edges = head.op_params.dim(0), n_ops = head.op_params.dim(1);
    keep = std::min(keep, n_ops);
    std::vector<double> mean(n_ops, 0.0);
    auto c = head.op_params.data();
    for (std::size_t e = 0; e < edges; ++e)
        for (std::size_t o = 0; o < n_ops; ++o) mean[o] += c[e * n_ops + o] / static_cast<double>(edges);
    std::vector<std::size_t> order(n_ops);
    std::iota(order.begin(), order.end(), 0);
    std::stable_sort(order.begin(), order.end(), [&](std::size_t a, std::size_t b) { return mean[a] > mean[b]; });
    order.resize(keep);
    std::sort(order.begin(), order.end());
    return order;
}

std::size_t argmin_first(std::span<const double> values) {
    if (values.empty()) throw std::invalid_argument("argmin_first: empty input");
    std::size_t best = 0;
    for (std::size_t i = 1; i < values.size(); ++i)
        if (values[i] < values[best]) best = i;
    return best;
}

SearchResult pcdarts_search(const DatasetBundle& data, const ModelSpec& spec, const SearchHyperparams& hp,
                            std::uint64_t seed, const EpochHook& hook) {
    hp.validate();
    auto split = search_split(data, seed);
    SearchState state = make_search_state(spec, ArchMode::pcdarts, hp.partial, hp, seed);
    set_probe(state, split.val);
    Rng batch_rng(derive_seed(seed, 22));
    SearchResult out;
    std::size_t epoch = 0;
    run_stage(state, split, hp.search_epochs, hp.warmstart_epochs, hp, batch_rng, epoch, hook, out.epoch_train_loss);
    out.genotype = discretize(state.arch, spec.genotype, spec.backbone);
    out.head_ops = state.net->head_ops();
    out.steps = state.steps;
    out.arch = state.arch.clone();
    return out;
}

SearchResult drnas_search(const DatasetBundle& data, const ModelSpec& spec, const SearchHyperparams& hp,
                          std::uint64_t seed, const EpochHook& hook) {
    hp.validate();
    check_divisible(spec, hp.drnas_stage2_partial);
    auto split = search_split(data, seed);
    SearchState state = make_search_state(spec, ArchMode::drnas, hp.partial, hp, seed);
    set_probe(state, split.val);
    Rng batch_rng(derive_seed(seed, 22));
    SearchResult out;
    std::size_t epoch = 0;
    run_stage(state, split, hp.drnas_stage_epochs, hp.drnas_warmstart_epochs, hp, batch_rng, epoch, hook,
              out.epoch_train_loss);

    // Keep the strongest ops per head, carry their concentrations over, and
    // restart the weights on a wider partial-channel supernet.
    ArchParams pruned;
    pruned.mode = ArchMode::drnas;
    pruned.nodes = state.arch.nodes;
    std::vector<std::vector<OpKind>> head_ops;
    for (const auto& head : state.arch.heads) {
        auto keep = prune_by_concentration(head, hp.drnas_keep_ops);
        const std::size_t edges = head.op_params.dim(0), n_ops = head.op_params.dim(1);
        HeadArch h;
        std::vector<double> values;
        for (std::size_t e = 0; e < edges; ++e)
            for (std::size_t o : keep) values.push_back(head.op_params.data()[e * n_ops + o]);
        for (std::size_t o : keep) h.ops.push_back(head.ops[o]);
        h.op_params = Tensor::from({edges, keep.size()}, std::move(values), true);
        head_ops.push_back(h.ops);
        pruned.heads.push_back(std::move(h));
    }
    const std::size_t steps = state.steps;
    SearchState stage2 = make_search_state(spec, ArchMode::drnas, hp.drnas_stage2_partial, hp, derive_seed(seed, 31), head_ops);
    stage2.arch = std::move(pruned);
    stage2.a_opt = std::make_unique<Adam>(make_arch_optimizer(stage2.arch, hp));
    stage2.steps = steps;
    stage2.probe_x = state.probe_x;
    stage2.probe_y = state.probe_y;
    run_stage(stage2, split, hp.drnas_stage_epochs, hp.drnas_warmstart_epochs, hp, batch_rng, epoch, hook,
              out.epoch_train_loss);

    out.genotype = discretize(stage2.arch, spec.genotype, spec.backbone);
    out.head_ops = head_ops;
    out.steps = stage2.steps;
    out.arch = stage2.arch.clone();
    return out;
}

SearchResult randomnas_search(const DatasetBundle& data, const ModelSpec& spec, const SearchHyperparams& hp,
                              std::uint64_t seed) {
    hp.validate();
    Rng init(derive_seed(seed, 11));
    Supernet net(spec, 0, NormOptions::search(), init);
    Sgd opt(net.parameters().tensors(), hp.w_momentum, hp.w_weight_decay);
    Rng batch_rng(derive_seed(seed, 22)), arch_rng(derive_seed(seed, 23)), noise(derive_seed(seed, 13));
    ForwardContext ctx{true, &noise};

    SearchResult out;
    const std::size_t spe = steps_per_epoch(data.train.size(), hp.search_batch);
    const std::size_t total = hp.search_epochs * spe;
    std::size_t t = 0;
    for (std::size_t e = 0; e < hp.search_epochs; ++e) {
        double loss_sum = 0.0;
        for (const auto& batch : epoch_batches(data.train.size(), hp.search_batch, batch_rng)) {
            auto g = sample_random_genotype(arch_rng(), spec.genotype, spec.backbone);
            auto weights = genotype_edge_weights(g, net.head_ops());
            opt.zero_grad();
            auto probs = net.forward(data.train.images(batch), weights, ctx);
            Tensor loss = ensemble_train_loss(probs, ensemble_average(probs), data.train.labels_at(batch));
            backward(loss);
            opt.step(cosine_lr(t++, total, hp.w_lr));
            loss_sum += loss.item();
            ++out.steps;
        }
        out.epoch_train_loss.push_back(loss_sum / static_cast<double>(spe));
    }

    Rng eval_rng(derive_seed(seed, 24));
    for (std::size_t i = 0; i < hp.eval_samples; ++i) {
        auto g = sample_random_genotype(eval_rng(), spec.genotype, spec.backbone);
        auto weights = genotype_edge_weights(g, net.head_ops());
        auto preds = predict(net, weights, data.val, kEvalBatch, noise);
        out.candidate_nll.push_back(nll(ensemble_average(preds), preds.labels));
        out.candidates.push_back(std::move(g));
        out.eval_batches += ceil_div(data.val.size(), kEvalBatch);
    }
    out.genotype = out.candidates[argmin_first(out.candidate_nll)];
    out.head_ops = net.head_ops();
    return out;
}

PredictionMatrix predict(Supernet& net, std::span<const EdgeWeights> weights, const ImageSet& data, std::size_t batch,
                         Rng& noise) {
    ForwardContext ctx{true, &noise};
    return predict_batches(data, batch, [&](const Tensor& x) { return net.forward(x, weights, ctx); });
}

PredictionMatrix predict(DiscreteNet& net, const ImageSet& data, std::size_t batch, std::uint64_t noise_seed) {
    Rng noise(noise_seed);
    ForwardContext ctx{false, &noise};
    return predict_batches(data, batch, [&](const Tensor& x) { return net.forward(x, ctx); });
}

double train_step(DiscreteNet& net, Sgd& opt, const Tensor& x, std::span<const int> y, double lr,
                  double label_smoothing, const ForwardContext& ctx) {
    opt.zero_grad();
    auto probs = net.forward(x, ctx);
    Tensor loss = ensemble_train_loss(probs, ensemble_average(probs), y, label_smoothing);
    backward(loss);
    opt.step(lr);
    return loss.item();
}

TrainedModel train_discrete(const MultiHeadGenotype& genotype, const DatasetBundle& data, const ModelSpec& spec,
                            const TrainHyperparams& hp, std::uint64_t seed, bool evaluate_train) {
    hp.validate();
    genotype.validate();
    TrainedModel out;
    Rng init(derive_seed(seed, 41));
    out.net = std::make_unique<DiscreteNet>(genotype, spec, NormOptions::train(), init);
    Sgd opt(out.net->parameters().tensors(), hp.momentum, hp.weight_decay);
    Rng batch_rng(derive_seed(seed, 42)), noise(derive_seed(seed, 43));
    ForwardContext ctx{true, &noise};
    const std::size_t spe = steps_per_epoch(data.train.size(), hp.batch);
    const std::size_t total = hp.epochs * spe;
    std::size_t t = 0;
    for (std::size_t e = 0; e < hp.epochs; ++e) {
        double loss_sum = 0.0;
        for (const auto& batch : epoch_batches(data.train.size(), hp.batch, batch_rng)) {
            loss_sum += train_step(*out.net, opt, data.train.images(batch), data.train.labels_at(batch),
                                   cosine_lr(t++, total, hp.lr), hp.label_smoothing, ctx);
            ++out.steps;
        }
        out.epoch_loss.push_back(loss_sum / static_cast<double>(spe));
    }
    out.params = out.net->parameters().count();
    const std::uint64_t eval_seed = derive_seed(seed, 44);
    out.val_predictions = predict(*out.net, data.val, kEvalBatch, eval_seed);
    out.val = evaluate(out.val_predictions);
    out.test = evaluate(predict(*out.net, data.test, kEvalBatch, eval_seed));
    if (evaluate_train) out.train = evaluate(predict(*out.net, data.train, kEvalBatch, eval_seed));
    return out;
}

std::vector<std::size_t> forward_select(const PredictionMatrix& pool, std::size_t m, bool with_replacement) {
    if (m == 0) throw std::invalid_argument("forward_select: ensemble size must be at least 1");
    if (!with_replacement && pool.size() < m) {
        throw std::invalid_argument(fmt::format("forward_select: pool of {} cannot supply {} members", pool.size(), m));
    }
    pool.validate();
    const std::size_t rows = pool.members[0].rows, cols = pool.members[0].cols;
    std::vector<double> total(rows * cols, 0.0);
    std::vector<bool> used(pool.size(), false);
    std::vector<std::size_t> chosen;
    ProbMatrix candidate{rows, cols, std::vector<double>(rows * cols)};
    for (std::size_t k = 0; k < m; ++k) {
        std::size_t best = pool.size();
        double best_nll = std::numeric_limits<double>::infinity();
        const double denom = static_cast<double>(k + 1);
        for (std::size_t i = 0; i < pool.size(); ++i) {
            if (!with_replacement && used[i]) continue;
            const auto& mv = pool.members[i].values;
            for (std::size_t j = 0; j < total.size(); ++j) candidate.values[j] = (total[j] + mv[j]) / denom;
            const double value = nll(candidate, pool.labels);
            if (value < best_nll || best == pool.size()) {
                best = i;
                best_nll = value;
            }
        }
        used[best] = true;
        chosen.push_back(best);
        const auto& mv = pool.members[best].values;
        for (std::size_t j = 0; j < total.size(); ++j) total[j] += mv[j];
    }
    return chosen;
}

std::string_view method_name(Method method) {
    switch (method) {
        case Method::pcdarts: return "pcdarts";
        case Method::drnas: return "drnas";
        case Method::randomnas: return "randomnas";
        case Method::mhe_rs: return "mhe_rs";
        case Method::mhe_sample: return "mhe_sample";
        case Method::nes_rs: return "nes_rs";
        case Method::deepens_sample: return "deepens_sample";
        case Method::deepens_rs: return "deepens_rs";
        case Method::hyperdeepens_rs: return "hyperdeepens_rs";
    }
    return "?";
}

Method method_from_name(std::string_view name) {
    for (Method m : {Method::pcdarts, Method::drnas, Method::randomnas, Method::mhe_rs, Method::mhe_sample, Method::nes_rs,
                     Method::deepens_sample, Method::deepens_rs, Method::hyperdeepens_rs})
        if (method_name(m) == name) return m;
    throw std::invalid_argument(fmt::format("unknown method '{}'", name));
}

bool is_one_shot(Method method) {
    return method == Method::pcdarts || method == Method::drnas || method == Method::randomnas;
}

Budget plan_budget(Method method, const SearchHyperparams& shp, const TrainHyperparams& thp, std::size_t n_train,
                   std::size_t n_val, std::size_t heads, std::size_t pool_size) {
    const std::size_t train_run = thp.epochs * steps_per_epoch(n_train, thp.batch);
    const std::size_t spe_search = steps_per_epoch(n_train / 2, shp.search_batch);
    auto stage = [&](std::size_t epochs, std::size_t warm) { return spe_search * (warm + 2 * (epochs - warm)); };
    Budget b;
    switch (method) {
        case Method::pcdarts:
            b.search_steps = stage(shp.search_epochs, shp.warmstart_epochs);
            b.train_steps = train_run;
            break;
        case Method::drnas:
            b.search_steps = 2 * stage(shp.drnas_stage_epochs, shp.drnas_warmstart_epochs);
            b.train_steps = train_run;
            break;
        case Method::randomnas:
            b.search_steps = shp.search_epochs * steps_per_epoch(n_train, shp.search_batch);
            b.eval_batches = shp.eval_samples * ceil_div(n_val, kEvalBatch);
            b.train_steps = train_run;
            break;
        case Method::mhe_sample: b.train_steps = train_run; break;
        case Method::mhe_rs:
        case Method::nes_rs: b.train_steps = pool_size * train_run; break;
        case Method::deepens_sample: b.train_steps = heads * train_run; break;
        case Method::deepens_rs: b.train_steps = (pool_size + heads) * train_run; break;
        case Method::hyperdeepens_rs: b.train_steps = 2 * pool_size * train_run; break;
    }
    return b;
}

PredictionMatrix Ensemble::predict(const ImageSet& data, std::size_t batch, std::uint64_t noise_seed) const {
    PredictionMatrix out;
    out.labels = data.labels;
    for (const auto& model : models) {
        auto p = mhnes::predict(*model, data, batch, noise_seed);
        for (auto& m : p.members) out.members.push_back(std::move(m));
    }
    return out;
}

std::size_t Ensemble::parameter_count() const {
    std::size_t n = 0;
    for (const auto& model : models) n += model->parameters().count();
    return n;
}

BaselineResult build_baseline(Method kind, const DatasetBundle& data, const ModelSpec& spec, const TrainHyperparams& hp,
                              std::size_t pool_size, std::uint64_t seed) {
    if (is_one_shot(kind)) throw std::invalid_argument(fmt::format("{} is not a baseline", method_name(kind)));
    if (pool_size < 1) throw std::invalid_argument("baseline pool size must be at least 1");
    const std::size_t m = spec.genotype.heads;
    const GenotypeSpec single = single_head(spec.genotype);
    BaselineResult out;

    auto train = [&](const MultiHeadGenotype& g, std::uint64_t s, const TrainHyperparams& h) {
        auto model = train_discrete(g, data, spec, h, s, false);
        out.budget.train_steps += model.steps;
        return model;
    };
    auto keep = [&](TrainedModel&& model, std::string tag) {
        out.genotypes.push_back(model.net->genotype());
        out.ensemble.models.push_back(std::move(model.net));
        out.ensemble.tags.push_back(std::move(tag));
    };
    // Random search over single-head genotypes; returns the index of the best.
    auto single_pool = [&](std::vector<TrainedModel>& pool) {
        for (std::size_t i = 0; i < pool_size; ++i)
            pool.push_back(train(sample_random_genotype(derive_seed(seed, 100 + i), single, spec.backbone),
                                 derive_seed(seed, 300 + i), hp));
        std::vector<double> nlls;
        for (const auto& p : pool) nlls.push_back(model_val_nll(p));
        return argmin_first(nlls);
    };
    auto select_from = [&](std::vector<TrainedModel>& pool, const std::string& prefix) {
        PredictionMatrix preds;
        preds.labels = data.val.labels;
        for (const auto& p : pool) preds.members.push_back(ensemble_average(p.val_predictions));
        auto picked = forward_select(preds, m);
        for (std::size_t i : picked) {
            if (!pool[i].net) throw std::logic_error("forward_select returned a member twice");
            keep(std::move(pool[i]), fmt::format("{}{}", prefix, i));
        }
    };

    switch (kind) {
        case Method::deepens_sample: {
            auto g = sample_random_genotype(derive_seed(seed, 51), single, spec.backbone);
            for (std::size_t j = 0; j < m; ++j) keep(train(g, derive_seed(seed, 200 + j), hp), fmt::format("seed{}", j));
            break;
        }
        case Method::deepens_rs: {
            std::vector<TrainedModel> pool;
            const std::size_t best = single_pool(pool);
            const auto genotype = pool[best].net->genotype();
            pool.clear();
            for (std::size_t j = 0; j < m; ++j)
                keep(train(genotype, derive_seed(seed, 200 + j), hp), fmt::format("seed{}", j));
            break;
        }
        case Method::nes_rs: {
            std::vector<TrainedModel> pool;
            single_pool(pool);
            select_from(pool, "pool");
            break;
        }
        case Method::hyperdeepens_rs: {
            std::vector<TrainedModel> search;
            const std::size_t best = single_pool(search);
            const auto genotype = search[best].net->genotype();
            search.clear();
            Rng hrng(derive_seed(seed, 401));
            const double smoothing[] = {0.0, 0.05, 0.1, 0.2};
            std::vector<TrainedModel> pool;
            for (std::size_t i = 0; i < pool_size; ++i) {
                TrainHyperparams h = hp;
                h.label_smoothing = smoothing[uniform_index(hrng, 4)];
                h.weight_decay = std::pow(10.0, -5.0 + 2.0 * uniform01(hrng));
                pool.push_back(train(genotype, derive_seed(seed, 400 + i), h));
            }
            select_from(pool, "variant");
            break;
        }
        case Method::mhe_sample:
            keep(train(sample_random_genotype(derive_seed(seed, 61), spec.genotype, spec.backbone), derive_seed(seed, 62), hp),
                 "sample");
            break;
        case Method::mhe_rs: {
            std::vector<TrainedModel> pool;
            std::vector<double> nlls;
            for (std::size_t i = 0; i < pool_size; ++i) {
                pool.push_back(train(sample_random_genotype(derive_seed(seed, 500 + i), spec.genotype, spec.backbone),
                                     derive_seed(seed, 600 + i), hp));
                nlls.push_back(model_val_nll(pool.back()));
            }
            const std::size_t best = argmin_first(nlls);
            keep(std::move(pool[best]), fmt::format("pool{}", best));
            break;
        }
        default: break;
    }
    out.val = evaluate(out.ensemble.predict(data.val, kEvalBatch, derive_seed(seed, 44)));
    out.test = evaluate(out.ensemble.predict(data.test, kEvalBatch, derive_seed(seed, 44)));
    return out;
}

}  // namespace mhnes
