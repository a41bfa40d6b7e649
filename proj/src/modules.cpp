#include "mhnes/modules.hpp"

#include <fmt/format.h>

#include <cmath>
#include <cstring>
#include <fstream>
#include <stdexcept>

namespace mhnes {

namespace {

std::string join(const std::string& prefix, const std::string& name) {
    return prefix.empty() ? name : prefix + "." + name;
}

Tensor he_normal(Shape shape, std::size_t fan_in, Rng& rng) {
    const double std = std::sqrt(2.0 / static_cast<double>(fan_in));
    std::vector<double> v(shape_numel(shape));
    for (double& x : v) x = std * standard_normal(rng);
    return Tensor::from(std::move(shape), std::move(v), true);
}

class Identity final : public Operation {
public:
    Tensor forward(const Tensor& x, const ForwardContext&) override { return x; }
    void collect(const std::string&, ParamList&) override {}
};

class FactorizedReduce final : public Operation {
public:
    FactorizedReduce(std::size_t c, NormOptions norm, Rng& rng) : conv_(c, c, 1, {2, 0, 1, 1}, rng), bn_(c, norm) {}
    Tensor forward(const Tensor& x, const ForwardContext& ctx) override { return bn_.forward(conv_.forward(relu(x)), ctx); }
    void collect(const std::string& prefix, ParamList& out) override {
        conv_.collect(join(prefix, "conv"), out);
        bn_.collect(join(prefix, "bn"), out);
    }

private:
    Conv conv_;
    BatchNorm bn_;
};

class SepConv final : public Operation {
public:
    SepConv(std::size_t c, std::size_t k, std::size_t stride, NormOptions norm, Rng& rng)
        : dw1_(c, c, k, {stride, k / 2, 1, c}, rng),
          pw1_(c, c, 1, {}, rng),
          bn1_(c, norm),
          dw2_(c, c, k, {1, k / 2, 1, c}, rng),
          pw2_(c, c, 1, {}, rng),
          bn2_(c, norm) {}
    Tensor forward(const Tensor& x, const ForwardContext& ctx) override {
        auto h = bn1_.forward(pw1_.forward(dw1_.forward(relu(x))), ctx);
        return bn2_.forward(pw2_.forward(dw2_.forward(relu(h))), ctx);
    }
    void collect(const std::string& prefix, ParamList& out) override {
        dw1_.collect(join(prefix, "dw1"), out);
        pw1_.collect(join(prefix, "pw1"), out);
        bn1_.collect(join(prefix, "bn1"), out);
        dw2_.collect(join(prefix, "dw2"), out);
        pw2_.collect(join(prefix, "pw2"), out);
        bn2_.collect(join(prefix, "bn2"), out);
    }

private:
    Conv dw1_, pw1_;
    BatchNorm bn1_;
    Conv dw2_, pw2_;
    BatchNorm bn2_;
};

class DilConv final : public Operation {
public:
    DilConv(std::size_t c, std::size_t k, std::size_t stride, NormOptions norm, Rng& rng)
        : dw_(c, c, k, {stride, k - 1, 2, c}, rng), pw_(c, c, 1, {}, rng), bn_(c, norm) {}
    Tensor forward(const Tensor& x, const ForwardContext& ctx) override {
        return bn_.forward(pw_.forward(dw_.forward(relu(x))), ctx);
    }
    void collect(const std::string& prefix, ParamList& out) override {
        dw_.collect(join(prefix, "dw"), out);
        pw_.collect(join(prefix, "pw"), out);
        bn_.collect(join(prefix, "bn"), out);
    }

private:
    Conv dw_, pw_;
    BatchNorm bn_;
};

class PoolOp final : public Operation {
public:
    PoolOp(PoolKind kind, std::size_t stride) : kind_(kind), stride_(stride) {}
    Tensor forward(const Tensor& x, const ForwardContext&) override { return pool2d(kind_, x, 3, stride_, 1); }
    void collect(const std::string&, ParamList&) override {}

private:
    PoolKind kind_;
    std::size_t stride_;
};

class NoiseOp final : public Operation {
public:
    NoiseOp(double std, std::size_t stride) : std_(std), stride_(stride) {}
    Tensor forward(const Tensor& x, const ForwardContext& ctx) override {
        if (ctx.noise == nullptr) throw std::logic_error("gaussian_noise op needs a noise generator in the context");
        const Conv2dGeometry g{stride_, 1, 1, 1};
        Shape shape{x.dim(0), x.dim(1), conv_output_extent(x.dim(2), 3, g), conv_output_extent(x.dim(3), 3, g)};
        std::vector<double> v(shape_numel(shape));
        for (double& e : v) e = std_ * standard_normal(*ctx.noise);
        return Tensor::from(std::move(shape), std::move(v));
    }
    void collect(const std::string&, ParamList&) override {}

private:
    double std_;
    std::size_t stride_;
};

Tensor global_average(const Tensor& x) {
    return mean_axis(reshape(x, {x.dim(0), x.dim(1), x.dim(2) * x.dim(3)}), 2);
}

}  // namespace

std::vector<Tensor> ParamList::tensors() const {
    std::vector<Tensor> out;
    out.reserve(params.size());
    for (const auto& [name, t] : params) out.push_back(t);
    return out;
}

std::size_t ParamList::count() const {
    std::size_t n = 0;
    for (const auto& [name, t] : params) n += t.numel();
    return n;
}

ParamList Module::parameters(const std::string& prefix) {
    ParamList list;
    collect(prefix, list);
    return list;
}

Conv::Conv(std::size_t in, std::size_t out, std::size_t kernel, Conv2dGeometry geometry, Rng& rng)
    : weight_(he_normal({out, in / geometry.groups, kernel, kernel}, in / geometry.groups * kernel * kernel, rng)),
      geometry_(geometry) {}

void Conv::collect(const std::string& prefix, ParamList& out) { out.params.emplace_back(join(prefix, "weight"), weight_); }

BatchNorm::BatchNorm(std::size_t channels, NormOptions options) : options_(options) {
    if (options_.affine) {
        gamma_ = Tensor::full({channels}, 1.0, true);
        beta_ = Tensor::zeros({channels}, true);
    }
    if (options_.track_running) {
        running_mean_.assign(channels, 0.0);
        running_var_.assign(channels, 1.0);
    }
}

Tensor BatchNorm::forward(const Tensor& x, const ForwardContext& ctx) {
    Tensor y;
    if (ctx.training || !options_.track_running) {
        std::vector<double> m, v;
        y = normalize_no_affine(x, options_.eps, &m, &v);
        if (ctx.training && options_.track_running) {
            const double count = static_cast<double>(x.dim(0) * x.dim(2) * x.dim(3));
            const double unbias = count > 1.0 ? count / (count - 1.0) : 1.0;
            for (std::size_t c = 0; c < m.size(); ++c) {
                running_mean_[c] = options_.momentum * running_mean_[c] + (1.0 - options_.momentum) * m[c];
                running_var_[c] = options_.momentum * running_var_[c] + (1.0 - options_.momentum) * v[c] * unbias;
            }
        }
    } else {
        y = normalize_with_stats(x, running_mean_, running_var_, options_.eps);
    }
    return options_.affine ? channel_affine(y, gamma_, beta_) : y;
}

void BatchNorm::collect(const std::string& prefix, ParamList& out) {
    if (options_.affine) {
        out.params.emplace_back(join(prefix, "gamma"), gamma_);
        out.params.emplace_back(join(prefix, "beta"), beta_);
    }
    if (options_.track_running) {
        out.buffers.emplace_back(join(prefix, "running_mean"), &running_mean_);
        out.buffers.emplace_back(join(prefix, "running_var"), &running_var_);
    }
}

Linear::Linear(std::size_t in, std::size_t out, Rng& rng)
    : weight_(he_normal({in, out}, in, rng)), bias_(Tensor::zeros({out}, true)) {}

void Linear::collect(const std::string& prefix, ParamList& out) {
    out.params.emplace_back(join(prefix, "weight"), weight_);
    out.params.emplace_back(join(prefix, "bias"), bias_);
}

std::unique_ptr<Operation> make_operation(OpKind kind, std::size_t channels, std::size_t stride, NormOptions norm,
                                          double noise_std, Rng& rng) {
    switch (kind) {
        case OpKind::skip_connect:
            if (stride == 1) return std::make_unique<Identity>();
            return std::make_unique<FactorizedReduce>(channels, norm, rng);
        case OpKind::sep_conv_3x3: return std::make_unique<SepConv>(channels, 3, stride, norm, rng);
        case OpKind::sep_conv_5x5: return std::make_unique<SepConv>(channels, 5, stride, norm, rng);
        case OpKind::dil_conv_3x3: return std::make_unique<DilConv>(channels, 3, stride, norm, rng);
        case OpKind::dil_conv_5x5: return std::make_unique<DilConv>(channels, 5, stride, norm, rng);
        case OpKind::max_pool_3x3: return std::make_unique<PoolOp>(PoolKind::max, stride);
        case OpKind::avg_pool_3x3: return std::make_unique<PoolOp>(PoolKind::avg, stride);
        case OpKind::gaussian_noise: return std::make_unique<NoiseOp>(noise_std, stride);
    }
    throw std::invalid_argument("make_operation: unknown kind");
}

Preprocess::Preprocess(std::size_t in, std::size_t out, NormOptions norm, Rng& rng)
    : conv_(in, out, 1, {}, rng), bn_(out, norm) {}

Tensor Preprocess::forward(const Tensor& x, const ForwardContext& ctx) { return bn_.forward(conv_.forward(relu(x)), ctx); }

void Preprocess::collect(const std::string& prefix, ParamList& out) {
    conv_.collect(join(prefix, "conv"), out);
    bn_.collect(join(prefix, "bn"), out);
}

Backbone::Backbone(std::size_t in_channels, const BackboneSpec& spec, NormOptions norm, Rng& rng)
    : spec_(spec), stem_(in_channels, spec.width, 3, {1, 1, 1, 1}, rng), stem_bn_(spec.width, norm) {
    const std::size_t w = spec.width;
    for (std::size_t i = 0; i < spec.layers; ++i) {
        stages_.push_back(Stage{Conv(w, w, 3, {2, 1, 1, 1}, rng), Conv(w, w, 3, {1, 1, 1, 1}, rng),
                                Conv(w, w, 1, {2, 0, 1, 1}, rng), BatchNorm(w, norm), BatchNorm(w, norm),
                                BatchNorm(w, norm)});
    }
}

Tensor Backbone::forward(const Tensor& x, const ForwardContext& ctx) {
    Tensor h = relu(stem_bn_.forward(stem_.forward(x), ctx));
    for (auto& s : stages_) {
        Tensor main = s.bn2.forward(s.conv2.forward(relu(s.bn1.forward(s.conv1.forward(h), ctx))), ctx);
        Tensor shortcut = s.bn_short.forward(s.shortcut.forward(h), ctx);
        h = relu(add(main, shortcut));
    }
    return h;
}

void Backbone::collect(const std::string& prefix, ParamList& out) {
    stem_.collect(join(prefix, "stem.conv"), out);
    stem_bn_.collect(join(prefix, "stem.bn"), out);
    for (std::size_t i = 0; i < stages_.size(); ++i) {
        const std::string p = join(prefix, fmt::format("stage{}", i));
        stages_[i].conv1.collect(p + ".conv1", out);
        stages_[i].bn1.collect(p + ".bn1", out);
        stages_[i].conv2.collect(p + ".conv2", out);
        stages_[i].bn2.collect(p + ".bn2", out);
        stages_[i].shortcut.collect(p + ".shortcut", out);
        stages_[i].bn_short.collect(p + ".bn_short", out);
    }
}

std::vector<std::size_t> channel_shuffle_order(std::size_t channels, std::size_t groups) {
    if (groups == 0 || channels % groups != 0) {
        throw std::invalid_argument(fmt::format("channel shuffle: {} channels not divisible by {}", channels, groups));
    }
    const std::size_t per = channels / groups;
    std::vector<std::size_t> order(channels);
    for (std::size_t i = 0; i < per; ++i)
        for (std::size_t g = 0; g < groups; ++g) order[i * groups + g] = g * per + i;
    return order;
}

MixedOp::MixedOp(const std::vector<OpKind>& ops, std::size_t channels, std::size_t stride, std::size_t partial,
                 NormOptions norm, double noise_std, Rng& rng)
    : kinds_(ops), channels_(channels), stride_(stride), partial_(partial) {
    if (partial != 0 && channels % partial != 0) {
        throw std::invalid_argument(fmt::format("mixed op: {} channels not divisible by K={}", channels, partial));
    }
    const std::size_t active = partial == 0 ? channels : channels / partial;
    for (OpKind k : ops) ops_.push_back(make_operation(k, active, stride, norm, noise_std, rng));
}

Tensor MixedOp::forward(const Tensor& x, const Tensor& weights, std::size_t offset, const ForwardContext& ctx) {
    if (x.dim(1) != channels_) {
        throw std::invalid_argument(fmt::format("mixed op expects {} channels, got {}", channels_, x.dim(1)));
    }
    if (offset + ops_.size() > weights.numel()) {
        throw std::invalid_argument(
            fmt::format("mixed op: {} weights from offset {} exceed {}", ops_.size(), offset, weights.numel()));
    }
    const std::size_t active = partial_ == 0 ? channels_ : channels_ / partial_;
    Tensor xa = x;
    if (partial_ != 0) {
        std::vector<std::size_t> first(active);
        for (std::size_t i = 0; i < active; ++i) first[i] = i;
        xa = select_channels(x, first);
    }
    std::vector<Tensor> terms;
    std::vector<std::size_t> index;
    auto w = weights.data();
    for (std::size_t o = 0; o < ops_.size(); ++o) {
        if (w[offset + o] == 0.0) continue;
        terms.push_back(ops_[o]->forward(xa, ctx));
        index.push_back(offset + o);
    }
    if (terms.empty()) return Tensor();
    Tensor mixed = weighted_sum(terms, weights, index);
    if (partial_ == 0) return mixed;
    std::vector<Tensor> parts{mixed};
    if (active < channels_) {
        std::vector<std::size_t> rest(channels_ - active);
        for (std::size_t i = 0; i < rest.size(); ++i) rest[i] = active + i;
        Tensor bypass = select_channels(x, rest);
        if (stride_ > 1) bypass = pool2d(PoolKind::max, bypass, 3, stride_, 1);
        parts.push_back(bypass);
    }
    return select_channels(concat(parts, 1), channel_shuffle_order(channels_, partial_));
}

void MixedOp::collect(const std::string& prefix, ParamList& out) {
    for (std::size_t o = 0; o < ops_.size(); ++o) ops_[o]->collect(join(prefix, std::string(op_name(kinds_[o]))), out);
}

Tensor edge_combination(std::span<const Tensor> edge_outputs, const Tensor& beta) {
    if (beta.numel() != edge_outputs.size()) {
        throw std::invalid_argument(
            fmt::format("edge combination: {} edge weights for {} edges", beta.numel(), edge_outputs.size()));
    }
    std::vector<std::size_t> index(edge_outputs.size());
    for (std::size_t i = 0; i < index.size(); ++i) index[i] = i;
    return weighted_sum(edge_outputs, softmax(reshape(beta, {beta.numel()}), 0), index);
}

SuperCell::SuperCell(const std::vector<OpKind>& ops, std::size_t nodes, std::size_t in_channels, std::size_t width,
                     bool reduction, std::size_t partial, NormOptions norm, double noise_std, Rng& rng)
    : cell_{nodes}, pre0_(in_channels, width, norm, rng), pre1_(in_channels, width, norm, rng) {
    for (std::size_t e = 0; e < cell_.num_edges(); ++e) {
        const auto [source, target] = cell_.endpoints(e);
        const std::size_t stride = reduction && source < 2 ? 2 : 1;
        edges_.push_back(std::make_unique<MixedOp>(ops, width, stride, partial, norm, noise_std, rng));
    }
}

Tensor SuperCell::forward(const Tensor& x, const EdgeWeights& weights, const ForwardContext& ctx) {
    const std::size_t n_ops = edges_.front()->ops().size();
    if (weights.ops.rank() != 2 || weights.ops.dim(0) != edges_.size() || weights.ops.dim(1) != n_ops) {
        throw std::invalid_argument(fmt::format("cell expects op weights [{},{}], got {}", edges_.size(), n_ops,
                                                shape_to_string(weights.ops.shape())));
    }
    std::vector<Tensor> states{pre0_.forward(x, ctx), pre1_.forward(x, ctx)};
    for (std::size_t t = 2; t < cell_.nodes + 2; ++t) {
        std::vector<Tensor> outs;
        std::vector<std::size_t> index;
        for (std::size_t s = 0; s < t; ++s) {
            const std::size_t e = cell_.edge_index(t, s);
            if (weights.edges.defined() && weights.edges.data()[e] == 0.0) continue;
            Tensor out = edges_[e]->forward(states[s], weights.ops, e * n_ops, ctx);
            if (!out.defined()) continue;
            outs.push_back(out);
            index.push_back(e);
        }
        if (outs.empty()) throw std::invalid_argument(fmt::format("cell node {} has no active incoming edge", t));
        Tensor node;
        if (weights.edges.defined()) {
            node = weighted_sum(outs, weights.edges, index);
        } else {
            node = outs[0];
            for (std::size_t i = 1; i < outs.size(); ++i) node = add(node, outs[i]);
        }
        states.push_back(node);
    }
    return concat(std::span<const Tensor>(states).subspan(2), 1);
}

void SuperCell::collect(const std::string& prefix, ParamList& out) {
    pre0_.collect(join(prefix, "pre0"), out);
    pre1_.collect(join(prefix, "pre1"), out);
    for (std::size_t e = 0; e < edges_.size(); ++e) edges_[e]->collect(join(prefix, fmt::format("edge{}", e)), out);
}

Supernet::Supernet(const ModelSpec& spec, std::size_t partial, NormOptions norm, Rng& rng,
                   std::vector<std::vector<OpKind>> head_ops)
    : spec_(spec),
      partial_(partial),
      head_ops_(std::move(head_ops)),
      backbone_(spec.in_channels, spec.backbone, norm, rng) {
    const auto& g = spec.genotype;
    if (head_ops_.empty()) head_ops_.assign(g.heads, g.ops);
    if (head_ops_.size() != g.heads) {
        throw std::invalid_argument(fmt::format("supernet: {} head op sets for {} heads", head_ops_.size(), g.heads));
    }
    for (std::size_t h = 0; h < g.heads; ++h) {
        std::vector<std::unique_ptr<SuperCell>> cells;
        for (std::size_t l = 0; l < g.cells; ++l) {
            const std::size_t in = l == 0 ? backbone_.out_channels() : g.nodes * g.head_width;
            cells.push_back(std::make_unique<SuperCell>(head_ops_[h], g.nodes, in, g.head_width, l == 0, partial, norm,
                                                        spec.noise_std, rng));
        }
        heads_.push_back(std::move(cells));
        classifiers_.push_back(std::make_unique<Linear>(g.nodes * g.head_width, spec.num_classes, rng));
    }
}

std::vector<Tensor> Supernet::forward(const Tensor& x, std::span<const EdgeWeights> weights, const ForwardContext& ctx) {
    if (weights.size() != heads_.size()) {
        throw std::invalid_argument(fmt::format("supernet: {} weight sets for {} heads", weights.size(), heads_.size()));
    }
    if (x.rank() != 4 || x.dim(1) != spec_.in_channels) {
        throw std::invalid_argument(fmt::format("supernet: expected input [N,{},H,W], got {}", spec_.in_channels,
                                                shape_to_string(x.shape())));
    }
    Tensor feature = backbone_.forward(x, ctx);
    std::vector<Tensor> probs;
    for (std::size_t h = 0; h < heads_.size(); ++h) {
        Tensor s = feature;
        for (auto& cell : heads_[h]) s = cell->forward(s, weights[h], ctx);
        probs.push_back(softmax(classifiers_[h]->forward(global_average(s)), 1));
    }
    return probs;
}

void Supernet::collect(const std::string& prefix, ParamList& out) {
    backbone_.collect(join(prefix, "backbone"), out);
    for (std::size_t h = 0; h < heads_.size(); ++h) {
        for (std::size_t l = 0; l < heads_[h].size(); ++l)
            heads_[h][l]->collect(join(prefix, fmt::format("head{}.cell{}", h, l)), out);
        classifiers_[h]->collect(join(prefix, fmt::format("head{}.classifier", h)), out);
    }
}

std::vector<EdgeWeights> genotype_edge_weights(const MultiHeadGenotype& genotype,
                                               const std::vector<std::vector<OpKind>>& head_ops) {
    const CellSpec cell = genotype.spec.cell();
    const std::size_t edges = cell.num_edges();
    std::vector<EdgeWeights> out;
    for (std::size_t h = 0; h < genotype.heads.size(); ++h) {
        const auto& ops = head_ops.at(h);
        std::vector<double> w(edges * ops.size(), 0.0);
        for (std::size_t n = 0; n < genotype.heads[h].size(); ++n) {
            const auto& choice = genotype.heads[h][n];
            for (std::size_t k = 0; k < 2; ++k) {
                auto it = std::find(ops.begin(), ops.end(), choice.ops[k]);
                if (it == ops.end()) {
                    throw std::invalid_argument(
                        fmt::format("head {} has no candidate {}", h, op_name(choice.ops[k])));
                }
                w[cell.edge_index(n + 2, choice.inputs[k]) * ops.size() + static_cast<std::size_t>(it - ops.begin())] = 1.0;
            }
        }
        out.push_back({Tensor::from({edges, ops.size()}, std::move(w)), Tensor()});
    }
    return out;
}

std::vector<EdgeWeights> continuous_edge_weights(const ArchParams& arch) {
    if (arch.mode == ArchMode::drnas) {
        throw std::invalid_argument("continuous_edge_weights: drnas weights are sampled");
    }
    const CellSpec cell = arch.cell();
    std::vector<EdgeWeights> out;
    for (const auto& head : arch.heads) {
        EdgeWeights w{softmax(head.op_params, 1), Tensor()};
        if (arch.mode == ArchMode::pcdarts) {
            std::vector<Tensor> parts;
            for (std::size_t t = 2; t < arch.nodes + 2; ++t) {
                std::vector<std::size_t> idx(t);
                for (std::size_t s = 0; s < t; ++s) idx[s] = cell.edge_index(t, s);
                parts.push_back(softmax(gather(head.edge_params, idx), 0));
            }
            w.edges = concat(parts, 0);
        }
        out.push_back(std::move(w));
    }
    return out;
}

DiscreteNet::DiscreteNet(const MultiHeadGenotype& genotype, const ModelSpec& spec, NormOptions norm, Rng& rng)
    : genotype_(genotype), spec_(spec), backbone_(spec.in_channels, genotype.backbone, norm, rng) {
    genotype_.validate();
    spec_.genotype = genotype_.spec;
    spec_.backbone = genotype_.backbone;
    const auto& g = genotype_.spec;
    const CellSpec layout = g.cell();
    for (std::size_t h = 0; h < g.heads; ++h) {
        std::vector<Cell> cells;
        for (std::size_t l = 0; l < g.cells; ++l) {
            const std::size_t in = l == 0 ? backbone_.out_channels() : g.nodes * g.head_width;
            Cell cell;
            cell.pre0 = std::make_unique<Preprocess>(in, g.head_width, norm, rng);
            cell.pre1 = std::make_unique<Preprocess>(in, g.head_width, norm, rng);
            for (std::size_t n = 0; n < g.nodes; ++n) {
                const auto& choice = genotype_.heads[h][n];
                std::array<std::unique_ptr<Operation>, 2> pair;
                std::array<std::size_t, 2> ids{};
                for (std::size_t k = 0; k < 2; ++k) {
                    const std::size_t stride = l == 0 && choice.inputs[k] < 2 ? 2 : 1;
                    pair[k] = make_operation(choice.ops[k], g.head_width, stride, norm, spec.noise_std, rng);
                    ids[k] = layout.edge_index(n + 2, choice.inputs[k]);
                }
                cell.ops.push_back(std::move(pair));
                cell.edge_ids.push_back(ids);
            }
            cells.push_back(std::move(cell));
        }
        heads_.push_back(std::move(cells));
        classifiers_.push_back(std::make_unique<Linear>(g.nodes * g.head_width, spec.num_classes, rng));
    }
}

Tensor DiscreteNet::forward_cell(Cell& cell, const CellGenotype& genes, const Tensor& x, const ForwardContext& ctx) {
    std::vector<Tensor> states{cell.pre0->forward(x, ctx), cell.pre1->forward(x, ctx)};
    for (std::size_t n = 0; n < genes.size(); ++n) {
        Tensor a = cell.ops[n][0]->forward(states[genes[n].inputs[0]], ctx);
        Tensor b = cell.ops[n][1]->forward(states[genes[n].inputs[1]], ctx);
        states.push_back(add(a, b));
    }
    return concat(std::span<const Tensor>(states).subspan(2), 1);
}

std::vector<Tensor> DiscreteNet::forward(const Tensor& x, const ForwardContext& ctx) {
    if (x.rank() != 4 || x.dim(1) != spec_.in_channels) {
        throw std::invalid_argument(fmt::format("network: expected input [N,{},H,W], got {}", spec_.in_channels,
                                                shape_to_string(x.shape())));
    }
    Tensor feature = backbone_.forward(x, ctx);
    std::vector<Tensor> probs;
    for (std::size_t h = 0; h < heads_.size(); ++h) {
        Tensor s = feature;
        for (auto& cell : heads_[h]) s = forward_cell(cell, genotype_.heads[h], s, ctx);
        probs.push_back(softmax(classifiers_[h]->forward(global_average(s)), 1));
    }
    return probs;
}

void DiscreteNet::collect(const std::string& prefix, ParamList& out) {
    backbone_.collect(join(prefix, "backbone"), out);
    for (std::size_t h = 0; h < heads_.size(); ++h) {
        for (std::size_t l = 0; l < heads_[h].size(); ++l) {
            const std::string p = join(prefix, fmt::format("head{}.cell{}", h, l));
            auto& cell = heads_[h][l];
            cell.pre0->collect(p + ".pre0", out);
            cell.pre1->collect(p + ".pre1", out);
            for (std::size_t n = 0; n < cell.ops.size(); ++n)
                for (std::size_t k = 0; k < 2; ++k) {
                    cell.ops[n][k]->collect(
                        fmt::format("{}.edge{}.{}", p, cell.edge_ids[n][k], op_name(genotype_.heads[h][n].ops[k])), out);
                }
        }
        classifiers_[h]->collect(join(prefix, fmt::format("head{}.classifier", h)), out);
    }
}

void copy_parameters(Module& dst, Module& src) {
    auto from = src.parameters();
    auto to = dst.parameters();
    std::map<std::string, Tensor> params(from.params.begin(), from.params.end());
    std::map<std::string, std::vector<double>*> buffers(from.buffers.begin(), from.buffers.end());
    for (auto& [name, t] : to.params) {
        auto it = params.find(name);
        if (it == params.end()) throw std::invalid_argument(fmt::format("copy_parameters: source lacks '{}'", name));
        if (it->second.shape() != t.shape()) {
            throw std::invalid_argument(fmt::format("copy_parameters: '{}' has shape {} vs {}", name,
                                                    shape_to_string(it->second.shape()), shape_to_string(t.shape())));
        }
        std::copy(it->second.data().begin(), it->second.data().end(), t.mutable_data().begin());
    }
    for (auto& [name, buf] : to.buffers) {
        auto it = buffers.find(name);
        if (it == buffers.end() || it->second->size() != buf->size()) {
            throw std::invalid_argument(fmt::format("copy_parameters: buffer '{}' missing or resized", name));
        }
        *buf = *it->second;
    }
}

namespace {

constexpr char kWeightsMagic[8] = {'M', 'H', 'N', 'E', 'S', 'W', '1', '\0'};

template <typename T>
void write_pod(std::ostream& out, const T& v) {
    out.write(reinterpret_cast<const char*>(&v), sizeof(T));
}

template <typename T>
T read_pod(std::istream& in, const std::string& path) {
    T v{};
    if (!in.read(reinterpret_cast<char*>(&v), sizeof(T))) {
        throw std::runtime_error(fmt::format("{}: truncated at byte {}", path, static_cast<long>(in.gcount())));
    }
    return v;
}

}  // namespace

void save_parameters(Module& model, const std::string& path) {
    auto list = model.parameters();
    std::ofstream out(path, std::ios::binary);
    if (!out) throw std::runtime_error(fmt::format("cannot write {}", path));
    out.write(kWeightsMagic, sizeof(kWeightsMagic));
    write_pod<std::uint32_t>(out, static_cast<std::uint32_t>(list.params.size() + list.buffers.size()));
    auto write_entry = [&](const std::string& name, std::span<const double> values) {
        write_pod<std::uint32_t>(out, static_cast<std::uint32_t>(name.size()));
        out.write(name.data(), static_cast<std::streamsize>(name.size()));
        write_pod<std::uint64_t>(out, values.size());
        out.write(reinterpret_cast<const char*>(values.data()), static_cast<std::streamsize>(values.size() * sizeof(double)));
    };
    for (const auto& [name, t] : list.params) write_entry(name, t.data());
    for (const auto& [name, buf] : list.buffers) write_entry(name, *buf);
}

void load_parameters(Module& model, const std::string& path) {
    std::ifstream in(path, std::ios::binary);
    if (!in) throw std::runtime_error(fmt::format("cannot read {}", path));
    char magic[8];
    if (!in.read(magic, 8) || std::memcmp(magic, kWeightsMagic, 8) != 0) {
        throw std::runtime_error(fmt::format("{}: not a weights file", path));
    }
    std::map<std::string, std::vector<double>> entries;
    const auto count = read_pod<std::uint32_t>(in, path);
    for (std::uint32_t i = 0; i < count; ++i) {
        const auto len = read_pod<std::uint32_t>(in, path);
        std::string name(len, '\0');
        in.read(name.data(), len);
        const auto n = read_pod<std::uint64_t>(in, path);
        std::vector<double> values(n);
        if (!in.read(reinterpret_cast<char*>(values.data()), static_cast<std::streamsize>(n * sizeof(double)))) {
            throw std::runtime_error(fmt::format("{}: truncated in entry '{}'", path, name));
        }
        entries.emplace(std::move(name), std::move(values));
    }
    auto list = model.parameters();
    auto fetch = [&](const std::string& name, std::size_t size) -> const std::vector<double>& {
        auto it = entries.find(name);
        if (it == entries.end() || it->second.size() != size) {
            throw std::runtime_error(fmt::format("{}: entry '{}' missing or wrong size", path, name));
        }
        return it->second;
    };
    for (auto& [name, t] : list.params) {
        const auto& v = fetch(name, t.numel());
        std::copy(v.begin(), v.end(), t.mutable_data().begin());
    }
    for (auto& [name, buf] : list.buffers) *buf = fetch(name, buf->size());
}

}  // namespace mhnes
