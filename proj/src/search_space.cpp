#include "mhnes/search_space.hpp"

#include <fmt/format.h>
#include <json.hpp>

#include <algorithm>
#include <cmath>
#include <fstream>
#include <numeric>
#include <sstream>
#include <stdexcept>

namespace mhnes {

namespace {

constexpr std::array<std::pair<OpKind, std::string_view>, 8> kOpNames{{
    {OpKind::skip_connect, "skip_connect"},
    {OpKind::sep_conv_3x3, "sep_conv_3x3"},
    {OpKind::sep_conv_5x5, "sep_conv_5x5"},
    {OpKind::dil_conv_3x3, "dil_conv_3x3"},
    {OpKind::dil_conv_5x5, "dil_conv_5x5"},
    {OpKind::max_pool_3x3, "max_pool_3x3"},
    {OpKind::avg_pool_3x3, "avg_pool_3x3"},
    {OpKind::gaussian_noise, "gaussian_noise"},
}};

std::vector<double> softmax_values(std::span<const double> v) {
    const double m = *std::max_element(v.begin(), v.end());
    std::vector<double> out(v.size());
    double total = 0.0;
    for (std::size_t i = 0; i < v.size(); ++i) total += out[i] = std::exp(v[i] - m);
    for (double& x : out) x /= total;
    return out;
}

}  // namespace

std::string_view op_name(OpKind op) {
    for (const auto& [kind, name] : kOpNames)
        if (kind == op) return name;
    throw std::invalid_argument("unknown OpKind");
}

OpKind op_from_name(std::string_view name) {
    for (const auto& [kind, n] : kOpNames)
        if (n == name) return kind;
    throw std::invalid_argument(fmt::format("unknown operation '{}'", name));
}

std::vector<OpKind> default_ops() {
    return {OpKind::skip_connect, OpKind::sep_conv_3x3, OpKind::sep_conv_5x5, OpKind::dil_conv_3x3,
            OpKind::dil_conv_5x5, OpKind::max_pool_3x3, OpKind::avg_pool_3x3};
}

std::size_t CellSpec::num_edges() const {
    std::size_t total = 0;
    for (std::size_t n = 0; n < nodes; ++n) total += n + 2;
    return total;
}

std::size_t CellSpec::edge_index(std::size_t target, std::size_t source) const {
    if (target < 2 || target >= nodes + 2 || source >= target) {
        throw std::out_of_range(fmt::format("no edge {} -> {} in a {}-node cell", source, target, nodes));
    }
    std::size_t base = 0;
    for (std::size_t t = 2; t < target; ++t) base += t;
    return base + source;
}

std::pair<std::size_t, std::size_t> CellSpec::endpoints(std::size_t edge) const {
    std::size_t base = 0;
    for (std::size_t t = 2; t < nodes + 2; ++t) {
        if (edge < base + t) return {edge - base, t};
        base += t;
    }
    throw std::out_of_range(fmt::format("edge {} out of range for {} edges", edge, num_edges()));
}

std::size_t GenotypeSpec::op_index(OpKind op) const {
    auto it = std::find(ops.begin(), ops.end(), op);
    if (it == ops.end()) throw std::invalid_argument(fmt::format("operation {} not in the op set", op_name(op)));
    return static_cast<std::size_t>(it - ops.begin());
}

void MultiHeadGenotype::validate() const {
    if (spec.heads == 0 || spec.cells == 0 || spec.nodes == 0 || spec.head_width == 0 || spec.ops.empty()) {
        throw std::invalid_argument("genotype spec has a zero extent or empty op set");
    }
    if (heads.size() != spec.heads) {
        throw std::invalid_argument(fmt::format("genotype has {} heads, spec says {}", heads.size(), spec.heads));
    }
    for (std::size_t h = 0; h < heads.size(); ++h) {
        if (heads[h].size() != spec.nodes) {
            throw std::invalid_argument(fmt::format("head {} has {} nodes, spec says {}", h, heads[h].size(), spec.nodes));
        }
        for (std::size_t n = 0; n < spec.nodes; ++n) {
            const auto& choice = heads[h][n];
            const std::size_t target = n + 2;
            if (choice.inputs[0] >= target || choice.inputs[1] >= target) {
                throw std::invalid_argument(fmt::format("head {} node {}: input not strictly earlier", h, target));
            }
            if (choice.inputs[0] >= choice.inputs[1]) {
                throw std::invalid_argument(
                    fmt::format("head {} node {}: inputs must be distinct and ascending", h, target));
            }
            for (OpKind op : choice.ops) spec.op_index(op);
        }
    }
}

std::string genotype_to_json(const MultiHeadGenotype& g) {
    using nlohmann::json;
    json ops = json::array();
    for (OpKind op : g.spec.ops) ops.push_back(op_name(op));
    json heads = json::array();
    for (const auto& cell : g.heads) {
        json nodes = json::array();
        for (std::size_t n = 0; n < cell.size(); ++n) {
            nodes.push_back({{"node", n + 2},
                             {"inputs", {cell[n].inputs[0], cell[n].inputs[1]}},
                             {"ops", {op_name(cell[n].ops[0]), op_name(cell[n].ops[1])}}});
        }
        heads.push_back(std::move(nodes));
    }
    json doc = {
        {"spec",
         {{"M", g.spec.heads}, {"L", g.spec.cells}, {"nodes", g.spec.nodes}, {"ops", ops}, {"head_width", g.spec.head_width}}},
        {"heads", heads},
        {"backbone", {{"layers", g.backbone.layers}, {"width", g.backbone.width}}},
    };
    return doc.dump(2) + "\n";
}

MultiHeadGenotype genotype_from_json(std::string_view text) {
    using nlohmann::json;
    MultiHeadGenotype g;
    try {
        const json doc = json::parse(text);
        const auto& spec = doc.at("spec");
        g.spec.heads = spec.at("M").get<std::size_t>();
        g.spec.cells = spec.at("L").get<std::size_t>();
        g.spec.nodes = spec.at("nodes").get<std::size_t>();
        g.spec.head_width = spec.value("head_width", std::size_t{8});
        g.spec.ops.clear();
        for (const auto& op : spec.at("ops")) g.spec.ops.push_back(op_from_name(op.get<std::string>()));
        g.backbone.layers = doc.at("backbone").at("layers").get<std::size_t>();
        g.backbone.width = doc.at("backbone").at("width").get<std::size_t>();
        for (const auto& head : doc.at("heads")) {
            CellGenotype cell;
            for (const auto& node : head) {
                const std::size_t index = node.at("node").get<std::size_t>();
                if (index != cell.size() + 2) {
                    throw std::invalid_argument(fmt::format("genotype nodes out of order: got node {}", index));
                }
                NodeChoice choice;
                const auto& inputs = node.at("inputs");
                const auto& ops = node.at("ops");
                if (inputs.size() != 2 || ops.size() != 2) {
                    throw std::invalid_argument(fmt::format("node {} must list exactly 2 inputs and 2 ops", index));
                }
                for (std::size_t k = 0; k < 2; ++k) {
                    choice.inputs[k] = inputs[k].get<std::size_t>();
                    choice.ops[k] = op_from_name(ops[k].get<std::string>());
                }
                cell.push_back(choice);
            }
            g.heads.push_back(std::move(cell));
        }
    } catch (const json::exception& e) {
        throw std::invalid_argument(fmt::format("malformed genotype document: {}", e.what()));
    }
    g.validate();
    return g;
}

void save_genotype(const MultiHeadGenotype& genotype, const std::string& path) {
    std::ofstream out(path, std::ios::binary);
    if (!out) throw std::runtime_error(fmt::format("cannot write {}", path));
    out << genotype_to_json(genotype);
}

MultiHeadGenotype load_genotype(const std::string& path) {
    std::ifstream in(path, std::ios::binary);
    if (!in) throw std::runtime_error(fmt::format("cannot read {}", path));
    std::stringstream buffer;
    buffer << in.rdbuf();
    return genotype_from_json(buffer.str());
}

CellGenotype sample_random_cell(Rng& rng, const GenotypeSpec& spec) {
    CellGenotype cell(spec.nodes);
    for (std::size_t n = 0; n < spec.nodes; ++n) {
        const std::size_t target = n + 2;
        std::size_t a = uniform_index(rng, target);
        std::size_t b = uniform_index(rng, target - 1);
        if (b >= a) ++b;
        const OpKind op_a = spec.ops[uniform_index(rng, spec.ops.size())];
        const OpKind op_b = spec.ops[uniform_index(rng, spec.ops.size())];
        if (a < b) {
            cell[n] = NodeChoice{{a, b}, {op_a, op_b}};
        } else {
            cell[n] = NodeChoice{{b, a}, {op_b, op_a}};
        }
    }
    return cell;
}

MultiHeadGenotype sample_random_genotype(std::uint64_t seed, const GenotypeSpec& spec, const BackboneSpec& backbone) {
    Rng rng(seed);
    MultiHeadGenotype g{spec, backbone, {}};
    for (std::size_t h = 0; h < spec.heads; ++h) g.heads.push_back(sample_random_cell(rng, spec));
    return g;
}

std::vector<std::size_t> genotype_edge_vector(const MultiHeadGenotype& g) {
    const std::size_t n_ops = g.spec.ops.size();
    std::vector<std::size_t> slots;
    slots.reserve(g.heads.size() * g.spec.nodes * 2);
    for (const auto& cell : g.heads)
        for (const auto& choice : cell)
            for (std::size_t k = 0; k < 2; ++k) slots.push_back(choice.inputs[k] * n_ops + g.spec.op_index(choice.ops[k]));
    return slots;
}

std::size_t hamming(const MultiHeadGenotype& a, const MultiHeadGenotype& b) {
    if (!(a.spec == b.spec)) throw std::invalid_argument("hamming: genotypes use different specs");
    const auto va = genotype_edge_vector(a);
    const auto vb = genotype_edge_vector(b);
    std::size_t d = 0;
    for (std::size_t i = 0; i < va.size(); ++i) d += va[i] != vb[i];
    return d;
}

std::string_view arch_mode_name(ArchMode mode) {
    switch (mode) {
        case ArchMode::darts: return "darts";
        case ArchMode::pcdarts: return "pcdarts";
        case ArchMode::drnas: return "drnas";
    }
    return "?";
}

ArchParams ArchParams::init(ArchMode mode, std::size_t heads, std::size_t nodes, const std::vector<OpKind>& ops,
                            Rng& rng) {
    ArchParams arch;
    arch.mode = mode;
    arch.nodes = nodes;
    const std::size_t edges = arch.cell().num_edges();
    for (std::size_t h = 0; h < heads; ++h) {
        HeadArch head;
        head.ops = ops;
        std::vector<double> v(edges * ops.size());
        const double center = mode == ArchMode::drnas ? 1.0 : 0.0;
        for (double& x : v) x = center + 1e-3 * (2.0 * uniform01(rng) - 1.0);
        head.op_params = Tensor::from({edges, ops.size()}, std::move(v), true);
        if (mode == ArchMode::pcdarts) {
            std::vector<double> b(edges);
            for (double& x : b) x = 1e-3 * (2.0 * uniform01(rng) - 1.0);
            head.edge_params = Tensor::from({edges}, std::move(b), true);
        }
        arch.heads.push_back(std::move(head));
    }
    return arch;
}

ArchParams ArchParams::embed(const MultiHeadGenotype& g, ArchMode mode, double margin) {
    ArchParams arch;
    arch.mode = mode;
    arch.nodes = g.spec.nodes;
    const CellSpec cell = arch.cell();
    const std::size_t edges = cell.num_edges(), n_ops = g.spec.ops.size();
    const double base = mode == ArchMode::drnas ? 1.0 : 0.0;
    for (const auto& genes : g.heads) {
        HeadArch head;
        head.ops = g.spec.ops;
        std::vector<double> v(edges * n_ops, base);
        for (std::size_t n = 0; n < genes.size(); ++n)
            for (std::size_t k = 0; k < 2; ++k) {
                const std::size_t e = cell.edge_index(n + 2, genes[n].inputs[k]);
                v[e * n_ops + g.spec.op_index(genes[n].ops[k])] = base + margin;
            }
        head.op_params = Tensor::from({edges, n_ops}, std::move(v), true);
        if (mode == ArchMode::pcdarts) head.edge_params = Tensor::zeros({edges}, true);
        arch.heads.push_back(std::move(head));
    }
    return arch;
}

std::vector<Tensor> ArchParams::tensors() const {
    std::vector<Tensor> out;
    for (const auto& h : heads) {
        out.push_back(h.op_params);
        if (h.edge_params.defined()) out.push_back(h.edge_params);
    }
    return out;
}

std::size_t ArchParams::size() const {
    std::size_t n = 0;
    for (const auto& t : tensors()) n += t.numel();
    return n;
}

std::vector<double> ArchParams::flatten() const {
    std::vector<double> out;
    for (const auto& t : tensors()) out.insert(out.end(), t.data().begin(), t.data().end());
    return out;
}

void ArchParams::assign(std::span<const double> values) {
    if (values.size() != size()) {
        throw std::invalid_argument(fmt::format("ArchParams::assign: expected {} values, got {}", size(), values.size()));
    }
    std::size_t offset = 0;
    for (auto t : tensors()) {
        auto d = t.mutable_data();
        std::copy(values.begin() + offset, values.begin() + offset + d.size(), d.begin());
        offset += d.size();
    }
}

std::vector<double> ArchParams::flatten_grad() const {
    std::vector<double> out;
    for (const auto& t : tensors()) {
        if (t.has_grad()) {
            out.insert(out.end(), t.grad().begin(), t.grad().end());
        } else {
            out.insert(out.end(), t.numel(), 0.0);
        }
    }
    return out;
}

void ArchParams::zero_grad() {
    for (auto t : tensors()) t.zero_grad();
}

void ArchParams::clamp_concentrations() {
    if (mode != ArchMode::drnas) return;
    for (auto& h : heads)
        for (double& c : h.op_params.mutable_data()) c = std::max(c, concentration_floor);
}

ArchParams ArchParams::clone() const {
    ArchParams copy = *this;
    for (auto& h : copy.heads) {
        h.op_params = Tensor::from(h.op_params.shape(), std::vector<double>(h.op_params.data().begin(), h.op_params.data().end()),
                                   h.op_params.requires_grad());
        if (h.edge_params.defined()) {
            h.edge_params = Tensor::from(h.edge_params.shape(),
                                         std::vector<double>(h.edge_params.data().begin(), h.edge_params.data().end()),
                                         h.edge_params.requires_grad());
        }
    }
    return copy;
}

std::vector<double> ArchParams::expected_op_weights(std::size_t head) const {
    const auto& h = heads.at(head);
    const std::size_t edges = h.op_params.dim(0), n_ops = h.op_params.dim(1);
    std::vector<double> out(edges * n_ops);
    auto d = h.op_params.data();
    for (std::size_t e = 0; e < edges; ++e) {
        auto row = d.subspan(e * n_ops, n_ops);
        if (mode == ArchMode::drnas) {
            const double total = std::accumulate(row.begin(), row.end(), 0.0);
            for (std::size_t o = 0; o < n_ops; ++o) out[e * n_ops + o] = row[o] / total;
        } else {
            auto sm = softmax_values(row);
            std::copy(sm.begin(), sm.end(), out.begin() + static_cast<std::ptrdiff_t>(e * n_ops));
        }
    }
    return out;
}

std::vector<double> ArchParams::edge_strength_factors(std::size_t head) const {
    const CellSpec c = cell();
    std::vector<double> out(c.num_edges(), 1.0);
    const auto& h = heads.at(head);
    if (mode != ArchMode::pcdarts || !h.edge_params.defined()) return out;
    auto beta = h.edge_params.data();
    for (std::size_t t = 2; t < nodes + 2; ++t) {
        const std::size_t first = c.first_edge(t);
        auto sm = softmax_values(beta.subspan(first, t));
        std::copy(sm.begin(), sm.end(), out.begin() + static_cast<std::ptrdiff_t>(first));
    }
    return out;
}

MultiHeadGenotype discretize(const ArchParams& arch, const GenotypeSpec& spec, const BackboneSpec& backbone) {
    if (arch.heads.size() != spec.heads || arch.nodes != spec.nodes) {
        throw std::invalid_argument("discretize: architecture parameters do not match the genotype spec");
    }
    const CellSpec cell = arch.cell();
    MultiHeadGenotype g{spec, backbone, {}};
    for (std::size_t h = 0; h < arch.heads.size(); ++h) {
        const auto& head_ops = arch.heads[h].ops;
        const std::size_t n_ops = head_ops.size();
        const auto w = arch.expected_op_weights(h);
        const auto factor = arch.edge_strength_factors(h);
        CellGenotype genes(spec.nodes);
        for (std::size_t t = 2; t < spec.nodes + 2; ++t) {
            struct Candidate {
                double strength;
                std::size_t source;
                std::size_t op;
            };
            std::vector<Candidate> candidates;
            for (std::size_t s = 0; s < t; ++s) {
                const std::size_t e = cell.edge_index(t, s);
                std::size_t best = 0;
                for (std::size_t o = 1; o < n_ops; ++o)
                    if (w[e * n_ops + o] > w[e * n_ops + best]) best = o;
                candidates.push_back({w[e * n_ops + best] * factor[e], s, best});
            }
            std::stable_sort(candidates.begin(), candidates.end(),
                             [](const Candidate& a, const Candidate& b) { return a.strength > b.strength; });
            Candidate a = candidates[0], b = candidates[1];
            if (b.source < a.source) std::swap(a, b);
            genes[t - 2] = NodeChoice{{a.source, b.source}, {head_ops[a.op], head_ops[b.op]}};
        }
        g.heads.push_back(std::move(genes));
    }
    g.validate();
    return g;
}

}  // namespace mhnes
