#pragma once

#include <array>
#include <cstddef>
#include <cstdint>
#include <string>
#include <string_view>
#include <utility>
#include <vector>

#include "mhnes/rng.hpp"
#include "mhnes/tensor.hpp"

namespace mhnes {

enum class OpKind {
    skip_connect,
    sep_conv_3x3,
    sep_conv_5x5,
    dil_conv_3x3,
    dil_conv_5x5,
    max_pool_3x3,
    avg_pool_3x3,
    // Replaces its input by N(0, noise_std^2) draws. Not part of the default
    // set; used to build toy spaces with a known best operation.
    gaussian_noise,
};

std::string_view op_name(OpKind op);
OpKind op_from_name(std::string_view name);
/// The seven standard candidate operations, in canonical order.
std::vector<OpKind> default_ops();

/// DAG layout of one cell. Nodes 0 and 1 are inputs, nodes 2..nodes+1 are
/// intermediate. Edges are ordered by target node, then by source node.
struct CellSpec {
    std::size_t nodes = 4;

    std::size_t num_edges() const;
    std::size_t edge_index(std::size_t target, std::size_t source) const;
    /// (source, target) of an edge.
    std::pair<std::size_t, std::size_t> endpoints(std::size_t edge) const;
    /// Index of the first incoming edge of intermediate node `target`.
    std::size_t first_edge(std::size_t target) const { return edge_index(target, 0); }
};

struct BackboneSpec {
    std::size_t layers = 2;
    std::size_t width = 8;
    bool operator==(const BackboneSpec&) const = default;
};

struct GenotypeSpec {
    std::size_t heads = 3;
    std::size_t cells = 3;
    std::size_t nodes = 4;
    std::vector<OpKind> ops = default_ops();
    std::size_t head_width = 8;

    CellSpec cell() const { return CellSpec{nodes}; }
    /// Position of `op` in `ops`; throws when absent.
    std::size_t op_index(OpKind op) const;
    bool operator==(const GenotypeSpec&) const = default;
};

/// Two chosen incoming edges of one intermediate node, ascending by source.
struct NodeChoice {
    std::array<std::size_t, 2> inputs{};
    std::array<OpKind, 2> ops{};
    bool operator==(const NodeChoice&) const = default;
};

using CellGenotype = std::vector<NodeChoice>;

struct MultiHeadGenotype {
    GenotypeSpec spec;
    BackboneSpec backbone;
    std::vector<CellGenotype> heads;

    /// Throws std::invalid_argument describing the first violated invariant.
    void validate() const;
    bool operator==(const MultiHeadGenotype&) const = default;
};

std::string genotype_to_json(const MultiHeadGenotype& genotype);
MultiHeadGenotype genotype_from_json(std::string_view text);
void save_genotype(const MultiHeadGenotype& genotype, const std::string& path);
MultiHeadGenotype load_genotype(const std::string& path);

/// Uniform over valid genotypes; a pure function of (seed, spec).
MultiHeadGenotype sample_random_genotype(std::uint64_t seed, const GenotypeSpec& spec, const BackboneSpec& backbone);
CellGenotype sample_random_cell(Rng& rng, const GenotypeSpec& spec);

/// One slot per (head, node, input slot), holding source * |ops| + op index.
std::vector<std::size_t> genotype_edge_vector(const MultiHeadGenotype& genotype);
std::size_t hamming(const MultiHeadGenotype& a, const MultiHeadGenotype& b);

enum class ArchMode { darts, pcdarts, drnas };

std::string_view arch_mode_name(ArchMode mode);

/// Architecture parameters of one head. `ops` lists the candidate operations
/// of this head (a subset of the experiment's op set, in its order).
struct HeadArch {
    std::vector<OpKind> ops;
    Tensor op_params;    // [edges, ops.size()]: logits, or concentrations in drnas mode
    Tensor edge_params;  // [edges] logits, pcdarts mode only
};

struct ArchParams {
    ArchMode mode = ArchMode::darts;
    std::size_t nodes = 4;
    std::vector<HeadArch> heads;

    static constexpr double concentration_floor = 1e-3;

    static ArchParams init(ArchMode mode, std::size_t heads, std::size_t nodes, const std::vector<OpKind>& ops, Rng& rng);
    /// One-hot embedding of a genotype: chosen (edge, op) entries get `margin`
    /// (logit modes) or 1 + margin (drnas), every other entry 0 (resp. 1).
    static ArchParams embed(const MultiHeadGenotype& genotype, ArchMode mode, double margin = 40.0);

    CellSpec cell() const { return CellSpec{nodes}; }
    std::vector<Tensor> tensors() const;
    std::size_t size() const;
    std::vector<double> flatten() const;
    void assign(std::span<const double> values);
    std::vector<double> flatten_grad() const;
    void zero_grad();
    void clamp_concentrations();
    ArchParams clone() const;

    /// Expected per-edge op weights [edges, ops] of head h: softmax of the
    /// logits or the normalized concentrations. Not recorded on the tape.
    std::vector<double> expected_op_weights(std::size_t head) const;
    /// Per-edge multipliers used for ranking: softmax of β over each node's
    /// incoming edges in pcdarts mode, otherwise all ones.
    std::vector<double> edge_strength_factors(std::size_t head) const;
};

/// Top-2 edges per node by max_o weight (times the edge factor); ties go to
/// the lower edge index and, for the op, the lower op index.
MultiHeadGenotype discretize(const ArchParams& arch, const GenotypeSpec& spec, const BackboneSpec& backbone);

}  // namespace mhnes
