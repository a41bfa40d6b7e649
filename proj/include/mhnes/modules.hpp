#pragma once

#include <map>
#include <memory>
#include <string>
#include <vector>

#include "mhnes/ops.hpp"
#include "mhnes/rng.hpp"
#include "mhnes/search_space.hpp"

namespace mhnes {

struct ForwardContext {
    bool training = true;
    // Source of draws for gaussian_noise ops; required only when one runs.
    Rng* noise = nullptr;
};

struct NormOptions {
    bool affine = false;
    bool track_running = false;
    double momentum = 0.9;  // running = momentum * running + (1 - momentum) * batch
    double eps = 1e-5;

    static NormOptions search() { return {}; }
    static NormOptions train() { return {true, true, 0.9, 1e-5}; }
};

/// Named parameter and buffer registry filled by Module::collect.
struct ParamList {
    std::vector<std::pair<std::string, Tensor>> params;
    std::vector<std::pair<std::string, std::vector<double>*>> buffers;

    std::vector<Tensor> tensors() const;
    std::size_t count() const;
};

class Module {
public:
    virtual ~Module() = default;
    virtual void collect(const std::string& prefix, ParamList& out) = 0;

    ParamList parameters(const std::string& prefix = "");
};

class Conv : public Module {
public:
    Conv(std::size_t in, std::size_t out, std::size_t kernel, Conv2dGeometry geometry, Rng& rng);
    Tensor forward(const Tensor& x) const { return conv2d(x, weight_, geometry_); }
    void collect(const std::string& prefix, ParamList& out) override;

private:
    Tensor weight_;
    Conv2dGeometry geometry_;
};

class BatchNorm : public Module {
public:
    BatchNorm(std::size_t channels, NormOptions options);
    Tensor forward(const Tensor& x, const ForwardContext& ctx);
    void collect(const std::string& prefix, ParamList& out) override;

private:
    NormOptions options_;
    Tensor gamma_, beta_;
    std::vector<double> running_mean_, running_var_;
};

class Linear : public Module {
public:
    Linear(std::size_t in, std::size_t out, Rng& rng);
    Tensor forward(const Tensor& x) const { return add_row_bias(matmul(x, weight_), bias_); }
    void collect(const std::string& prefix, ParamList& out) override;

private:
    Tensor weight_, bias_;
};

/// One candidate operation on an edge.
class Operation : public Module {
public:
    virtual Tensor forward(const Tensor& x, const ForwardContext& ctx) = 0;
};

std::unique_ptr<Operation> make_operation(OpKind kind, std::size_t channels, std::size_t stride, NormOptions norm,
                                          double noise_std, Rng& rng);

/// ReLU -> 1x1 conv -> norm; adapts a block output to a cell input node.
class Preprocess : public Module {
public:
    Preprocess(std::size_t in, std::size_t out, NormOptions norm, Rng& rng);
    Tensor forward(const Tensor& x, const ForwardContext& ctx);
    void collect(const std::string& prefix, ParamList& out) override;

private:
    Conv conv_;
    BatchNorm bn_;
};

/// Stem 3x3 conv followed by `layers` stride-2 residual stages.
class Backbone : public Module {
public:
    Backbone(std::size_t in_channels, const BackboneSpec& spec, NormOptions norm, Rng& rng);
    Tensor forward(const Tensor& x, const ForwardContext& ctx);
    void collect(const std::string& prefix, ParamList& out) override;
    std::size_t out_channels() const { return spec_.width; }

private:
    struct Stage {
        Conv conv1, conv2, shortcut;
        BatchNorm bn1, bn2, bn_short;
    };
    BackboneSpec spec_;
    Conv stem_;
    BatchNorm stem_bn_;
    std::vector<Stage> stages_;
};

struct ModelSpec {
    std::size_t num_classes = 10;
    std::size_t in_channels = 1;
    std::size_t image_size = 16;
    BackboneSpec backbone;
    GenotypeSpec genotype;
    double noise_std = 1.0;
};

/// Weighted sum of all candidate operations on one edge. With partial = K > 0
/// only the first C/K channels enter the operations; the rest bypass
/// (max-pooled when the edge reduces), then both parts are concatenated and
/// channel-shuffled. partial = 0 disables the split altogether.
class MixedOp : public Module {
public:
    MixedOp(const std::vector<OpKind>& ops, std::size_t channels, std::size_t stride, std::size_t partial,
            NormOptions norm, double noise_std, Rng& rng);
    /// weights.flat[offset + o] multiplies op o; exact zeros skip the op.
    Tensor forward(const Tensor& x, const Tensor& weights, std::size_t offset, const ForwardContext& ctx);
    void collect(const std::string& prefix, ParamList& out) override;
    const std::vector<OpKind>& ops() const { return kinds_; }

private:
    std::vector<OpKind> kinds_;
    std::vector<std::unique_ptr<Operation>> ops_;
    std::size_t channels_, stride_, partial_;
};

/// Channel permutation after a partial-channel concat with `groups` groups.
std::vector<std::size_t> channel_shuffle_order(std::size_t channels, std::size_t groups);

/// Node output as the softmax(β)-weighted combination of its incoming edges.
Tensor edge_combination(std::span<const Tensor> edge_outputs, const Tensor& beta);

/// Per-head weights consumed by the supernet. `ops` is [edges, head ops];
/// `edges`, when defined, is a per-edge multiplier [edges].
struct EdgeWeights {
    Tensor ops;
    Tensor edges;
};

class SuperCell : public Module {
public:
    SuperCell(const std::vector<OpKind>& ops, std::size_t nodes, std::size_t in_channels, std::size_t width,
              bool reduction, std::size_t partial, NormOptions norm, double noise_std, Rng& rng);
    Tensor forward(const Tensor& x, const EdgeWeights& weights, const ForwardContext& ctx);
    void collect(const std::string& prefix, ParamList& out) override;

private:
    CellSpec cell_;
    Preprocess pre0_, pre1_;
    std::vector<std::unique_ptr<MixedOp>> edges_;
};

class Supernet : public Module {
public:
    /// `head_ops[h]` is the candidate set of head h (defaults to spec ops).
    Supernet(const ModelSpec& spec, std::size_t partial, NormOptions norm, Rng& rng,
             std::vector<std::vector<OpKind>> head_ops = {});
    /// One probability matrix [N, classes] per head.
    std::vector<Tensor> forward(const Tensor& x, std::span<const EdgeWeights> weights, const ForwardContext& ctx);
    void collect(const std::string& prefix, ParamList& out) override;

    const ModelSpec& spec() const { return spec_; }
    const std::vector<std::vector<OpKind>>& head_ops() const { return head_ops_; }
    std::size_t partial() const { return partial_; }

private:
    ModelSpec spec_;
    std::size_t partial_;
    std::vector<std::vector<OpKind>> head_ops_;
    Backbone backbone_;
    std::vector<std::vector<std::unique_ptr<SuperCell>>> heads_;
    std::vector<std::unique_ptr<Linear>> classifiers_;
};

/// Edge weights that activate exactly the genotype's (edge, op) choices.
std::vector<EdgeWeights> genotype_edge_weights(const MultiHeadGenotype& genotype,
                                               const std::vector<std::vector<OpKind>>& head_ops);
/// Differentiable weights from continuous parameters (softmax of logits, β
/// softmax per node in pcdarts mode). drnas mode is handled by the sampler.
std::vector<EdgeWeights> continuous_edge_weights(const ArchParams& arch);

/// Stand-alone network realizing one genotype.
class DiscreteNet : public Module {
public:
    DiscreteNet(const MultiHeadGenotype& genotype, const ModelSpec& spec, NormOptions norm, Rng& rng);
    std::vector<Tensor> forward(const Tensor& x, const ForwardContext& ctx);
    void collect(const std::string& prefix, ParamList& out) override;
    const MultiHeadGenotype& genotype() const { return genotype_; }
    const ModelSpec& spec() const { return spec_; }

private:
    struct Cell {
        std::unique_ptr<Preprocess> pre0, pre1;
        // Two operations per node, named by supernet edge index.
        std::vector<std::array<std::unique_ptr<Operation>, 2>> ops;
        std::vector<std::array<std::size_t, 2>> edge_ids;
    };
    Tensor forward_cell(Cell& cell, const CellGenotype& genes, const Tensor& x, const ForwardContext& ctx);

    MultiHeadGenotype genotype_;
    ModelSpec spec_;
    Backbone backbone_;
    std::vector<std::vector<Cell>> heads_;
    std::vector<std::unique_ptr<Linear>> classifiers_;
};

/// Copies every parameter and buffer of `dst` from the same-named entry of
/// `src`; throws when a name is missing or shapes differ.
void copy_parameters(Module& dst, Module& src);

void save_parameters(Module& model, const std::string& path);
void load_parameters(Module& model, const std::string& path);

}  // namespace mhnes
