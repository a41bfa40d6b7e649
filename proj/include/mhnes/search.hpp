#pragma once

#include <functional>
#include <memory>
#include <optional>
#include <string>
#include <vector>

#include "mhnes/data.hpp"
#include "mhnes/metrics.hpp"
#include "mhnes/modules.hpp"
#include "mhnes/optim.hpp"
#include "mhnes/search_space.hpp"

namespace mhnes {

struct SearchHyperparams {
    std::size_t search_epochs = 50;
    std::size_t search_batch = 64;
    double w_lr = 0.1;
    double w_momentum = 0.9;
    double w_weight_decay = 3e-4;
    double a_lr = 3e-4;
    double a_beta1 = 0.5;
    double a_beta2 = 0.999;
    double a_weight_decay = 1e-3;
    std::size_t partial = 4;
    std::size_t warmstart_epochs = 15;
    std::size_t drnas_stage_epochs = 25;
    std::size_t drnas_warmstart_epochs = 10;
    std::size_t drnas_keep_ops = 4;
    std::size_t drnas_stage2_partial = 2;
    double lambda_jsd = 0.1;
    std::size_t eval_samples = 100;

    void validate() const;
};

struct TrainHyperparams {
    std::size_t epochs = 100;
    std::size_t batch = 128;
    double lr = 0.1;
    double momentum = 0.9;
    double weight_decay = 3e-4;
    double label_smoothing = 0.0;

    void validate() const;
};

/// Mutable state of one supernet search.
struct SearchState {
    ArchParams arch;
    std::unique_ptr<Supernet> net;
    std::unique_ptr<Sgd> w_opt;
    std::unique_ptr<Adam> a_opt;
    Rng sample_rng{0};
    Rng noise_rng{0};
    /// When set, the supernet runs this genotype's one-hot weights and the
    /// architecture step is skipped.
    std::optional<MultiHeadGenotype> frozen;
    /// Fixed validation batch used by epoch probes.
    Tensor probe_x;
    std::vector<int> probe_y;
    std::size_t steps = 0;
};

SearchState make_search_state(const ModelSpec& spec, ArchMode mode, std::size_t partial, const SearchHyperparams& hp,
                              std::uint64_t seed, std::vector<std::vector<OpKind>> head_ops = {});

/// Edge weights for one forward pass: one-hot for a frozen genotype, a fresh
/// Dirichlet draw in drnas mode, softmax of the logits otherwise.
std::vector<EdgeWeights> search_edge_weights(SearchState& state);

struct StepLosses {
    double train_loss = 0.0;
    double val_loss = 0.0;  // NaN when the architecture step was skipped
};

/// First-order alternation: one Adam step on the architecture using
/// arch_val_loss on the validation batch (skipped when `update_arch` is false
/// or the state is frozen), then one SGD step on the weights using
/// ensemble_train_loss on the training batch.
StepLosses bilevel_search_step(SearchState& state, const Tensor& train_x, std::span<const int> train_y,
                               const Tensor& val_x, std::span<const int> val_y, const SearchHyperparams& hp, double lr,
                               bool update_arch);

/// Gradient of arch_val_loss with respect to the flattened architecture at
/// the current weights. Noise and Dirichlet draws come from `draw_seed`, so
/// the value is a deterministic function of the architecture. The state's
/// generators and architecture gradients are left as they were; weight
/// gradients are cleared.
std::vector<double> arch_val_gradient(SearchState& state, const Tensor& x, std::span<const int> y, double lambda_jsd,
                                      std::uint64_t draw_seed, double* loss = nullptr);

/// Called after every search epoch (1-based, counted across DrNAS stages).
using EpochHook = std::function<void(std::size_t epoch, SearchState& state)>;

struct SearchResult {
    MultiHeadGenotype genotype;
    ArchParams arch;
    std::vector<std::vector<OpKind>> head_ops;
    std::size_t steps = 0;
    std::size_t eval_batches = 0;
    std::vector<double> epoch_train_loss;
    // RandomNAS only: the scored candidates and their validation NLL.
    std::vector<MultiHeadGenotype> candidates;
    std::vector<double> candidate_nll;
};

SearchResult pcdarts_search(const DatasetBundle& data, const ModelSpec& spec, const SearchHyperparams& hp,
                            std::uint64_t seed, const EpochHook& hook = {});
SearchResult drnas_search(const DatasetBundle& data, const ModelSpec& spec, const SearchHyperparams& hp,
                          std::uint64_t seed, const EpochHook& hook = {});
SearchResult randomnas_search(const DatasetBundle& data, const ModelSpec& spec, const SearchHyperparams& hp,
                              std::uint64_t seed);

/// Indices of the `keep` ops with the highest mean concentration over edges,
/// in their original order; ties go to the lower index.
std::vector<std::size_t> prune_by_concentration(const HeadArch& head, std::size_t keep);

/// Index of the smallest value; ties go to the first.
std::size_t argmin_first(std::span<const double> values);

inline constexpr std::size_t kEvalBatch = 256;

/// Ensemble predictions of a network over a split, one member per head.
PredictionMatrix predict(Supernet& net, std::span<const EdgeWeights> weights, const ImageSet& data, std::size_t batch,
                         Rng& noise);
PredictionMatrix predict(DiscreteNet& net, const ImageSet& data, std::size_t batch, std::uint64_t noise_seed);

struct TrainedModel {
    std::unique_ptr<DiscreteNet> net;
    std::size_t steps = 0;
    std::size_t params = 0;
    std::vector<double> epoch_loss;
    PredictionMatrix val_predictions;
    MetricReport train, val, test;
};

/// One SGD step of the ensemble loss on a discrete network; returns the loss.
double train_step(DiscreteNet& net, Sgd& opt, const Tensor& x, std::span<const int> y, double lr,
                  double label_smoothing, const ForwardContext& ctx);

/// Trains from scratch with the ensemble loss, affine norm with running
/// statistics, and a per-step cosine schedule.
TrainedModel train_discrete(const MultiHeadGenotype& genotype, const DatasetBundle& data, const ModelSpec& spec,
                            const TrainHyperparams& hp, std::uint64_t seed, bool evaluate_train = true);

/// Greedy forward selection on validation NLL of the averaged members; ties
/// go to the lowest pool index.
std::vector<std::size_t> forward_select(const PredictionMatrix& pool, std::size_t m, bool with_replacement = false);

enum class Method { pcdarts, drnas, randomnas, mhe_rs, mhe_sample, nes_rs, deepens_sample, deepens_rs, hyperdeepens_rs };

std::string_view method_name(Method method);
Method method_from_name(std::string_view name);
bool is_one_shot(Method method);

/// Mini-batch step accounting of one run.
struct Budget {
    std::size_t search_steps = 0;
    std::size_t train_steps = 0;
    std::size_t eval_batches = 0;
    std::size_t total_steps() const { return search_steps + train_steps; }
    bool operator==(const Budget&) const = default;
};

/// Closed-form step counts of a method, matching what a run consumes.
Budget plan_budget(Method method, const SearchHyperparams& shp, const TrainHyperparams& thp, std::size_t n_train,
                   std::size_t n_val, std::size_t heads, std::size_t pool_size = 25);

/// A set of trained networks whose heads together form the ensemble members.
struct Ensemble {
    std::vector<std::unique_ptr<DiscreteNet>> models;
    std::vector<std::string> tags;

    PredictionMatrix predict(const ImageSet& data, std::size_t batch, std::uint64_t noise_seed) const;
    std::size_t parameter_count() const;
};

struct BaselineResult {
    Ensemble ensemble;
    Budget budget;
    std::vector<MultiHeadGenotype> genotypes;
    MetricReport val, test;
};

/// Builds one of the ensemble baselines. `pool_size` is the random-search
/// sample count.
BaselineResult build_baseline(Method kind, const DatasetBundle& data, const ModelSpec& spec, const TrainHyperparams& hp,
                              std::size_t pool_size, std::uint64_t seed);

}  // namespace mhnes
