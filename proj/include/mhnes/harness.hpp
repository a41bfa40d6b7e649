#pragma once

#include <optional>
#include <stdexcept>
#include <string>
#include <vector>

#include "mhnes/analysis.hpp"
#include "mhnes/search.hpp"

namespace mhnes {

/// Invalid configuration; the message starts with the offending field path.
class ConfigError : public std::runtime_error {
public:
    using std::runtime_error::runtime_error;
};

struct DatasetConfig {
    std::optional<std::string> path;  // raw dataset file or directory; synthetic when empty
    std::size_t classes = 10;
    std::size_t n_train = 2000;
    std::size_t n_val = 500;
    std::size_t n_test = 500;
    std::size_t size = 16;
    std::uint64_t seed = 0;
};

struct ExperimentConfig {
    DatasetConfig dataset;
    ModelSpec model;
    Method method = Method::drnas;
    SearchHyperparams search;
    TrainHyperparams train;
    std::size_t pool_size = 25;
    std::vector<std::uint64_t> seeds{0, 1, 2};
    std::string output = "runs/default";
    bool eig_trace = false;
    EigProbeOptions probe;
    std::vector<std::size_t> regret_m{1, 3};
    std::size_t regret_samples = 20;
};

/// Parses and range-checks a JSON config. Unknown fields are rejected.
ExperimentConfig parse_config(const std::string& text);
/// Reads and parses a config file; a missing file is a ConfigError.
ExperimentConfig load_config(const std::string& path, std::string* text = nullptr);
std::string config_to_json(const ExperimentConfig& config);

DatasetBundle load_dataset(const DatasetConfig& config);
/// Model spec with num_classes, in_channels and image size taken from the data.
ModelSpec model_for(const ExperimentConfig& config, const DatasetBundle& data);

std::string sha256_hex(std::string_view bytes);
std::string read_file(const std::string& path);
void write_file(const std::string& path, std::string_view bytes);

struct MetricRow {
    std::string method;
    std::string seed;
    std::size_t m = 0;
    std::string split;
    int severity = 0;
    double nll = 0, error = 0, ece = 0, oracle_nll = 0;
    double params = 0, steps = 0, wall_sec = 0;
};

inline constexpr std::string_view kMetricsHeader =
    "method,seed,M,split,severity,nll,error,ece,oracle_nll,params,steps,wall_sec";
std::string metrics_csv(const std::vector<MetricRow>& rows);
std::vector<MetricRow> parse_metrics_csv(const std::string& text);
/// Mean and sample-std rows (seed "mean" / "std") per (method, M, split, severity).
std::vector<MetricRow> aggregate_rows(const std::vector<MetricRow>& rows);

/// Validation row plus test rows at severities 0..5 for a trained ensemble.
std::vector<MetricRow> evaluate_rows(const Ensemble& ensemble, const DatasetBundle& data, const std::string& method,
                                     std::uint64_t seed, double steps, double wall_sec);

std::string budget_json(Method method, std::uint64_t seed, const Budget& actual, const Budget& planned);

struct SeedOutcome {
    std::uint64_t seed = 0;
    bool ok = false;
    std::string error;
    double wall_sec = 0;
    Budget budget;
};

struct RunOutcome {
    std::vector<MetricRow> rows;  // per-seed rows followed by aggregate rows
    std::vector<SeedOutcome> seeds;
    bool all_ok() const;
};

/// Executes the configured method for every seed and writes config.json,
/// metrics.csv, manifest.json, and per-seed genotype and budget files under
/// config.output. A failing seed is recorded in the manifest and skipped.
RunOutcome run_experiment(const ExperimentConfig& config, const std::string& config_text);

/// Result of the one-shot pipeline or a baseline for one seed.
struct MethodRun {
    Ensemble ensemble;
    Budget budget;
    std::vector<MultiHeadGenotype> genotypes;
    std::optional<EigTrace> eig_trace;
};

MethodRun run_method(const ExperimentConfig& config, const DatasetBundle& data, std::uint64_t seed);
/// Search only; one-shot methods.
SearchResult run_search(const ExperimentConfig& config, const DatasetBundle& data, std::uint64_t seed,
                        EigTrace* trace = nullptr);

/// One row per (method, M) over per-seed test rows at severity 0, with mean
/// and sample std of nll, error and ece.
std::string report_table(const std::vector<MetricRow>& rows);

}  // namespace mhnes
