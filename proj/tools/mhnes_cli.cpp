#include <CLI11.hpp>
#include <fmt/format.h>

#include <filesystem>
#include <iostream>
#include <json.hpp>

#include "mhnes/harness.hpp"

using namespace mhnes;
namespace fs = std::filesystem;

namespace {

struct Common {
    std::string config;
    std::optional<std::uint64_t> seed;
    std::optional<std::string> out;
};

void add_common(CLI::App* cmd, Common& c) {
    cmd->add_option("--config", c.config, "experiment config (JSON)")->required();
    cmd->add_option("--seed", c.seed, "run this seed only");
    cmd->add_option("--out", c.out, "output directory");
}

struct Loaded {
    ExperimentConfig config;
    std::string text;
};

Loaded load(const Common& c) {
    Loaded l;
    l.config = load_config(c.config, &l.text);
    if (c.seed) l.config.seeds = {*c.seed};
    if (c.out) l.config.output = *c.out;
    return l;
}

void print_counts(const DatasetBundle& d) {
    fmt::print("classes {}\nimage {}x{}x{}\n", d.num_classes, d.train.channels, d.train.height, d.train.width);
    for (const auto& [name, set] : {std::pair<const char*, const ImageSet*>{"train", &d.train}, {"val", &d.val}, {"test", &d.test}}) {
        std::vector<std::size_t> hist(d.num_classes, 0);
        for (auto y : set->labels) ++hist[y];
        fmt::print("{} {} per-class {}\n", name, set->size(), fmt::join(hist, " "));
    }
}

int cmd_dataset_gen(std::size_t classes, std::size_t n_train, std::size_t n_val, std::size_t n_test, std::size_t size,
                    std::uint64_t seed, const std::string& out) {
    auto data = gen_synthetic(classes, n_train, n_val, n_test, size, seed);
    fs::create_directories(out);
    const std::string path = dataset_file(out);
    save_raw(data, path);
    fmt::print("wrote {}\n", path);
    print_counts(data);
    fmt::print("sha256 {}\n", sha256_hex(read_file(path)));
    return 0;
}

int cmd_dataset_inspect(const std::string& path) {
    auto data = load_raw(path);
    print_counts(data);
    fmt::print("sha256 {}\n", sha256_hex(read_file(dataset_file(path))));
    return 0;
}

int cmd_search(const Common& c) {
    auto [config, text] = load(c);
    if (!is_one_shot(config.method))
        throw ConfigError(fmt::format("method: {} has no search stage", method_name(config.method)));
    auto data = load_dataset(config.dataset);
    for (auto seed : config.seeds) {
        const fs::path dir = fs::path(config.output) / fmt::format("seed{}", seed);
        fs::create_directories(dir);
        std::optional<EigTrace> trace;
        if (config.eig_trace && config.method != Method::randomnas) trace.emplace();
        auto r = run_search(config, data, seed, trace ? &*trace : nullptr);
        save_genotype(r.genotype, (dir / "genotype.json").string());
        nlohmann::json j = {{"method", std::string(method_name(config.method))},
                            {"seed", seed},
                            {"search_steps", r.steps},
                            {"eval_batches", r.eval_batches},
                            {"epoch_train_loss", r.epoch_train_loss},
                            {"candidate_nll", r.candidate_nll}};
        write_file((dir / "search.json").string(), j.dump(2) + "\n");
        if (trace) write_file((dir / "eig_trace.csv").string(), trace->to_csv());
        fmt::print("seed {}: {} steps, genotype in {}\n", seed, r.steps, dir.string());
    }
    return 0;
}

std::unique_ptr<DiscreteNet> load_model(const std::string& dir, const ModelSpec& spec) {
    auto genotype = load_genotype((fs::path(dir) / "genotype.json").string());
    Rng rng(0);
    auto net = std::make_unique<DiscreteNet>(genotype, spec, NormOptions::train(), rng);
    load_parameters(*net, (fs::path(dir) / "params.bin").string());
    return net;
}

int cmd_train(const Common& c, const std::string& genotype_path) {
    auto [config, text] = load(c);
    auto data = load_dataset(config.dataset);
    const ModelSpec spec = model_for(config, data);
    auto genotype = load_genotype(genotype_path);
    std::vector<MetricRow> rows;
    for (auto seed : config.seeds) {
        const fs::path dir = fs::path(config.output) / fmt::format("seed{}", seed);
        fs::create_directories(dir);
        auto model = train_discrete(genotype, data, spec, config.train, derive_seed(seed, 71), false);
        save_genotype(genotype, (dir / "genotype.json").string());
        save_parameters(*model.net, (dir / "params.bin").string());
        Ensemble e;
        e.models.push_back(std::move(model.net));
        auto r = evaluate_rows(e, data, "train", seed, static_cast<double>(model.steps), 0.0);
        rows.insert(rows.end(), r.begin(), r.end());
        fmt::print("seed {}: {} steps, val nll {:.4f}, model in {}\n", seed, model.steps, model.val.nll, dir.string());
    }
    write_file((fs::path(config.output) / "metrics.csv").string(), metrics_csv(rows));
    return 0;
}

int cmd_eval(const Common& c, const std::vector<std::string>& models) {
    auto [config, text] = load(c);
    auto data = load_dataset(config.dataset);
    const ModelSpec spec = model_for(config, data);
    Ensemble e;
    for (const auto& dir : models) {
        e.models.push_back(load_model(dir, spec));
        e.tags.push_back(dir);
    }
    auto rows = evaluate_rows(e, data, "eval", config.seeds.front(), 0.0, 0.0);
    const std::string csv = metrics_csv(rows);
    if (c.out) {
        write_file((fs::path(*c.out) / "metrics.csv").string(), csv);
    } else {
        std::cout << csv;
    }
    return 0;
}

int cmd_run(const Common& c, bool baseline_only) {
    auto [config, text] = load(c);
    if (baseline_only && is_one_shot(config.method))
        throw ConfigError(fmt::format("method: {} is not a baseline", method_name(config.method)));
    auto outcome = run_experiment(config, text);
    for (const auto& s : outcome.seeds) {
        if (s.ok)
            fmt::print("seed {}: ok, {} steps, {:.1f}s\n", s.seed, s.budget.total_steps(), s.wall_sec);
        else
            fmt::print(stderr, "seed {}: failed: {}\n", s.seed, s.error);
    }
    fmt::print("results in {}\n", config.output);
    return outcome.all_ok() ? 0 : 2;
}

int cmd_hessian(Common c) {
    auto [config, text] = load(c);
    config.eig_trace = true;
    if (config.method != Method::pcdarts && config.method != Method::drnas)
        throw ConfigError("method: eigenvalue tracing needs pcdarts or drnas");
    auto data = load_dataset(config.dataset);
    for (auto seed : config.seeds) {
        EigTrace trace;
        run_search(config, data, seed, &trace);
        const fs::path path = fs::path(config.output) / fmt::format("seed{}", seed) / "eig_trace.csv";
        write_file(path.string(), trace.to_csv());
        fmt::print("seed {}: {} epochs traced, {}\n", seed, trace.points.size(), path.string());
    }
    return 0;
}

int cmd_regret(const Common& c) {
    auto [config, text] = load(c);
    auto data = load_dataset(config.dataset);
    const ModelSpec spec = model_for(config, data);
    for (auto seed : config.seeds) {
        auto study = regret_study(data, spec, config.regret_m, config.regret_samples, config.train, seed);
        const fs::path path = fs::path(config.output) / fmt::format("seed{}", seed) / "regret.csv";
        write_file(path.string(), study.to_csv());
        for (const auto& s : study.summaries)
            fmt::print("seed {} M={}: mean regret {:.6f}, std val nll {:.6f}\n", seed, s.m, s.mean, s.std);
    }
    return 0;
}

int cmd_hamming(const std::vector<std::string>& files, const std::optional<std::string>& out) {
    std::vector<MultiHeadGenotype> genotypes;
    for (const auto& f : files) genotypes.push_back(load_genotype(f));
    const std::string csv = distance_csv(hamming_matrix(genotypes));
    if (out)
        write_file(*out, csv);
    else
        std::cout << csv;
    return 0;
}

int cmd_report(const std::vector<std::string>& files, const std::optional<std::string>& out) {
    std::vector<MetricRow> rows;
    for (const auto& f : files) {
        auto part = parse_metrics_csv(read_file(f));
        rows.insert(rows.end(), part.begin(), part.end());
    }
    const std::string table = report_table(rows);
    if (out)
        write_file(*out, table);
    else
        std::cout << table;
    return 0;
}

}  // namespace

int main(int argc, char** argv) {
    CLI::App app{"Multi-headed neural ensemble search"};
    app.require_subcommand(1);

    auto* dataset = app.add_subcommand("dataset", "generate or inspect a dataset file");
    dataset->require_subcommand(1);
    auto* gen = dataset->add_subcommand("gen", "write a synthetic dataset");
    std::size_t classes = 10, n_train = 2000, n_val = 500, n_test = 500, size = 16;
    std::uint64_t gen_seed = 0;
    std::string gen_out;
    gen->add_option("--classes", classes)->capture_default_str();
    gen->add_option("--train", n_train)->capture_default_str();
    gen->add_option("--val", n_val)->capture_default_str();
    gen->add_option("--test", n_test)->capture_default_str();
    gen->add_option("--size", size)->capture_default_str();
    gen->add_option("--seed", gen_seed)->capture_default_str();
    gen->add_option("--out", gen_out, "output directory")->required();
    auto* inspect = dataset->add_subcommand("inspect", "print split sizes and class counts");
    std::string inspect_path;
    inspect->add_option("path", inspect_path, "dataset file or directory")->required();

    Common common;
    auto* search = app.add_subcommand("search", "run the architecture search");
    add_common(search, common);
    auto* train = app.add_subcommand("train", "train a fixed genotype");
    add_common(train, common);
    std::string genotype_path;
    train->add_option("--genotype", genotype_path, "genotype JSON file")->required();
    auto* eval = app.add_subcommand("eval", "evaluate trained models as one ensemble");
    add_common(eval, common);
    std::vector<std::string> models;
    eval->add_option("--model", models, "directory with genotype.json and params.bin")->required();
    auto* baseline = app.add_subcommand("baseline", "run a baseline ensemble method");
    add_common(baseline, common);
    auto* run = app.add_subcommand("run", "run the configured method end to end");
    add_common(run, common);

    auto* analyze = app.add_subcommand("analyze", "analysis tools");
    analyze->require_subcommand(1);
    auto* hessian = analyze->add_subcommand("hessian", "trace the dominant Hessian eigenvalue during search");
    add_common(hessian, common);
    auto* regret = analyze->add_subcommand("regret", "regret of random multi-headed samples");
    add_common(regret, common);
    auto* hamming = analyze->add_subcommand("hamming", "pairwise genotype distances");
    std::vector<std::string> genotype_files;
    std::optional<std::string> hamming_out;
    hamming->add_option("genotypes", genotype_files, "genotype JSON files")->required();
    hamming->add_option("--out", hamming_out, "output CSV file");

    auto* report = app.add_subcommand("report", "merge metrics CSVs into a comparison table");
    std::vector<std::string> csv_files;
    std::optional<std::string> report_out;
    report->add_option("csv", csv_files, "metrics CSV files")->required();
    report->add_option("--out", report_out, "output CSV file");

    try {
        app.parse(argc, argv);
    } catch (const CLI::ParseError& e) {
        const int code = app.exit(e);
        return code == 0 ? 0 : 1;
    }

    try {
        if (*gen) return cmd_dataset_gen(classes, n_train, n_val, n_test, size, gen_seed, gen_out);
        if (*inspect) return cmd_dataset_inspect(inspect_path);
        if (*search) return cmd_search(common);
        if (*train) return cmd_train(common, genotype_path);
        if (*eval) return cmd_eval(common, models);
        if (*baseline) return cmd_run(common, true);
        if (*run) return cmd_run(common, false);
        if (*hessian) return cmd_hessian(common);
        if (*regret) return cmd_regret(common);
        if (*hamming) return cmd_hamming(genotype_files, hamming_out);
        if (*report) return cmd_report(csv_files, report_out);
    } catch (const ConfigError& e) {
        fmt::print(stderr, "error: {}\n", e.what());
        return 1;
    } catch (const std::exception& e) {
        fmt::print(stderr, "error: {}\n", e.what());
        return 2;
    }
    return 1;
}
