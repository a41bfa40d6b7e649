#include "mhnes/harness.hpp"

#include <fmt/format.h>
#include <openssl/evp.h>

#include <chrono>
#include <cmath>
#include <ctime>
#include <filesystem>
#include <fstream>
#include <json.hpp>
#include <map>
#include <set>
#include <sstream>

namespace mhnes {

using nlohmann::json;
namespace fs = std::filesystem;

namespace {

// Typed access to one JSON object that remembers which keys were consumed.
class Fields {
public:
    Fields(const json& j, std::string path) : j_(j), path_(std::move(path)) {
        if (!j_.is_object()) throw ConfigError(fmt::format("{}: expected an object", where()));
    }

    std::string at(const std::string& key) const { return path_.empty() ? key : path_ + "." + key; }
    bool has(const std::string& key) const { return j_.contains(key); }

    void get(const std::string& key, std::size_t& out) {
        if (const json* v = find(key)) {
            if (!v->is_number_integer() || (v->is_number_integer() && v->get<long long>() < 0))
                throw ConfigError(fmt::format("{}: expected a non-negative integer", at(key)));
            out = v->get<std::size_t>();
        }
    }
    void get(const std::string& key, std::uint64_t& out, int) {
        std::size_t v = out;
        get(key, v);
        out = v;
    }
    void get(const std::string& key, double& out) {
        if (const json* v = find(key)) {
            if (!v->is_number()) throw ConfigError(fmt::format("{}: expected a number", at(key)));
            out = v->get<double>();
        }
    }
    void get(const std::string& key, bool& out) {
        if (const json* v = find(key)) {
            if (!v->is_boolean()) throw ConfigError(fmt::format("{}: expected true or false", at(key)));
            out = v->get<bool>();
        }
    }
    void get(const std::string& key, std::string& out) {
        if (const json* v = find(key)) {
            if (!v->is_string()) throw ConfigError(fmt::format("{}: expected a string", at(key)));
            out = v->get<std::string>();
        }
    }
    template <typename T>
    void get_list(const std::string& key, std::vector<T>& out) {
        if (const json* v = find(key)) {
            if (!v->is_array()) throw ConfigError(fmt::format("{}: expected a list", at(key)));
            out.clear();
            for (std::size_t i = 0; i < v->size(); ++i) {
                const json& e = (*v)[i];
                if (!e.is_number_integer() || e.get<long long>() < 0)
                    throw ConfigError(fmt::format("{}[{}]: expected a non-negative integer", at(key), i));
                out.push_back(e.get<T>());
            }
        }
    }
    const json* object(const std::string& key) { return find(key); }

    void finish() const {
        for (const auto& [key, _] : j_.items())
            if (!seen_.count(key)) throw ConfigError(fmt::format("{}: unknown field", at(key)));
    }

private:
    const json* find(const std::string& key) {
        seen_.insert(key);
        auto it = j_.find(key);
        return it == j_.end() ? nullptr : &*it;
    }
    std::string where() const { return path_.empty() ? "config" : path_; }

    const json& j_;
    std::string path_;
    std::set<std::string> seen_;
};

void check(bool ok, const std::string& message) {
    if (!ok) throw ConfigError(message);
}

template <typename Fn>
void rethrow_as_config(Fn&& fn) {
    try {
        fn();
    } catch (const std::invalid_argument& e) {
        throw ConfigError(e.what());
    }
}

std::string format_double(double v) { return fmt::format("{:.17g}", v); }

double parse_double(const std::string& s) {
    std::size_t used = 0;
    double v = std::stod(s, &used);
    if (used != s.size()) throw std::runtime_error(fmt::format("bad number '{}'", s));
    return v;
}

std::vector<std::string> split_line(const std::string& line) {
    std::vector<std::string> out;
    std::stringstream ss(line);
    std::string cell;
    while (std::getline(ss, cell, ',')) out.push_back(cell);
    if (!line.empty() && line.back() == ',') out.emplace_back();
    return out;
}

std::string now_iso() {
    const std::time_t t = std::time(nullptr);
    char buf[32];
    std::strftime(buf, sizeof(buf), "%Y-%m-%dT%H:%M:%SZ", std::gmtime(&t));
    return buf;
}

double seconds_since(std::chrono::steady_clock::time_point t0) {
    return std::chrono::duration<double>(std::chrono::steady_clock::now() - t0).count();
}

struct Stats {
    double mean = 0, std = 0;
};

Stats stats(const std::vector<double>& v) {
    Stats s;
    for (double x : v) s.mean += x;
    s.mean /= static_cast<double>(v.size());
    if (v.size() > 1) {
        double ss = 0;
        for (double x : v) ss += (x - s.mean) * (x - s.mean);
        s.std = std::sqrt(ss / static_cast<double>(v.size() - 1));
    }
    return s;
}

bool is_aggregate(const MetricRow& r) { return r.seed == "mean" || r.seed == "std"; }

}  // namespace

ExperimentConfig parse_config(const std::string& text) {
    json root;
    try {
        root = json::parse(text);
    } catch (const json::parse_error& e) {
        throw ConfigError(fmt::format("config: invalid JSON: {}", e.what()));
    }
    ExperimentConfig c;
    Fields top(root, "");

    if (const json* d = top.object("dataset")) {
        Fields f(*d, "dataset");
        std::string path;
        f.get("path", path);
        if (f.has("path")) c.dataset.path = path;
        f.get("classes", c.dataset.classes);
        f.get("train", c.dataset.n_train);
        f.get("val", c.dataset.n_val);
        f.get("test", c.dataset.n_test);
        f.get("size", c.dataset.size);
        f.get("seed", c.dataset.seed, 0);
        f.finish();
        check(c.dataset.classes >= 2, "dataset.classes: must be at least 2");
        check(c.dataset.size >= 8, "dataset.size: must be at least 8");
        check(c.dataset.n_train >= 2, "dataset.train: must be at least 2");
        check(c.dataset.n_val >= 1, "dataset.val: must be at least 1");
        check(c.dataset.n_test >= 1, "dataset.test: must be at least 1");
    }
    if (const json* m = top.object("model")) {
        Fields f(*m, "model");
        auto& g = c.model.genotype;
        f.get("backbone_layers", c.model.backbone.layers);
        f.get("backbone_width", c.model.backbone.width);
        f.get("heads", g.heads);
        f.get("cells", g.cells);
        f.get("nodes", g.nodes);
        f.get("head_width", g.head_width);
        f.get("noise_std", c.model.noise_std);
        if (const json* ops = f.object("ops")) {
            check(ops->is_array() && !ops->empty(), "model.ops: expected a non-empty list of operation names");
            g.ops.clear();
            for (std::size_t i = 0; i < ops->size(); ++i) {
                check((*ops)[i].is_string(), fmt::format("model.ops[{}]: expected an operation name", i));
                try {
                    g.ops.push_back(op_from_name((*ops)[i].get<std::string>()));
                } catch (const std::invalid_argument& e) {
                    throw ConfigError(fmt::format("model.ops[{}]: {}", i, e.what()));
                }
                for (std::size_t j = 0; j < i; ++j)
                    check(g.ops[j] != g.ops[i], fmt::format("model.ops[{}]: duplicate operation", i));
            }
        }
        f.finish();
        check(g.heads >= 1, "model.heads: must be at least 1");
        check(g.cells >= 1, "model.cells: must be at least 1");
        check(g.nodes >= 1, "model.nodes: must be at least 1");
        check(g.head_width >= 1, "model.head_width: must be at least 1");
        check(c.model.backbone.width >= 1, "model.backbone_width: must be at least 1");
        check(c.model.noise_std >= 0, "model.noise_std: must be non-negative");
    }
    {
        std::string method(method_name(c.method));
        top.get("method", method);
        try {
            c.method = method_from_name(method);
        } catch (const std::invalid_argument& e) {
            throw ConfigError(fmt::format("method: {}", e.what()));
        }
    }
    if (const json* s = top.object("search")) {
        Fields f(*s, "search");
        auto& h = c.search;
        f.get("search_epochs", h.search_epochs);
        f.get("search_batch", h.search_batch);
        f.get("w_lr", h.w_lr);
        f.get("w_momentum", h.w_momentum);
        f.get("w_weight_decay", h.w_weight_decay);
        f.get("a_lr", h.a_lr);
        f.get("a_beta1", h.a_beta1);
        f.get("a_beta2", h.a_beta2);
        f.get("a_weight_decay", h.a_weight_decay);
        f.get("partial", h.partial);
        f.get("warmstart_epochs", h.warmstart_epochs);
        f.get("drnas_stage_epochs", h.drnas_stage_epochs);
        f.get("drnas_warmstart_epochs", h.drnas_warmstart_epochs);
        f.get("drnas_keep_ops", h.drnas_keep_ops);
        f.get("drnas_stage2_partial", h.drnas_stage2_partial);
        f.get("eval_samples", h.eval_samples);
        f.finish();
    }
    top.get("lambda_jsd", c.search.lambda_jsd);
    rethrow_as_config([&] { c.search.validate(); });
    if (const json* t = top.object("train")) {
        Fields f(*t, "train");
        f.get("epochs", c.train.epochs);
        f.get("batch", c.train.batch);
        f.get("lr", c.train.lr);
        f.get("momentum", c.train.momentum);
        f.get("weight_decay", c.train.weight_decay);
        f.get("label_smoothing", c.train.label_smoothing);
        f.finish();
    }
    rethrow_as_config([&] { c.train.validate(); });
    top.get("pool_size", c.pool_size);
    check(c.pool_size >= 1, "pool_size: must be at least 1");
    top.get_list("seeds", c.seeds);
    check(!c.seeds.empty(), "seeds: must list at least one seed");
    top.get("output", c.output);
    check(!c.output.empty(), "output: must not be empty");
    if (const json* a = top.object("analysis")) {
        Fields f(*a, "analysis");
        f.get("eig_trace", c.eig_trace);
        f.get("eig_tol", c.probe.tol);
        f.get("eig_max_iter", c.probe.max_iter);
        f.get_list("regret_m", c.regret_m);
        f.get("regret_samples", c.regret_samples);
        f.finish();
        check(c.probe.tol > 0, "analysis.eig_tol: must be positive");
        check(c.probe.max_iter >= 1, "analysis.eig_max_iter: must be at least 1");
        check(c.regret_samples >= 2, "analysis.regret_samples: must be at least 2");
        for (std::size_t m : c.regret_m) check(m >= 1, "analysis.regret_m: sizes must be at least 1");
    }
    top.finish();
    c.probe.lambda_jsd = c.search.lambda_jsd;

    if (c.method == Method::pcdarts || c.method == Method::drnas) {
        check(c.model.genotype.head_width % c.search.partial == 0,
              fmt::format("search.partial: head_width {} is not divisible by {}", c.model.genotype.head_width, c.search.partial));
    }
    if (c.method == Method::drnas) {
        check(c.search.drnas_stage2_partial >= 1 && c.model.genotype.head_width % c.search.drnas_stage2_partial == 0,
              fmt::format("search.drnas_stage2_partial: head_width {} is not divisible by {}", c.model.genotype.head_width,
                          c.search.drnas_stage2_partial));
    }
    if (!c.dataset.path) {
        check((c.dataset.size >> (c.model.backbone.layers + 1)) >= 1,
              fmt::format("model.backbone_layers: {} stride-2 stages plus the reduction cell exceed {}x{} images",
                          c.model.backbone.layers, c.dataset.size, c.dataset.size));
    }
    return c;
}

std::string read_file(const std::string& path) {
    std::ifstream in(path, std::ios::binary);
    if (!in) throw std::runtime_error(fmt::format("cannot read {}", path));
    return std::string(std::istreambuf_iterator<char>(in), {});
}

void write_file(const std::string& path, std::string_view bytes) {
    const fs::path p(path);
    if (p.has_parent_path()) fs::create_directories(p.parent_path());
    std::ofstream out(path, std::ios::binary);
    if (!out) throw std::runtime_error(fmt::format("cannot write {}", path));
    out.write(bytes.data(), static_cast<std::streamsize>(bytes.size()));
}

ExperimentConfig load_config(const std::string& path, std::string* text) {
    if (!fs::is_regular_file(path)) throw ConfigError(fmt::format("config file {} not found", path));
    std::string bytes = read_file(path);
    auto c = parse_config(bytes);
    if (text) *text = std::move(bytes);
    return c;
}

std::string config_to_json(const ExperimentConfig& c) {
    json j;
    json d = {{"classes", c.dataset.classes}, {"train", c.dataset.n_train}, {"val", c.dataset.n_val},
              {"test", c.dataset.n_test}, {"size", c.dataset.size}, {"seed", c.dataset.seed}};
    if (c.dataset.path) d["path"] = *c.dataset.path;
    j["dataset"] = d;
    json ops = json::array();
    for (OpKind op : c.model.genotype.ops) ops.push_back(std::string(op_name(op)));
    j["model"] = {{"backbone_layers", c.model.backbone.layers}, {"backbone_width", c.model.backbone.width},
                  {"heads", c.model.genotype.heads}, {"cells", c.model.genotype.cells}, {"nodes", c.model.genotype.nodes},
                  {"head_width", c.model.genotype.head_width}, {"ops", ops}, {"noise_std", c.model.noise_std}};
    j["method"] = std::string(method_name(c.method));
    const auto& h = c.search;
    j["search"] = {{"search_epochs", h.search_epochs}, {"search_batch", h.search_batch}, {"w_lr", h.w_lr},
                   {"w_momentum", h.w_momentum}, {"w_weight_decay", h.w_weight_decay}, {"a_lr", h.a_lr},
                   {"a_beta1", h.a_beta1}, {"a_beta2", h.a_beta2}, {"a_weight_decay", h.a_weight_decay},
                   {"partial", h.partial}, {"warmstart_epochs", h.warmstart_epochs},
                   {"drnas_stage_epochs", h.drnas_stage_epochs}, {"drnas_warmstart_epochs", h.drnas_warmstart_epochs},
                   {"drnas_keep_ops", h.drnas_keep_ops}, {"drnas_stage2_partial", h.drnas_stage2_partial},
                   {"eval_samples", h.eval_samples}};
    j["lambda_jsd"] = h.lambda_jsd;
    j["train"] = {{"epochs", c.train.epochs}, {"batch", c.train.batch}, {"lr", c.train.lr},
                  {"momentum", c.train.momentum}, {"weight_decay", c.train.weight_decay},
                  {"label_smoothing", c.train.label_smoothing}};
    j["pool_size"] = c.pool_size;
    j["seeds"] = c.seeds;
    j["output"] = c.output;
    j["analysis"] = {{"eig_trace", c.eig_trace}, {"eig_tol", c.probe.tol}, {"eig_max_iter", c.probe.max_iter},
                     {"regret_m", c.regret_m}, {"regret_samples", c.regret_samples}};
    return j.dump(2) + "\n";
}

DatasetBundle load_dataset(const DatasetConfig& config) {
    if (config.path) return load_raw(*config.path);
    return gen_synthetic(config.classes, config.n_train, config.n_val, config.n_test, config.size, config.seed);
}

ModelSpec model_for(const ExperimentConfig& config, const DatasetBundle& data) {
    ModelSpec spec = config.model;
    spec.num_classes = data.num_classes;
    spec.in_channels = data.train.channels;
    spec.image_size = data.train.height;
    return spec;
}

std::string sha256_hex(std::string_view bytes) {
    unsigned char digest[EVP_MAX_MD_SIZE];
    unsigned int len = 0;
    if (EVP_Digest(bytes.data(), bytes.size(), digest, &len, EVP_sha256(), nullptr) != 1)
        throw std::runtime_error("sha256 failed");
    std::string out;
    for (unsigned int i = 0; i < len; ++i) out += fmt::format("{:02x}", digest[i]);
    return out;
}

std::string metrics_csv(const std::vector<MetricRow>& rows) {
    std::string out(kMetricsHeader);
    out += "\n";
    for (const auto& r : rows) {
        out += fmt::format("{},{},{},{},{},{},{},{},{},{},{},{}\n", r.method, r.seed, r.m, r.split, r.severity,
                           format_double(r.nll), format_double(r.error), format_double(r.ece), format_double(r.oracle_nll),
                           format_double(r.params), format_double(r.steps), format_double(r.wall_sec));
    }
    return out;
}

std::vector<MetricRow> parse_metrics_csv(const std::string& text) {
    std::stringstream ss(text);
    std::string line;
    if (!std::getline(ss, line) || line != kMetricsHeader)
        throw std::runtime_error(fmt::format("metrics CSV header mismatch: expected '{}'", kMetricsHeader));
    std::vector<MetricRow> rows;
    std::size_t lineno = 1;
    while (std::getline(ss, line)) {
        ++lineno;
        if (line.empty()) continue;
        auto cells = split_line(line);
        if (cells.size() != 12) throw std::runtime_error(fmt::format("metrics CSV line {}: expected 12 fields", lineno));
        try {
            MetricRow r;
            r.method = cells[0];
            r.seed = cells[1];
            r.m = std::stoul(cells[2]);
            r.split = cells[3];
            r.severity = std::stoi(cells[4]);
            r.nll = parse_double(cells[5]);
            r.error = parse_double(cells[6]);
            r.ece = parse_double(cells[7]);
            r.oracle_nll = parse_double(cells[8]);
            r.params = parse_double(cells[9]);
            r.steps = parse_double(cells[10]);
            r.wall_sec = parse_double(cells[11]);
            rows.push_back(std::move(r));
        } catch (const std::exception& e) {
            throw std::runtime_error(fmt::format("metrics CSV line {}: {}", lineno, e.what()));
        }
    }
    return rows;
}

std::vector<MetricRow> aggregate_rows(const std::vector<MetricRow>& rows) {
    using Key = std::tuple<std::string, std::size_t, std::string, int>;
    std::vector<Key> order;
    std::map<Key, std::vector<const MetricRow*>> groups;
    for (const auto& r : rows) {
        if (is_aggregate(r)) continue;
        Key k{r.method, r.m, r.split, r.severity};
        if (!groups.count(k)) order.push_back(k);
        groups[k].push_back(&r);
    }
    std::vector<MetricRow> out;
    for (const auto& k : order) {
        const auto& g = groups[k];
        MetricRow mean{std::get<0>(k), "mean", std::get<1>(k), std::get<2>(k), std::get<3>(k)};
        MetricRow sd = mean;
        sd.seed = "std";
        auto fill = [&](double MetricRow::*field) {
            std::vector<double> v;
            for (const auto* r : g) v.push_back(r->*field);
            auto s = stats(v);
            mean.*field = s.mean;
            sd.*field = s.std;
        };
        for (auto field : {&MetricRow::nll, &MetricRow::error, &MetricRow::ece, &MetricRow::oracle_nll, &MetricRow::params,
                           &MetricRow::steps, &MetricRow::wall_sec})
            fill(field);
        out.push_back(mean);
        out.push_back(sd);
    }
    return out;
}

std::vector<MetricRow> evaluate_rows(const Ensemble& ensemble, const DatasetBundle& data, const std::string& method,
                                     std::uint64_t seed, double steps, double wall_sec) {
    std::vector<MetricRow> rows;
    const double params = static_cast<double>(ensemble.parameter_count());
    const std::uint64_t noise = derive_seed(seed, 44);
    auto row = [&](const std::string& split, int severity, const PredictionMatrix& preds) {
        auto rep = evaluate(preds);
        rows.push_back({method, std::to_string(seed), preds.size(), split, severity, rep.nll, rep.error, rep.ece,
                        rep.oracle_nll, params, steps, wall_sec});
    };
    row("val", 0, ensemble.predict(data.val, kEvalBatch, noise));
    for (int s = 0; s <= 5; ++s) {
        const ImageSet shifted = data.test.with_pixels(
            apply_shift(data.test.pixels, data.test.image_numel(), s, derive_seed(seed, 900 + static_cast<std::uint64_t>(s))));
        row("test", s, ensemble.predict(shifted, kEvalBatch, noise));
    }
    return rows;
}

std::string budget_json(Method method, std::uint64_t seed, const Budget& actual, const Budget& planned) {
    auto to_json = [](const Budget& b) {
        return json{{"search_steps", b.search_steps}, {"train_steps", b.train_steps}, {"eval_batches", b.eval_batches},
                    {"total_steps", b.total_steps()}};
    };
    json j = {{"method", std::string(method_name(method))}, {"seed", seed}, {"actual", to_json(actual)},
              {"planned", to_json(planned)}, {"matches_plan", actual == planned}};
    return j.dump(2) + "\n";
}

bool RunOutcome::all_ok() const {
    for (const auto& s : seeds)
        if (!s.ok) return false;
    return true;
}

SearchResult run_search(const ExperimentConfig& config, const DatasetBundle& data, std::uint64_t seed, EigTrace* trace) {
    const ModelSpec spec = model_for(config, data);
    EpochHook hook;
    if (trace) {
        EigProbeOptions probe = config.probe;
        probe.seed = seed;
        hook = eig_trace_hook(*trace, probe);
    }
    switch (config.method) {
        case Method::pcdarts: return pcdarts_search(data, spec, config.search, seed, hook);
        case Method::drnas: return drnas_search(data, spec, config.search, seed, hook);
        case Method::randomnas:
            if (trace) throw std::invalid_argument("eigenvalue tracing needs pcdarts or drnas");
            return randomnas_search(data, spec, config.search, seed);
        default: throw std::invalid_argument(fmt::format("{} is not a one-shot search method", method_name(config.method)));
    }
}

MethodRun run_method(const ExperimentConfig& config, const DatasetBundle& data, std::uint64_t seed) {
    const ModelSpec spec = model_for(config, data);
    MethodRun out;
    if (is_one_shot(config.method)) {
        const bool trace = config.eig_trace && config.method != Method::randomnas;
        if (trace) out.eig_trace.emplace();
        auto found = run_search(config, data, seed, trace ? &*out.eig_trace : nullptr);
        auto model = train_discrete(found.genotype, data, spec, config.train, derive_seed(seed, 71), false);
        out.budget.search_steps = found.steps;
        out.budget.eval_batches = found.eval_batches;
        out.budget.train_steps = model.steps;
        out.genotypes.push_back(found.genotype);
        out.ensemble.models.push_back(std::move(model.net));
        out.ensemble.tags.push_back("searched");
    } else {
        auto b = build_baseline(config.method, data, spec, config.train, config.pool_size, seed);
        out.ensemble = std::move(b.ensemble);
        out.budget = b.budget;
        out.genotypes = std::move(b.genotypes);
    }
    return out;
}

RunOutcome run_experiment(const ExperimentConfig& config, const std::string& config_text) {
    const auto t_start = std::chrono::steady_clock::now();
    const std::string started = now_iso();
    const fs::path root(config.output);
    fs::create_directories(root);
    write_file((root / "config.json").string(), config_text);

    RunOutcome outcome;
    json manifest_seeds = json::array();
    std::string dataset_hash;
    DatasetBundle data;
    try {
        data = load_dataset(config.dataset);
        data.validate();
    } catch (const std::exception& e) {
        for (auto seed : config.seeds) outcome.seeds.push_back({seed, false, fmt::format("dataset: {}", e.what()), 0, {}});
    }
    const std::size_t heads = config.model.genotype.heads;
    if (outcome.seeds.empty()) {
        for (auto seed : config.seeds) {
            const auto t0 = std::chrono::steady_clock::now();
            SeedOutcome so{seed, false, "", 0, {}};
            const fs::path dir = root / fmt::format("seed{}", seed);
            try {
                fs::create_directories(dir);
                auto result = run_method(config, data, seed);
                so.budget = result.budget;
                so.wall_sec = seconds_since(t0);
                auto rows = evaluate_rows(result.ensemble, data, std::string(method_name(config.method)), seed,
                                          static_cast<double>(result.budget.total_steps()), so.wall_sec);
                outcome.rows.insert(outcome.rows.end(), rows.begin(), rows.end());
                for (std::size_t i = 0; i < result.genotypes.size(); ++i) {
                    const std::string name =
                        result.genotypes.size() == 1 ? "genotype.json" : fmt::format("genotype_{}.json", i);
                    save_genotype(result.genotypes[i], (dir / name).string());
                }
                const Budget planned = plan_budget(config.method, config.search, config.train, data.train.size(),
                                                   data.val.size(), heads, config.pool_size);
                write_file((dir / "budget.json").string(), budget_json(config.method, seed, result.budget, planned));
                if (result.eig_trace) write_file((dir / "eig_trace.csv").string(), result.eig_trace->to_csv());
                write_file((dir / "metrics.csv").string(), metrics_csv(rows));
                so.ok = true;
            } catch (const std::exception& e) {
                so.error = e.what();
                so.wall_sec = seconds_since(t0);
            }
            outcome.seeds.push_back(so);
        }
    }
    auto aggregate = aggregate_rows(outcome.rows);
    outcome.rows.insert(outcome.rows.end(), aggregate.begin(), aggregate.end());
    write_file((root / "metrics.csv").string(), metrics_csv(outcome.rows));

    for (const auto& s : outcome.seeds) {
        json e = {{"seed", s.seed}, {"status", s.ok ? "ok" : "failed"}, {"wall_sec", s.wall_sec}};
        if (!s.ok) e["error"] = s.error;
        if (s.ok) e["total_steps"] = s.budget.total_steps();
        manifest_seeds.push_back(e);
    }
    json manifest = {{"config_file", "config.json"},
                     {"config_sha256", sha256_hex(config_text)},
                     {"method", std::string(method_name(config.method))},
                     {"dataset", config.dataset.path ? *config.dataset.path : fmt::format("synthetic:seed={}", config.dataset.seed)},
                     {"versions", {{"mhnes", "0.1.0"}, {"compiler", __VERSION__}, {"cxx_standard", __cplusplus}}},
                     {"started_at", started},
                     {"wall_sec", seconds_since(t_start)},
                     {"seeds", manifest_seeds}};
    write_file((root / "manifest.json").string(), manifest.dump(2) + "\n");
    return outcome;
}

std::string report_table(const std::vector<MetricRow>& rows) {
    using Key = std::pair<std::string, std::size_t>;
    std::vector<Key> order;
    std::map<Key, std::vector<const MetricRow*>> groups;
    for (const auto& r : rows) {
        if (is_aggregate(r) || r.split != "test" || r.severity != 0) continue;
        Key k{r.method, r.m};
        if (!groups.count(k)) order.push_back(k);
        groups[k].push_back(&r);
    }
    std::string out = "method,M,seeds,nll_mean,nll_std,error_mean,error_std,ece_mean,ece_std\n";
    for (const auto& k : order) {
        const auto& g = groups[k];
        auto col = [&](double MetricRow::*field) {
            std::vector<double> v;
            for (const auto* r : g) v.push_back(r->*field);
            return stats(v);
        };
        auto n = col(&MetricRow::nll), e = col(&MetricRow::error), c = col(&MetricRow::ece);
        out += fmt::format("{},{},{},{},{},{},{},{},{}\n", k.first, k.second, g.size(), format_double(n.mean),
                           format_double(n.std), format_double(e.mean), format_double(e.std), format_double(c.mean),
                           format_double(c.std));
    }
    return out;
}

}  // namespace mhnes
