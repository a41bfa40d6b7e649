#include <doctest.h>

#include <cmath>
#include <cstdlib>
#include <filesystem>
#include <json.hpp>

#include "mhnes/harness.hpp"

using namespace mhnes;
namespace fs = std::filesystem;

namespace {

fs::path temp_dir(const std::string& name) {
    auto dir = fs::temp_directory_path() / ("mhnes_test_harness_" + name);
    fs::remove_all(dir);
    fs::create_directories(dir);
    return dir;
}

std::string tiny_config(const std::string& method, const fs::path& out) {
    return R"({"dataset": {"classes": 3, "train": 96, "val": 48, "test": 48, "size": 8, "seed": 5},
 "model": {"backbone_layers": 1, "backbone_width": 4, "heads": 2, "cells": 1, "nodes": 2, "head_width": 4},
 "method": ")" + method + R"(", "search": {"search_epochs": 2, "warmstart_epochs": 1, "search_batch": 16, "partial": 2,
 "drnas_stage_epochs": 2, "drnas_warmstart_epochs": 1, "drnas_stage2_partial": 2, "eval_samples": 2},
 "train": {"epochs": 2, "batch": 16}, "pool_size": 3, "seeds": [0, 1], "output": ")" + out.string() + R"("})";
}

std::string config_error(const std::string& text) {
    try {
        parse_config(text);
    } catch (const ConfigError& e) {
        return e.what();
    }
    return "";
}

bool starts_with(const std::string& s, const std::string& prefix) { return s.rfind(prefix, 0) == 0; }

}  // namespace

TEST_CASE("config defaults and round trip") {
    auto c = parse_config("{}");
    CHECK(c.method == Method::drnas);
    CHECK(c.seeds == std::vector<std::uint64_t>{0, 1, 2});
    CHECK(c.search.lambda_jsd == 0.1);
    CHECK(c.model.genotype.heads == 3);

    auto t = parse_config(tiny_config("pcdarts", "x"));
    CHECK(t.model.genotype.nodes == 2);
    CHECK(t.search.partial == 2);
    auto back = parse_config(config_to_json(t));
    CHECK(config_to_json(back) == config_to_json(t));
    CHECK(parse_config(R"({"lambda_jsd": 0.5})").search.lambda_jsd == 0.5);
}

TEST_CASE("config errors name the field path") {
    CHECK(starts_with(config_error("{"), "config: invalid JSON"));
    CHECK(starts_with(config_error(R"({"bogus": 1})"), "bogus: unknown field"));
    CHECK(starts_with(config_error(R"({"model": {"heds": 1}})"), "model.heds: unknown field"));
    CHECK(starts_with(config_error(R"({"model": {"heads": 0}})"), "model.heads"));
    CHECK(starts_with(config_error(R"({"model": {"heads": -1}})"), "model.heads"));
    CHECK(starts_with(config_error(R"({"model": {"heads": "3"}})"), "model.heads"));
    CHECK(starts_with(config_error(R"({"model": {"ops": ["skip_connect", "none"]}})"), "model.ops[1]"));
    CHECK(starts_with(config_error(R"({"model": {"ops": ["skip_connect", "skip_connect"]}})"), "model.ops[1]"));
    CHECK(starts_with(config_error(R"({"dataset": {"classes": 1}})"), "dataset.classes"));
    CHECK(starts_with(config_error(R"({"dataset": {"size": 4}})"), "dataset.size"));
    CHECK(starts_with(config_error(R"({"method": "enas"})"), "method"));
    CHECK(starts_with(config_error(R"({"seeds": []})"), "seeds"));
    CHECK(starts_with(config_error(R"({"seeds": [1, -2]})"), "seeds[1]"));
    CHECK(starts_with(config_error(R"({"search": {"warmstart_epochs": 60}})"), "search.warmstart_epochs"));
    CHECK(starts_with(config_error(R"({"train": {"lr": -1}})"), "train.lr"));
    CHECK(starts_with(config_error(R"({"method": "pcdarts", "search": {"partial": 3}})"), "search.partial"));
    CHECK(starts_with(config_error(R"({"model": {"backbone_layers": 4}})"), "model.backbone_layers"));
    CHECK(starts_with(config_error(R"({"analysis": {"regret_samples": 1}})"), "analysis.regret_samples"));
    CHECK_THROWS_AS(load_config("/nonexistent/config.json"), ConfigError);
}

TEST_CASE("sha256 known answers") {
    CHECK(sha256_hex("") == "e3b0c44298fc1c149afbf4c8996fb92427ae41e4649b934ca495991b7852b855");
    CHECK(sha256_hex("abc") == "ba7816bf8f01cfea414140de5dae2223b00361a396177a9cb410ff61f20015ad");
}

TEST_CASE("metrics CSV round trip and aggregation") {
    std::vector<MetricRow> rows;
    for (int s = 0; s < 3; ++s) {
        rows.push_back({"drnas", std::to_string(s), 3, "test", 0, 0.1 * (s + 1), 0.2, 0.01 * s, 0.05, 100, 40, 1.5});
        rows.push_back({"drnas", std::to_string(s), 3, "test", 1, 0.3 + s, 0.4, 0.0, 0.1, 100, 40, 1.5});
    }
    auto back = parse_metrics_csv(metrics_csv(rows));
    REQUIRE(back.size() == rows.size());
    CHECK(metrics_csv(back) == metrics_csv(rows));

    auto agg = aggregate_rows(rows);
    REQUIRE(agg.size() == 4);
    CHECK(agg[0].seed == "mean");
    CHECK(agg[1].seed == "std");
    CHECK(agg[0].nll == doctest::Approx((0.1 + 0.2 + 0.3) / 3).epsilon(1e-15));
    CHECK(agg[1].nll == doctest::Approx(0.1).epsilon(1e-12));
    CHECK(agg[2].severity == 1);
    CHECK(agg[2].nll == doctest::Approx(1.3));
    CHECK(agg[3].nll == doctest::Approx(1.0));
    CHECK(agg[1].params == 0.0);

    CHECK_THROWS(parse_metrics_csv("method,seed\n"));
    CHECK_THROWS(parse_metrics_csv(std::string(kMetricsHeader) + "\na,b,c\n"));
}

TEST_CASE("report merges CSVs into one row per method and M") {
    auto row = [](std::string method, std::string seed, std::size_t m, std::string split, int sev, double nll, double err,
                  double ece) { return MetricRow{method, seed, m, split, sev, nll, err, ece, 0, 0, 0, 0}; };
    std::vector<MetricRow> a = {row("nes_rs", "0", 3, "test", 0, 1.0, 0.2, 0.05), row("nes_rs", "1", 3, "test", 0, 2.0, 0.4, 0.07),
                                row("nes_rs", "0", 3, "test", 2, 9.0, 0.9, 0.9), row("nes_rs", "0", 3, "val", 0, 9.0, 0.9, 0.9)};
    std::vector<MetricRow> b = {row("drnas", "0", 3, "test", 0, 0.5, 0.1, 0.01), row("drnas", "1", 3, "test", 0, 0.7, 0.3, 0.03),
                                row("drnas", "2", 3, "test", 0, 0.9, 0.2, 0.02)};
    auto aa = aggregate_rows(a);
    a.insert(a.end(), aa.begin(), aa.end());
    auto all = parse_metrics_csv(metrics_csv(a));
    auto pb = parse_metrics_csv(metrics_csv(b));
    all.insert(all.end(), pb.begin(), pb.end());

    const std::string table = report_table(all);
    // Hand merge: nes_rs nll {1,2} -> mean 1.5, sample std sqrt(0.5);
    // drnas nll {.5,.7,.9} -> mean .7, std .2; error {.1,.3,.2} -> .2, .1.
    std::stringstream ss(table);
    std::string header, l1, l2, extra;
    std::getline(ss, header);
    std::getline(ss, l1);
    std::getline(ss, l2);
    CHECK_FALSE(std::getline(ss, extra));
    CHECK(header == "method,M,seeds,nll_mean,nll_std,error_mean,error_std,ece_mean,ece_std");
    auto cells = [](const std::string& line) {
        std::vector<std::string> out;
        std::stringstream s(line);
        std::string c;
        while (std::getline(s, c, ',')) out.push_back(c);
        return out;
    };
    auto r1 = cells(l1), r2 = cells(l2);
    CHECK(r1[0] == "nes_rs");
    CHECK(r1[2] == "2");
    CHECK(std::stod(r1[3]) == doctest::Approx(1.5));
    CHECK(std::stod(r1[4]) == doctest::Approx(std::sqrt(0.5)));
    CHECK(std::stod(r1[7]) == doctest::Approx(0.06));
    CHECK(r2[0] == "drnas");
    CHECK(r2[2] == "3");
    CHECK(std::stod(r2[3]) == doctest::Approx(0.7));
    CHECK(std::stod(r2[4]) == doctest::Approx(0.2));
    CHECK(std::stod(r2[5]) == doctest::Approx(0.2));
    CHECK(std::stod(r2[6]) == doctest::Approx(0.1));
}

TEST_CASE("run writes artifacts and is byte-reproducible") {
    for (std::string method : {"pcdarts", "drnas", "randomnas", "deepens_rs"}) {
        CAPTURE(method);
        auto d1 = temp_dir(method + "_1"), d2 = temp_dir(method + "_2");
        const std::string t1 = tiny_config(method, d1), t2 = tiny_config(method, d2);
        auto o1 = run_experiment(parse_config(t1), t1);
        auto o2 = run_experiment(parse_config(t2), t2);
        REQUIRE(o1.all_ok());
        REQUIRE(o2.all_ok());

        auto strip_wall = [](std::vector<MetricRow> rows) {
            for (auto& r : rows) r.wall_sec = 0;
            return metrics_csv(rows);
        };
        auto csv1 = parse_metrics_csv(read_file((d1 / "metrics.csv").string()));
        auto csv2 = parse_metrics_csv(read_file((d2 / "metrics.csv").string()));
        CHECK(strip_wall(csv1) == strip_wall(csv2));
        // Two seeds, 7 rows each, then mean and std per group.
        REQUIRE(csv1.size() == 2 * 7 + 2 * 7);
        CHECK(csv1[14].seed == "mean");
        CHECK(csv1[14].nll == doctest::Approx((csv1[0].nll + csv1[7].nll) / 2).epsilon(1e-14));
        CHECK(csv1.back().seed == "std");

        auto manifest = nlohmann::json::parse(read_file((d1 / "manifest.json").string()));
        CHECK(manifest["config_sha256"] == sha256_hex(read_file((d1 / "config.json").string())));
        CHECK(manifest["seeds"].size() == 2);
        CHECK(manifest["seeds"][0]["status"] == "ok");

        auto budget = nlohmann::json::parse(read_file((d1 / "seed0" / "budget.json").string()));
        CHECK(budget["matches_plan"] == true);
        CHECK(budget["actual"]["total_steps"].get<double>() == csv1[0].steps);
        const bool single = method != "deepens_rs";
        CHECK(fs::exists(d1 / "seed0" / (single ? "genotype.json" : "genotype_0.json")));
    }
}

TEST_CASE("a failing seed is recorded and does not stop the others") {
    auto dir = temp_dir("failing");
    auto config = parse_config(tiny_config("pcdarts", dir));
    config.dataset.path = (dir / "no_such_dataset.bin").string();
    auto outcome = run_experiment(config, "{}");
    CHECK_FALSE(outcome.all_ok());
    auto manifest = nlohmann::json::parse(read_file((dir / "manifest.json").string()));
    CHECK(manifest["seeds"][0]["status"] == "failed");
    CHECK(manifest["seeds"][0]["error"].get<std::string>().find("dataset") != std::string::npos);
}

TEST_CASE("eigenvalue tracing writes a per-epoch CSV") {
    auto dir = temp_dir("trace");
    auto text = tiny_config("drnas", dir);
    auto config = parse_config(text);
    config.eig_trace = true;
    config.seeds = {3};
    REQUIRE(run_experiment(config, text).all_ok());
    const std::string csv = read_file((dir / "seed3" / "eig_trace.csv").string());
    CHECK(starts_with(csv, "epoch,eig,residual,iters,converged\n"));
    CHECK(std::count(csv.begin(), csv.end(), '\n') == 1 + 4);
}

#ifdef MHNES_CLI_PATH
namespace {

int cli(const std::string& args, const fs::path& log) {
    const std::string cmd = std::string(MHNES_CLI_PATH) + " " + args + " > " + log.string() + " 2>&1";
    const int status = std::system(cmd.c_str());
    return WEXITSTATUS(status);
}

}  // namespace

TEST_CASE("cli: dataset gen then inspect print matching counts") {
    auto dir = temp_dir("cli_dataset");
    REQUIRE(cli("dataset gen --classes 4 --seed 7 --train 40 --val 20 --test 12 --out " + (dir / "d").string(), dir / "gen.txt") == 0);
    const std::string before = read_file((dir / "d" / "dataset.bin").string());
    REQUIRE(cli("dataset inspect " + (dir / "d").string(), dir / "inspect.txt") == 0);
    const std::string gen = read_file((dir / "gen.txt").string());
    const std::string inspect = read_file((dir / "inspect.txt").string());
    CHECK(inspect.find("train 40 per-class 10 10 10 10") != std::string::npos);
    CHECK(inspect.find("test 12 per-class 3 3 3 3") != std::string::npos);
    CHECK(gen.substr(gen.find("classes")) == inspect);
    CHECK(read_file((dir / "d" / "dataset.bin").string()) == before);
}

TEST_CASE("cli: usage and runtime failures map to exit codes") {
    auto dir = temp_dir("cli_errors");
    CHECK(cli("search --config " + (dir / "missing.cfg").string(), dir / "a.txt") == 1);
    CHECK(read_file((dir / "a.txt").string()).find("missing.cfg") != std::string::npos);
    CHECK(cli("search --config x --bogus", dir / "b.txt") == 1);
    CHECK(cli("", dir / "c.txt") == 1);
    CHECK(cli("dataset inspect " + (dir / "nothing").string(), dir / "d.txt") == 2);
    write_file((dir / "bad.json").string(), R"({"model": {"heads": 0}})");
    CHECK(cli("run --config " + (dir / "bad.json").string(), dir / "e.txt") == 1);
    CHECK(read_file((dir / "e.txt").string()).find("model.heads") != std::string::npos);
}

TEST_CASE("cli: search, train, eval, report and hamming") {
    auto dir = temp_dir("cli_flow");
    write_file((dir / "c.json").string(), tiny_config("pcdarts", dir / "run"));
    const std::string cfg = "--config " + (dir / "c.json").string();
    REQUIRE(cli("search " + cfg + " --seed 4 --out " + (dir / "s").string(), dir / "1.txt") == 0);
    const auto genotype = dir / "s" / "seed4" / "genotype.json";
    REQUIRE(fs::exists(genotype));
    REQUIRE(cli("train " + cfg + " --seed 4 --genotype " + genotype.string() + " --out " + (dir / "t").string(), dir / "2.txt") == 0);
    REQUIRE(fs::exists(dir / "t" / "seed4" / "params.bin"));
    REQUIRE(cli("eval " + cfg + " --seed 4 --model " + (dir / "t" / "seed4").string() + " --out " + (dir / "e").string(), dir / "3.txt") == 0);
    auto train_rows = parse_metrics_csv(read_file((dir / "t" / "metrics.csv").string()));
    auto eval_rows = parse_metrics_csv(read_file((dir / "e" / "metrics.csv").string()));
    REQUIRE(train_rows.size() == eval_rows.size());
    for (std::size_t i = 0; i < eval_rows.size(); ++i) CHECK(eval_rows[i].nll == train_rows[i].nll);

    REQUIRE(cli("run " + cfg, dir / "4.txt") == 0);
    REQUIRE(cli("report " + (dir / "run" / "metrics.csv").string() + " " + (dir / "t" / "metrics.csv").string() + " --out " +
                    (dir / "report.csv").string(),
                dir / "5.txt") == 0);
    const std::string report = read_file((dir / "report.csv").string());
    CHECK(std::count(report.begin(), report.end(), '\n') == 3);
    REQUIRE(cli("analyze hamming " + genotype.string() + " " + (dir / "run" / "seed0" / "genotype.json").string(), dir / "6.txt") == 0);
    CHECK(read_file((dir / "6.txt").string()).find(",0") != std::string::npos);
    CHECK(cli("baseline " + cfg, dir / "7.txt") == 1);
}
#endif
