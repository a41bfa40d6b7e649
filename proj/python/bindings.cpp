#include <fmt/format.h>
#include <pybind11/functional.h>
#include <pybind11/numpy.h>
#include <pybind11/pybind11.h>
#include <pybind11/stl.h>

#include "mhnes/harness.hpp"
#include "mhnes/losses.hpp"

namespace py = pybind11;
using namespace mhnes;

namespace {

using Array = py::array_t<double, py::array::c_style | py::array::forcecast>;
using Labels = py::array_t<int, py::array::c_style | py::array::forcecast>;

std::vector<int> to_labels(const Labels& y) {
    if (y.ndim() != 1) throw std::invalid_argument("labels must be one-dimensional");
    return {y.data(), y.data() + y.size()};
}

ProbMatrix to_probs(const Array& p) {
    if (p.ndim() != 2) throw std::invalid_argument("probabilities must have shape [N, C]");
    return {static_cast<std::size_t>(p.shape(0)), static_cast<std::size_t>(p.shape(1)),
            std::vector<double>(p.data(), p.data() + p.size())};
}

PredictionMatrix to_predictions(const Array& p, const Labels& y) {
    if (p.ndim() != 3) throw std::invalid_argument("member predictions must have shape [M, N, C]");
    PredictionMatrix out;
    const std::size_t n = static_cast<std::size_t>(p.shape(1)), c = static_cast<std::size_t>(p.shape(2));
    for (py::ssize_t m = 0; m < p.shape(0); ++m) {
        const double* base = p.data() + m * n * c;
        out.members.push_back({n, c, std::vector<double>(base, base + n * c)});
    }
    out.labels = to_labels(y);
    out.validate();
    return out;
}

std::vector<Tensor> to_heads(const Array& p) {
    if (p.ndim() != 3) throw std::invalid_argument("head probabilities must have shape [M, N, C]");
    std::vector<Tensor> heads;
    const std::size_t n = static_cast<std::size_t>(p.shape(1)), c = static_cast<std::size_t>(p.shape(2));
    for (py::ssize_t m = 0; m < p.shape(0); ++m) {
        const double* base = p.data() + m * n * c;
        heads.push_back(Tensor::from({n, c}, std::vector<double>(base, base + n * c)));
    }
    return heads;
}

py::array_t<double> images_array(const ImageSet& s) {
    py::array_t<double> out({s.size(), s.channels, s.height, s.width});
    std::copy(s.pixels.begin(), s.pixels.end(), out.mutable_data());
    return out;
}

py::array_t<int> labels_array(const ImageSet& s) {
    py::array_t<int> out(s.size());
    std::copy(s.labels.begin(), s.labels.end(), out.mutable_data());
    return out;
}

py::dict report_dict(const MetricReport& r) {
    py::dict d;
    d["nll"] = r.nll;
    d["error"] = r.error;
    d["ece"] = r.ece;
    d["oracle_nll"] = r.oracle_nll;
    d["member_nll"] = r.member_nll;
    d["member_error"] = r.member_error;
    return d;
}

py::dict budget_dict(const Budget& b) {
    py::dict d;
    d["search_steps"] = b.search_steps;
    d["train_steps"] = b.train_steps;
    d["eval_batches"] = b.eval_batches;
    d["total_steps"] = b.total_steps();
    return d;
}

}  // namespace

PYBIND11_MODULE(_mhnes, m) {
    m.doc() = "Multi-headed neural ensemble search";

    py::class_<DatasetBundle>(m, "Dataset")
        .def_readonly("num_classes", &DatasetBundle::num_classes)
        .def_readonly("provenance", &DatasetBundle::provenance)
        .def_property_readonly("train_x", [](const DatasetBundle& d) { return images_array(d.train); })
        .def_property_readonly("train_y", [](const DatasetBundle& d) { return labels_array(d.train); })
        .def_property_readonly("val_x", [](const DatasetBundle& d) { return images_array(d.val); })
        .def_property_readonly("val_y", [](const DatasetBundle& d) { return labels_array(d.val); })
        .def_property_readonly("test_x", [](const DatasetBundle& d) { return images_array(d.test); })
        .def_property_readonly("test_y", [](const DatasetBundle& d) { return labels_array(d.test); })
        .def("__eq__", [](const DatasetBundle& a, const DatasetBundle& b) { return a == b; });

    m.def("gen_synthetic", &gen_synthetic, py::arg("classes"), py::arg("n_train"), py::arg("n_val"), py::arg("n_test"),
          py::arg("size") = 16, py::arg("seed") = 0);
    m.def("save_raw", &save_raw, py::arg("data"), py::arg("path"));
    m.def("load_raw", &load_raw, py::arg("path"));

    m.def("nll", [](const Array& p, const Labels& y) { return nll(to_probs(p), to_labels(y)); });
    m.def("error_rate", [](const Array& p, const Labels& y) { return error_rate(to_probs(p), to_labels(y)); });
    m.def(
        "ece", [](const Array& p, const Labels& y, std::size_t bins) { return ece(to_probs(p), to_labels(y), bins); },
        py::arg("probs"), py::arg("labels"), py::arg("num_bins") = 10);
    m.def("oracle_ensemble_nll", [](const Array& p, const Labels& y) { return oracle_ensemble_nll(to_predictions(p, y)); });
    m.def("evaluate", [](const Array& p, const Labels& y) { return report_dict(evaluate(to_predictions(p, y))); });
    m.def(
        "forward_select",
        [](const Array& p, const Labels& y, std::size_t size, bool with_replacement) {
            return forward_select(to_predictions(p, y), size, with_replacement);
        },
        py::arg("pool"), py::arg("labels"), py::arg("m"), py::arg("with_replacement") = false);

    m.def("jsd_diversity", [](const Array& p) {
        auto heads = to_heads(p);
        return jsd_diversity(heads).item();
    });
    m.def(
        "ensemble_train_loss",
        [](const Array& p, const Labels& y, double smoothing) {
            auto heads = to_heads(p);
            auto labels = to_labels(y);
            return ensemble_train_loss(heads, ensemble_average(heads), labels, smoothing).item();
        },
        py::arg("head_probs"), py::arg("labels"), py::arg("label_smoothing") = 0.0);

    m.def(
        "sample_genotype",
        [](std::uint64_t seed, std::size_t heads, std::size_t nodes) {
            GenotypeSpec spec;
            spec.heads = heads;
            spec.nodes = nodes;
            return genotype_to_json(sample_random_genotype(seed, spec, {}));
        },
        py::arg("seed"), py::arg("heads") = 3, py::arg("nodes") = 4);
    m.def("hamming", [](const std::string& a, const std::string& b) {
        return hamming(genotype_from_json(a), genotype_from_json(b));
    });

    m.def(
        "dominant_eig",
        [](const std::function<std::vector<double>(std::vector<double>)>& matvec, std::size_t dim, double tol,
           std::size_t max_iter, std::uint64_t seed) {
            auto r = dominant_eig([&](std::span<const double> v) { return matvec({v.begin(), v.end()}); }, dim, tol,
                                  max_iter, seed);
            py::dict d;
            d["value"] = r.value;
            d["residual"] = r.residual;
            d["iters"] = r.iters;
            d["converged"] = r.converged;
            return d;
        },
        py::arg("matvec"), py::arg("dim"), py::arg("tol") = 1e-6, py::arg("max_iter") = 200, py::arg("seed") = 0);

    m.def("method_names", [] {
        std::vector<std::string> out;
        for (Method x : {Method::pcdarts, Method::drnas, Method::randomnas, Method::mhe_rs, Method::mhe_sample,
                         Method::nes_rs, Method::deepens_sample, Method::deepens_rs, Method::hyperdeepens_rs})
            out.emplace_back(method_name(x));
        return out;
    });
    m.def(
        "plan_budget",
        [](const std::string& config_json, const std::string& method) {
            auto c = parse_config(config_json);
            return budget_dict(plan_budget(method_from_name(method), c.search, c.train, c.dataset.n_train,
                                           c.dataset.n_val, c.model.genotype.heads, c.pool_size));
        },
        py::arg("config_json"), py::arg("method"));
    m.def("normalize_config", [](const std::string& text) { return config_to_json(parse_config(text)); });
    m.def("run", [](const std::string& text) {
        auto outcome = run_experiment(parse_config(text), text);
        if (!outcome.all_ok()) {
            for (const auto& s : outcome.seeds)
                if (!s.ok) throw std::runtime_error(fmt::format("seed {} failed: {}", s.seed, s.error));
        }
        return metrics_csv(outcome.rows);
    });
    m.def("report", [](const std::vector<std::string>& csv_texts) {
        std::vector<MetricRow> rows;
        for (const auto& t : csv_texts) {
            auto part = parse_metrics_csv(t);
            rows.insert(rows.end(), part.begin(), part.end());
        }
        return report_table(rows);
    });
    m.def("sha256_hex", [](const std::string& s) { return sha256_hex(s); });

    py::register_exception<ConfigError>(m, "ConfigError", PyExc_ValueError);
}
