#include "tdml/audit.hpp"
#include "tdml/cli.hpp"
#include "tdml/digest.hpp"
#include "tdml/error.hpp"
#include "tdml/evidence.hpp"
#include "tdml/robust.hpp"
#include "tdml/scenario.hpp"
#include "tdml/simulation.hpp"

#include <pybind11/pybind11.h>
#include <pybind11/stl.h>

#include <optional>
#include <string>
#include <vector>

namespace py = pybind11;
using json = nlohmann::json;

namespace {

// Results cross the boundary as JSON text; the Python package decodes them.
std::string run_json(const std::string& scenario_text, std::optional<std::uint64_t> seed,
                     std::optional<std::string> out) {
    auto sc = tdml::sim::parse_scenario(scenario_text);
    if (seed) {
        sc.seed = *seed;
        sc.training.seed = *seed;
    }
    tdml::sim::RunResult r;
    {
        py::gil_scoped_release release;
        r = tdml::sim::run_scenario(sc);
        if (out) tdml::sim::write_artifacts(r, *out);
    }
    json detections = json::array();
    for (const auto& d : r.detections) detections.push_back(tdml::robust::to_json(d));
    json metrics = json::array();
    for (const auto& m : r.metrics) {
        metrics.push_back({{"pipeline", m.pipeline}, {"epoch", m.epoch}, {"train_loss", m.train_loss},
                           {"batches", m.batches}, {"test_acc", m.test_acc}, {"global_acc", m.global_acc},
                           {"local_model_digest", m.local_digest}});
    }
    json j = {{"exit_code", r.exit_code()},
              {"global_accuracy", r.global_accuracy},
              {"train_loss", r.train_loss},
              {"metrics", metrics},
              {"detections", detections},
              {"blocked", r.blocked},
              {"paid", r.paid},
              {"verification", tdml::audit::to_json(r.verification)},
              {"settlement", tdml::audit::settlement_json(r.settlement)}};
    return j.dump();
}

py::tuple verify_json(const std::string& dir) {
    auto ev = tdml::evidence::load_evidence(dir);
    tdml::audit::TrainingReport report;
    {
        py::gil_scoped_release release;
        report = tdml::audit::verify_training(ev);
    }
    return py::make_tuple(report.ok(), tdml::audit::to_json(report).dump());
}

std::string compare_json(const std::string& a, const std::string& b) {
    auto c = tdml::cli::compare_metrics(a, b);
    json rows = json::array();
    for (const auto& r : c.rows) rows.push_back({{"epoch", r.epoch}, {"a", r.a}, {"b", r.b}, {"delta", r.delta}});
    return json{{"rows", rows}, {"final_gap", c.final_gap}}.dump();
}

std::vector<std::pair<double, double>> rank_features(const std::vector<std::vector<double>>& values) {
    // one row per model, one column per coordinate of a single layer
    std::vector<tdml::model::LayerGrad> layers;
    for (const auto& row : values) {
        tdml::model::LayerGrad g;
        g.d_weight = tdml::model::Matrix(1, row.size());
        g.d_weight.data = row;
        layers.push_back(std::move(g));
    }
    std::vector<const tdml::model::LayerGrad*> ptrs;
    for (const auto& l : layers) ptrs.push_back(&l);
    std::vector<std::pair<double, double>> out;
    for (const auto& f : tdml::robust::rank_features(ptrs)) out.emplace_back(f.mean_rank, f.rank_std);
    return out;
}

} // namespace

PYBIND11_MODULE(_tdml, m) {
    m.doc() = "Bindings for the tdml training-protocol simulator";

    static py::exception<tdml::Error> error(m, "TdmlError");
    py::register_exception_translator([](std::exception_ptr p) {
        try {
            if (p) std::rethrow_exception(p);
        } catch (const tdml::Error& e) {
            error(e.what());
        }
    });

    m.def("run_json", &run_json, py::arg("scenario_text"), py::arg("seed") = py::none(), py::arg("out") = py::none());
    m.def("verify_json", &verify_json, py::arg("run_dir"));
    m.def("compare_json", &compare_json, py::arg("metrics_a"), py::arg("metrics_b"));

    m.def(
        "flag_suspicious",
        [](const std::vector<double>& h, double tau, double min_gap) {
            return tdml::robust::flag_suspicious(h, {tau, min_gap});
        },
        py::arg("accuracies"), py::arg("tau") = 0.5, py::arg("min_gap") = 0.0);
    m.def(
        "suspicion_scores", [](const std::vector<double>& h) { return tdml::robust::suspicion_scores(h); },
        py::arg("accuracies"));
    m.def("rank_features", &rank_features, py::arg("values"));
    m.def(
        "sha256_hex",
        [](py::bytes data) {
            std::string s = data;
            return tdml::sha256(tdml::as_bytes(s)).hex();
        },
        py::arg("data"));
}
