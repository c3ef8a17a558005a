#include "tdml/cli.hpp"

#include "tdml/audit.hpp"
#include "tdml/error.hpp"
#include "tdml/evidence.hpp"
#include "tdml/scenario.hpp"
#include "tdml/simulation.hpp"

#include <CLI11.hpp>

#include <cstdio>
#include <fstream>
#include <iostream>
#include <map>
#include <sstream>

namespace tdml::cli {

int run(const std::filesystem::path& scenario_path, const RunOptions& opts, std::ostream& out, std::ostream& err) {
    sim::Scenario sc;
    try {
        sc = sim::load_scenario(scenario_path);
        if (opts.seed) {
            sc.seed = *opts.seed;
            sc.training.seed = *opts.seed;
        }
        if (opts.out) sc.out = *opts.out;
    } catch (const Error& e) {
        err << "config error: " << e.what() << "\n";
        return 2;
    }

    sim::RunResult result;
    try {
        result = sim::run_scenario(sc);
    } catch (const Error& e) {
        switch (e.code()) {
        case ErrorCode::InvalidConfig:
        case ErrorCode::InsufficientCandidates:
        case ErrorCode::InsufficientMemory:
            err << "config error: " << e.what() << "\n";
            return 2;
        default:
            throw;
        }
    }
    sim::write_artifacts(result, sc.out);

    out << "run " << sc.task << " (" << sim::to_string(sc.mode) << ", seed " << sc.seed << ") -> " << sc.out << "\n";
    if (!result.global_accuracy.empty()) out << "final global accuracy " << result.global_accuracy.back() << "\n";
    for (const auto& d : result.detections) {
        out << "epoch " << d.epoch << ": flagged " << d.flagged_model << ", " << robust::to_string(d.status);
        for (const auto& t : d.attributed_trainers) out << ", blocked " << t;
        out << "\n";
    }
    out << "verification " << (result.verification.ok() ? "ok" : "FAILED") << ", paid "
        << result.settlement.total() << " of " << result.settlement.budget << "\n";
    return result.exit_code();
}

int verify(const std::filesystem::path& dir, std::ostream& out, std::ostream& err) {
    evidence::Evidence ev;
    try {
        ev = evidence::load_evidence(dir);
    } catch (const Error& e) {
        if (e.code() == ErrorCode::NotFound) {
            err << "missing evidence: " << e.what() << "\n";
            return 2;
        }
        nlohmann::json j = {{"ok", false}, {"chain", {{"ok", false}, {"detail", e.what()}}}};
        // details may echo corrupted input bytes
        out << j.dump(2, ' ', false, nlohmann::json::error_handler_t::replace) << "\n";
        return 1;
    }
    auto report = audit::verify_training(ev);
    out << audit::to_json(report).dump(2, ' ', false, nlohmann::json::error_handler_t::replace) << "\n";
    return report.ok() ? 0 : 1;
}

namespace {

constexpr std::string_view kHeader = "pipeline,epoch,train_loss,batches,test_acc,global_acc,local_model_digest";

std::map<std::uint64_t, double> global_by_epoch(std::string_view text) {
    std::istringstream in{std::string(text)};
    std::string line;
    if (!std::getline(in, line) || line != kHeader) throw Error(ErrorCode::SchemaMismatch, "unexpected metrics header");
    std::map<std::uint64_t, double> out;
    while (std::getline(in, line)) {
        if (line.empty()) continue;
        std::vector<std::string> cols;
        std::stringstream ss(line);
        std::string c;
        while (std::getline(ss, c, ',')) cols.push_back(c);
        if (cols.size() != 7) throw Error(ErrorCode::SchemaMismatch, "metrics row with " + std::to_string(cols.size()) + " columns");
        try {
            out[std::stoull(cols[1])] = std::stod(cols[5]);
        } catch (const std::exception&) {
            throw Error(ErrorCode::SchemaMismatch, "unparsable metrics row: " + line);
        }
    }
    return out;
}

std::string read_metrics(const std::filesystem::path& p) {
    auto path = std::filesystem::is_directory(p) ? p / "metrics.csv" : p;
    std::ifstream in(path, std::ios::binary);
    if (!in) throw Error(ErrorCode::NotFound, "cannot read " + path.string());
    std::ostringstream ss;
    ss << in.rdbuf();
    return ss.str();
}

} // namespace

Comparison compare_metrics(std::string_view a, std::string_view b) {
    const auto ea = global_by_epoch(a);
    const auto eb = global_by_epoch(b);
    if (ea.size() != eb.size() || !std::equal(ea.begin(), ea.end(), eb.begin(), [](const auto& x, const auto& y) {
            return x.first == y.first;
        })) {
        throw Error(ErrorCode::SchemaMismatch, "metrics cover different epochs");
    }
    Comparison c;
    for (const auto& [epoch, acc] : ea) c.rows.push_back({epoch, acc, eb.at(epoch), eb.at(epoch) - acc});
    if (!c.rows.empty()) c.final_gap = c.rows.back().delta;
    return c;
}

std::string format_comparison(const Comparison& c) {
    std::string out = "epoch,global_acc_a,global_acc_b,delta\n";
    char buf[128];
    for (const auto& r : c.rows) {
        std::snprintf(buf, sizeof buf, "%llu,%.6f,%.6f,%+.6f\n", static_cast<unsigned long long>(r.epoch), r.a, r.b, r.delta);
        out += buf;
    }
    std::snprintf(buf, sizeof buf, "final_gap,%+.6f\n", c.final_gap);
    out += buf;
    return out;
}

int compare(const std::filesystem::path& a, const std::filesystem::path& b, std::ostream& out, std::ostream& err) {
    try {
        out << format_comparison(compare_metrics(read_metrics(a), read_metrics(b)));
        return 0;
    } catch (const Error& e) {
        err << e.what() << "\n";
        return 2;
    }
}

int main(int argc, char** argv) {
    CLI::App app{"Simulator for trustworthy distributed training over public compute"};
    app.require_subcommand(1);

    std::string scenario_path;
    std::uint64_t seed = 0;
    std::string out_dir;
    auto* run_cmd = app.add_subcommand("run", "run a scenario and write its artifacts");
    run_cmd->add_option("scenario", scenario_path, "scenario file")->required();
    auto* seed_opt = run_cmd->add_option("--seed", seed, "override the master seed");
    auto* out_opt = run_cmd->add_option("--out", out_dir, "override the output directory");

    std::string verify_dir;
    auto* verify_cmd = app.add_subcommand("verify", "audit a run directory");
    verify_cmd->add_option("dir", verify_dir, "run directory")->required();

    std::string ma, mb;
    auto* compare_cmd = app.add_subcommand("compare", "per-epoch global accuracy of two runs");
    compare_cmd->add_option("a", ma, "metrics.csv or run directory")->required();
    compare_cmd->add_option("b", mb, "metrics.csv or run directory")->required();

    try {
        app.parse(argc, argv);
    } catch (const CLI::ParseError& e) {
        const int code = app.exit(e);
        return code == 0 ? 0 : 2;
    }

    if (*run_cmd) {
        RunOptions opts;
        if (*seed_opt) opts.seed = seed;
        if (*out_opt) opts.out = out_dir;
        return run(scenario_path, opts, std::cout, std::cerr);
    }
    if (*verify_cmd) return verify(verify_dir, std::cout, std::cerr);
    return compare(ma, mb, std::cout, std::cerr);
}

} // namespace tdml::cli
