// Runs the eight acceptance criteria and prints one PASS/FAIL line per criterion.
// Exit status is the number of failed criteria.
#include "tdml/audit.hpp"
#include "tdml/cli.hpp"
#include "tdml/evidence.hpp"
#include "tdml/pipeline.hpp"
#include "tdml/rng.hpp"
#include "tdml/scenario.hpp"
#include "tdml/simulation.hpp"

#include <chrono>
#include <cmath>
#include <cstdio>
#include <filesystem>
#include <fstream>
#include <functional>
#include <iostream>
#include <set>
#include <sstream>

#include <unistd.h>

using namespace tdml;
namespace fs = std::filesystem;

namespace {

struct Outcome {
    bool pass = false;
    std::string detail;
};

std::string fmt(const char* f, auto... args) {
    char buf[512];
    std::snprintf(buf, sizeof buf, f, args...);
    return buf;
}

fs::path scratch_dir(const std::string& name) {
    auto p = fs::temp_directory_path() / ("tdml_accept_" + std::to_string(::getpid()) + "_" + name);
    fs::remove_all(p);
    fs::create_directories(p);
    return p;
}

// RMS of every entry of the honest run's epoch-1 gradient records.
double benign_rms(const sim::RunResult& r) {
    auto job = evidence::read_job(r.evidence);
    double ss = 0.0;
    std::size_t n = 0;
    for (const auto& [key, g] : job.gradients) {
        if (std::get<0>(key) != 1) continue;
        auto rec = model::decode_gradients(evidence::open_blob(r.evidence, g.cid));
        model::for_each_entry(rec, [&](double& v) {
            ss += v * v;
            ++n;
        });
    }
    return std::sqrt(ss / static_cast<double>(n));
}

// Every run of criteria 2 and 3 lands here for the incentive check.
struct AttackRecord {
    std::string label;
    std::string target;
    std::uint64_t payout = 0;
    std::uint64_t honest_payout = 0;
};

struct Ledger {
    std::vector<AttackRecord> attacks;
    std::size_t runs = 0;
    std::size_t conservation_violations = 0;

    void observe(const sim::RunResult& r) {
        ++runs;
        if (r.settlement.total() > r.settlement.budget) ++conservation_violations;
    }
};

// --- 1 ------------------------------------------------------------------------------

Outcome sharding_transparency() {
    model::Arch arch;
    arch.dims = {8, 12, 12, 12, 12, 12, 12, 12, 4}; // eight layers
    const auto prof = model::layer_memory(arch);

    ledger::KeyRing keys;
    ledger::SessionKey job;
    job.secret.fill(3);
    job.id = ledger::key_id_for(job.secret);
    keys.add(job);
    store::BlobStore blobs;
    store::BlobSpec spec;
    spec.n_train = 512;
    spec.dim = 8;
    spec.classes = 4;
    const std::uint64_t seed = 17;
    auto cids = store::batch_dataset(store::make_gaussian_blobs(spec, seed).first, 16, seed, keys, job.id, blobs);
    const auto init = model::init_model(arch, seed);
    const std::uint32_t epochs = 3;
    const double lr = 0.1;

    // Unsharded reference: plain train_step over the same per-epoch batch order.
    auto expected = init.params;
    for (std::uint32_t e = 1; e <= epochs; ++e) {
        for (auto idx : pipeline::batch_order(cids.size(), seed + e)) {
            auto b = store::load_batch(blobs, cids[idx], keys);
            model::train_step(expected, model::to_matrix(b), b.labels, lr);
        }
    }

    std::vector<std::string> bad;
    for (std::size_t parts : {1u, 2u, 4u, 8u}) {
        const std::size_t per = prof.per_layer.size() / parts;
        std::vector<pipeline::NodeSpec> nodes;
        std::uint64_t mem = 0;
        for (std::size_t p = 0; p < parts; ++p) mem = std::max(mem, prof.range(p * per, (p + 1) * per));
        for (std::size_t p = 0; p < parts; ++p) nodes.push_back({"t-" + std::to_string(p), mem, 1.0, "", 1});
        auto assignment = pipeline::shard_model(prof, nodes);
        if (assignment.ranges.size() != parts) {
            bad.push_back(fmt("%zu:packed-into-%zu", parts, assignment.ranges.size()));
            continue;
        }
        auto global = init;
        for (std::uint32_t e = 1; e <= epochs; ++e) {
            auto state = pipeline::make_pipeline("ps-a", global, assignment);
            pipeline::EpochContext ctx;
            ctx.store = &blobs;
            ctx.keys = &keys;
            ctx.transport_key_id = parts > 1 ? job.id : "";
            ctx.lr = lr;
            ctx.order_seed = seed + e;
            ctx.epoch = e;
            global.params = pipeline::run_epoch(state, cids, ctx).local;
        }
        if (!(global.params == expected)) bad.push_back(fmt("%zu", parts));
    }
    std::string detail = "shards {1,2,4,8}, 3 epochs, 8-layer MLP: ";
    detail += bad.empty() ? "all bit-identical to unsharded training" : "differ for";
    for (const auto& b : bad) detail += " " + b;
    return {bad.empty(), detail};
}

// --- 2 ------------------------------------------------------------------------------

sim::Scenario ordering_scenario(std::uint64_t seed, sim::Mode mode, std::uint32_t dp) {
    sim::Scenario s;
    s.task = "ordering";
    s.seed = seed;
    s.mode = mode;
    s.arch.dims = {16, 32, 32, 4};
    const auto prof = model::layer_memory(s.arch);
    const std::uint64_t tmem = std::max(prof.range(0, 2), prof.range(2, 3));
    s.data.n_train = 8000;
    s.data.n_test = 2000; // 0.03 flag gap is about 3 standard errors of a pipeline's accuracy
    s.data.separation = 0.4;
    s.training.epochs = 5;
    s.training.pipelines = dp;
    s.training.batch_size = 8;
    s.training.lr = 0.1;
    s.training.top_k = dp == 4 ? 2 : 0;
    s.flag.min_gap = 0.03;
    s.baseline.min_memory_bytes = 1024;
    for (std::uint32_t i = 0; i < dp; ++i) {
        const std::string c(1, static_cast<char>('a' + i));
        s.servers.push_back({"ps-" + c, 65536, 2.0, "", 1});
        for (int t = 1; t <= 2; ++t) s.trainers.push_back({{"t-" + c + std::to_string(t), tmem, 1.0, "", 1}, "ps-" + c});
    }
    return s;
}

Outcome tdml_vs_fedavg(Ledger& ledger) {
    double tdml_acc = 0.0, fedavg_acc = 0.0, single_acc = 0.0;
    const int seeds = 10;
    for (int seed = 1; seed <= seeds; ++seed) {
        auto honest = sim::run_scenario(ordering_scenario(seed, sim::Mode::Tdml, 4));
        robust::AttackConfig a;
        a.kind = robust::AttackKind::MeanShift;
        a.target = "t-d1";
        a.delta = benign_rms(honest);
        auto t = ordering_scenario(seed, sim::Mode::Tdml, 4);
        t.attacks = {a};
        auto f = ordering_scenario(seed, sim::Mode::FedAvg, 4);
        f.attacks = {a};
        auto rt = sim::run_scenario(t);
        auto rf = sim::run_scenario(f);
        auto rs = sim::run_scenario(ordering_scenario(seed, sim::Mode::SingleNode, 1));
        for (const auto* r : {&honest, &rt, &rf, &rs}) ledger.observe(*r);
        ledger.attacks.push_back({fmt("meanshift-4dp seed %d", seed), a.target, rt.settlement.payout_of(a.target),
                                  honest.settlement.payout_of(a.target)});
        tdml_acc += rt.global_accuracy.back();
        fedavg_acc += rf.global_accuracy.back();
        single_acc += rs.global_accuracy.back();
    }
    tdml_acc /= seeds;
    fedavg_acc /= seeds;
    single_acc /= seeds;
    const double margin = 100.0 * (tdml_acc - fedavg_acc);
    const double gap = 100.0 * std::abs(tdml_acc - single_acc);
    return {margin >= 5.0 && gap <= 2.0,
            fmt("10 seeds: tdml %.2f%% fedavg %.2f%% single_node %.2f%% (tdml-fedavg %+.2f pp, need >= 5; "
                "|tdml-single| %.2f pp, need <= 2)",
                100 * tdml_acc, 100 * fedavg_acc, 100 * single_acc, margin, gap)};
}

// --- 3 ------------------------------------------------------------------------------

sim::Scenario detection_scenario(std::uint64_t seed) {
    sim::Scenario s;
    s.task = "detection";
    s.seed = seed;
    s.arch.dims = {16, 32, 32, 32, 4};
    const auto prof = model::layer_memory(s.arch);
    const std::uint64_t tmem = std::max(prof.range(0, 2), prof.range(2, 4));
    s.data.n_train = 8000;
    s.data.n_test = 500;
    s.data.separation = 1.0;
    s.training.epochs = 2;
    s.training.pipelines = 5;
    s.training.batch_size = 16;
    s.training.lr = 0.1;
    s.flag.min_gap = 0.03;
    s.baseline.min_memory_bytes = 4096;
    for (char c = 'a'; c < 'f'; ++c) {
        const std::string ps = std::string("ps-") + c;
        s.servers.push_back({ps, 65536, 2.0, "", 1});
        for (int i = 1; i <= 2; ++i) s.trainers.push_back({{std::string("t-") + c + std::to_string(i), tmem, 1.0, "", 1}, ps});
    }
    return s;
}

// Writes every layer's rank features to `plot` and returns the largest Mahalanobis
// distance of the flagged model from the benign cloud over the target's shard layers.
double attacked_layer_distance(const sim::RunResult& r, const std::string& target, std::ostream& plot,
                               const std::string& label) {
    auto job = evidence::read_job(r.evidence);
    double best = 0.0;
    for (const auto& d : r.detections) {
        std::size_t lo = 0, hi = 0;
        for (const auto& en : job.enrollments) {
            if (en.trainer == target && en.from_epoch <= d.epoch) std::tie(lo, hi) = std::tie(en.lo, en.hi);
        }
        for (const auto& layer : d.layers) {
            std::vector<robust::RankFeature> benign;
            std::optional<robust::RankFeature> flagged;
            for (std::size_t i = 0; i < d.sampled.size(); ++i) {
                const bool is_flagged = d.sampled[i] == d.flagged_model;
                plot << label << ',' << d.epoch << ',' << layer.layer << ',' << d.sampled[i] << ',' << is_flagged << ','
                     << layer.features[i].mean_rank << ',' << layer.features[i].rank_std << '\n';
                if (is_flagged) flagged = layer.features[i];
                else benign.push_back(layer.features[i]);
            }
            if (flagged && layer.layer >= lo && layer.layer < hi) {
                best = std::max(best, robust::mahalanobis(*flagged, benign));
            }
        }
    }
    return best;
}

Outcome detection(Ledger& ledger) {
    const char* seats[] = {"t-a1", "t-a2", "t-b1", "t-b2", "t-c1", "t-c2", "t-d1", "t-d2", "t-e1", "t-e2"};
    std::ofstream plot("detection_features.csv");
    plot << "run,epoch,layer,model,flagged,mean_rank,rank_std\n";
    struct Tally {
        robust::AttackKind kind;
        int required;
        int attributed = 0;
        int separated = 0;
    };
    std::vector<Tally> tallies{{robust::AttackKind::ZeroGradient, 20},
                               {robust::AttackKind::Gaussian, 20},
                               {robust::AttackKind::MeanShift, 18}};
    for (auto& t : tallies) {
        for (std::uint64_t seed = 1; seed <= 20; ++seed) {
            const auto honest_sc = detection_scenario(seed);
            auto honest = sim::run_scenario(honest_sc);
            robust::AttackConfig a;
            a.kind = t.kind;
            a.target = seats[seed % 10];
            a.sigma2 = 30.0;
            if (t.kind == robust::AttackKind::MeanShift) a.delta = 0.5 * benign_rms(honest);
            auto sc = honest_sc;
            sc.attacks = {a};
            auto r = sim::run_scenario(sc);
            ledger.observe(honest);
            ledger.observe(r);
            const auto label = fmt("%s seed %llu", std::string(robust::to_string(t.kind)).c_str(),
                                   static_cast<unsigned long long>(seed));
            ledger.attacks.push_back({label, a.target, r.settlement.payout_of(a.target), honest.settlement.payout_of(a.target)});
            std::set<std::string> blocked(r.blocked.begin(), r.blocked.end());
            if (blocked == std::set<std::string>{a.target}) ++t.attributed;
            if (attacked_layer_distance(r, a.target, plot, label) > 3.0) ++t.separated;
        }
    }
    bool pass = true;
    std::string detail;
    for (const auto& t : tallies) {
        const bool ok = t.attributed >= t.required && t.separated >= t.required;
        pass = pass && ok;
        detail += fmt("%s %d/20 attributed (need %d), %d outside the benign 3-sigma ellipse at an attacked layer; ", std::string(robust::to_string(t.kind)).c_str(),
                      t.attributed, t.required, t.separated);
    }
    detail += "features in detection_features.csv";
    return {pass, detail};
}

// --- 4 ------------------------------------------------------------------------------

std::string slurp(const fs::path& p) {
    std::ifstream in(p, std::ios::binary);
    std::ostringstream ss;
    ss << in.rdbuf();
    return ss.str();
}

void spit(const fs::path& p, const std::string& text) {
    std::ofstream(p, std::ios::binary | std::ios::trunc) << text;
}

Outcome tamper_evidence(const sim::RunResult& honest) {
    const auto dir = scratch_dir("tamper");
    sim::write_artifacts(honest, dir);
    std::ostringstream sink;
    if (cli::verify(dir, sink, sink) != 0) return {false, "honest dump does not verify"};

    const fs::path files[] = {dir / evidence::kPrivateChainFile, dir / evidence::kPublicChainFile};
    const std::string originals[] = {slurp(files[0]), slurp(files[1])};
    Rng rng(2024);
    int caught = 0;
    const int trials = 1000;
    for (int i = 0; i < trials; ++i) {
        const std::size_t which = static_cast<std::size_t>(i % 2);
        auto text = originals[which];
        const std::size_t pos = rng.below(text.size());
        const auto old = static_cast<unsigned char>(text[pos]);
        text[pos] = static_cast<char>(old ^ (1 + rng.below(255)));
        spit(files[which], text);
        std::ostringstream o, e;
        if (cli::verify(dir, o, e) == 1) ++caught;
        spit(files[which], originals[which]);
    }
    fs::remove_all(dir);
    return {caught == trials, fmt("%d/%d single-byte mutations rejected with exit 1", caught, trials)};
}

// --- 5 ------------------------------------------------------------------------------

const char* kThree = R"({
  "task": "proof-of-training", "mode": "tdml", "seed": 11, "budget": 10000,
  "baseline": {"min_memory_bytes": 512},
  "model": {"layers": [16, 12, 4]},
  "data": {"train": 384, "test": 128},
  "training": {"epochs": 3, "pipelines": 3, "batch_size": 32, "lr": 0.1},
  "servers": [{"uuid": "ps-a", "memory_bytes": 65536}, {"uuid": "ps-b", "memory_bytes": 65536},
              {"uuid": "ps-c", "memory_bytes": 65536}],
  "trainers": [
    {"uuid": "t-a1", "server": "ps-a", "memory_bytes": 900}, {"uuid": "t-a2", "server": "ps-a", "memory_bytes": 900},
    {"uuid": "t-b1", "server": "ps-b", "memory_bytes": 900}, {"uuid": "t-b2", "server": "ps-b", "memory_bytes": 900},
    {"uuid": "t-c1", "server": "ps-c", "memory_bytes": 900}, {"uuid": "t-c2", "server": "ps-c", "memory_bytes": 900}
  ]
})";

Outcome proof_of_training(const sim::RunResult& honest_2dp) {
    std::vector<std::string> problems;
    std::size_t checked = 0;
    for (const auto* r : {&honest_2dp}) {
        auto rep = audit::replay(r->evidence);
        auto job = evidence::read_job(r->evidence);
        if (!rep.ok || !rep.divergences.empty()) problems.push_back(fmt("%zu divergences", rep.divergences.size()));
        for (std::size_t e = 0; e < rep.global_digests.size(); ++e) {
            if (rep.global_digests[e] != job.globals.at(e + 1).digest) problems.push_back(fmt("global %zu", e + 1));
        }
        checked += job.locals.size() + rep.global_digests.size();
    }

    // ps-a is the validator the schedule assigns to ps-b's model in epoch 2.
    auto sc = sim::parse_scenario(kThree);
    sc.lies.push_back({"ps-a", 2, "ps-b", 0.01});
    auto lied = sim::run_scenario(sc);
    const auto& mm = lied.verification.mismatches;
    const bool named = mm.size() == 1 && mm[0].validator == "ps-a" && mm[0].model == "ps-b" && mm[0].epoch == 2;
    std::string detail = fmt("honest: %zu digests checked, %zu problems; lie: %zu mismatch item(s)", checked,
                             problems.size(), mm.size());
    if (!mm.empty()) detail += " naming validator " + mm[0].validator;
    for (const auto& p : problems) detail += "; " + p;
    return {problems.empty() && named, detail};
}

// --- 6 ------------------------------------------------------------------------------

// Naive loss: explicit loops, ReLU hidden layers, log-sum-exp cross-entropy, batch mean.
double naive_loss(const model::Parameters& p, const model::Matrix& x, const std::vector<std::uint32_t>& y) {
    double total = 0.0;
    for (std::size_t b = 0; b < x.rows; ++b) {
        std::vector<double> h(x.data.begin() + static_cast<std::ptrdiff_t>(b * x.cols),
                              x.data.begin() + static_cast<std::ptrdiff_t>((b + 1) * x.cols));
        for (std::size_t l = 0; l < p.layers.size(); ++l) {
            const auto& L = p.layers[l];
            std::vector<double> z(L.out());
            for (std::size_t o = 0; o < L.out(); ++o) {
                double s = L.bias[o];
                for (std::size_t i = 0; i < L.in(); ++i) s += L.weight(o, i) * h[i];
                z[o] = l + 1 < p.layers.size() ? std::max(0.0, s) : s;
            }
            h = std::move(z);
        }
        const double m = *std::max_element(h.begin(), h.end());
        double sum = 0.0;
        for (double v : h) sum += std::exp(v - m);
        total += m + std::log(sum) - h[y[b]];
    }
    return total / static_cast<double>(x.rows);
}

Outcome gradient_check() {
    Rng rng(99);
    const double h = 1e-5;
    double worst = 0.0;
    model::Arch arch;
    arch.dims = {4, 6, 5, 3}; // three layers
    for (int point = 0; point < 100; ++point) {
        model::Parameters p;
        for (std::size_t l = 0; l < arch.num_layers(); ++l) {
            model::Layer layer{model::Matrix(arch.dims[l + 1], arch.dims[l]), std::vector<double>(arch.dims[l + 1])};
            for (auto& v : layer.weight.data) v = rng.uniform(-1.0, 1.0);
            for (auto& v : layer.bias) v = rng.uniform(-1.0, 1.0);
            p.layers.push_back(std::move(layer));
        }
        model::Matrix x(3, 4);
        for (auto& v : x.data) v = rng.normal();
        std::vector<std::uint32_t> y(3);
        for (auto& v : y) v = static_cast<std::uint32_t>(rng.below(3));
        auto copy = p;
        const auto grads = model::train_step(copy, x, y, 0.0).grads;
        auto probe = [&](double& slot, double analytic) {
            const double keep = slot;
            slot = keep + h;
            const double up = naive_loss(p, x, y);
            slot = keep - h;
            const double down = naive_loss(p, x, y);
            slot = keep;
            worst = std::max(worst, std::abs((up - down) / (2 * h) - analytic));
        };
        for (std::size_t l = 0; l < p.layers.size(); ++l) {
            for (std::size_t i = 0; i < p.layers[l].weight.data.size(); ++i) {
                probe(p.layers[l].weight.data[i], grads.layers[l].d_weight.data[i]);
            }
            for (std::size_t i = 0; i < p.layers[l].bias.size(); ++i) probe(p.layers[l].bias[i], grads.layers[l].d_bias[i]);
        }
    }
    return {worst < 1e-6, fmt("100 points, step 1e-5: max abs error %.3e (need < 1e-6)", worst)};
}

// --- 7 ------------------------------------------------------------------------------

Outcome incentives(const Ledger& ledger) {
    std::size_t cheaper = 0;
    std::string first_bad;
    for (const auto& a : ledger.attacks) {
        if (a.payout < a.honest_payout) ++cheaper;
        else if (first_bad.empty()) first_bad = fmt("%s: %s paid %llu vs honest %llu", a.label.c_str(), a.target.c_str(),
                                                     static_cast<unsigned long long>(a.payout),
                                                     static_cast<unsigned long long>(a.honest_payout));
    }
    const bool pass = cheaper == ledger.attacks.size() && ledger.conservation_violations == 0 && !ledger.attacks.empty();
    auto detail = fmt("attacker paid less than honest twin in %zu/%zu attack runs; conservation held in %zu/%zu runs",
                      cheaper, ledger.attacks.size(), ledger.runs - ledger.conservation_violations, ledger.runs);
    if (!first_bad.empty()) detail += "; first exception " + first_bad;
    return {pass, detail};
}

// --- 8 ------------------------------------------------------------------------------

Outcome convergence(const sim::RunResult& r) {
    const auto& loss = r.train_loss;
    bool ok = loss.size() >= 8;
    std::string why;
    // windows [e, e+4] starting after epoch 3 (1-based)
    for (std::size_t s = 3; s + 4 < loss.size(); ++s) {
        if (loss[s + 4] > loss[s]) {
            ok = false;
            why += fmt(" window %zu-%zu rises", s + 1, s + 5);
        }
    }
    double running_min = loss.empty() ? 0.0 : loss[0];
    for (std::size_t e = 1; e < loss.size(); ++e) {
        if (loss[e] > 1.5 * running_min) {
            ok = false;
            why += fmt(" spike at epoch %zu", e + 1);
        }
        running_min = std::min(running_min, loss[e]);
    }
    std::string curve;
    for (double v : loss) curve += fmt(" %.4f", v);
    return {ok, "honest 2-DP epoch loss:" + curve + why};
}

} // namespace

int main() {
    int failures = 0;
    auto report = [&](int n, const char* name, double budget_s, const std::function<Outcome()>& fn) {
        const auto t0 = std::chrono::steady_clock::now();
        Outcome o;
        try {
            o = fn();
        } catch (const std::exception& e) {
            o = {false, std::string("threw: ") + e.what()};
        }
        const double secs = std::chrono::duration<double>(std::chrono::steady_clock::now() - t0).count();
        const bool pass = o.pass && secs < budget_s;
        failures += !pass;
        std::cout << (pass ? "PASS" : "FAIL") << ' ' << n << ' ' << name << ": " << o.detail
                  << fmt(" [%.1fs, limit %.0fs]", secs, budget_s) << std::endl;
    };

    const fs::path scenario = fs::path(TDML_SOURCE_DIR) / "scenarios" / "honest_2dp.json";
    const auto honest_2dp = sim::run_scenario(sim::load_scenario(scenario));
    Ledger ledger;
    ledger.observe(honest_2dp);

    report(1, "sharding_transparency", 30, sharding_transparency);
    report(2, "tdml_vs_fedavg", 180, [&] { return tdml_vs_fedavg(ledger); });
    report(3, "detection", 120, [&] { return detection(ledger); });
    report(4, "tamper_evidence", 60, [&] { return tamper_evidence(honest_2dp); });
    report(5, "proof_of_training", 60, [&] { return proof_of_training(honest_2dp); });
    report(6, "gradient_check", 30, gradient_check);
    report(7, "incentives", 1, [&] { return incentives(ledger); });
    report(8, "convergence", 1, [&] { return convergence(honest_2dp); });
    std::cout << (failures == 0 ? "ALL PASS" : fmt("%d criteria failed", failures)) << std::endl;
    return failures;
}
