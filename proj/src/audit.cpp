#include "tdml/audit.hpp"

#include "tdml/error.hpp"

#include <algorithm>
#include <cmath>
#include <map>
#include <set>

namespace tdml::audit {

using evidence::Evidence;
using evidence::JobRecord;
using json = nlohmann::json;

RoundOutcome aggregate_round(const RoundInput& in) {
    const std::size_t M = in.models.size();
    if (M == 0) throw Error(ErrorCode::InvalidArgument, "no local models to aggregate");
    RoundOutcome out;
    if (in.mode == "single_node") {
        out.global = in.models.front();
        out.included = {in.authors.front()};
        return out;
    }
    if (in.mode == "fedavg") {
        out.global = robust::average(in.models);
        out.included = in.authors;
        return out;
    }
    if (in.mode != "tdml") throw Error(ErrorCode::InvalidConfig, "unknown mode " + in.mode);
    if (in.accuracies.size() != M) throw Error(ErrorCode::InvalidArgument, "one accuracy per model required");

    std::vector<std::size_t> flagged;
    if (M >= 2) flagged = robust::flag_suspicious(in.accuracies, in.flag);
    for (auto f : flagged) {
        out.flagged.push_back(in.authors[f]);
        if (in.gradients.size() != M || in.assignments.size() != M) {
            throw Error(ErrorCode::InvalidArgument, "detection needs gradients and shard maps for every model");
        }
        const std::size_t k = std::min<std::size_t>(in.detection_sample, M - 1);
        auto picks = robust::sample_benign(M, f, k, evidence::sample_seed(in.seed, in.epoch));
        picks.push_back(f);
        std::sort(picks.begin(), picks.end());
        std::vector<robust::SampledModel> sampled;
        std::size_t flagged_pos = 0;
        for (std::size_t i = 0; i < picks.size(); ++i) {
            if (picks[i] == f) flagged_pos = i;
            sampled.push_back({in.authors[picks[i]], &in.gradients[picks[i]]});
        }
        out.detection = robust::detect_malicious(sampled, flagged_pos, in.assignments[f], in.epoch, in.detection);
    }

    const std::size_t remaining = M - flagged.size();
    const std::size_t k = std::min<std::size_t>(in.top_k, remaining);
    auto top = robust::aggregate_topk(in.models, in.accuracies, k, flagged);
    out.global = std::move(top.params);
    for (auto i : top.included) out.included.push_back(in.authors[i]);
    return out;
}

// ---------------------------------------------------------------------------------------

namespace {

model::GlobalModel open_model(const Evidence& ev, const store::Cid& cid) {
    return model::decode_checkpoint(evidence::open_blob(ev, cid));
}

model::GlobalModel wrap(const model::Arch& arch, model::Parameters params, std::uint64_t version) {
    model::GlobalModel g;
    g.arch = arch;
    g.params = std::move(params);
    g.version = version;
    g.graph = model::StructuralGraph::sequential(arch.num_layers());
    return g;
}

std::string gradient_digest(const model::GradientRecord& g) { return evidence::digest_hex(model::encode_gradients(g)); }

/// Full-model gradient record of one pipeline, concatenated from its trainers' uploads.
model::GradientRecord reported_gradients(const Evidence& ev, const JobRecord& job, const evidence::LocalUpload& local) {
    model::GradientRecord full;
    full.epoch = local.epoch;
    full.producer = local.pipeline;
    for (const auto& r : local.assignment.ranges) {
        auto it = job.gradients.find({local.epoch, local.pipeline, r.trainer});
        if (it == job.gradients.end()) {
            throw Error(ErrorCode::IncompleteEvidence, "no gradient upload from " + r.trainer + " at epoch " +
                                                           std::to_string(local.epoch));
        }
        auto rec = model::decode_gradients(evidence::open_blob(ev, it->second.cid));
        if (rec.first_layer != r.lo || rec.end_layer() != r.hi) {
            throw Error(ErrorCode::DecodeError, "gradient upload of " + r.trainer + " does not match its shard");
        }
        for (auto& l : rec.layers) full.layers.push_back(std::move(l));
    }
    return full;
}

} // namespace

ReplayReport replay(const Evidence& ev) { return replay(ev, evidence::read_job(ev)); }

ReplayReport replay(const Evidence& ev, const JobRecord& job) {
    const auto& m = job.manifest;
    ReplayReport report;
    auto diverge = [&](std::uint64_t epoch, const std::string& pipeline, const std::string& field) {
        report.divergences.push_back({epoch, pipeline, field, false});
    };

    for (const auto& p : m.pipelines) {
        for (const auto& cid : p.batches) {
            if (!ev.store.contains(cid)) throw Error(ErrorCode::IncompleteEvidence, "missing batch " + cid.hex);
        }
    }
    if (!ev.store.contains(m.test_set)) throw Error(ErrorCode::IncompleteEvidence, "missing test set");
    ledger::KeyRing keys = ev.keys; // run_epoch only opens batches with it

    auto prev = open_model(ev, m.init_model);
    if (model::model_digest(prev).hex() != m.init_digest) diverge(0, "", "init_model");

    for (std::uint64_t e = 1; e <= m.epochs; ++e) {
        const std::size_t first_local_div = report.divergences.size();
        RoundInput round;
        round.mode = m.mode;
        round.epoch = e;
        round.seed = m.seed;
        round.top_k = m.top_k;
        round.flag = m.flag;
        round.detection = m.detection;
        round.detection_sample = m.detection_sample;

        for (const auto& plan : m.pipelines) {
            auto it = job.locals.find({e, plan.server});
            if (it == job.locals.end()) continue;
            const auto& local = it->second;

            auto state = pipeline::make_pipeline(plan.server, prev, local.assignment);
            pipeline::EpochContext ctx;
            ctx.store = &ev.store;
            ctx.keys = &keys;
            ctx.lr = m.lr;
            ctx.order_seed = evidence::order_seed(m.seed, plan.server, e);
            ctx.epoch = e;
            auto result = pipeline::run_epoch(state, plan.batches, ctx);

            const auto reproduced = wrap(m.arch, result.local, e);
            if (model::model_digest(reproduced).hex() != local.digest) diverge(e, plan.server, "local_model");
            if (result.mean_loss != local.train_loss || result.batches != local.batches) {
                diverge(e, plan.server, "train_loss");
            }
            for (std::size_t s = 0; s < local.assignment.ranges.size(); ++s) {
                const auto& trainer = local.assignment.ranges[s].trainer;
                auto g = job.gradients.find({e, plan.server, trainer});
                if (g == job.gradients.end()) {
                    diverge(e, plan.server, "gradient_missing:" + trainer);
                } else if (gradient_digest(result.shard_records[s]) != g->second.digest) {
                    diverge(e, plan.server, "gradient:" + trainer);
                }
            }

            auto stored = open_model(ev, local.cid);
            if (model::model_digest(stored).hex() != local.digest) diverge(e, plan.server, "local_model_blob");
            round.authors.push_back(plan.server);
            round.models.push_back(std::move(stored.params));
            round.assignments.push_back(local.assignment);
            if (m.mode == "tdml") {
                auto v = job.validations.find({e, plan.server});
                if (v == job.validations.end()) {
                    diverge(e, plan.server, "validation_missing");
                    round.accuracies.push_back(0.0);
                } else {
                    round.accuracies.push_back(v->second.accuracy);
                }
                round.gradients.push_back(reported_gradients(ev, job, local));
            }
        }

        auto gpub = job.globals.find(e);
        if (round.models.empty() || gpub == job.globals.end()) {
            diverge(e, "", "global_missing");
            report.global_digests.emplace_back();
            continue;
        }
        const auto& recorded = gpub->second;
        auto outcome = aggregate_round(round);
        const auto global = wrap(m.arch, outcome.global, e);
        const auto digest = model::model_digest(global).hex();
        report.global_digests.push_back(digest);
        if (digest != recorded.digest || recorded.version != e) diverge(e, "", "global_model");
        if (outcome.included != recorded.included) diverge(e, "", "included");
        if (outcome.flagged != recorded.flagged) diverge(e, "", "flagged");

        auto det = job.detections.find(e);
        const bool have_det = det != job.detections.end();
        if (have_det != outcome.detection.has_value() ||
            (have_det && robust::to_json(det->second).dump() != robust::to_json(*outcome.detection).dump())) {
            diverge(e, "", "detection");
        }

        // a local model that did not reach the aggregate cannot have shaped the global model
        for (std::size_t i = first_local_div; i < report.divergences.size(); ++i) {
            auto& d = report.divergences[i];
            if (d.pipeline.empty() || d.field == "validation_missing" || d.field == "local_model_blob") continue;
            const bool flagged = std::count(recorded.flagged.begin(), recorded.flagged.end(), d.pipeline) > 0;
            const bool included = std::count(recorded.included.begin(), recorded.included.end(), d.pipeline) > 0;
            d.excused = flagged || !included;
        }

        auto stored_global = open_model(ev, recorded.cid);
        if (model::model_digest(stored_global).hex() != recorded.digest) {
            diverge(e, "", "global_model_blob");
            prev = global;
        } else {
            prev = std::move(stored_global);
        }
    }

    for (const auto& d : report.divergences) {
        if (!d.excused) {
            report.first_divergence = d;
            break;
        }
    }
    report.ok = !report.first_divergence.has_value();
    return report;
}

// ---------------------------------------------------------------------------------------

json to_json(const TrainingReport& r) {
    json j;
    j["ok"] = r.ok();
    j["chain"] = {{"ok", r.chain_ok}, {"detail", r.chain_detail}};
    j["evidence"] = {{"ok", r.evidence_ok}, {"detail", r.evidence_detail}};
    if (r.replay) {
        auto divs = json::array();
        for (const auto& d : r.replay->divergences) {
            divs.push_back({{"epoch", d.epoch}, {"pipeline", d.pipeline}, {"field", d.field}, {"excused", d.excused}});
        }
        j["replay"] = {{"ok", r.replay->ok}, {"divergences", divs}, {"global_digests", r.replay->global_digests}};
    } else {
        j["replay"] = nullptr;
    }
    auto mm = json::array();
    for (const auto& m : r.mismatches) {
        mm.push_back({{"kind", "validation-mismatch"},
                      {"epoch", m.epoch},
                      {"model", m.model},
                      {"validator", m.validator},
                      {"recorded_accuracy", m.recorded_accuracy},
                      {"recomputed_accuracy", m.recomputed_accuracy},
                      {"reason", m.reason}});
    }
    j["validation"] = mm;
    j["claims_ok"] = r.claims_ok;
    return j;
}

TrainingReport verify_training(const Evidence& ev) {
    TrainingReport r;
    for (const auto* chain : {&ev.public_chain, &ev.private_chain}) {
        auto v = ledger::verify_chain(*chain);
        if (!v.ok) {
            r.chain_detail = (chain == &ev.public_chain ? "public chain: " : "private chain: ") + v.reason;
            return r;
        }
    }
    if (ev.public_chain.genesis_tag + "/private" != ev.private_chain.genesis_tag) {
        r.chain_detail = "public and private chains belong to different jobs";
        return r;
    }
    r.chain_ok = true;

    JobRecord job;
    try {
        job = evidence::read_job(ev);
        r.replay = replay(ev, job);
        r.evidence_ok = true;
    } catch (const Error& e) {
        r.evidence_detail = e.what();
        return r;
    }

    store::Dataset test;
    try {
        test = store::to_dataset(store::decode_batch(evidence::open_blob(ev, job.manifest.test_set)));
    } catch (const Error& e) {
        r.evidence_ok = false;
        r.evidence_detail = e.what();
        return r;
    }
    for (const auto& [key, v] : job.validations) {
        ValidationMismatch mm;
        mm.epoch = v.epoch;
        mm.model = v.model_author;
        mm.validator = v.validator;
        mm.recorded_accuracy = v.accuracy;
        if (v.validator == v.model_author) {
            mm.reason = "self-validation";
            r.mismatches.push_back(mm);
            continue;
        }
        auto local = job.locals.find({v.epoch, v.model_author});
        if (local == job.locals.end()) {
            mm.reason = "validated model was never uploaded";
            r.mismatches.push_back(mm);
            continue;
        }
        std::vector<robust::PendingModel> pending{{v.model_author, v.epoch, evidence::open_blob(ev, local->second.cid)}};
        auto again = robust::cross_validate(v.validator, pending, test).front();
        mm.recomputed_accuracy = again.accuracy;
        if (again.accuracy != v.accuracy || again.loss != v.loss || again.decode_failure != v.decode_failure) {
            mm.reason = "recorded result differs from re-evaluation";
            r.mismatches.push_back(mm);
        }
    }

    if (!job.claims.empty()) {
        if (!r.ok()) {
            r.claims_ok = false;
        } else {
            try {
                auto ledger = settle_rewards(job, r, job.manifest.budget, {job.manifest.trainer_share});
                std::vector<evidence::RewardClaim> expected;
                for (const auto& p : ledger.payouts) expected.push_back({p.node, p.role, p.work_units, p.payout});
                r.claims_ok = expected.size() == job.claims.size() &&
                              std::equal(expected.begin(), expected.end(), job.claims.begin(), [](const auto& a, const auto& b) {
                                  return a.node == b.node && a.role == b.role && a.work_units == b.work_units &&
                                         a.payout == b.payout;
                              });
            } catch (const Error&) {
                r.claims_ok = false;
            }
        }
    }
    return r;
}

// ---------------------------------------------------------------------------------------

std::uint64_t RewardLedger::total() const {
    std::uint64_t t = 0;
    for (const auto& p : payouts) t += p.payout;
    return t;
}

std::uint64_t RewardLedger::payout_of(std::string_view node) const {
    for (const auto& p : payouts) {
        if (p.node == node) return p.payout;
    }
    return 0;
}

namespace {

/// Largest-remainder split of `pool` over `claimants` by work units.
void split_pool(std::uint64_t pool, std::vector<Payout*>& claimants) {
    std::uint64_t units = 0;
    for (const auto* c : claimants) units += c->work_units;
    if (units == 0) return;
    std::uint64_t handed = 0;
    std::vector<std::pair<std::uint64_t, Payout*>> remainders;
    for (auto* c : claimants) {
        const auto share = static_cast<unsigned __int128>(pool) * c->work_units;
        c->payout = static_cast<std::uint64_t>(share / units);
        handed += c->payout;
        remainders.emplace_back(static_cast<std::uint64_t>(share % units), c);
    }
    std::stable_sort(remainders.begin(), remainders.end(), [](const auto& a, const auto& b) {
        if (a.first != b.first) return a.first > b.first;
        return a.second->node < b.second->node;
    });
    for (std::size_t i = 0; handed < pool; ++i, ++handed) remainders[i].second->payout += 1;
}

} // namespace

RewardLedger settle_rewards(const JobRecord& job, const TrainingReport& report, std::uint64_t budget,
                            const RewardWeights& weights) {
    if (!report.ok()) throw Error(ErrorCode::NoPayout, "training evidence did not verify");
    if (!(weights.trainer_share >= 0.0 && weights.trainer_share <= 1.0)) {
        throw Error(ErrorCode::InvalidArgument, "trainer share outside [0, 1]");
    }

    std::set<std::pair<std::uint64_t, std::string>> diverged;
    for (const auto& d : report.replay->divergences) {
        if (!d.pipeline.empty()) diverged.insert({d.epoch, d.pipeline});
    }
    std::map<std::string, std::uint64_t> blocked_at;
    for (const auto& [epoch, det] : job.detections) {
        for (const auto& t : det.attributed_trainers) blocked_at.emplace(t, epoch);
    }
    auto flagged = [&](std::uint64_t epoch, const std::string& pipeline) {
        auto g = job.globals.find(epoch);
        if (g == job.globals.end()) return true;
        return std::count(g->second.flagged.begin(), g->second.flagged.end(), pipeline) > 0;
    };

    std::map<std::string, Payout> trainers;
    std::map<std::string, Payout> servers;
    for (const auto& [key, g] : job.gradients) {
        auto& p = trainers[g.trainer];
        p.node = g.trainer;
        p.role = "trainer";
        const auto b = blocked_at.find(g.trainer);
        const bool is_blocked = b != blocked_at.end() && b->second <= g.epoch;
        if (!is_blocked && !diverged.contains({g.epoch, g.pipeline}) && !flagged(g.epoch, g.pipeline)) ++p.work_units;
    }
    for (auto& [node, p] : trainers) p.blocked = blocked_at.contains(node);
    for (const auto& [key, l] : job.locals) {
        auto& p = servers[l.pipeline];
        p.node = l.pipeline;
        p.role = "parameter_server";
        const bool validated = job.manifest.mode != "tdml" || job.validations.contains({l.epoch, l.pipeline});
        if (validated && !diverged.contains({l.epoch, l.pipeline}) && !flagged(l.epoch, l.pipeline)) ++p.work_units;
    }

    const auto trainer_pool = static_cast<std::uint64_t>(std::llround(static_cast<double>(budget) * weights.trainer_share));
    const auto server_pool = budget - std::min(budget, trainer_pool);

    RewardLedger ledger;
    ledger.budget = budget;
    for (auto& [_, p] : servers) ledger.payouts.push_back(p);
    for (auto& [_, p] : trainers) ledger.payouts.push_back(p);
    std::vector<Payout*> server_claims, trainer_claims;
    for (auto& p : ledger.payouts) (p.role == "trainer" ? trainer_claims : server_claims).push_back(&p);
    split_pool(server_pool, server_claims);
    split_pool(std::min(budget, trainer_pool), trainer_claims);

    std::uint64_t paid = 0;
    for (auto& p : ledger.payouts) {
        if (p.blocked) p.payout = 0;
        paid += p.payout;
    }
    ledger.withheld = budget - paid;
    return ledger;
}

json settlement_json(const RewardLedger& ledger) {
    auto arr = json::array();
    for (const auto& p : ledger.payouts) {
        arr.push_back({{"node", p.node}, {"role", p.role}, {"work_units", p.work_units}, {"payout", p.payout}});
    }
    return arr;
}

} // namespace tdml::audit
