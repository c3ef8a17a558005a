#include "tdml/simulation.hpp"

#include "tdml/error.hpp"
#include "tdml/rng.hpp"

#include <algorithm>
#include <charconv>
#include <fstream>
#include <map>
#include <set>

namespace tdml::sim {

using json = nlohmann::json;
using protocol::Event;
using protocol::EventKind;

bool RunResult::detected() const {
    return std::any_of(detections.begin(), detections.end(),
                       [](const auto& d) { return d.status == robust::DetectionStatus::Detected; });
}

int RunResult::exit_code() const { return detected() ? 3 : 0; }

namespace {

std::string fmt(double v) {
    char buf[64];
    auto r = std::to_chars(buf, buf + sizeof buf, v);
    return std::string(buf, r.ptr);
}

json node_json(const pipeline::NodeSpec& n) {
    return {{"uuid", n.uuid}, {"memory_bytes", n.memory_bytes}, {"compute_score", n.compute_score},
            {"cpus", n.cpus}, {"address", n.address}};
}

model::GlobalModel wrap(const model::Arch& arch, model::Parameters params, std::uint64_t version) {
    model::GlobalModel g;
    g.arch = arch;
    g.params = std::move(params);
    g.version = version;
    g.graph = model::StructuralGraph::sequential(arch.num_layers());
    return g;
}

class Job {
public:
    explicit Job(const Scenario& sc) : sc_(sc), profile_(model::layer_memory(sc.arch)) {}

    RunResult run();

private:
    void fire(const std::string& node, Event ev);
    void seal();
    ledger::SessionKey exchange(const std::string& a, const std::string& b, const std::vector<std::string>& registered);
    store::Cid put_sealed(ByteView plaintext) { return store_.put(keys_.seal(job_key_.id, plaintext)); }
    Bytes sealed(const json& j) { return keys_.seal(job_key_.id, evidence::json_bytes(j)); }

    const Scenario& sc_;
    model::LayerMemoryProfile profile_;
    ledger::KeyRing keys_;
    ledger::SessionKey job_key_;
    store::BlobStore store_;
    ledger::Chain public_;
    ledger::Chain private_;
    ledger::Tick tick_ = 1;
    std::vector<protocol::Emission> pending_public_;
    std::vector<protocol::Emission> pending_private_;
    std::map<std::string, protocol::NodeState> nodes_;
    RunResult result_;
};

void Job::fire(const std::string& node, Event ev) {
    ev.tick = tick_;
    auto& state = nodes_.at(node);
    auto out = protocol::step(state, ev);
    state = std::move(out.state);
    result_.trace.push_back({node, state.role, std::move(ev), state.phase});
    for (auto& e : out.emitted) {
        switch (e.channel) {
        case protocol::Channel::Public: pending_public_.push_back(std::move(e)); break;
        case protocol::Channel::Private: pending_private_.push_back(std::move(e)); break;
        case protocol::Channel::Direct: result_.direct_messages.push_back(std::move(e)); break;
        }
    }
}

void Job::seal() {
    // delivery order within a tick: sender uuid, then emission order
    auto flush = [&](ledger::Chain& chain, std::vector<protocol::Emission>& pending) {
        if (pending.empty()) return;
        std::stable_sort(pending.begin(), pending.end(), [](const auto& a, const auto& b) { return a.author < b.author; });
        std::vector<ledger::Transaction> txs;
        for (const auto& e : pending) txs.push_back(e.transaction());
        ledger::append_block(chain, std::move(txs), tick_);
        pending.clear();
    };
    flush(public_, pending_public_);
    flush(private_, pending_private_);
    ++tick_;
}

ledger::SessionKey Job::exchange(const std::string& a, const std::string& b, const std::vector<std::string>& registered) {
    Rng rng(derive_seed(sc_.seed, "key-nonce", a + "|" + b));
    Bytes nonce(16);
    for (auto& x : nonce) x = static_cast<std::uint8_t>(rng.next());
    auto kx = protocol::key_exchange(sc_.task, a, b, nonce, tick_, registered);
    keys_.add(kx.key);
    Event ev;
    ev.kind = EventKind::ExchangeKey;
    ev.payload = kx.tx.payload;
    ev.peer = b;
    ev.key_id = kx.key.id;
    fire(a, ev);
    Event rx;
    rx.kind = EventKind::KeyReceived;
    rx.peer = a;
    rx.key_id = kx.key.id;
    fire(b, rx);
    // the job key travels to the new member sealed under the pairwise key
    protocol::Emission msg;
    msg.channel = protocol::Channel::Direct;
    msg.tick = tick_;
    msg.author = a;
    msg.to = b;
    msg.message = "job-key";
    msg.payload = keys_.seal(kx.key.id, job_key_.secret);
    result_.direct_messages.push_back(std::move(msg));
    return kx.key;
}

Event event(EventKind kind, Bytes payload = {}, std::string peer = {}, std::uint64_t epoch = 0) {
    Event e;
    e.kind = kind;
    e.payload = std::move(payload);
    e.peer = std::move(peer);
    e.epoch = epoch;
    return e;
}

RunResult Job::run() {
    sc_.validate();
    const bool tdml = sc_.mode == Mode::Tdml;
    if (tdml && sc_.training.pipelines < 2) throw Error(ErrorCode::InvalidConfig, "tdml mode needs at least two pipelines to cross-validate");
    const std::string mode(to_string(sc_.mode));
    const auto N = sc_.training.pipelines;

    public_ = ledger::make_chain(sc_.task, 0);
    private_ = ledger::make_chain(sc_.task + "/private", 0);
    nodes_.emplace(sc_.client, protocol::make_node(protocol::Role::Client, sc_.client));
    for (const auto& s : sc_.servers) nodes_.emplace(s.uuid, protocol::make_node(protocol::Role::ParameterServer, s.uuid));
    for (const auto& t : sc_.trainers) nodes_.emplace(t.spec.uuid, protocol::make_node(protocol::Role::Trainer, t.spec.uuid));

    // task announcement
    protocol::TaskAnnouncement ann;
    ann.timestamp = tick_;
    ann.client = sc_.client;
    ann.task = sc_.task;
    ann.reward_budget = sc_.budget;
    ann.baseline = sc_.baseline;
    ann.splits = N;
    fire(sc_.client, event(EventKind::PublishTask, protocol::publish_task(ann).payload));
    seal();

    auto servers = sc_.servers;
    std::sort(servers.begin(), servers.end(), [](const auto& a, const auto& b) { return a.uuid < b.uuid; });
    for (const auto& s : servers) fire(s.uuid, event(EventKind::Register, evidence::json_bytes(node_json(s))));
    seal();

    // server selection and key exchange with the client
    auto pipelines = protocol::select_servers(sc_.baseline, servers, N);
    std::sort(pipelines.begin(), pipelines.end());
    std::vector<std::string> registered{sc_.client};
    for (const auto& s : servers) registered.push_back(s.uuid);
    {
        Rng rng(derive_seed(sc_.seed, "job-key"));
        Bytes nonce(16);
        for (auto& x : nonce) x = static_cast<std::uint8_t>(rng.next());
        job_key_ = protocol::derive_session_key(sc_.task, sc_.client, "job", nonce);
        keys_.add(job_key_);
    }
    fire(sc_.client, event(EventKind::ServersSelected));
    for (const auto& p : pipelines) exchange(sc_.client, p, registered);
    seal();

    // lies must target the validator the schedule will actually pick
    for (const auto& lie : sc_.lies) {
        auto v = protocol::schedule_validation(pipelines, lie.model);
        if (!tdml || !v || *v != lie.validator) {
            throw Error(ErrorCode::InvalidConfig, "lie by " + lie.validator + " about " + lie.model +
                                                      " does not match the validation schedule");
        }
    }

    // data, initial model and the job manifest
    const auto [train, test] = store::make_gaussian_blobs(sc_.data, evidence::data_seed(sc_.seed));
    const auto batch_cids = store::batch_dataset(train, sc_.training.batch_size, evidence::batch_seed(sc_.seed), keys_,
                                                 job_key_.id, store_);
    const auto splits = store::split_batches(batch_cids, N);
    const auto test_cid = put_sealed(store::encode_batch(store::as_batch(test)));
    auto global = model::init_model(sc_.arch, evidence::init_seed(sc_.seed));
    const auto init_cid = put_sealed(model::encode_checkpoint(global));

    evidence::Manifest manifest;
    manifest.job = sc_.task;
    manifest.client = sc_.client;
    manifest.mode = mode;
    manifest.seed = sc_.seed;
    manifest.arch = sc_.arch;
    manifest.lr = sc_.training.lr;
    manifest.epochs = sc_.training.epochs;
    manifest.top_k = sc_.training.k();
    manifest.batch_size = sc_.training.batch_size;
    manifest.init_model = init_cid;
    manifest.init_digest = model::model_digest(global).hex();
    manifest.test_set = test_cid;
    manifest.job_key_id = job_key_.id;
    manifest.flag = sc_.flag;
    manifest.detection = sc_.detection;
    manifest.detection_sample = sc_.detection_sample;
    manifest.budget = sc_.budget;
    manifest.trainer_share = sc_.trainer_share;
    std::map<std::string, std::vector<store::Cid>> split_of;
    for (std::size_t i = 0; i < pipelines.size(); ++i) {
        manifest.pipelines.push_back({pipelines[i], splits[i]});
        split_of[pipelines[i]] = splits[i];
    }
    fire(sc_.client, event(EventKind::PostManifest, evidence::json_bytes(evidence::to_json(manifest))));
    seal();

    // hiring
    const auto trainer_pool = static_cast<std::uint64_t>(static_cast<double>(sc_.budget) * sc_.trainer_share);
    for (const auto& p : pipelines) {
        protocol::HiringMessage h{tick_, p, sc_.baseline, std::max<std::uint64_t>(1, trainer_pool / N)};
        fire(p, event(EventKind::Hire, evidence::json_bytes(protocol::to_json(h))));
    }
    seal();

    std::map<std::string, std::vector<pipeline::NodeSpec>> candidates;
    {
        auto trainers = sc_.trainers;
        std::sort(trainers.begin(), trainers.end(), [](const auto& a, const auto& b) { return a.spec.uuid < b.spec.uuid; });
        std::size_t rr = 0;
        for (const auto& t : trainers) {
            std::string server = t.server;
            if (server.empty()) server = pipelines[rr++ % pipelines.size()];
            if (std::find(pipelines.begin(), pipelines.end(), server) == pipelines.end()) continue;
            candidates[server].push_back(t.spec);
            auto j = node_json(t.spec);
            j["server"] = server;
            fire(t.spec.uuid, event(EventKind::Apply, evidence::json_bytes(j)));
        }
    }
    seal();

    // trainer selection, pairwise keys, enrollment
    std::map<std::string, pipeline::ShardAssignment> assignment;
    std::map<std::string, std::vector<pipeline::NodeSpec>> spares;
    for (const auto& p : pipelines) {
        auto sel = protocol::select_trainers(sc_.baseline, candidates[p], profile_);
        assignment[p] = sel.assignment;
        spares[p] = sel.spares;
        std::vector<std::string> reg{p};
        for (const auto& c : candidates[p]) reg.push_back(c.uuid);
        for (const auto& r : sel.assignment.ranges) exchange(p, r.trainer, reg);
    }
    seal();
    for (const auto& p : pipelines) {
        for (const auto& r : assignment[p].ranges) {
            evidence::Enrollment e{p, r.trainer, r.lo, r.hi, 1};
            fire(p, event(EventKind::EnrollTrainer, evidence::json_bytes(evidence::to_json(e))));
        }
    }
    seal();

    std::set<std::string> blocked;
    for (std::uint64_t e = 1; e <= sc_.training.epochs; ++e) {
        const auto leader = pipelines.front();
        // shards out
        std::map<std::string, pipeline::PipelineState> states;
        for (const auto& p : pipelines) {
            fire(p, event(EventKind::StartEpoch, {}, {}, e));
            auto st = pipeline::make_pipeline(p, global, assignment[p]);
            for (const auto& shard : st.shards) {
                const auto plain = pipeline::encode_shard(shard);
                evidence::ShardUpload su{p, e, shard.trainer, shard.lo, shard.hi, put_sealed(plain), evidence::digest_hex(plain)};
                fire(p, event(EventKind::UploadShard, sealed(evidence::to_json(su)), shard.trainer));
                fire(shard.trainer, event(EventKind::ShardReceived, {}, p, e));
            }
            states.emplace(p, std::move(st));
        }
        seal();

        // training
        const auto hooks = robust::make_attack_hooks(sc_.attacks, e, evidence::attack_seed(sc_.seed));
        std::vector<model::Parameters> locals;
        std::vector<model::GradientRecord> reported;
        std::vector<pipeline::ShardAssignment> maps;
        std::vector<std::size_t> first_row;
        double loss_sum = 0.0;
        for (const auto& p : pipelines) {
            auto& st = states.at(p);
            pipeline::EpochContext ctx;
            ctx.store = &store_;
            ctx.keys = &keys_;
            ctx.transport_key_id = job_key_.id;
            ctx.lr = sc_.training.lr;
            ctx.order_seed = evidence::order_seed(sc_.seed, p, e);
            ctx.epoch = e;
            ctx.hooks = &hooks;
            auto res = pipeline::run_epoch(st, split_of.at(p), ctx);

            model::GradientRecord full;
            full.epoch = e;
            full.producer = p;
            for (std::size_t s = 0; s < res.shard_records.size(); ++s) {
                const auto& rec = res.shard_records[s];
                const auto plain = model::encode_gradients(rec);
                const auto& r = assignment[p].ranges[s];
                evidence::GradientUpload gu{p, r.trainer, e, r.lo, r.hi, put_sealed(plain), evidence::digest_hex(plain)};
                fire(r.trainer, event(EventKind::UploadGradient, sealed(evidence::to_json(gu)), p));
                for (const auto& l : rec.layers) full.layers.push_back(l);
            }

            auto local = wrap(sc_.arch, res.local, e);
            const auto plain = model::encode_checkpoint(local);
            evidence::LocalUpload lu{p, e, put_sealed(plain), model::model_digest(local).hex(), res.mean_loss, res.batches,
                                     assignment[p]};
            fire(p, event(EventKind::PublishLocal, sealed(evidence::to_json(lu))));

            MetricRow row;
            row.pipeline = p;
            row.epoch = e;
            row.train_loss = res.mean_loss;
            row.batches = res.batches;
            row.test_acc = model::evaluate(local.params, test).accuracy;
            row.local_digest = lu.digest;
            result_.metrics.push_back(row);
            loss_sum += res.mean_loss;

            locals.push_back(std::move(local.params));
            reported.push_back(std::move(full));
            maps.push_back(assignment[p]);
        }
        result_.train_loss.push_back(loss_sum / static_cast<double>(pipelines.size()));
        seal();

        // cross-validation
        std::vector<double> accuracies;
        if (tdml) {
            std::map<std::string, std::vector<std::size_t>> work;
            for (std::size_t i = 0; i < pipelines.size(); ++i) {
                auto v = protocol::schedule_validation(pipelines, pipelines[i]);
                work[*v].push_back(i);
            }
            accuracies.assign(pipelines.size(), 0.0);
            for (const auto& [validator, models] : work) {
                fire(validator, event(EventKind::ValidationPending));
                for (auto i : models) {
                    std::vector<robust::PendingModel> pending{
                        {pipelines[i], e, model::encode_checkpoint(wrap(sc_.arch, locals[i], e))}};
                    auto vr = robust::cross_validate(validator, pending, test).front();
                    for (const auto& lie : sc_.lies) {
                        if (lie.validator == validator && lie.model == pipelines[i] && lie.epoch == e) vr.accuracy = lie.accuracy;
                    }
                    accuracies[i] = vr.accuracy;
                    fire(validator, event(EventKind::Validate, evidence::json_bytes(robust::to_json(vr))));
                }
                fire(validator, event(EventKind::ValidationDone));
            }
            seal();
        }

        // aggregation by the lowest-uuid server
        audit::RoundInput round;
        round.mode = mode;
        round.epoch = e;
        round.seed = sc_.seed;
        round.authors = pipelines;
        round.models = std::move(locals);
        round.accuracies = accuracies;
        round.gradients = std::move(reported);
        round.assignments = maps;
        round.top_k = sc_.training.k();
        round.flag = sc_.flag;
        round.detection = sc_.detection;
        round.detection_sample = sc_.detection_sample;
        auto outcome = audit::aggregate_round(round);

        std::vector<std::pair<std::string, std::string>> to_replace; // (pipeline, trainer)
        if (outcome.detection) {
            const auto& report = *outcome.detection;
            fire(leader, event(EventKind::ReportDetection, evidence::json_bytes(robust::to_json(report))));
            result_.detections.push_back(report);
            if (report.status == robust::DetectionStatus::Detected) {
                for (const auto& t : report.attributed_trainers) {
                    if (!blocked.insert(t).second) continue;
                    fire(t, event(EventKind::Block));
                    result_.blocked.push_back(t);
                    to_replace.emplace_back(report.flagged_model, t);
                }
            }
        }
        global = wrap(sc_.arch, std::move(outcome.global), e);
        const auto plain = model::encode_checkpoint(global);
        evidence::GlobalPublish gp{e, e, put_sealed(plain), model::model_digest(global).hex(), outcome.included,
                                   outcome.flagged};
        fire(leader, event(EventKind::PublishGlobal, evidence::json_bytes(evidence::to_json(gp))));
        const double gacc = model::evaluate(global.params, test).accuracy;
        result_.global_accuracy.push_back(gacc);
        for (auto& row : result_.metrics) {
            if (row.epoch == e) row.global_acc = gacc;
        }
        seal();

        // blocked trainers are replaced from the server's spare candidates
        if (!to_replace.empty() && e < sc_.training.epochs) {
            for (const auto& [p, t] : to_replace) {
                auto& ranges = assignment[p].ranges;
                auto range = std::find_if(ranges.begin(), ranges.end(), [&](const auto& r) { return r.trainer == t; });
                const auto need = profile_.range(range->lo, range->hi);
                auto& pool = spares[p];
                auto spare = std::find_if(pool.begin(), pool.end(), [&](const auto& s) {
                    return s.memory_bytes >= need && !blocked.contains(s.uuid);
                });
                std::vector<std::string> reg{p};
                for (const auto& c : candidates[p]) reg.push_back(c.uuid);
                if (spare != pool.end()) {
                    exchange(p, spare->uuid, reg);
                    range->trainer = spare->uuid;
                    evidence::Enrollment en{p, spare->uuid, range->lo, range->hi, e + 1};
                    fire(p, event(EventKind::EnrollTrainer, evidence::json_bytes(evidence::to_json(en))));
                    pool.erase(spare);
                    continue;
                }
                // no single spare fits: repack over everyone still eligible, or retire the pipeline
                std::vector<pipeline::NodeSpec> left;
                for (const auto& c : candidates[p]) {
                    if (!blocked.contains(c.uuid)) left.push_back(c);
                }
                try {
                    auto sel = protocol::select_trainers(sc_.baseline, left, profile_);
                    for (const auto& r : sel.assignment.ranges) {
                        if (nodes_.at(r.trainer).phase == protocol::Phase::Applied) exchange(p, r.trainer, reg);
                        evidence::Enrollment en{p, r.trainer, r.lo, r.hi, e + 1};
                        fire(p, event(EventKind::EnrollTrainer, evidence::json_bytes(evidence::to_json(en))));
                    }
                    assignment[p] = sel.assignment;
                    pool = sel.spares;
                } catch (const Error& err) {
                    if (err.code() != ErrorCode::InsufficientMemory) throw;
                    fire(p, event(EventKind::Finish));
                    pipelines.erase(std::find(pipelines.begin(), pipelines.end(), p));
                    if (pipelines.empty() || (tdml && pipelines.size() < 2)) {
                        throw Error(ErrorCode::InsufficientCandidates, "too few pipelines left after blocking " + t);
                    }
                }
            }
            seal();
        }
    }

    // audit and settlement
    fire(sc_.client, event(EventKind::TrainingComplete));
    result_.evidence.public_chain = public_;
    result_.evidence.private_chain = private_;
    result_.evidence.store = store_;
    result_.evidence.keys.add(job_key_);
    result_.auditor_keys = {job_key_};
    result_.verification = audit::verify_training(result_.evidence);
    if (result_.verification.ok()) {
        const auto job = evidence::read_job(result_.evidence);
        result_.settlement = audit::settle_rewards(job, result_.verification, sc_.budget, {sc_.trainer_share});
        result_.paid = true;
        for (const auto& p : result_.settlement.payouts) {
            evidence::RewardClaim c{p.node, p.role, p.work_units, p.payout};
            fire(sc_.client, event(EventKind::ClaimReward, evidence::json_bytes(evidence::to_json(c))));
        }
    } else {
        result_.settlement.budget = sc_.budget;
        result_.settlement.withheld = sc_.budget;
        for (const auto& p : pipelines) result_.settlement.payouts.push_back({p, "parameter_server", 0, 0, false});
        std::set<std::string> seen;
        for (const auto& p : pipelines) {
            for (const auto& c : candidates[p]) {
                if (nodes_.at(c.uuid).session_keys.empty() || !seen.insert(c.uuid).second) continue;
                result_.settlement.payouts.push_back({c.uuid, "trainer", 0, 0, blocked.contains(c.uuid)});
            }
        }
    }
    fire(sc_.client, event(EventKind::Finish));
    for (auto& [uuid, node] : nodes_) {
        if (node.phase != protocol::Phase::Done && node.phase != protocol::Phase::Idle) fire(uuid, event(EventKind::Finish));
    }
    seal();

    result_.evidence.public_chain = std::move(public_);
    result_.evidence.private_chain = std::move(private_);
    return std::move(result_);
}

void write_file(const std::filesystem::path& path, std::string_view text) {
    std::ofstream out(path, std::ios::binary | std::ios::trunc);
    out.write(text.data(), static_cast<std::streamsize>(text.size()));
    if (!out) throw Error(ErrorCode::InvalidArgument, "cannot write " + path.string());
}

} // namespace

RunResult run_scenario(const Scenario& scenario) { return Job(scenario).run(); }

std::string metrics_csv(const std::vector<MetricRow>& rows) {
    std::string out = "pipeline,epoch,train_loss,batches,test_acc,global_acc,local_model_digest\n";
    for (const auto& r : rows) {
        out += r.pipeline + "," + std::to_string(r.epoch) + "," + fmt(r.train_loss) + "," + std::to_string(r.batches) +
               "," + fmt(r.test_acc) + "," + fmt(r.global_acc) + "," + r.local_digest + "\n";
    }
    return out;
}

void write_artifacts(const RunResult& result, const std::filesystem::path& dir) {
    std::filesystem::create_directories(dir);
    write_file(dir / evidence::kPublicChainFile, ledger::dump_jsonl(result.evidence.public_chain));
    write_file(dir / evidence::kPrivateChainFile, ledger::dump_jsonl(result.evidence.private_chain));
    write_file(dir / "metrics.csv", metrics_csv(result.metrics));
    std::string det;
    for (const auto& d : result.detections) det += robust::to_json(d).dump() + "\n";
    write_file(dir / "detections.jsonl", det);
    write_file(dir / "settlement.json", audit::settlement_json(result.settlement).dump(2) + "\n");
    write_file(dir / evidence::kKeyringFile, evidence::keyring_json(result.auditor_keys).dump(2) + "\n");
    const auto blobs = dir / evidence::kBlobDir;
    if (std::filesystem::exists(blobs)) {
        for (const auto& entry : std::filesystem::directory_iterator(blobs)) {
            if (entry.path().extension() == ".blob") std::filesystem::remove(entry.path());
        }
    }
    result.evidence.store.spill(blobs);
}

} // namespace tdml::sim
