#include "tdml/error.hpp"
#include "tdml/protocol.hpp"
#include "tdml/scenario.hpp"
#include "tdml/simulation.hpp"

#include <gtest/gtest.h>

#include <algorithm>
#include <cstdlib>
#include <fstream>
#include <map>
#include <sstream>

using namespace tdml;
using namespace tdml::protocol;

namespace {

std::vector<pipeline::NodeSpec> specs(std::vector<std::pair<std::string, double>> scored, std::uint64_t mem = 1000) {
    std::vector<pipeline::NodeSpec> out;
    for (auto& [id, s] : scored) out.push_back({id, mem, s, "", 1});
    return out;
}

const char* kSmall = R"({
  "task": "unit-2dp", "mode": "tdml", "seed": 3, "out": "unused",
  "budget": 1000,
  "baseline": {"min_memory_bytes": 512},
  "model": {"layers": [16, 12, 4]},
  "data": {"train": 256, "test": 128},
  "training": {"epochs": 3, "pipelines": 2, "batch_size": 32, "lr": 0.1},
  "servers": [{"uuid": "ps-a", "memory_bytes": 65536}, {"uuid": "ps-b", "memory_bytes": 65536}],
  "trainers": [
    {"uuid": "t-a1", "server": "ps-a", "memory_bytes": 900},
    {"uuid": "t-a2", "server": "ps-a", "memory_bytes": 900},
    {"uuid": "t-b1", "server": "ps-b", "memory_bytes": 900},
    {"uuid": "t-b2", "server": "ps-b", "memory_bytes": 900}
  ]
})";

std::string trace_text(const sim::RunResult& r) {
    std::ostringstream out;
    auto dump = [&](const char* name, const ledger::Chain& c) {
        for (const auto& b : c.blocks) {
            for (const auto& tx : b.body) out << name << ' ' << tx.timestamp << ' ' << tx.author << ' ' << ledger::to_string(tx.kind) << '\n';
        }
    };
    dump("public", r.evidence.public_chain);
    dump("private", r.evidence.private_chain);
    return out.str();
}

const sim::RunResult& small_run() {
    static const sim::RunResult r = sim::run_scenario(sim::parse_scenario(kSmall));
    return r;
}

} // namespace

TEST(Announce, RoundTripAndValidation) {
    TaskAnnouncement a{5, "client-0", "blobs", 900, {4096, 2}, 4};
    auto tx = publish_task(a);
    EXPECT_EQ(tx.kind, ledger::TxKind::TaskAnnounce);
    EXPECT_EQ(announcement_from_json(nlohmann::json::parse(to_string(tx.payload))), a);
    auto chain = ledger::make_chain("t");
    ledger::append_block(chain, {tx}, 5);
    EXPECT_EQ(ledger::query(chain, ledger::TxKind::TaskAnnounce).size(), 1u);
    a.reward_budget = 0;
    EXPECT_THROW(publish_task(a), Error);
    HiringMessage h{3, "ps-a", {10, 1}, 77};
    EXPECT_EQ(hiring_from_json(to_json(h)), h);
}

TEST(TrainingConfig, TopKRule) {
    TrainingConfig c;
    c.pipelines = 4;
    EXPECT_EQ(c.k(), 2u);
    c.pipelines = 1;
    EXPECT_EQ(c.k(), 1u);
    c.pipelines = 5;
    EXPECT_EQ(c.k(), 2u);
    c.top_k = 6;
    EXPECT_THROW(c.validate(), Error);
}

TEST(SelectServers, SortOracle) {
    auto regs = specs({{"e", 0.5}, {"a", 2.0}, {"c", 3.0}, {"b", 2.0}, {"d", 1.0}, {"f", 0.1}});
    EXPECT_EQ(select_servers({}, regs, 4), (std::vector<std::string>{"c", "a", "b", "d"}));
    regs[2].memory_bytes = 1;
    EXPECT_EQ(select_servers({10, 0}, regs, 2), (std::vector<std::string>{"a", "b"}));
    try {
        select_servers({}, specs({{"a", 1}, {"b", 1}, {"c", 1}}), 4);
        FAIL();
    } catch (const Error& e) {
        EXPECT_EQ(e.code(), ErrorCode::InsufficientCandidates);
    }
}

TEST(SelectTrainers, MinimalPrefix) {
    model::LayerMemoryProfile prof;
    prof.per_layer = {320, 320};
    prof.total = 640;
    std::vector<pipeline::NodeSpec> c{{"t3", 320, 1, "", 1}, {"t1", 320, 1, "", 1}, {"t2", 320, 1, "", 1}, {"t0", 100, 9, "", 1}};
    auto sel = select_trainers({200, 0}, c, prof);
    ASSERT_EQ(sel.selected.size(), 2u);
    EXPECT_EQ(sel.selected[0].uuid, "t1");
    EXPECT_EQ(sel.selected[1].uuid, "t2");
    ASSERT_EQ(sel.spares.size(), 1u);
    EXPECT_EQ(sel.spares[0].uuid, "t3");
    EXPECT_EQ(sel.assignment.ranges.size(), 2u);
    try {
        select_trainers({400, 0}, c, prof);
        FAIL();
    } catch (const Error& e) {
        EXPECT_EQ(e.code(), ErrorCode::InsufficientMemory);
    }
}

TEST(KeyExchange, SharedDerivationAndUnknownParty) {
    std::vector<std::string> reg{"client-0", "ps-a"};
    auto nonce = to_bytes("nonce-1");
    auto r = key_exchange("job", "client-0", "ps-a", nonce, 4, reg);
    EXPECT_EQ(r.key, derive_session_key("job", "client-0", "ps-a", nonce));
    EXPECT_NE(r.key, derive_session_key("job", "client-0", "ps-a", to_bytes("nonce-2")));
    auto payload = to_string(r.tx.payload);
    EXPECT_NE(payload.find(r.key.id), std::string::npos);
    EXPECT_EQ(payload.find(hex_encode(r.key.secret)), std::string::npos);
    try {
        key_exchange("job", "client-0", "ps-z", nonce, 4, reg);
        FAIL();
    } catch (const Error& e) {
        EXPECT_EQ(e.code(), ErrorCode::UnknownParty);
    }
    // chain observer without the nonce derives a different key and cannot open
    auto sealed = ledger::seal(as_bytes("secret"), r.key, ledger::derive_nonce(r.key.id, 0)).serialize();
    auto guess = derive_session_key("job", "client-0", "ps-a", {});
    guess.id = r.key.id;
    EXPECT_THROW(ledger::open(sealed, guess), Error);
}

TEST(ScheduleValidation, LowestIdleNonAuthor) {
    std::vector<std::string> idle{"ps-a"};
    EXPECT_EQ(schedule_validation(idle, "ps-b"), "ps-a");
    EXPECT_EQ(schedule_validation(idle, "ps-a"), std::nullopt);
    std::vector<std::string> three{"ps-c", "ps-a", "ps-b"};
    std::sort(three.begin(), three.end());
    do {
        EXPECT_EQ(schedule_validation(three, "ps-x"), "ps-a");
        EXPECT_EQ(schedule_validation(three, "ps-a"), "ps-b");
    } while (std::next_permutation(three.begin(), three.end()));
    EXPECT_EQ(schedule_validation({}, "ps-a"), std::nullopt);
}

TEST(Step, TrainerLifecycle) {
    auto t = make_node(Role::Trainer, "t-1");
    auto s = step(t, {EventKind::Apply, 1, to_bytes("{}"), "ps-a"});
    EXPECT_EQ(s.state.phase, Phase::Applied);
    ASSERT_EQ(s.emitted.size(), 1u);
    EXPECT_EQ(s.emitted[0].channel, Channel::Public);
    EXPECT_EQ(s.emitted[0].kind, ledger::TxKind::TrainerRegister);
    s = step(s.state, {EventKind::KeyReceived, 2, {}, "ps-a", "k1"});
    EXPECT_EQ(s.state.phase, Phase::Enrolled);
    EXPECT_EQ(s.state.pipeline, "ps-a");
    EXPECT_EQ(s.state.session_keys, (std::vector<std::string>{"k1"}));
    s = step(s.state, {EventKind::ShardReceived, 3, {}, "ps-a", "", 1});
    EXPECT_EQ(s.state.phase, Phase::ShardLoaded);
    ASSERT_EQ(s.emitted.size(), 1u);
    EXPECT_EQ(s.emitted[0].message, "ack");
    EXPECT_EQ(s.emitted[0].to, "ps-a");
    EXPECT_THROW(s.emitted[0].transaction(), Error);
    s = step(s.state, {EventKind::UploadGradient, 4, to_bytes("g"), "ps-a"});
    EXPECT_EQ(s.state.phase, Phase::Reported);
    EXPECT_EQ(s.emitted[0].channel, Channel::Private);
    s = step(s.state, {EventKind::Block, 5});
    EXPECT_EQ(s.state.phase, Phase::Blocked);
    try {
        step(s.state, {EventKind::UploadGradient, 6});
        FAIL();
    } catch (const Error& e) {
        EXPECT_EQ(e.code(), ErrorCode::IllegalTransition);
        EXPECT_NE(std::string(e.what()).find("Blocked"), std::string::npos);
    }
}

TEST(Step, ServerEntersValidatingWhenJobPending) {
    auto ps = make_node(Role::ParameterServer, "ps-a");
    for (auto k : {EventKind::Register, EventKind::KeyReceived, EventKind::Hire, EventKind::StartEpoch, EventKind::PublishLocal}) {
        ps = step(ps, {k, 1}).state;
    }
    EXPECT_EQ(ps.phase, Phase::Waiting);
    ps = step(ps, {EventKind::ValidationPending, 2}).state;
    EXPECT_EQ(ps.phase, Phase::Validating);
    EXPECT_THROW(step(ps, {EventKind::PublishGlobal, 2}), Error);
    ps = step(ps, {EventKind::ValidationDone, 2}).state;
    EXPECT_EQ(ps.phase, Phase::Waiting);
}

TEST(Step, PureTransition) {
    auto c = make_node(Role::Client, "client-0");
    Event e{EventKind::PublishTask, 9, to_bytes("x")};
    EXPECT_EQ(step(c, e).state, step(c, e).state);
    EXPECT_EQ(c.phase, Phase::Idle);
    EXPECT_THROW(step(c, {EventKind::Apply, 1}), Error);
}

// State-machine safety: feeding the recorded events back through step() reproduces every phase.
TEST(Simulation, TraceReplaysThroughStep) {
    const auto& r = small_run();
    ASSERT_FALSE(r.trace.empty());
    std::map<std::string, NodeState> nodes;
    for (const auto& t : r.trace) {
        auto it = nodes.find(t.node);
        if (it == nodes.end()) it = nodes.emplace(t.node, make_node(t.role, t.node)).first;
        it->second = step(it->second, t.event).state;
        EXPECT_EQ(it->second.phase, t.phase) << t.node << " " << to_string(t.event.kind);
    }
}

TEST(Simulation, HonestRunInvariants) {
    const auto& r = small_run();
    EXPECT_TRUE(r.verification.ok());
    EXPECT_EQ(ledger::query(r.evidence.private_chain, ledger::TxKind::GlobalModelPublish).size(), 3u);
    EXPECT_TRUE(ledger::verify_chain(r.evidence.public_chain).ok);
    EXPECT_TRUE(ledger::verify_chain(r.evidence.private_chain).ok);

    auto job = evidence::read_job(r.evidence);
    for (const auto& [key, v] : job.validations) EXPECT_NE(v.validator, key.second);

    // payloads on the private chain are envelopes that only the job key opens
    for (auto kind : {ledger::TxKind::GradientUpload, ledger::TxKind::LocalModelUpload}) {
        auto txs = ledger::query(r.evidence.private_chain, kind);
        ASSERT_FALSE(txs.empty());
        for (const auto& tx : txs) {
            EXPECT_NO_THROW(ledger::Envelope::deserialize(tx.payload));
            EXPECT_THROW(evidence::parse_json_bytes(tx.payload), Error);
        }
    }
    // one KeyExchange per pair on the public chain
    std::map<std::string, int> ids;
    for (const auto& tx : ledger::query(r.evidence.public_chain, ledger::TxKind::KeyExchange)) {
        ++ids[nlohmann::json::parse(to_string(tx.payload)).at("key_id").get<std::string>()];
    }
    for (const auto& [id, n] : ids) EXPECT_EQ(n, 1) << id;
}

TEST(Simulation, GoldenTrace) {
    const std::string path = std::string(TDML_TEST_DATA) + "/golden_trace_2dp.txt";
    const auto text = trace_text(small_run());
    if (std::getenv("TDML_REGEN_GOLDEN")) std::ofstream(path, std::ios::binary) << text;
    std::ifstream in(path, std::ios::binary);
    std::ostringstream ss;
    ss << in.rdbuf();
    EXPECT_EQ(ss.str(), text);
}

TEST(Simulation, DeterministicAcrossRuns) {
    auto again = sim::run_scenario(sim::parse_scenario(kSmall));
    EXPECT_EQ(ledger::dump_jsonl(again.evidence.private_chain), ledger::dump_jsonl(small_run().evidence.private_chain));
}

TEST(Scenario, RejectsBadConfig) {
    auto j = nlohmann::json::parse(kSmall);
    j["bogus"] = 1;
    EXPECT_THROW(sim::parse_scenario(j.dump()), Error);
    j = nlohmann::json::parse(kSmall);
    j["trainers"][0]["server"] = "ps-nope";
    EXPECT_THROW(sim::parse_scenario(j.dump()), Error);
    j = nlohmann::json::parse(kSmall);
    j["mode"] = "gossip";
    EXPECT_THROW(sim::parse_scenario(j.dump()), Error);
    auto sc = sim::parse_scenario(std::string("// comment line\n") + kSmall);
    EXPECT_EQ(sc.training.pipelines, 2u);
    EXPECT_EQ(sim::parse_scenario(sim::to_json(sc).dump()).task, sc.task);
}

TEST(Scenario, NotEnoughServers) {
    auto j = nlohmann::json::parse(kSmall);
    j["training"]["pipelines"] = 3;
    try {
        sim::run_scenario(sim::parse_scenario(j.dump()));
        FAIL();
    } catch (const Error& e) {
        EXPECT_TRUE(e.code() == ErrorCode::InsufficientCandidates || e.code() == ErrorCode::InvalidConfig);
    }
}
