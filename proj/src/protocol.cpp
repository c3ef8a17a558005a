#include "tdml/protocol.hpp"

#include "tdml/error.hpp"

#include <algorithm>
#include <numeric>

namespace tdml::protocol {

void TaskAnnouncement::validate() const {
    if (client.empty()) throw Error(ErrorCode::InvalidConfig, "task announcement without client");
    if (reward_budget == 0) throw Error(ErrorCode::InvalidConfig, "reward budget must be positive");
    if (splits < 1) throw Error(ErrorCode::InvalidConfig, "N must be at least 1");
}

nlohmann::json to_json(const TaskAnnouncement& a) {
    return {{"timestamp", a.timestamp},
            {"client", a.client},
            {"task", a.task},
            {"reward_budget", a.reward_budget},
            {"baseline", {{"min_memory_bytes", a.baseline.min_memory_bytes}, {"min_cpus", a.baseline.min_cpus}}},
            {"splits", a.splits}};
}

TaskAnnouncement announcement_from_json(const nlohmann::json& j) {
    TaskAnnouncement a;
    a.timestamp = j.at("timestamp").get<ledger::Tick>();
    a.client = j.at("client").get<std::string>();
    a.task = j.at("task").get<std::string>();
    a.reward_budget = j.at("reward_budget").get<std::uint64_t>();
    a.baseline.min_memory_bytes = j.at("baseline").at("min_memory_bytes").get<std::uint64_t>();
    a.baseline.min_cpus = j.at("baseline").at("min_cpus").get<std::uint32_t>();
    a.splits = j.at("splits").get<std::uint32_t>();
    return a;
}

nlohmann::json to_json(const HiringMessage& h) {
    return {{"timestamp", h.timestamp},
            {"server", h.server},
            {"baseline", {{"min_memory_bytes", h.baseline.min_memory_bytes}, {"min_cpus", h.baseline.min_cpus}}},
            {"budget_share", h.budget_share}};
}

HiringMessage hiring_from_json(const nlohmann::json& j) {
    HiringMessage h;
    h.timestamp = j.at("timestamp").get<ledger::Tick>();
    h.server = j.at("server").get<std::string>();
    h.baseline.min_memory_bytes = j.at("baseline").at("min_memory_bytes").get<std::uint64_t>();
    h.baseline.min_cpus = j.at("baseline").at("min_cpus").get<std::uint32_t>();
    h.budget_share = j.at("budget_share").get<std::uint64_t>();
    return h;
}

std::uint32_t TrainingConfig::k() const {
    if (top_k != 0) return top_k;
    return std::max<std::uint32_t>(1, models_per_round() / 2);
}

void TrainingConfig::validate() const {
    if (pipelines < 1) throw Error(ErrorCode::InvalidConfig, "need at least one pipeline");
    if (epochs < 1) throw Error(ErrorCode::InvalidConfig, "need at least one epoch");
    if (batch_size < 1) throw Error(ErrorCode::InvalidConfig, "batch size must be positive");
    if (!(lr >= 0.0)) throw Error(ErrorCode::InvalidConfig, "learning rate must be non-negative");
    if (k() < 1 || k() > models_per_round()) {
        throw Error(ErrorCode::InvalidConfig, "K=" + std::to_string(k()) + " outside [1, M]");
    }
}

ledger::Transaction publish_task(const TaskAnnouncement& announcement) {
    announcement.validate();
    return ledger::make_transaction(announcement.timestamp, announcement.client, ledger::TxKind::TaskAnnounce,
                                    to_bytes(to_json(announcement).dump()));
}

std::vector<std::string> select_servers(const Baseline& baseline, std::span<const pipeline::NodeSpec> registrations,
                                        std::size_t n) {
    std::vector<pipeline::NodeSpec> eligible;
    for (const auto& r : registrations) {
        if (r.memory_bytes >= baseline.min_memory_bytes) eligible.push_back(r);
    }
    if (eligible.size() < n) {
        throw Error(ErrorCode::InsufficientCandidates, std::to_string(eligible.size()) + " eligible servers, need " +
                                                           std::to_string(n));
    }
    std::sort(eligible.begin(), eligible.end(), [](const auto& a, const auto& b) {
        if (a.compute_score != b.compute_score) return a.compute_score > b.compute_score;
        return a.uuid < b.uuid;
    });
    std::vector<std::string> out;
    for (std::size_t i = 0; i < n; ++i) out.push_back(eligible[i].uuid);
    return out;
}

TrainerSelection select_trainers(const Baseline& baseline, std::span<const pipeline::NodeSpec> candidates,
                                 const model::LayerMemoryProfile& profile) {
    std::vector<pipeline::NodeSpec> ranked;
    for (const auto& c : candidates) {
        if (c.memory_bytes >= baseline.min_memory_bytes) ranked.push_back(c);
    }
    std::sort(ranked.begin(), ranked.end(), [](const auto& a, const auto& b) {
        if (a.memory_bytes != b.memory_bytes) return a.memory_bytes > b.memory_bytes;
        if (a.compute_score != b.compute_score) return a.compute_score > b.compute_score;
        return a.uuid < b.uuid;
    });

    std::uint64_t total = 0;
    for (std::size_t n = 1; n <= ranked.size(); ++n) {
        total += ranked[n - 1].memory_bytes;
        if (total < profile.total) continue;
        std::vector<pipeline::NodeSpec> chosen(ranked.begin(), ranked.begin() + static_cast<std::ptrdiff_t>(n));
        std::sort(chosen.begin(), chosen.end(), [](const auto& a, const auto& b) { return a.uuid < b.uuid; });
        try {
            TrainerSelection sel;
            sel.assignment = pipeline::shard_model(profile, chosen);
            // trainers the packer skipped hold nothing and are not hired
            for (const auto& c : chosen) {
                const bool used = std::any_of(sel.assignment.ranges.begin(), sel.assignment.ranges.end(),
                                              [&](const auto& r) { return r.trainer == c.uuid; });
                (used ? sel.selected : sel.spares).push_back(c);
            }
            sel.spares.insert(sel.spares.end(), ranked.begin() + static_cast<std::ptrdiff_t>(n), ranked.end());
            return sel;
        } catch (const Error& e) {
            if (e.code() != ErrorCode::InsufficientMemory) throw;
        }
    }
    throw Error(ErrorCode::InsufficientMemory, "candidates cannot hold a model of " + std::to_string(profile.total) +
                                                   " bytes");
}

ledger::SessionKey derive_session_key(std::string_view job_id, std::string_view a, std::string_view b,
                                      ByteView nonce) {
    ByteWriter w;
    w.str(job_id);
    w.str(a);
    w.str(b);
    w.bytes(nonce);
    ledger::SessionKey key;
    key.secret = sha256(w.data()).bytes;
    key.id = ledger::key_id_for(key.secret);
    return key;
}

KeyExchangeResult key_exchange(std::string_view job_id, const std::string& a, const std::string& b,
                               ByteView nonce, ledger::Tick tick, std::span<const std::string> registered) {
    for (const auto* party : {&a, &b}) {
        if (std::find(registered.begin(), registered.end(), *party) == registered.end()) {
            throw Error(ErrorCode::UnknownParty, "unknown party " + *party);
        }
    }
    KeyExchangeResult r;
    r.key = derive_session_key(job_id, a, b, nonce);
    nlohmann::json j = {{"a", a}, {"b", b}, {"key_id", r.key.id}};
    r.tx = ledger::make_transaction(tick, a, ledger::TxKind::KeyExchange, to_bytes(j.dump()));
    return r;
}

std::optional<std::string> schedule_validation(std::span<const std::string> idle_servers,
                                               std::string_view pending_author) {
    std::optional<std::string> best;
    for (const auto& s : idle_servers) {
        if (s == pending_author) continue;
        if (!best || s < *best) best = s;
    }
    return best;
}

// ---------------------------------------------------------------------------------------

std::string_view to_string(Role r) {
    switch (r) {
    case Role::Client: return "client";
    case Role::ParameterServer: return "parameter_server";
    case Role::Trainer: return "trainer";
    }
    return "unknown";
}

std::string_view to_string(Phase p) {
    switch (p) {
    case Phase::Idle: return "Idle";
    case Phase::Announced: return "Announced";
    case Phase::Coordinating: return "Coordinating";
    case Phase::Settling: return "Settling";
    case Phase::Registered: return "Registered";
    case Phase::Hired: return "Hired";
    case Phase::Recruiting: return "Recruiting";
    case Phase::Training: return "Training";
    case Phase::Waiting: return "Waiting";
    case Phase::Validating: return "Validating";
    case Phase::Applied: return "Applied";
    case Phase::Enrolled: return "Enrolled";
    case Phase::ShardLoaded: return "ShardLoaded";
    case Phase::Reported: return "Reported";
    case Phase::Blocked: return "Blocked";
    case Phase::Done: return "Done";
    }
    return "unknown";
}

std::string_view to_string(EventKind e) {
    switch (e) {
    case EventKind::PublishTask: return "PublishTask";
    case EventKind::PostManifest: return "PostManifest";
    case EventKind::ServersSelected: return "ServersSelected";
    case EventKind::ExchangeKey: return "ExchangeKey";
    case EventKind::TrainingComplete: return "TrainingComplete";
    case EventKind::ClaimReward: return "ClaimReward";
    case EventKind::Register: return "Register";
    case EventKind::KeyReceived: return "KeyReceived";
    case EventKind::Hire: return "Hire";
    case EventKind::EnrollTrainer: return "EnrollTrainer";
    case EventKind::UploadShard: return "UploadShard";
    case EventKind::StartEpoch: return "StartEpoch";
    case EventKind::PublishLocal: return "PublishLocal";
    case EventKind::ValidationPending: return "ValidationPending";
    case EventKind::Validate: return "Validate";
    case EventKind::ValidationDone: return "ValidationDone";
    case EventKind::ReportDetection: return "ReportDetection";
    case EventKind::PublishGlobal: return "PublishGlobal";
    case EventKind::Apply: return "Apply";
    case EventKind::ShardReceived: return "ShardReceived";
    case EventKind::UploadGradient: return "UploadGradient";
    case EventKind::Block: return "Block";
    case EventKind::Finish: return "Finish";
    }
    return "unknown";
}

ledger::Transaction Emission::transaction() const {
    if (!kind) throw Error(ErrorCode::InvalidArgument, "direct message is not a transaction");
    return ledger::make_transaction(tick, author, *kind, payload);
}

NodeState make_node(Role role, std::string uuid) {
    NodeState n;
    n.role = role;
    n.uuid = std::move(uuid);
    return n;
}

namespace {

struct Rule {
    Role role;
    std::vector<Phase> from;
    EventKind event;
    std::optional<Phase> to; // nullopt: stay
    Channel channel;
    std::optional<ledger::TxKind> kind;
};

using enum Phase;
using enum EventKind;
using ledger::TxKind;

const std::vector<Rule>& rules() {
    static const std::vector<Rule> table = {
        {Role::Client, {Idle}, PublishTask, Announced, Channel::Public, TxKind::TaskAnnounce},
        {Role::Client, {Announced}, ServersSelected, Coordinating, Channel::Direct, std::nullopt},
        {Role::Client, {Coordinating}, ExchangeKey, std::nullopt, Channel::Public, TxKind::KeyExchange},
        {Role::Client, {Coordinating}, PostManifest, std::nullopt, Channel::Private, TxKind::TaskAnnounce},
        {Role::Client, {Coordinating}, TrainingComplete, Settling, Channel::Direct, std::nullopt},
        {Role::Client, {Settling}, ClaimReward, std::nullopt, Channel::Private, TxKind::RewardClaim},
        {Role::Client, {Settling}, Finish, Done, Channel::Direct, std::nullopt},

        {Role::ParameterServer, {Idle}, Register, Registered, Channel::Public, TxKind::ServerRegister},
        {Role::ParameterServer, {Registered}, KeyReceived, Hired, Channel::Direct, std::nullopt},
        {Role::ParameterServer, {Hired}, Hire, Recruiting, Channel::Public, TxKind::HiringAnnounce},
        {Role::ParameterServer, {Recruiting, Waiting}, ExchangeKey, std::nullopt, Channel::Public, TxKind::KeyExchange},
        {Role::ParameterServer, {Recruiting, Waiting}, EnrollTrainer, std::nullopt, Channel::Private,
         TxKind::TrainerRegister},
        {Role::ParameterServer, {Recruiting, Waiting}, StartEpoch, Training, Channel::Direct, std::nullopt},
        {Role::ParameterServer, {Training}, UploadShard, std::nullopt, Channel::Private, TxKind::ShardUpload},
        {Role::ParameterServer, {Training}, PublishLocal, Waiting, Channel::Private, TxKind::LocalModelUpload},
        {Role::ParameterServer, {Waiting}, ValidationPending, Validating, Channel::Direct, std::nullopt},
        {Role::ParameterServer, {Validating}, Validate, std::nullopt, Channel::Private, TxKind::ValidationResult},
        {Role::ParameterServer, {Validating}, ValidationDone, Waiting, Channel::Direct, std::nullopt},
        {Role::ParameterServer, {Waiting}, ReportDetection, std::nullopt, Channel::Private, TxKind::DetectionReport},
        {Role::ParameterServer, {Waiting}, PublishGlobal, std::nullopt, Channel::Private, TxKind::GlobalModelPublish},
        {Role::ParameterServer, {Registered, Recruiting, Waiting}, Finish, Done, Channel::Direct, std::nullopt},

        {Role::Trainer, {Idle}, Apply, Applied, Channel::Public, TxKind::TrainerRegister},
        {Role::Trainer, {Applied}, KeyReceived, Enrolled, Channel::Direct, std::nullopt},
        {Role::Trainer, {Enrolled, Reported}, ShardReceived, ShardLoaded, Channel::Direct, std::nullopt},
        {Role::Trainer, {ShardLoaded}, UploadGradient, Reported, Channel::Private, TxKind::GradientUpload},
        {Role::Trainer, {Applied, Enrolled, ShardLoaded, Reported}, Block, Blocked, Channel::Direct, std::nullopt},
        {Role::Trainer, {Idle, Applied, Enrolled, Reported, Blocked}, Finish, Done, Channel::Direct, std::nullopt},
    };
    return table;
}

} // namespace

StepResult step(const NodeState& node, const Event& event) {
    const Rule* rule = nullptr;
    for (const auto& r : rules()) {
        if (r.role != node.role || r.event != event.kind) continue;
        if (std::find(r.from.begin(), r.from.end(), node.phase) == r.from.end()) continue;
        rule = &r;
        break;
    }
    if (rule == nullptr) {
        throw Error(ErrorCode::IllegalTransition, std::string(to_string(node.role)) + " " + node.uuid + " in " +
                                                      std::string(to_string(node.phase)) + " cannot handle " +
                                                      std::string(to_string(event.kind)));
    }

    StepResult out;
    out.state = node;
    if (rule->to) out.state.phase = *rule->to;

    switch (event.kind) {
    case ExchangeKey:
    case KeyReceived:
        if (!event.key_id.empty()) out.state.session_keys.push_back(event.key_id);
        if (event.kind == KeyReceived) out.state.pipeline = node.role == Role::Trainer ? event.peer : node.uuid;
        break;
    case StartEpoch:
    case ShardReceived:
        out.state.epoch = event.epoch;
        break;
    default:
        break;
    }

    if (rule->kind) {
        Emission e;
        e.channel = rule->channel;
        e.tick = event.tick;
        e.author = node.uuid;
        e.kind = rule->kind;
        e.payload = event.payload;
        e.to = event.peer;
        out.emitted.push_back(std::move(e));
    } else if (event.kind == ShardReceived) {
        Emission ack;
        ack.channel = Channel::Direct;
        ack.tick = event.tick;
        ack.author = node.uuid;
        ack.message = "ack";
        ack.to = event.peer;
        out.emitted.push_back(std::move(ack));
    }
    return out;
}

} // namespace tdml::protocol
