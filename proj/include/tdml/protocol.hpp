#pragma once

#include "tdml/ledger.hpp"
#include "tdml/model.hpp"
#include "tdml/pipeline.hpp"

#include <nlohmann/json.hpp>

#include <cstdint>
#include <optional>
#include <span>
#include <string>
#include <vector>

namespace tdml::protocol {

struct Baseline {
    std::uint64_t min_memory_bytes = 0;
    std::uint32_t min_cpus = 0; // carried for the record; only memory gates selection

    friend bool operator==(const Baseline&, const Baseline&) = default;
};

struct TaskAnnouncement {
    ledger::Tick timestamp = 0;
    std::string client;
    std::string task;
    std::uint64_t reward_budget = 0;
    Baseline baseline;
    std::uint32_t splits = 1; // N data-parallel pipelines

    void validate() const; // InvalidConfig
    friend bool operator==(const TaskAnnouncement&, const TaskAnnouncement&) = default;
};

nlohmann::json to_json(const TaskAnnouncement& a);
TaskAnnouncement announcement_from_json(const nlohmann::json& j);

struct HiringMessage {
    ledger::Tick timestamp = 0;
    std::string server;
    Baseline baseline;
    std::uint64_t budget_share = 0;

    friend bool operator==(const HiringMessage&, const HiringMessage&) = default;
};

nlohmann::json to_json(const HiringMessage& h);
HiringMessage hiring_from_json(const nlohmann::json& j);

struct TrainingConfig {
    double lr = 0.1;
    std::uint32_t epochs = 10;
    std::uint32_t pipelines = 1;
    std::uint32_t top_k = 0; // 0: floor(M / 2), at least 1
    std::uint32_t batch_size = 32;
    std::uint64_t seed = 0;

    std::uint32_t models_per_round() const { return pipelines; }
    std::uint32_t k() const;
    void validate() const; // InvalidConfig
};

/// TaskAnnounce transaction for the public chain. Throws InvalidConfig.
ledger::Transaction publish_task(const TaskAnnouncement& announcement);

/// Filter by baseline memory, sort by (compute_score desc, uuid asc), take n.
/// Throws InsufficientCandidates.
std::vector<std::string> select_servers(const Baseline& baseline, std::span<const pipeline::NodeSpec> registrations,
                                        std::size_t n);

struct TrainerSelection {
    std::vector<pipeline::NodeSpec> selected; // packing order
    std::vector<pipeline::NodeSpec> spares;   // eligible but not needed, in rank order
    pipeline::ShardAssignment assignment;
};

/// Candidates below the baseline are dropped; the rest are ranked by (memory desc,
/// compute_score desc, uuid asc). The selection is the shortest prefix of that ranking
/// whose summed memory covers the model and which the greedy packer can place; packing
/// runs over the selection in uuid order. Throws InsufficientMemory.
TrainerSelection select_trainers(const Baseline& baseline, std::span<const pipeline::NodeSpec> candidates,
                                 const model::LayerMemoryProfile& profile);

/// key = sha256(job_id || a || b || nonce), each part length-prefixed.
ledger::SessionKey derive_session_key(std::string_view job_id, std::string_view a, std::string_view b,
                                      ByteView nonce);

struct KeyExchangeResult {
    ledger::SessionKey key;
    ledger::Transaction tx; // KeyExchange, carries the key id only
};

/// Both parties must be in `registered`; throws UnknownParty otherwise.
KeyExchangeResult key_exchange(std::string_view job_id, const std::string& a, const std::string& b,
                               ByteView nonce, ledger::Tick tick, std::span<const std::string> registered);

/// Lowest-uuid idle server that did not author the pending model, if any.
std::optional<std::string> schedule_validation(std::span<const std::string> idle_servers,
                                               std::string_view pending_author);

// ---------------------------------------------------------------------------------------
// Node state machines

enum class Role { Client, ParameterServer, Trainer };

enum class Phase {
    Idle,
    // client
    Announced,
    Coordinating,
    Settling,
    // parameter server
    Registered,
    Hired,
    Recruiting,
    Training,
    Waiting,
    Validating,
    // trainer
    Applied,
    Enrolled,
    ShardLoaded,
    Reported,
    Blocked,
    Done,
};

enum class EventKind {
    PublishTask,      // client: TaskAnnounce (public)
    PostManifest,     // client: TaskAnnounce (private)
    ServersSelected,  // client
    ExchangeKey,      // client / server: KeyExchange (public)
    TrainingComplete, // client
    ClaimReward,      // client: RewardClaim (private)
    Register,         // server: ServerRegister (public)
    KeyReceived,      // server / trainer
    Hire,             // server: HiringAnnounce (public)
    EnrollTrainer,    // server: TrainerRegister (private)
    UploadShard,      // server: ShardUpload (private)
    StartEpoch,       // server
    PublishLocal,     // server: LocalModelUpload (private)
    ValidationPending,
    Validate,         // server: ValidationResult (private)
    ValidationDone,
    ReportDetection,  // server: DetectionReport (private)
    PublishGlobal,    // server: GlobalModelPublish (private)
    Apply,            // trainer: TrainerRegister (public)
    ShardReceived,    // trainer: ack
    UploadGradient,   // trainer: GradientUpload (private)
    Block,            // trainer
    Finish,
};

std::string_view to_string(Role r);
std::string_view to_string(Phase p);
std::string_view to_string(EventKind e);

struct Event {
    EventKind kind = EventKind::Finish;
    ledger::Tick tick = 0;
    Bytes payload;        // becomes the transaction payload when the transition emits one
    std::string peer;     // counterpart, when the event involves one
    std::string key_id;   // ExchangeKey / KeyReceived
    std::uint64_t epoch = 0; // StartEpoch / ShardReceived

    friend bool operator==(const Event&, const Event&) = default;
};

enum class Channel { Public, Private, Direct };

struct Emission {
    Channel channel = Channel::Direct;
    ledger::Tick tick = 0;
    std::string author;
    std::optional<ledger::TxKind> kind; // set for chain transactions
    std::string message;                // direct messages ("ack")
    std::string to;
    Bytes payload;

    ledger::Transaction transaction() const;
};

struct NodeState {
    Role role = Role::Trainer;
    std::string uuid;
    Phase phase = Phase::Idle;
    std::vector<std::string> session_keys; // key ids held
    std::uint64_t epoch = 0;
    std::string pipeline; // server uuid this node trains for (trainers) or leads (servers)

    friend bool operator==(const NodeState&, const NodeState&) = default;
};

NodeState make_node(Role role, std::string uuid);

struct StepResult {
    NodeState state;
    std::vector<Emission> emitted;
};

/// Pure transition. Throws IllegalTransition naming the phase and event.
StepResult step(const NodeState& node, const Event& event);

} // namespace tdml::protocol
