#pragma once

#include "tdml/evidence.hpp"
#include "tdml/model.hpp"
#include "tdml/pipeline.hpp"
#include "tdml/robust.hpp"

#include <nlohmann/json.hpp>

#include <cstdint>
#include <optional>
#include <string>
#include <vector>

namespace tdml::audit {

// ---------------------------------------------------------------------------------------
// Per-epoch aggregation, shared by the live run and its replay

struct RoundInput {
    std::string mode; // single_node | fedavg | tdml
    std::uint64_t epoch = 0;
    std::uint64_t seed = 0;
    std::vector<std::string> authors;               // pipelines, aggregation order
    std::vector<model::Parameters> models;
    std::vector<double> accuracies;                 // tdml only
    std::vector<model::GradientRecord> gradients;   // tdml only; full-model reported gradients
    std::vector<pipeline::ShardAssignment> assignments;
    std::uint32_t top_k = 1;
    robust::FlagPolicy flag;
    robust::DetectionPolicy detection;
    std::uint32_t detection_sample = 5;
};

struct RoundOutcome {
    model::Parameters global;
    std::vector<std::string> included;
    std::vector<std::string> flagged;
    std::optional<robust::DetectionReport> detection;
};

/// single_node: the only local model. fedavg: plain mean. tdml: flag, detect on flag,
/// then top-K over the unflagged models (K clamped to what remains).
RoundOutcome aggregate_round(const RoundInput& in);

// ---------------------------------------------------------------------------------------
// Replay

struct Divergence {
    std::uint64_t epoch = 0;
    std::string pipeline; // empty for job-level fields
    std::string field;
    bool excused = false; // model was flagged or left out of the aggregate that epoch
};

struct ReplayReport {
    bool ok = false;
    std::vector<Divergence> divergences;
    std::optional<Divergence> first_divergence; // first unexcused one
    std::vector<std::string> global_digests;    // reproduced, per epoch
};

/// Re-executes every epoch from the recorded inputs and compares digests bit-exactly.
/// Throws IncompleteEvidence when a referenced blob is missing.
ReplayReport replay(const evidence::Evidence& ev);
ReplayReport replay(const evidence::Evidence& ev, const evidence::JobRecord& job);

struct ValidationMismatch {
    std::uint64_t epoch = 0;
    std::string model;
    std::string validator;
    double recorded_accuracy = 0.0;
    double recomputed_accuracy = 0.0;
    std::string reason;
};

struct TrainingReport {
    bool chain_ok = false;
    std::string chain_detail;
    bool evidence_ok = false; // payloads decode and every referenced blob exists
    std::string evidence_detail;
    std::optional<ReplayReport> replay;
    std::vector<ValidationMismatch> mismatches;
    bool claims_ok = true;

    bool ok() const {
        return chain_ok && evidence_ok && replay && replay->ok && mismatches.empty() && claims_ok;
    }
};

nlohmann::json to_json(const TrainingReport& r);

/// Chain integrity, then replay, then re-evaluation of every ValidationResult, then (when
/// present) the posted reward claims. Never throws for bad evidence; failures are
/// itemised in the report.
TrainingReport verify_training(const evidence::Evidence& ev);

// ---------------------------------------------------------------------------------------
// Settlement

struct RewardWeights {
    double trainer_share = 0.7; // the rest goes to the parameter servers
};

struct Payout {
    std::string node;
    std::string role; // "trainer" | "parameter_server"
    std::uint64_t work_units = 0;
    std::uint64_t payout = 0;
    bool blocked = false;

    friend bool operator==(const Payout&, const Payout&) = default;
};

struct RewardLedger {
    std::uint64_t budget = 0;
    std::uint64_t withheld = 0;
    std::vector<Payout> payouts;

    std::uint64_t total() const;
    std::uint64_t payout_of(std::string_view node) const;
};

/// Pools split by weights; pro-rata by verified work units inside each pool with
/// largest-remainder rounding (ties to the lower uuid). Blocked trainers' shares are
/// withheld. Throws NoPayout unless the report is ok.
RewardLedger settle_rewards(const evidence::JobRecord& job, const TrainingReport& report, std::uint64_t budget,
                            const RewardWeights& weights);

nlohmann::json settlement_json(const RewardLedger& ledger);

} // namespace tdml::audit
