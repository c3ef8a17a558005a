#pragma once

#include "tdml/audit.hpp"
#include "tdml/evidence.hpp"
#include "tdml/protocol.hpp"
#include "tdml/robust.hpp"
#include "tdml/scenario.hpp"

#include <filesystem>
#include <string>
#include <vector>

namespace tdml::sim {

struct MetricRow {
    std::string pipeline;
    std::uint64_t epoch = 0;
    double train_loss = 0.0;
    std::size_t batches = 0;
    double test_acc = 0.0;   // local model on the test set
    double global_acc = 0.0; // global model after this epoch
    std::string local_digest;
};

/// One step() call made by the harness, with the phase it produced.
struct TraceEntry {
    std::string node;
    protocol::Role role = protocol::Role::Trainer;
    protocol::Event event;
    protocol::Phase phase = protocol::Phase::Idle;
};

struct RunResult {
    evidence::Evidence evidence; // chains, blob store, auditor keyring
    std::vector<ledger::SessionKey> auditor_keys;
    std::vector<MetricRow> metrics;
    std::vector<robust::DetectionReport> detections;
    std::vector<std::string> blocked;
    std::vector<TraceEntry> trace;
    std::vector<protocol::Emission> direct_messages;
    audit::TrainingReport verification;
    audit::RewardLedger settlement;
    bool paid = false; // false: verification failed and nothing was paid
    std::vector<double> global_accuracy; // per epoch
    std::vector<double> train_loss;      // per epoch, mean over pipelines

    bool detected() const;
    /// 0 honest completion, 3 when a detection attributed a trainer.
    int exit_code() const;
};

/// Runs the whole job in-process. Throws InvalidConfig (and the selection errors) on a
/// scenario that cannot run.
RunResult run_scenario(const Scenario& scenario);

/// Writes chains, metrics.csv, detections.jsonl, settlement.json, keyring.json and blobs/.
void write_artifacts(const RunResult& result, const std::filesystem::path& dir);

std::string metrics_csv(const std::vector<MetricRow>& rows);

} // namespace tdml::sim
