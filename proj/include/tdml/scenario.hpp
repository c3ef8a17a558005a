#pragma once

#include "tdml/model.hpp"
#include "tdml/pipeline.hpp"
#include "tdml/protocol.hpp"
#include "tdml/robust.hpp"
#include "tdml/store.hpp"

#include <nlohmann/json.hpp>

#include <filesystem>
#include <optional>
#include <string>
#include <vector>

namespace tdml::sim {

enum class Mode { SingleNode, FedAvg, Tdml };

std::string_view to_string(Mode m);
std::optional<Mode> parse_mode(std::string_view name);

struct TrainerEntry {
    pipeline::NodeSpec spec;
    std::string server; // parameter server the trainer answers; empty: round-robin
};

struct ValidationLie {
    std::string validator;
    std::uint64_t epoch = 0;
    std::string model; // author of the validated local model
    double accuracy = 0.0;
};

struct Scenario {
    std::string task = "tdml-task";
    Mode mode = Mode::Tdml;
    std::uint64_t seed = 0;
    std::string out = "out";
    std::string client = "client-0";
    std::uint64_t budget = 100000;
    protocol::Baseline baseline;
    model::Arch arch;
    store::BlobSpec data;
    protocol::TrainingConfig training;
    robust::FlagPolicy flag;
    robust::DetectionPolicy detection;
    std::uint32_t detection_sample = 5; // benign-presumed models drawn next to the flagged one
    double trainer_share = 0.7;
    std::vector<pipeline::NodeSpec> servers;
    std::vector<TrainerEntry> trainers;
    std::vector<robust::AttackConfig> attacks;
    std::vector<ValidationLie> lies;

    /// Throws InvalidConfig when references do not resolve or values are out of range.
    void validate() const;
};

/// Parses the JSON scenario format (comments allowed). Unknown keys are rejected.
/// Throws InvalidConfig.
Scenario parse_scenario(std::string_view text);
Scenario load_scenario(const std::filesystem::path& path);
nlohmann::json to_json(const Scenario& s);

} // namespace tdml::sim
