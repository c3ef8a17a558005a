#pragma once

// Payload schemas of the job's private-chain transactions, shared by the simulation that
// writes them and the auditor that replays them.

#include "tdml/ledger.hpp"
#include "tdml/model.hpp"
#include "tdml/pipeline.hpp"
#include "tdml/robust.hpp"
#include "tdml/store.hpp"

#include <nlohmann/json.hpp>

#include <filesystem>
#include <map>
#include <optional>
#include <string>
#include <vector>

namespace tdml::evidence {

struct PipelinePlan {
    std::string server;
    std::vector<store::Cid> batches;
};

/// Posted by the client as the first private-chain transaction: everything needed to
/// re-execute the job.
struct Manifest {
    std::string job;
    std::string client;
    std::string mode;
    std::uint64_t seed = 0;
    model::Arch arch;
    double lr = 0.1;
    std::uint32_t epochs = 0;
    std::uint32_t top_k = 1;
    std::uint32_t batch_size = 0;
    store::Cid init_model;
    std::string init_digest;
    store::Cid test_set;
    std::string job_key_id;
    robust::FlagPolicy flag;
    robust::DetectionPolicy detection;
    std::uint32_t detection_sample = 5;
    std::uint64_t budget = 0;
    double trainer_share = 0.7;
    std::vector<PipelinePlan> pipelines; // aggregation order
};

struct Enrollment {
    std::string server;
    std::string trainer;
    std::size_t lo = 0;
    std::size_t hi = 0;
    std::uint64_t from_epoch = 1;
};

struct ShardUpload {
    std::string pipeline;
    std::uint64_t epoch = 0;
    std::string trainer;
    std::size_t lo = 0;
    std::size_t hi = 0;
    store::Cid cid;
    std::string digest;
};

struct GradientUpload {
    std::string pipeline;
    std::string trainer;
    std::uint64_t epoch = 0;
    std::size_t lo = 0;
    std::size_t hi = 0;
    store::Cid cid;
    std::string digest; // of the plaintext gradient record
};

struct LocalUpload {
    std::string pipeline;
    std::uint64_t epoch = 0;
    store::Cid cid;
    std::string digest; // model_digest of the plaintext checkpoint
    double train_loss = 0.0;
    std::size_t batches = 0;
    pipeline::ShardAssignment assignment;
};

struct GlobalPublish {
    std::uint64_t epoch = 0;
    std::uint64_t version = 0;
    store::Cid cid;
    std::string digest;
    std::vector<std::string> included;
    std::vector<std::string> flagged;
};

struct RewardClaim {
    std::string node;
    std::string role;
    std::uint64_t work_units = 0;
    std::uint64_t payout = 0;
};

nlohmann::json to_json(const Manifest& m);
Manifest manifest_from_json(const nlohmann::json& j);
nlohmann::json to_json(const Enrollment& e);
Enrollment enrollment_from_json(const nlohmann::json& j);
nlohmann::json to_json(const ShardUpload& s);
ShardUpload shard_upload_from_json(const nlohmann::json& j);
nlohmann::json to_json(const GradientUpload& g);
GradientUpload gradient_upload_from_json(const nlohmann::json& j);
nlohmann::json to_json(const LocalUpload& l);
LocalUpload local_upload_from_json(const nlohmann::json& j);
nlohmann::json to_json(const GlobalPublish& g);
GlobalPublish global_publish_from_json(const nlohmann::json& j);
nlohmann::json to_json(const RewardClaim& r);
RewardClaim reward_claim_from_json(const nlohmann::json& j);

Bytes json_bytes(const nlohmann::json& j);
nlohmann::json parse_json_bytes(ByteView b); // DecodeError

// Seeds shared by the run and its replay.
std::uint64_t data_seed(std::uint64_t seed);
std::uint64_t batch_seed(std::uint64_t seed);
std::uint64_t init_seed(std::uint64_t seed);
std::uint64_t order_seed(std::uint64_t seed, std::string_view pipeline, std::uint64_t epoch);
std::uint64_t sample_seed(std::uint64_t seed, std::uint64_t epoch);
std::uint64_t attack_seed(std::uint64_t seed);

/// Everything an auditor holds: both chains, the blob store and the job key.
struct Evidence {
    ledger::Chain public_chain;
    ledger::Chain private_chain;
    store::BlobStore store;
    ledger::KeyRing keys;
};

inline constexpr const char* kPublicChainFile = "public_chain.jsonl";
inline constexpr const char* kPrivateChainFile = "private_chain.jsonl";
inline constexpr const char* kKeyringFile = "keyring.json";
inline constexpr const char* kBlobDir = "blobs";

/// Reads the chain dumps, keyring and blob directory. Missing files throw NotFound;
/// malformed content throws DecodeError.
Evidence load_evidence(const std::filesystem::path& dir);
nlohmann::json keyring_json(std::span<const ledger::SessionKey> keys);

/// Decoded view of the private chain.
struct JobRecord {
    Manifest manifest;
    std::vector<Enrollment> enrollments;
    std::map<std::pair<std::uint64_t, std::string>, LocalUpload> locals;                     // (epoch, pipeline)
    std::map<std::tuple<std::uint64_t, std::string, std::string>, GradientUpload> gradients; // (epoch, pipeline, trainer)
    std::map<std::pair<std::uint64_t, std::string>, robust::ValidationResult> validations;  // (epoch, model)
    std::map<std::uint64_t, robust::DetectionReport> detections;
    std::map<std::uint64_t, GlobalPublish> globals;
    std::vector<RewardClaim> claims;
};

/// Throws DecodeError / AuthFailure / SchemaMismatch on malformed payloads.
JobRecord read_job(const Evidence& ev);

/// Opens a sealed blob. Throws IncompleteEvidence when the CID is absent.
Bytes open_blob(const Evidence& ev, const store::Cid& cid);

std::string digest_hex(ByteView plaintext);

} // namespace tdml::evidence
