#pragma once

#include "tdml/ledger.hpp"
#include "tdml/model.hpp"
#include "tdml/store.hpp"

#include <cstdint>
#include <functional>
#include <map>
#include <span>
#include <string>
#include <vector>

namespace tdml::pipeline {

struct NodeSpec {
    std::string uuid;
    std::uint64_t memory_bytes = 0;
    double compute_score = 1.0;
    std::string address;
    std::uint32_t cpus = 1;

    friend bool operator==(const NodeSpec&, const NodeSpec&) = default;
};

/// Layers [lo, hi) held by one trainer.
struct ShardRange {
    std::string trainer;
    std::size_t lo = 0;
    std::size_t hi = 0;

    friend bool operator==(const ShardRange&, const ShardRange&) = default;
};

struct ShardAssignment {
    std::vector<ShardRange> ranges;

    /// Contiguous, disjoint, in order and covering [0, num_layers). Throws InvalidArgument.
    void validate(std::size_t num_layers) const;
    const ShardRange& owner_of(std::size_t layer) const;

    friend bool operator==(const ShardAssignment&, const ShardAssignment&) = default;
};

/// Greedy in-order packing: consecutive layers go to the current trainer until the next
/// one would exceed its memory, then the next trainer takes over. Trainers that cannot
/// hold even one layer are skipped. Throws InsufficientMemory naming the first unplaced
/// layer.
ShardAssignment shard_model(const model::LayerMemoryProfile& profile, std::span<const NodeSpec> specs);
ShardAssignment shard_model(const model::GlobalModel& model, std::span<const NodeSpec> specs);

struct ModelShard {
    std::string trainer;
    std::size_t lo = 0;
    std::size_t hi = 0;
    std::size_t num_layers = 0; // of the whole model, fixes the activation of layer hi-1
    std::vector<model::Layer> layers;

    std::size_t in_dim() const { return layers.front().in(); }
    std::size_t out_dim() const { return layers.back().out(); }

    friend bool operator==(const ModelShard&, const ModelShard&) = default;
};

std::vector<ModelShard> make_shards(const model::Parameters& params, const ShardAssignment& assignment);
model::Parameters assemble(std::span<const ModelShard> shards);

Bytes encode_shard(const ModelShard& shard);
ModelShard decode_shard(ByteView raw);

/// Simulated encrypted link between neighbouring trainers. Every tensor is sealed on
/// send and opened (integrity-checked) on receipt. A default-constructed transport
/// passes tensors through unchanged.
class Transport {
public:
    Transport() = default;
    Transport(ledger::KeyRing& keys, std::string key_id) : keys_(&keys), key_id_(std::move(key_id)) {}

    model::Matrix relay(const model::Matrix& m);
    std::uint64_t messages() const { return messages_; }

    static Bytes encode_matrix(const model::Matrix& m);
    static model::Matrix decode_matrix(ByteView raw);

private:
    ledger::KeyRing* keys_ = nullptr;
    std::string key_id_;
    std::uint64_t messages_ = 0;
};

struct ShardCache {
    std::vector<model::LayerCache> layers;
};

struct ForwardResult {
    model::Matrix logits;
    std::vector<ShardCache> caches;
    std::vector<std::pair<std::size_t, std::size_t>> boundary_shapes; // activation dims after each shard but the last
};

/// Shard i consumes the activation emitted by shard i-1. Throws MissingActivation if the
/// chain of shards is broken.
ForwardResult pipeline_forward(std::span<const ModelShard> shards, const model::Matrix& input,
                               Transport& transport);

/// Per-trainer behaviour applied to the gradients a trainer reports. Honest trainers
/// have no hooks.
struct TrainerHooks {
    std::function<void(model::GradientRecord&)> on_batch;
    std::function<void(model::GradientRecord&)> on_epoch;
};
using HookMap = std::map<std::string, TrainerHooks, std::less<>>;

/// Gradient hand-off in reverse shard order. Returns one record per shard, in shard
/// order. Throws MissingCache.
std::vector<model::GradientRecord> pipeline_backward(std::span<const ModelShard> shards,
                                                     const std::vector<ShardCache>& caches,
                                                     const model::Matrix& dlogits, Transport& transport);

struct PipelineState {
    std::string id;
    model::Arch arch;
    ShardAssignment assignment;
    std::vector<ModelShard> shards;
};

PipelineState make_pipeline(std::string id, const model::GlobalModel& global, const ShardAssignment& assignment);

/// Seeded permutation of [0, n) used for the per-epoch batch order.
std::vector<std::size_t> batch_order(std::size_t n, std::uint64_t seed);

struct EpochResult {
    model::Parameters local;
    double mean_loss = 0.0;
    std::size_t batches = 0;
    /// Mean gradient of each shard over all of the pipeline's batches at the broadcast
    /// parameters (before any local step), after its trainer's on_epoch hook; one per shard.
    std::vector<model::GradientRecord> shard_records;
};

struct EpochContext {
    const store::BlobStore* store = nullptr;
    ledger::KeyRing* keys = nullptr; // opens batches; also seals the transport
    std::string transport_key_id;   // empty: no sealing between shards
    double lr = 0.1;
    std::uint64_t order_seed = 0;
    std::uint64_t epoch = 0;
    const HookMap* hooks = nullptr;
};

/// One pass over `batches` in seeded order: forward, loss, backward, and a per-batch
/// update of every shard. Returns the assembled local model.
EpochResult run_epoch(PipelineState& state, const std::vector<store::Cid>& batches, const EpochContext& ctx);

} // namespace tdml::pipeline
