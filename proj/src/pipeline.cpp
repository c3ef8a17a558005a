#include "tdml/pipeline.hpp"

#include "tdml/error.hpp"
#include "tdml/rng.hpp"

#include <numeric>

namespace tdml::pipeline {

void ShardAssignment::validate(std::size_t num_layers) const {
    std::size_t next = 0;
    for (const auto& r : ranges) {
        if (r.lo != next || r.hi <= r.lo) throw Error(ErrorCode::InvalidArgument, "shard ranges not contiguous");
        next = r.hi;
    }
    if (next != num_layers) throw Error(ErrorCode::InvalidArgument, "shard ranges do not cover the model");
}

const ShardRange& ShardAssignment::owner_of(std::size_t layer) const {
    for (const auto& r : ranges) {
        if (layer >= r.lo && layer < r.hi) return r;
    }
    throw Error(ErrorCode::NotFound, "no shard holds layer " + std::to_string(layer));
}

ShardAssignment shard_model(const model::LayerMemoryProfile& profile, std::span<const NodeSpec> specs) {
    ShardAssignment a;
    const std::size_t L = profile.per_layer.size();
    std::size_t layer = 0;
    for (const auto& spec : specs) {
        if (layer == L) break;
        std::uint64_t used = 0;
        const std::size_t lo = layer;
        while (layer < L && used + profile.per_layer[layer] <= spec.memory_bytes) {
            used += profile.per_layer[layer];
            ++layer;
        }
        if (layer > lo) a.ranges.push_back({spec.uuid, lo, layer});
    }
    if (layer < L) {
        throw Error(ErrorCode::InsufficientMemory, "layer " + std::to_string(layer) + " could not be placed");
    }
    return a;
}

ShardAssignment shard_model(const model::GlobalModel& model, std::span<const NodeSpec> specs) {
    if (!model.graph.is_sequential()) throw Error(ErrorCode::InvalidArgument, "only sequential graphs can be sharded");
    return shard_model(model::layer_memory(model.arch), specs);
}

std::vector<ModelShard> make_shards(const model::Parameters& params, const ShardAssignment& assignment) {
    assignment.validate(params.layers.size());
    std::vector<ModelShard> shards;
    for (const auto& r : assignment.ranges) {
        ModelShard s;
        s.trainer = r.trainer;
        s.lo = r.lo;
        s.hi = r.hi;
        s.num_layers = params.layers.size();
        s.layers.assign(params.layers.begin() + static_cast<std::ptrdiff_t>(r.lo),
                        params.layers.begin() + static_cast<std::ptrdiff_t>(r.hi));
        shards.push_back(std::move(s));
    }
    return shards;
}

model::Parameters assemble(std::span<const ModelShard> shards) {
    model::Parameters p;
    for (const auto& s : shards) {
        if (s.lo != p.layers.size()) throw Error(ErrorCode::InvalidArgument, "shards out of order");
        p.layers.insert(p.layers.end(), s.layers.begin(), s.layers.end());
    }
    return p;
}

Bytes encode_shard(const ModelShard& shard) {
    ByteWriter w;
    w.str(shard.trainer);
    w.u64(shard.lo);
    w.u64(shard.hi);
    w.u64(shard.num_layers);
    for (const auto& l : shard.layers) {
        w.u32(static_cast<std::uint32_t>(l.out()));
        w.u32(static_cast<std::uint32_t>(l.in()));
        for (double v : l.weight.data) w.f64(v);
        for (double v : l.bias) w.f64(v);
    }
    return std::move(w).take();
}

ModelShard decode_shard(ByteView raw) {
    ByteReader r(raw);
    ModelShard s;
    s.trainer = r.str();
    s.lo = r.u64();
    s.hi = r.u64();
    s.num_layers = r.u64();
    if (s.hi <= s.lo || s.hi > s.num_layers || s.num_layers > 4096) throw Error(ErrorCode::DecodeError, "shard range");
    for (std::size_t l = s.lo; l < s.hi; ++l) {
        const auto out = r.u32();
        const auto in = r.u32();
        if (r.remaining() / 8 < static_cast<std::size_t>(out) * (in + 1)) throw Error(ErrorCode::DecodeError, "shard size");
        model::Layer layer{model::Matrix(out, in), std::vector<double>(out)};
        for (auto& v : layer.weight.data) v = r.f64();
        for (auto& v : layer.bias) v = r.f64();
        s.layers.push_back(std::move(layer));
    }
    r.expect_done();
    return s;
}

Bytes Transport::encode_matrix(const model::Matrix& m) {
    ByteWriter w;
    w.u32(static_cast<std::uint32_t>(m.rows));
    w.u32(static_cast<std::uint32_t>(m.cols));
    for (double v : m.data) w.f64(v);
    return std::move(w).take();
}

model::Matrix Transport::decode_matrix(ByteView raw) {
    ByteReader r(raw);
    const auto rows = r.u32();
    const auto cols = r.u32();
    if (r.remaining() != static_cast<std::size_t>(rows) * cols * 8) throw Error(ErrorCode::DecodeError, "matrix size");
    model::Matrix m(rows, cols);
    for (auto& v : m.data) v = r.f64();
    return m;
}

model::Matrix Transport::relay(const model::Matrix& m) {
    ++messages_;
    if (keys_ == nullptr) return m;
    auto sealed = keys_->seal(key_id_, encode_matrix(m));
    return decode_matrix(keys_->open(sealed));
}

ForwardResult pipeline_forward(std::span<const ModelShard> shards, const model::Matrix& input,
                               Transport& transport) {
    if (shards.empty()) throw Error(ErrorCode::MissingActivation, "empty pipeline");
    ForwardResult out;
    model::Matrix h = input;
    for (std::size_t s = 0; s < shards.size(); ++s) {
        const auto& shard = shards[s];
        if (s > 0) {
            if (shards[s - 1].hi != shard.lo) throw Error(ErrorCode::MissingActivation, "no producer for layer " + std::to_string(shard.lo));
            out.boundary_shapes.emplace_back(h.rows, h.cols);
            h = transport.relay(h);
        } else if (shard.lo != 0) {
            throw Error(ErrorCode::MissingActivation, "first shard does not start at layer 0");
        }
        ShardCache cache;
        for (std::size_t k = 0; k < shard.layers.size(); ++k) {
            model::LayerCache lc;
            lc.input = h;
            h = model::forward_layer(shard.layers[k], h, model::activation_for(shard.lo + k, shard.num_layers));
            lc.output = h;
            cache.layers.push_back(std::move(lc));
        }
        out.caches.push_back(std::move(cache));
    }
    out.logits = std::move(h);
    return out;
}

std::vector<model::GradientRecord> pipeline_backward(std::span<const ModelShard> shards,
                                                     const std::vector<ShardCache>& caches,
                                                     const model::Matrix& dlogits, Transport& transport) {
    if (caches.size() != shards.size()) throw Error(ErrorCode::MissingCache, "forward caches missing");
    std::vector<model::GradientRecord> records(shards.size());
    model::Matrix upstream = dlogits;
    for (std::size_t s = shards.size(); s-- > 0;) {
        const auto& shard = shards[s];
        if (caches[s].layers.size() != shard.layers.size()) throw Error(ErrorCode::MissingCache, "shard cache size");
        if (s + 1 < shards.size()) upstream = transport.relay(upstream);
        auto& rec = records[s];
        rec.first_layer = shard.lo;
        rec.producer = shard.trainer;
        rec.layers.resize(shard.layers.size());
        for (std::size_t k = shard.layers.size(); k-- > 0;) {
            auto br = model::backward_layer(shard.layers[k], caches[s].layers[k], upstream,
                                            model::activation_for(shard.lo + k, shard.num_layers));
            rec.layers[k] = std::move(br.grad);
            upstream = std::move(br.downstream);
        }
    }
    return records;
}

PipelineState make_pipeline(std::string id, const model::GlobalModel& global, const ShardAssignment& assignment) {
    PipelineState st;
    st.id = std::move(id);
    st.arch = global.arch;
    st.assignment = assignment;
    st.shards = make_shards(global.params, assignment);
    return st;
}

std::vector<std::size_t> batch_order(std::size_t n, std::uint64_t seed) {
    std::vector<std::size_t> order(n);
    std::iota(order.begin(), order.end(), std::size_t{0});
    Rng rng(seed);
    rng.shuffle(order);
    return order;
}

EpochResult run_epoch(PipelineState& state, const std::vector<store::Cid>& batches, const EpochContext& ctx) {
    if (ctx.store == nullptr || ctx.keys == nullptr) throw Error(ErrorCode::InvalidArgument, "run_epoch needs store and keys");
    Transport transport = ctx.transport_key_id.empty() ? Transport{} : Transport{*ctx.keys, ctx.transport_key_id};

    EpochResult result;
    std::vector<model::GradientRecord> sums;
    for (const auto& shard : state.shards) {
        model::Parameters view;
        view.layers = shard.layers;
        auto z = model::zero_gradients(view, 0, shard.layers.size());
        z.first_layer = shard.lo;
        z.producer = shard.trainer;
        z.epoch = ctx.epoch;
        sums.push_back(std::move(z));
    }

    // the audited record is the full-shard gradient at the broadcast parameters, which every
    // pipeline shares, so honest records differ only by their data
    for (const auto& cid : batches) {
        auto batch = store::load_batch(*ctx.store, cid, *ctx.keys);
        auto input = model::to_matrix(batch);
        auto fwd = pipeline_forward(state.shards, input, transport);
        auto lg = model::loss_and_grad(fwd.logits, batch.labels);
        auto records = pipeline_backward(state.shards, fwd.caches, lg.grad, transport);
        for (std::size_t s = 0; s < state.shards.size(); ++s) model::accumulate(sums[s], records[s]);
    }

    double loss_sum = 0.0;
    for (auto idx : batch_order(batches.size(), ctx.order_seed)) {
        auto batch = store::load_batch(*ctx.store, batches[idx], *ctx.keys);
        auto input = model::to_matrix(batch);
        auto fwd = pipeline_forward(state.shards, input, transport);
        auto lg = model::loss_and_grad(fwd.logits, batch.labels);
        loss_sum += lg.loss;
        auto records = pipeline_backward(state.shards, fwd.caches, lg.grad, transport);
        for (std::size_t s = 0; s < state.shards.size(); ++s) {
            auto& shard = state.shards[s];
            if (ctx.hooks != nullptr) {
                auto it = ctx.hooks->find(shard.trainer);
                if (it != ctx.hooks->end() && it->second.on_batch) it->second.on_batch(records[s]);
            }
            model::Parameters view;
            view.layers = std::move(shard.layers);
            auto local = records[s];
            local.first_layer = 0;
            model::sgd_update(view, local, ctx.lr);
            shard.layers = std::move(view.layers);
        }
        ++result.batches;
    }

    const double inv = result.batches ? 1.0 / static_cast<double>(result.batches) : 0.0;
    result.mean_loss = loss_sum * inv;
    for (std::size_t s = 0; s < sums.size(); ++s) {
        model::scale(sums[s], inv);
        if (ctx.hooks != nullptr) {
            auto it = ctx.hooks->find(sums[s].producer);
            if (it != ctx.hooks->end() && it->second.on_epoch) it->second.on_epoch(sums[s]);
        }
    }
    result.shard_records = std::move(sums);
    result.local = assemble(state.shards);
    return result;
}

} // namespace tdml::pipeline
