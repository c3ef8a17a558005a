#include "tdml/model.hpp"

#include "tdml/error.hpp"
#include "tdml/rng.hpp"

#include <algorithm>
#include <cmath>
#include <limits>

namespace tdml::model {

Matrix to_matrix(const store::Batch& batch) {
    Matrix m(batch.rows(), batch.dim);
    std::copy(batch.features.begin(), batch.features.end(), m.data.begin());
    return m;
}

void Arch::validate() const {
    if (dims.size() < 3) throw Error(ErrorCode::InvalidConfig, "architecture needs at least 2 layers");
    for (auto d : dims) {
        if (d == 0) throw Error(ErrorCode::InvalidConfig, "layer dims must be >= 1");
    }
    if (precision_bytes != 2 && precision_bytes != 4) {
        throw Error(ErrorCode::InvalidConfig, "precision_bytes must be 2 or 4");
    }
}

std::size_t GradientRecord::coordinate_count() const {
    std::size_t n = 0;
    for (const auto& l : layers) n += l.d_weight.data.size() + l.d_bias.size();
    return n;
}

GradientRecord zero_gradients(const Parameters& params, std::size_t first, std::size_t last) {
    GradientRecord g;
    g.first_layer = first;
    for (std::size_t l = first; l < last; ++l) {
        const auto& layer = params.layers[l];
        g.layers.push_back({Matrix(layer.out(), layer.in()), std::vector<double>(layer.out(), 0.0)});
    }
    return g;
}

void accumulate(GradientRecord& into, const GradientRecord& g) {
    if (into.first_layer != g.first_layer || into.layers.size() != g.layers.size()) {
        throw Error(ErrorCode::ShapeMismatch, "accumulate over different layer ranges");
    }
    for (std::size_t l = 0; l < g.layers.size(); ++l) {
        auto& dst = into.layers[l];
        const auto& src = g.layers[l];
        if (dst.d_weight.data.size() != src.d_weight.data.size() || dst.d_bias.size() != src.d_bias.size()) {
            throw Error(ErrorCode::ShapeMismatch, "accumulate layer shape");
        }
        for (std::size_t i = 0; i < src.d_weight.data.size(); ++i) dst.d_weight.data[i] += src.d_weight.data[i];
        for (std::size_t i = 0; i < src.d_bias.size(); ++i) dst.d_bias[i] += src.d_bias[i];
    }
}

void scale(GradientRecord& g, double factor) {
    for_each_entry(g, [factor](double& v) { v *= factor; });
}

Bytes encode_gradients(const GradientRecord& g) {
    ByteWriter w;
    w.u64(g.first_layer);
    w.u64(g.epoch);
    w.str(g.producer);
    w.u32(static_cast<std::uint32_t>(g.layers.size()));
    for (const auto& l : g.layers) {
        w.u32(static_cast<std::uint32_t>(l.d_weight.rows));
        w.u32(static_cast<std::uint32_t>(l.d_weight.cols));
        for (double v : l.d_weight.data) w.f64(v);
        w.u32(static_cast<std::uint32_t>(l.d_bias.size()));
        for (double v : l.d_bias) w.f64(v);
    }
    return std::move(w).take();
}

GradientRecord decode_gradients(ByteView raw) {
    ByteReader r(raw);
    GradientRecord g;
    g.first_layer = r.u64();
    g.epoch = r.u64();
    g.producer = r.str();
    const auto n = r.u32();
    for (std::uint32_t i = 0; i < n; ++i) {
        LayerGrad l;
        const auto rows = r.u32();
        const auto cols = r.u32();
        if (r.remaining() / 8 < static_cast<std::size_t>(rows) * cols) throw Error(ErrorCode::DecodeError, "gradient size");
        l.d_weight = Matrix(rows, cols);
        for (auto& v : l.d_weight.data) v = r.f64();
        const auto nb = r.u32();
        if (r.remaining() / 8 < nb) throw Error(ErrorCode::DecodeError, "gradient bias size");
        l.d_bias.resize(nb);
        for (auto& v : l.d_bias) v = r.f64();
        g.layers.push_back(std::move(l));
    }
    r.expect_done();
    return g;
}

StructuralGraph StructuralGraph::sequential(std::size_t num_layers) {
    StructuralGraph g;
    g.num_layers = num_layers;
    for (std::size_t l = 0; l + 1 < num_layers; ++l) g.edges.emplace_back(l, l + 1);
    return g;
}

bool StructuralGraph::is_sequential() const {
    if (edges.size() + 1 != num_layers && num_layers != 0) return false;
    for (std::size_t i = 0; i < edges.size(); ++i) {
        if (edges[i] != std::pair<std::size_t, std::size_t>{i, i + 1}) return false;
    }
    return true;
}

std::uint64_t LayerMemoryProfile::range(std::size_t lo, std::size_t hi) const {
    std::uint64_t s = 0;
    for (std::size_t l = lo; l < hi; ++l) s += per_layer.at(l);
    return s;
}

std::size_t parameter_count(const Arch& arch) {
    std::size_t n = 0;
    for (std::size_t l = 0; l < arch.num_layers(); ++l) n += arch.dims[l + 1] * arch.dims[l] + arch.dims[l + 1];
    return n;
}

LayerMemoryProfile layer_memory(const Arch& arch) {
    arch.validate();
    LayerMemoryProfile p;
    for (std::size_t l = 0; l < arch.num_layers(); ++l) {
        const std::uint64_t params = arch.dims[l + 1] * arch.dims[l] + arch.dims[l + 1];
        p.per_layer.push_back(params * arch.precision_bytes);
        p.total += p.per_layer.back();
    }
    return p;
}

GlobalModel init_model(const Arch& arch, std::uint64_t seed) {
    arch.validate();
    GlobalModel m;
    m.arch = arch;
    m.graph = StructuralGraph::sequential(arch.num_layers());
    Rng rng(derive_seed(seed, "init-model"));
    for (std::size_t l = 0; l < arch.num_layers(); ++l) {
        const std::size_t in = arch.dims[l];
        const std::size_t out = arch.dims[l + 1];
        const double s = 1.0 / std::sqrt(static_cast<double>(in));
        Layer layer{Matrix(out, in), std::vector<double>(out, 0.0)};
        for (auto& w : layer.weight.data) w = rng.uniform(-s, s);
        m.params.layers.push_back(std::move(layer));
    }
    return m;
}

Matrix forward_layer(const Layer& layer, const Matrix& h_in, Activation act) {
    if (h_in.cols != layer.in() || layer.bias.size() != layer.out()) {
        throw Error(ErrorCode::ShapeMismatch, "forward_layer input has " + std::to_string(h_in.cols) +
                                                  " columns, layer expects " + std::to_string(layer.in()));
    }
    Matrix out(h_in.rows, layer.out());
    for (std::size_t b = 0; b < h_in.rows; ++b) {
        const double* x = &h_in.data[b * h_in.cols];
        for (std::size_t o = 0; o < layer.out(); ++o) {
            const double* w = &layer.weight.data[o * layer.in()];
            double z = layer.bias[o];
            for (std::size_t i = 0; i < layer.in(); ++i) z += x[i] * w[i];
            out(b, o) = (act == Activation::Relu && z < 0.0) ? 0.0 : z;
        }
    }
    return out;
}

BackwardResult backward_layer(const Layer& layer, const LayerCache& cache, const Matrix& upstream,
                              Activation act) {
    if (!cache.valid()) throw Error(ErrorCode::MissingCache, "backward_layer without forward cache");
    const std::size_t batch = cache.input.rows;
    if (upstream.rows != batch || upstream.cols != layer.out() || cache.input.cols != layer.in() ||
        cache.output.rows != batch || cache.output.cols != layer.out()) {
        throw Error(ErrorCode::ShapeMismatch, "backward_layer shapes");
    }

    Matrix dz = upstream;
    if (act == Activation::Relu) {
        for (std::size_t k = 0; k < dz.data.size(); ++k) {
            if (cache.output.data[k] <= 0.0) dz.data[k] = 0.0;
        }
    }

    BackwardResult r;
    r.grad.d_weight = Matrix(layer.out(), layer.in());
    r.grad.d_bias.assign(layer.out(), 0.0);
    for (std::size_t b = 0; b < batch; ++b) {
        const double* x = &cache.input.data[b * layer.in()];
        for (std::size_t o = 0; o < layer.out(); ++o) {
            const double d = dz(b, o);
            if (d == 0.0) continue;
            double* gw = &r.grad.d_weight.data[o * layer.in()];
            for (std::size_t i = 0; i < layer.in(); ++i) gw[i] += d * x[i];
            r.grad.d_bias[o] += d;
        }
    }

    r.downstream = Matrix(batch, layer.in());
    for (std::size_t b = 0; b < batch; ++b) {
        double* dx = &r.downstream.data[b * layer.in()];
        for (std::size_t o = 0; o < layer.out(); ++o) {
            const double d = dz(b, o);
            if (d == 0.0) continue;
            const double* w = &layer.weight.data[o * layer.in()];
            for (std::size_t i = 0; i < layer.in(); ++i) dx[i] += d * w[i];
        }
    }
    return r;
}

LossGrad loss_and_grad(const Matrix& logits, std::span<const std::uint32_t> labels) {
    if (logits.rows != labels.size() || logits.rows == 0) {
        throw Error(ErrorCode::ShapeMismatch, "logits rows vs labels");
    }
    LossGrad out;
    out.grad = Matrix(logits.rows, logits.cols);
    const double inv_batch = 1.0 / static_cast<double>(logits.rows);
    double total = 0.0;
    std::vector<double> p(logits.cols);
    for (std::size_t b = 0; b < logits.rows; ++b) {
        if (labels[b] >= logits.cols) throw Error(ErrorCode::ShapeMismatch, "label out of range");
        double mx = -std::numeric_limits<double>::infinity();
        for (std::size_t c = 0; c < logits.cols; ++c) mx = std::max(mx, logits(b, c));
        double sum = 0.0;
        for (std::size_t c = 0; c < logits.cols; ++c) {
            p[c] = std::exp(logits(b, c) - mx);
            sum += p[c];
        }
        total += std::log(sum) - (logits(b, labels[b]) - mx);
        for (std::size_t c = 0; c < logits.cols; ++c) {
            const double onehot = c == labels[b] ? 1.0 : 0.0;
            out.grad(b, c) = (p[c] / sum - onehot) * inv_batch;
        }
    }
    out.loss = total * inv_batch;
    return out;
}

void sgd_update(Parameters& params, const GradientRecord& grads, double lr) {
    if (!(lr >= 0.0)) throw Error(ErrorCode::InvalidArgument, "learning rate must be >= 0");
    if (grads.end_layer() > params.layers.size()) throw Error(ErrorCode::ShapeMismatch, "gradient layer range");
    for (std::size_t k = 0; k < grads.layers.size(); ++k) {
        auto& layer = params.layers[grads.first_layer + k];
        const auto& g = grads.layers[k];
        if (g.d_weight.rows != layer.out() || g.d_weight.cols != layer.in() || g.d_bias.size() != layer.out()) {
            throw Error(ErrorCode::ShapeMismatch, "gradient shape for layer " + std::to_string(grads.first_layer + k));
        }
        for (std::size_t i = 0; i < g.d_weight.data.size(); ++i) layer.weight.data[i] -= lr * g.d_weight.data[i];
        for (std::size_t i = 0; i < g.d_bias.size(); ++i) layer.bias[i] -= lr * g.d_bias[i];
    }
}

Matrix forward(const Parameters& params, const Matrix& input) {
    Matrix h = input;
    const std::size_t L = params.layers.size();
    for (std::size_t l = 0; l < L; ++l) h = forward_layer(params.layers[l], h, activation_for(l, L));
    return h;
}

StepResult train_step(Parameters& params, const Matrix& input, std::span<const std::uint32_t> labels,
                      double lr) {
    const std::size_t L = params.layers.size();
    std::vector<LayerCache> caches(L);
    Matrix h = input;
    for (std::size_t l = 0; l < L; ++l) {
        caches[l].input = h;
        h = forward_layer(params.layers[l], h, activation_for(l, L));
        caches[l].output = h;
    }
    auto lg = loss_and_grad(h, labels);

    StepResult r;
    r.loss = lg.loss;
    r.grads.first_layer = 0;
    r.grads.layers.resize(L);
    Matrix upstream = std::move(lg.grad);
    for (std::size_t l = L; l-- > 0;) {
        auto br = backward_layer(params.layers[l], caches[l], upstream, activation_for(l, L));
        r.grads.layers[l] = std::move(br.grad);
        upstream = std::move(br.downstream);
    }
    sgd_update(params, r.grads, lr);
    return r;
}

EvalResult evaluate(const Parameters& params, const store::Dataset& data) {
    if (data.size() == 0) throw Error(ErrorCode::EmptyDataset, "evaluate on empty test set");
    constexpr std::size_t kChunk = 256;
    std::size_t correct = 0;
    double loss = 0.0;
    for (std::size_t start = 0; start < data.size(); start += kChunk) {
        const std::size_t n = std::min(kChunk, data.size() - start);
        Matrix x(n, data.dim);
        std::copy_n(data.features.begin() + static_cast<std::ptrdiff_t>(start * data.dim), n * data.dim,
                    x.data.begin());
        auto logits = forward(params, x);
        for (std::size_t b = 0; b < n; ++b) {
            const auto label = data.labels[start + b];
            std::size_t arg = 0;
            double mx = logits(b, 0);
            for (std::size_t c = 1; c < logits.cols; ++c) {
                if (logits(b, c) > mx) {
                    mx = logits(b, c);
                    arg = c;
                }
            }
            if (arg == label) ++correct;
            double sum = 0.0;
            for (std::size_t c = 0; c < logits.cols; ++c) sum += std::exp(logits(b, c) - mx);
            loss += std::log(sum) - (logits(b, label) - mx);
        }
    }
    const double n = static_cast<double>(data.size());
    return {static_cast<double>(correct) / n, loss / n};
}

Bytes encode_checkpoint(const GlobalModel& model) {
    ByteWriter w;
    w.raw(as_bytes("TDMLCKPT"));
    w.u32(static_cast<std::uint32_t>(model.arch.dims.size()));
    for (auto d : model.arch.dims) w.u64(d);
    w.u32(model.arch.precision_bytes);
    w.u64(model.version);
    for (const auto& layer : model.params.layers) {
        for (double v : layer.weight.data) w.f64(v);
        for (double v : layer.bias) w.f64(v);
    }
    return std::move(w).take();
}

GlobalModel decode_checkpoint(ByteView raw) {
    ByteReader r(raw);
    if (to_string(r.raw(8)) != "TDMLCKPT") throw Error(ErrorCode::DecodeError, "checkpoint magic");
    GlobalModel m;
    const auto nd = r.u32();
    if (nd > 1024) throw Error(ErrorCode::DecodeError, "checkpoint dims");
    for (std::uint32_t i = 0; i < nd; ++i) m.arch.dims.push_back(r.u64());
    m.arch.precision_bytes = r.u32();
    m.version = r.u64();
    try {
        m.arch.validate();
    } catch (const Error& e) {
        throw Error(ErrorCode::DecodeError, e.what());
    }
    if (r.remaining() != parameter_count(m.arch) * 8) throw Error(ErrorCode::DecodeError, "checkpoint size");
    for (std::size_t l = 0; l < m.arch.num_layers(); ++l) {
        Layer layer{Matrix(m.arch.dims[l + 1], m.arch.dims[l]), std::vector<double>(m.arch.dims[l + 1])};
        for (auto& v : layer.weight.data) v = r.f64();
        for (auto& v : layer.bias) v = r.f64();
        m.params.layers.push_back(std::move(layer));
    }
    m.graph = StructuralGraph::sequential(m.arch.num_layers());
    return m;
}

Digest model_digest(const GlobalModel& model) { return sha256(encode_checkpoint(model)); }

} // namespace tdml::model
