#pragma once

#include "tdml/bytes.hpp"
#include "tdml/digest.hpp"
#include "tdml/store.hpp"

#include <cstdint>
#include <span>
#include <string>
#include <utility>
#include <vector>

namespace tdml::model {

/// Dense row-major matrix of doubles.
struct Matrix {
    std::size_t rows = 0;
    std::size_t cols = 0;
    std::vector<double> data;

    Matrix() = default;
    Matrix(std::size_t r, std::size_t c, double fill = 0.0) : rows(r), cols(c), data(r * c, fill) {}

    double& operator()(std::size_t r, std::size_t c) { return data[r * cols + c]; }
    double operator()(std::size_t r, std::size_t c) const { return data[r * cols + c]; }
    bool empty() const { return data.empty(); }

    friend bool operator==(const Matrix&, const Matrix&) = default;
};

Matrix to_matrix(const store::Batch& batch);

enum class Activation { Relu, Identity };

struct Arch {
    std::vector<std::size_t> dims; // d0 (input) ... dL (classes)
    std::uint32_t precision_bytes = 4;

    std::size_t num_layers() const { return dims.empty() ? 0 : dims.size() - 1; }
    /// Throws InvalidConfig unless L >= 2, every dim >= 1 and a is 2 or 4.
    void validate() const;

    friend bool operator==(const Arch&, const Arch&) = default;
};

struct Layer {
    Matrix weight; // out x in
    std::vector<double> bias;

    std::size_t in() const { return weight.cols; }
    std::size_t out() const { return weight.rows; }

    friend bool operator==(const Layer&, const Layer&) = default;
};

struct Parameters {
    std::vector<Layer> layers;

    friend bool operator==(const Parameters&, const Parameters&) = default;
};

/// Hidden layers use ReLU; the last layer emits logits.
inline Activation activation_for(std::size_t layer, std::size_t num_layers) {
    return layer + 1 == num_layers ? Activation::Identity : Activation::Relu;
}

struct LayerGrad {
    Matrix d_weight;
    std::vector<double> d_bias;

    friend bool operator==(const LayerGrad&, const LayerGrad&) = default;
};

/// Gradients for a contiguous run of layers starting at `first_layer`.
struct GradientRecord {
    std::size_t first_layer = 0;
    std::vector<LayerGrad> layers;
    std::uint64_t epoch = 0;
    std::string producer;

    std::size_t end_layer() const { return first_layer + layers.size(); }
    std::size_t coordinate_count() const;

    friend bool operator==(const GradientRecord&, const GradientRecord&) = default;
};

GradientRecord zero_gradients(const Parameters& params, std::size_t first, std::size_t last);
void accumulate(GradientRecord& into, const GradientRecord& g);
void scale(GradientRecord& g, double factor);
/// Applies `fn` to every gradient entry (weights row-major, then bias) layer by layer.
template <typename Fn>
void for_each_entry(GradientRecord& g, Fn&& fn) {
    for (auto& l : g.layers) {
        for (auto& v : l.d_weight.data) fn(v);
        for (auto& v : l.d_bias) fn(v);
    }
}
Bytes encode_gradients(const GradientRecord& g);
GradientRecord decode_gradients(ByteView raw);

struct LayerCache {
    Matrix input;
    Matrix output; // post-activation

    bool valid() const { return !input.empty() && !output.empty(); }
};

struct StructuralGraph {
    std::size_t num_layers = 0;
    std::vector<std::pair<std::size_t, std::size_t>> edges; // producer -> consumer

    static StructuralGraph sequential(std::size_t num_layers);
    bool is_sequential() const;

    friend bool operator==(const StructuralGraph&, const StructuralGraph&) = default;
};

struct GlobalModel {
    Arch arch;
    Parameters params;
    std::uint64_t version = 0;
    StructuralGraph graph;

    friend bool operator==(const GlobalModel&, const GlobalModel&) = default;
};

struct LayerMemoryProfile {
    std::vector<std::uint64_t> per_layer;
    std::uint64_t total = 0;

    std::uint64_t range(std::size_t lo, std::size_t hi) const;
};

std::size_t parameter_count(const Arch& arch);
LayerMemoryProfile layer_memory(const Arch& arch);

/// Weights uniform in [-1/sqrt(fan_in), 1/sqrt(fan_in)], zero biases, version 0.
GlobalModel init_model(const Arch& arch, std::uint64_t seed);

/// act(h_in * W^T + b). Throws ShapeMismatch.
Matrix forward_layer(const Layer& layer, const Matrix& h_in, Activation act);

struct BackwardResult {
    LayerGrad grad;
    Matrix downstream; // dLoss/dh_in
};

/// Reverse-mode gradients for one layer from its forward cache. Throws MissingCache.
BackwardResult backward_layer(const Layer& layer, const LayerCache& cache, const Matrix& upstream,
                              Activation act);

struct LossGrad {
    double loss = 0.0;
    Matrix grad; // dLoss/dLogits
};

/// Mean softmax cross-entropy and its gradient (softmax - onehot) / batch.
LossGrad loss_and_grad(const Matrix& logits, std::span<const std::uint32_t> labels);

/// W - lr * g over the layers covered by `grads`. Throws ShapeMismatch / InvalidArgument.
void sgd_update(Parameters& params, const GradientRecord& grads, double lr);

Matrix forward(const Parameters& params, const Matrix& input);

struct StepResult {
    double loss = 0.0;
    GradientRecord grads;
};

/// One unsharded forward/backward/update step on a batch.
StepResult train_step(Parameters& params, const Matrix& input, std::span<const std::uint32_t> labels,
                      double lr);

struct EvalResult {
    double accuracy = 0.0;
    double mean_loss = 0.0;

    friend bool operator==(const EvalResult&, const EvalResult&) = default;
};

EvalResult evaluate(const Parameters& params, const store::Dataset& data);

/// Header (dims, precision, version) followed by little-endian f64 weights and biases.
Bytes encode_checkpoint(const GlobalModel& model);
GlobalModel decode_checkpoint(ByteView raw);
Digest model_digest(const GlobalModel& model);

} // namespace tdml::model
