#pragma once

#include "tdml/model.hpp"
#include "tdml/pipeline.hpp"
#include "tdml/store.hpp"

#include <nlohmann/json.hpp>

#include <cstdint>
#include <optional>
#include <span>
#include <string>
#include <vector>

namespace tdml::robust {

struct ValidationResult {
    std::string model_author; // parameter server that published the local model
    std::uint64_t epoch = 0;
    double accuracy = 0.0;
    double loss = 0.0;
    std::string validator;
    bool decode_failure = false;

    friend bool operator==(const ValidationResult&, const ValidationResult&) = default;
};

nlohmann::json to_json(const ValidationResult& v);
ValidationResult validation_from_json(const nlohmann::json& j);

struct PendingModel {
    std::string author;
    std::uint64_t epoch = 0;
    Bytes checkpoint; // plaintext checkpoint bytes; undecodable bytes are scored 0
};

/// Evaluates every pending model on the test set, in order.
std::vector<ValidationResult> cross_validate(const std::string& validator, std::span<const PendingModel> pending,
                                             const store::Dataset& test);

struct FlagPolicy {
    double tau = 0.5;
    double min_gap = 0.0; // required accuracy distance below the mean
};

/// score_i = |h_i - mu| / sum_{j != i} |h_j - mu|. The argmax model is flagged when its
/// score exceeds tau, it sits below the mean, and mu - h_i >= min_gap. Returns the
/// flagged indices (at most one). All-equal inputs flag nothing.
std::vector<std::size_t> flag_suspicious(std::span<const double> accuracies, const FlagPolicy& policy = {});
std::vector<double> suspicion_scores(std::span<const double> accuracies);

struct TopKResult {
    model::Parameters params;
    std::vector<std::size_t> included; // ascending index order
};

/// Coordinate-wise mean of the K most accurate models not in `excluded`. Ties prefer the
/// lower index. Summation runs in ascending index order. Throws InvalidArgument when fewer
/// than K models remain.
TopKResult aggregate_topk(std::span<const model::Parameters> models, std::span<const double> accuracies,
                          std::size_t k, std::span<const std::size_t> excluded = {});

/// Plain mean over all models (the FedAvg baseline).
model::Parameters average(std::span<const model::Parameters> models);

// ---------------------------------------------------------------------------------------
// Attacks

enum class AttackKind { ZeroGradient, MeanShift, Gaussian };

std::string_view to_string(AttackKind kind);
std::optional<AttackKind> parse_attack(std::string_view name);

struct AttackConfig {
    AttackKind kind = AttackKind::ZeroGradient;
    std::string target;
    double delta = 0.0;  // mean shift
    double sigma2 = 30.0; // gaussian variance, covariance sigma2 * I
    std::uint64_t start_epoch = 1;
};

void attack_zero(model::GradientRecord& record);
/// Throws InvalidArgument for delta == 0.
void attack_meanshift(model::GradientRecord& record, double delta);
/// Throws InvalidArgument unless sigma2 > 0.
void attack_gaussian(model::GradientRecord& record, double sigma2, std::uint64_t seed);

/// Hooks for every attack active at `epoch`. Gaussian draws are seeded per
/// (seed, target, epoch, call).
pipeline::HookMap make_attack_hooks(std::span<const AttackConfig> attacks, std::uint64_t epoch, std::uint64_t seed);

// ---------------------------------------------------------------------------------------
// Detection

struct RankFeature {
    double mean_rank = 0.0;
    double rank_std = 0.0;

    friend bool operator==(const RankFeature&, const RankFeature&) = default;
};

/// For each coordinate of one layer, rank the models' values ascending (1-based, ties get
/// the average rank); each model's feature is the mean and population standard
/// deviation of its ranks over the layer. Throws ShapeMismatch.
std::vector<RankFeature> rank_features(std::span<const model::LayerGrad* const> layer_per_model);

struct TwoMeans {
    std::vector<int> assignment;
    std::array<RankFeature, 2> centroids{};
    double separation = 0.0; // centroid distance / (pooled within-cluster RMS + eps)
    bool degenerate = false;  // all points coincide
};

/// Lloyd's 2-means seeded with the farthest pair (lowest indices on ties).
TwoMeans two_means(std::span<const RankFeature> points, double eps = 1e-9);

struct LayerDetection {
    std::size_t layer = 0;
    std::vector<RankFeature> features;
    std::vector<int> clusters;
    double score = 0.0;
    double ratio = 0.0; // score / sum of the other layers' scores
};

enum class DetectionStatus { Detected, NoAttribution, Degenerate, InsufficientSample };

std::string_view to_string(DetectionStatus s);

struct DetectionReport {
    DetectionStatus status = DetectionStatus::Degenerate;
    std::uint64_t epoch = 0;
    std::vector<std::string> sampled;     // model authors in feature order
    std::string flagged_model;
    std::optional<std::size_t> flagged_layer;
    std::vector<std::string> malicious_models;
    std::vector<std::string> attributed_trainers;
    std::vector<LayerDetection> layers;

    bool attributed() const { return !attributed_trainers.empty(); }
};

nlohmann::json to_json(const DetectionReport& r);
DetectionReport detection_from_json(const nlohmann::json& j);

struct SampledModel {
    std::string author;
    const model::GradientRecord* gradients = nullptr; // full-model record
};

struct DetectionPolicy {
    double eps = 1e-9;
    double min_separation = 0.0; // attribution needs this much separation at the flagged layer
};

/// `models` holds the benign-presumed sample plus the flagged model at `flagged_index`.
/// Needs at least three models. `assignment` is the flagged pipeline's shard map.
DetectionReport detect_malicious(std::span<const SampledModel> models, std::size_t flagged_index,
                                 const pipeline::ShardAssignment& assignment, std::uint64_t epoch,
                                 const DetectionPolicy& policy = {});

/// Picks up to `k` benign-presumed indices (not `flagged`) from `count` models: all of
/// them when they fit, else a seeded sample. Returned in ascending order.
std::vector<std::size_t> sample_benign(std::size_t count, std::size_t flagged, std::size_t k, std::uint64_t seed);

/// Mahalanobis distance of `point` from the cloud `cluster` (sample covariance,
/// tiny ridge). Used to check the 3-sigma separation of plotted features.
double mahalanobis(const RankFeature& point, std::span<const RankFeature> cluster);

} // namespace tdml::robust
