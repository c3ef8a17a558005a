#include "tdml/robust.hpp"

#include "tdml/error.hpp"
#include "tdml/rng.hpp"

#include <algorithm>
#include <cmath>
#include <limits>
#include <memory>
#include <numeric>

namespace tdml::robust {

nlohmann::json to_json(const ValidationResult& v) {
    nlohmann::json j;
    j["model"] = v.model_author;
    j["epoch"] = v.epoch;
    j["accuracy"] = v.accuracy;
    j["loss"] = v.loss;
    j["validator"] = v.validator;
    j["decode_failure"] = v.decode_failure;
    return j;
}

ValidationResult validation_from_json(const nlohmann::json& j) {
    ValidationResult v;
    v.model_author = j.at("model").get<std::string>();
    v.epoch = j.at("epoch").get<std::uint64_t>();
    v.accuracy = j.at("accuracy").get<double>();
    v.loss = j.at("loss").get<double>();
    v.validator = j.at("validator").get<std::string>();
    v.decode_failure = j.at("decode_failure").get<bool>();
    return v;
}

std::vector<ValidationResult> cross_validate(const std::string& validator, std::span<const PendingModel> pending,
                                             const store::Dataset& test) {
    std::vector<ValidationResult> out;
    for (const auto& p : pending) {
        ValidationResult v;
        v.model_author = p.author;
        v.epoch = p.epoch;
        v.validator = validator;
        try {
            auto m = model::decode_checkpoint(p.checkpoint);
            auto e = model::evaluate(m.params, test);
            v.accuracy = e.accuracy;
            v.loss = e.mean_loss;
        } catch (const Error& e) {
            if (e.code() != ErrorCode::DecodeError && e.code() != ErrorCode::ShapeMismatch) throw;
            v.decode_failure = true;
        }
        out.push_back(std::move(v));
    }
    return out;
}

std::vector<double> suspicion_scores(std::span<const double> h) {
    const double mu = std::accumulate(h.begin(), h.end(), 0.0) / static_cast<double>(h.size());
    double total = 0.0;
    for (double x : h) total += std::abs(x - mu);
    std::vector<double> scores;
    for (double x : h) {
        const double dev = std::abs(x - mu);
        const double rest = total - dev;
        if (dev == 0.0) {
            scores.push_back(0.0);
        } else {
            scores.push_back(rest > 0.0 ? dev / rest : std::numeric_limits<double>::infinity());
        }
    }
    return scores;
}

std::vector<std::size_t> flag_suspicious(std::span<const double> accuracies, const FlagPolicy& policy) {
    if (accuracies.size() < 2) throw Error(ErrorCode::InvalidArgument, "flag_suspicious needs at least two results");
    const double mu = std::accumulate(accuracies.begin(), accuracies.end(), 0.0) / static_cast<double>(accuracies.size());
    auto scores = suspicion_scores(accuracies);
    const auto best = static_cast<std::size_t>(std::max_element(scores.begin(), scores.end()) - scores.begin());
    if (scores[best] == 0.0) return {};
    const double h = accuracies[best];
    if (scores[best] > policy.tau && h < mu && mu - h >= policy.min_gap) return {best};
    return {};
}

TopKResult aggregate_topk(std::span<const model::Parameters> models, std::span<const double> accuracies,
                          std::size_t k, std::span<const std::size_t> excluded) {
    if (models.size() != accuracies.size()) throw Error(ErrorCode::InvalidArgument, "models vs accuracies");
    std::vector<std::size_t> candidates;
    for (std::size_t i = 0; i < models.size(); ++i) {
        if (std::find(excluded.begin(), excluded.end(), i) == excluded.end()) candidates.push_back(i);
    }
    if (k == 0 || k > candidates.size()) {
        throw Error(ErrorCode::InvalidArgument, "K=" + std::to_string(k) + " with " +
                                                    std::to_string(candidates.size()) + " eligible models");
    }
    std::stable_sort(candidates.begin(), candidates.end(),
                     [&](std::size_t a, std::size_t b) { return accuracies[a] > accuracies[b]; });
    candidates.resize(k);
    std::sort(candidates.begin(), candidates.end());

    std::vector<model::Parameters> chosen;
    for (auto i : candidates) chosen.push_back(models[i]);
    return {average(chosen), candidates};
}

model::Parameters average(std::span<const model::Parameters> models) {
    if (models.empty()) throw Error(ErrorCode::InvalidArgument, "average of no models");
    model::Parameters out = models[0];
    for (std::size_t m = 1; m < models.size(); ++m) {
        if (models[m].layers.size() != out.layers.size()) throw Error(ErrorCode::ShapeMismatch, "average layer count");
        for (std::size_t l = 0; l < out.layers.size(); ++l) {
            auto& dst = out.layers[l];
            const auto& src = models[m].layers[l];
            if (src.weight.data.size() != dst.weight.data.size()) throw Error(ErrorCode::ShapeMismatch, "average shape");
            for (std::size_t i = 0; i < dst.weight.data.size(); ++i) dst.weight.data[i] += src.weight.data[i];
            for (std::size_t i = 0; i < dst.bias.size(); ++i) dst.bias[i] += src.bias[i];
        }
    }
    const double n = static_cast<double>(models.size());
    for (auto& l : out.layers) {
        for (auto& v : l.weight.data) v /= n;
        for (auto& v : l.bias) v /= n;
    }
    return out;
}

// ---------------------------------------------------------------------------------------

std::string_view to_string(AttackKind kind) {
    switch (kind) {
    case AttackKind::ZeroGradient: return "zero_gradient";
    case AttackKind::MeanShift: return "mean_shift";
    case AttackKind::Gaussian: return "gaussian";
    }
    return "unknown";
}

std::optional<AttackKind> parse_attack(std::string_view name) {
    if (name == "zero_gradient") return AttackKind::ZeroGradient;
    if (name == "mean_shift") return AttackKind::MeanShift;
    if (name == "gaussian") return AttackKind::Gaussian;
    return std::nullopt;
}

void attack_zero(model::GradientRecord& record) {
    model::for_each_entry(record, [](double& v) { v = 0.0; });
}

void attack_meanshift(model::GradientRecord& record, double delta) {
    if (delta == 0.0) throw Error(ErrorCode::InvalidArgument, "mean shift with delta 0 is not an attack");
    model::for_each_entry(record, [delta](double& v) { v += delta; });
}

void attack_gaussian(model::GradientRecord& record, double sigma2, std::uint64_t seed) {
    if (!(sigma2 > 0.0)) throw Error(ErrorCode::InvalidArgument, "gaussian attack needs sigma2 > 0");
    Rng rng(seed);
    const double sd = std::sqrt(sigma2);
    model::for_each_entry(record, [&](double& v) { v = sd * rng.normal(); });
}

pipeline::HookMap make_attack_hooks(std::span<const AttackConfig> attacks, std::uint64_t epoch, std::uint64_t seed) {
    pipeline::HookMap hooks;
    for (const auto& a : attacks) {
        if (epoch < a.start_epoch) continue;
        std::function<void(model::GradientRecord&)> fn;
        switch (a.kind) {
        case AttackKind::ZeroGradient:
            fn = [](model::GradientRecord& g) { attack_zero(g); };
            break;
        case AttackKind::MeanShift:
            fn = [delta = a.delta](model::GradientRecord& g) { attack_meanshift(g, delta); };
            break;
        case AttackKind::Gaussian: {
            auto calls = std::make_shared<std::uint64_t>(0);
            const auto base = derive_seed(seed, "gaussian-attack", a.target, {epoch});
            fn = [calls, base, sigma2 = a.sigma2](model::GradientRecord& g) {
                attack_gaussian(g, sigma2, mix64(base ^ (*calls)++));
            };
            break;
        }
        }
        hooks[a.target] = pipeline::TrainerHooks{fn, fn};
    }
    return hooks;
}

// ---------------------------------------------------------------------------------------

std::vector<RankFeature> rank_features(std::span<const model::LayerGrad* const> layer_per_model) {
    const std::size_t M = layer_per_model.size();
    if (M == 0) return {};
    const std::size_t W = layer_per_model[0]->d_weight.data.size();
    const std::size_t B = layer_per_model[0]->d_bias.size();
    for (const auto* g : layer_per_model) {
        if (g->d_weight.data.size() != W || g->d_bias.size() != B) throw Error(ErrorCode::ShapeMismatch, "rank_features shapes");
    }
    const std::size_t C = W + B;
    if (C == 0) throw Error(ErrorCode::ShapeMismatch, "rank_features on empty layer");

    auto value = [&](std::size_t m, std::size_t c) {
        return c < W ? layer_per_model[m]->d_weight.data[c] : layer_per_model[m]->d_bias[c - W];
    };

    std::vector<double> sum(M, 0.0), sumsq(M, 0.0), vals(M), ranks(M);
    std::vector<std::size_t> idx(M);
    for (std::size_t c = 0; c < C; ++c) {
        for (std::size_t m = 0; m < M; ++m) vals[m] = value(m, c);
        std::iota(idx.begin(), idx.end(), std::size_t{0});
        std::sort(idx.begin(), idx.end(), [&](std::size_t a, std::size_t b) { return vals[a] < vals[b]; });
        for (std::size_t i = 0; i < M;) {
            std::size_t j = i;
            while (j + 1 < M && vals[idx[j + 1]] == vals[idx[i]]) ++j;
            const double avg = (static_cast<double>(i + 1) + static_cast<double>(j + 1)) / 2.0;
            for (std::size_t k = i; k <= j; ++k) ranks[idx[k]] = avg;
            i = j + 1;
        }
        for (std::size_t m = 0; m < M; ++m) {
            sum[m] += ranks[m];
            sumsq[m] += ranks[m] * ranks[m];
        }
    }
    std::vector<RankFeature> out(M);
    const double n = static_cast<double>(C);
    for (std::size_t m = 0; m < M; ++m) {
        const double mean = sum[m] / n;
        const double var = std::max(0.0, sumsq[m] / n - mean * mean);
        out[m] = {mean, std::sqrt(var)};
    }
    return out;
}

namespace {

double dist2(const RankFeature& a, const RankFeature& b) {
    const double dx = a.mean_rank - b.mean_rank;
    const double dy = a.rank_std - b.rank_std;
    return dx * dx + dy * dy;
}

} // namespace

TwoMeans two_means(std::span<const RankFeature> points, double eps) {
    TwoMeans r;
    const std::size_t n = points.size();
    r.assignment.assign(n, 0);
    std::size_t a = 0, b = 0;
    double best = 0.0;
    for (std::size_t i = 0; i < n; ++i) {
        for (std::size_t j = i + 1; j < n; ++j) {
            const double d = dist2(points[i], points[j]);
            if (d > best) {
                best = d;
                a = i;
                b = j;
            }
        }
    }
    if (best == 0.0) {
        r.degenerate = true;
        if (n > 0) r.centroids = {points[0], points[0]};
        return r;
    }
    r.centroids = {points[a], points[b]};
    for (int iter = 0; iter < 100; ++iter) {
        bool changed = iter == 0;
        for (std::size_t i = 0; i < n; ++i) {
            const int c = dist2(points[i], r.centroids[0]) <= dist2(points[i], r.centroids[1]) ? 0 : 1;
            if (c != r.assignment[i]) changed = true;
            r.assignment[i] = c;
        }
        if (!changed) break;
        for (int c = 0; c < 2; ++c) {
            RankFeature sum{};
            std::size_t count = 0;
            for (std::size_t i = 0; i < n; ++i) {
                if (r.assignment[i] != c) continue;
                sum.mean_rank += points[i].mean_rank;
                sum.rank_std += points[i].rank_std;
                ++count;
            }
            if (count > 0) r.centroids[c] = {sum.mean_rank / count, sum.rank_std / count};
        }
    }
    double within = 0.0;
    for (std::size_t i = 0; i < n; ++i) within += dist2(points[i], r.centroids[r.assignment[i]]);
    const double pooled = std::sqrt(within / static_cast<double>(n));
    r.separation = std::sqrt(dist2(r.centroids[0], r.centroids[1])) / (pooled + eps);
    return r;
}

std::string_view to_string(DetectionStatus s) {
    switch (s) {
    case DetectionStatus::Detected: return "detected";
    case DetectionStatus::NoAttribution: return "no_attribution";
    case DetectionStatus::Degenerate: return "degenerate";
    case DetectionStatus::InsufficientSample: return "insufficient_sample";
    }
    return "unknown";
}

namespace {

DetectionStatus parse_status(std::string_view s) {
    for (auto st : {DetectionStatus::Detected, DetectionStatus::NoAttribution, DetectionStatus::Degenerate,
                    DetectionStatus::InsufficientSample}) {
        if (to_string(st) == s) return st;
    }
    throw Error(ErrorCode::DecodeError, "detection status");
}

nlohmann::json finite_or_null(double v) { return std::isfinite(v) ? nlohmann::json(v) : nlohmann::json(nullptr); }

} // namespace

nlohmann::json to_json(const DetectionReport& r) {
    nlohmann::json j;
    j["epoch"] = r.epoch;
    j["status"] = std::string(to_string(r.status));
    j["flagged_model"] = r.flagged_model;
    j["flagged_layer"] = r.flagged_layer ? nlohmann::json(*r.flagged_layer) : nlohmann::json(nullptr);
    j["sampled"] = r.sampled;
    j["malicious_models"] = r.malicious_models;
    j["attributed_trainers"] = r.attributed_trainers;
    auto layers = nlohmann::json::array();
    for (const auto& l : r.layers) {
        nlohmann::json lj;
        lj["layer"] = l.layer;
        lj["score"] = finite_or_null(l.score);
        lj["ratio"] = finite_or_null(l.ratio);
        auto feats = nlohmann::json::array();
        for (const auto& f : l.features) feats.push_back({f.mean_rank, f.rank_std});
        lj["features"] = feats;
        lj["clusters"] = l.clusters;
        layers.push_back(std::move(lj));
    }
    j["layers"] = layers;
    return j;
}

DetectionReport detection_from_json(const nlohmann::json& j) {
    DetectionReport r;
    r.epoch = j.at("epoch").get<std::uint64_t>();
    r.status = parse_status(j.at("status").get<std::string>());
    r.flagged_model = j.at("flagged_model").get<std::string>();
    if (!j.at("flagged_layer").is_null()) r.flagged_layer = j.at("flagged_layer").get<std::size_t>();
    r.sampled = j.at("sampled").get<std::vector<std::string>>();
    r.malicious_models = j.at("malicious_models").get<std::vector<std::string>>();
    r.attributed_trainers = j.at("attributed_trainers").get<std::vector<std::string>>();
    for (const auto& lj : j.at("layers")) {
        LayerDetection l;
        l.layer = lj.at("layer").get<std::size_t>();
        l.score = lj.at("score").is_null() ? std::numeric_limits<double>::infinity() : lj.at("score").get<double>();
        l.ratio = lj.at("ratio").is_null() ? std::numeric_limits<double>::infinity() : lj.at("ratio").get<double>();
        for (const auto& f : lj.at("features")) l.features.push_back({f.at(0).get<double>(), f.at(1).get<double>()});
        l.clusters = lj.at("clusters").get<std::vector<int>>();
        r.layers.push_back(std::move(l));
    }
    return r;
}

DetectionReport detect_malicious(std::span<const SampledModel> models, std::size_t flagged_index,
                                 const pipeline::ShardAssignment& assignment, std::uint64_t epoch,
                                 const DetectionPolicy& policy) {
    DetectionReport report;
    report.epoch = epoch;
    for (const auto& m : models) report.sampled.push_back(m.author);
    if (flagged_index >= models.size()) throw Error(ErrorCode::InvalidArgument, "flagged index out of range");
    report.flagged_model = models[flagged_index].author;
    if (models.size() < 3) {
        report.status = DetectionStatus::InsufficientSample;
        return report;
    }
    const std::size_t L = models[0].gradients->layers.size();
    for (const auto& m : models) {
        if (m.gradients == nullptr || m.gradients->layers.size() != L || m.gradients->first_layer != 0) {
            throw Error(ErrorCode::ShapeMismatch, "detect_malicious needs full-model gradient records");
        }
    }

    bool any = false;
    for (std::size_t l = 0; l < L; ++l) {
        std::vector<const model::LayerGrad*> per_model;
        for (const auto& m : models) per_model.push_back(&m.gradients->layers[l]);
        LayerDetection ld;
        ld.layer = l;
        ld.features = rank_features(per_model);
        auto km = two_means(ld.features, policy.eps);
        ld.clusters = km.assignment;
        ld.score = km.degenerate ? 0.0 : km.separation;
        any = any || !km.degenerate;
        report.layers.push_back(std::move(ld));
    }
    if (!any) {
        report.status = DetectionStatus::Degenerate;
        report.layers.clear();
        return report;
    }

    double total = 0.0;
    for (const auto& ld : report.layers) total += ld.score;
    std::size_t best = 0;
    for (std::size_t l = 0; l < L; ++l) {
        auto& ld = report.layers[l];
        const double rest = total - ld.score;
        ld.ratio = rest > 0.0 ? ld.score / rest : (ld.score > 0.0 ? std::numeric_limits<double>::infinity() : 0.0);
        if (ld.ratio > report.layers[best].ratio) best = l;
    }
    report.flagged_layer = best;

    const auto& ld = report.layers[best];
    const auto n1 = static_cast<std::size_t>(std::count(ld.clusters.begin(), ld.clusters.end(), 1));
    const auto n0 = ld.clusters.size() - n1;
    int minority = n0 < n1 ? 0 : 1;
    if (n0 == n1) minority = ld.clusters[flagged_index];
    for (std::size_t i = 0; i < models.size(); ++i) {
        if (ld.clusters[i] == minority) report.malicious_models.push_back(models[i].author);
    }
    const bool flagged_in_minority = ld.clusters[flagged_index] == minority;
    if (flagged_in_minority && ld.score >= policy.min_separation) {
        report.attributed_trainers.push_back(assignment.owner_of(best).trainer);
        report.status = DetectionStatus::Detected;
    } else {
        report.status = DetectionStatus::NoAttribution;
    }
    return report;
}

std::vector<std::size_t> sample_benign(std::size_t count, std::size_t flagged, std::size_t k, std::uint64_t seed) {
    std::vector<std::size_t> pool;
    for (std::size_t i = 0; i < count; ++i) {
        if (i != flagged) pool.push_back(i);
    }
    if (pool.size() > k) {
        Rng rng(seed);
        rng.shuffle(pool);
        pool.resize(k);
        std::sort(pool.begin(), pool.end());
    }
    return pool;
}

double mahalanobis(const RankFeature& point, std::span<const RankFeature> cluster) {
    const std::size_t n = cluster.size();
    if (n < 2) return std::numeric_limits<double>::infinity();
    double mx = 0.0, my = 0.0;
    for (const auto& p : cluster) {
        mx += p.mean_rank;
        my += p.rank_std;
    }
    mx /= static_cast<double>(n);
    my /= static_cast<double>(n);
    double sxx = 0.0, syy = 0.0, sxy = 0.0;
    for (const auto& p : cluster) {
        const double dx = p.mean_rank - mx;
        const double dy = p.rank_std - my;
        sxx += dx * dx;
        syy += dy * dy;
        sxy += dx * dy;
    }
    const double denom = static_cast<double>(n - 1);
    constexpr double ridge = 1e-12;
    sxx = sxx / denom + ridge;
    syy = syy / denom + ridge;
    sxy /= denom;
    const double det = sxx * syy - sxy * sxy;
    const double dx = point.mean_rank - mx;
    const double dy = point.rank_std - my;
    const double q = (syy * dx * dx - 2.0 * sxy * dx * dy + sxx * dy * dy) / det;
    return std::sqrt(std::max(0.0, q));
}

} // namespace tdml::robust
