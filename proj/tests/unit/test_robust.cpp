#include "tdml/error.hpp"
#include "tdml/rng.hpp"
#include "tdml/robust.hpp"

#include <gtest/gtest.h>

#include <cmath>
#include <numeric>

using namespace tdml;
using namespace tdml::robust;

namespace {

model::LayerGrad layer_of(std::vector<double> w) {
    model::LayerGrad g;
    g.d_weight = model::Matrix(1, w.size());
    g.d_weight.data = std::move(w);
    return g;
}

// Brute-force ranking oracle: rank = #smaller + (#equal + 1) / 2.
std::vector<RankFeature> rank_oracle(const std::vector<std::vector<double>>& values) {
    const std::size_t m = values.size();
    const std::size_t n = values[0].size();
    std::vector<std::vector<double>> ranks(m);
    for (std::size_t c = 0; c < n; ++c) {
        for (std::size_t i = 0; i < m; ++i) {
            double less = 0, equal = 0;
            for (std::size_t j = 0; j < m; ++j) {
                if (values[j][c] < values[i][c]) ++less;
                if (values[j][c] == values[i][c]) ++equal;
            }
            ranks[i].push_back(less + (equal + 1) / 2);
        }
    }
    std::vector<RankFeature> out;
    for (const auto& r : ranks) {
        double mean = std::accumulate(r.begin(), r.end(), 0.0) / r.size();
        double var = 0;
        for (double x : r) var += (x - mean) * (x - mean);
        out.push_back({mean, std::sqrt(var / r.size())});
    }
    return out;
}

std::vector<RankFeature> features_of(const std::vector<std::vector<double>>& values) {
    std::vector<model::LayerGrad> layers;
    for (const auto& v : values) layers.push_back(layer_of(v));
    std::vector<const model::LayerGrad*> ptrs;
    for (const auto& l : layers) ptrs.push_back(&l);
    return rank_features(ptrs);
}

model::Parameters constant_params(double v) {
    model::Parameters p;
    model::Layer l{model::Matrix(2, 2, v), {v, v}};
    p.layers = {l, l};
    return p;
}

// Three-layer full-model gradient with benign noise of scale 1.
model::GradientRecord benign_record(Rng& rng) {
    model::GradientRecord g;
    for (int l = 0; l < 3; ++l) {
        model::LayerGrad lg;
        lg.d_weight = model::Matrix(8, 8);
        for (auto& v : lg.d_weight.data) v = 3.0 + rng.normal();
        lg.d_bias.resize(8);
        for (auto& v : lg.d_bias) v = 3.0 + rng.normal();
        g.layers.push_back(lg);
    }
    return g;
}

} // namespace

TEST(Flag, ScoreFormulaExamples) {
    std::vector<double> equal{0.9, 0.9, 0.9, 0.9};
    EXPECT_TRUE(flag_suspicious(equal).empty());

    std::vector<double> low{0.90, 0.89, 0.91, 0.30};
    auto scores = suspicion_scores(low);
    // mu = 0.75; deviations 0.15, 0.14, 0.16, 0.45
    EXPECT_NEAR(scores[3], 0.45 / (0.15 + 0.14 + 0.16), 1e-12);
    EXPECT_NEAR(scores[0], 0.15 / (0.14 + 0.16 + 0.45), 1e-12);
    EXPECT_EQ(flag_suspicious(low), (std::vector<std::size_t>{3}));

    std::vector<double> high{0.90, 0.89, 0.91, 0.95};
    EXPECT_TRUE(flag_suspicious(high).empty());
}

TEST(Flag, ThresholdAndGap) {
    std::vector<double> h{0.80, 0.81, 0.79, 0.70};
    EXPECT_EQ(flag_suspicious(h).size(), 1u);
    EXPECT_TRUE(flag_suspicious(h, FlagPolicy{0.5, 0.1}).empty());
    EXPECT_TRUE(flag_suspicious(h, FlagPolicy{5.0, 0.0}).empty());
}

// Property: whatever is flagged sits below the mean with the top score.
TEST(Flag, GateProperty) {
    Rng rng(12);
    for (int t = 0; t < 500; ++t) {
        std::vector<double> h(2 + rng.below(8));
        for (auto& v : h) v = rng.uniform();
        auto s = suspicion_scores(h);
        auto f = flag_suspicious(h);
        ASSERT_LE(f.size(), 1u);
        if (f.empty()) continue;
        const double mu = std::accumulate(h.begin(), h.end(), 0.0) / h.size();
        EXPECT_LT(h[f[0]], mu);
        EXPECT_GT(s[f[0]], 0.5);
        for (double x : s) EXPECT_LE(x, s[f[0]]);
    }
}

TEST(TopK, SelectsBestAndRespectsExclusion) {
    std::vector<model::Parameters> models{constant_params(1), constant_params(2), constant_params(3), constant_params(4)};
    std::vector<double> acc{0.8, 0.85, 0.6, 0.83};
    auto r = aggregate_topk(models, acc, 2);
    EXPECT_EQ(r.included, (std::vector<std::size_t>{1, 3}));
    EXPECT_EQ(r.params.layers[0].weight(0, 0), 3.0);

    std::vector<std::size_t> excl{1};
    auto r2 = aggregate_topk(models, acc, 2, excl);
    EXPECT_EQ(r2.included, (std::vector<std::size_t>{0, 3}));
    EXPECT_THROW(aggregate_topk(models, acc, 4, excl), Error);

    std::vector<double> ties{0.5, 0.5, 0.5, 0.5};
    EXPECT_EQ(aggregate_topk(models, ties, 2).included, (std::vector<std::size_t>{0, 1}));
    auto same = std::vector<model::Parameters>(3, constant_params(0.3));
    EXPECT_EQ(aggregate_topk(same, std::vector<double>{1, 2, 3}, 3).params, constant_params(0.3));
    EXPECT_EQ(average(models).layers[1].bias[0], 2.5);
}

TEST(Attacks, ZeroAndMeanShift) {
    Rng rng(1);
    auto g = benign_record(rng);
    auto z = g;
    attack_zero(z);
    model::for_each_entry(z, [](double& v) { EXPECT_EQ(v, 0.0); });
    auto zz = z;
    attack_zero(zz);
    EXPECT_EQ(zz, z);

    auto m = z;
    attack_meanshift(m, 0.1);
    model::for_each_entry(m, [](double& v) { EXPECT_EQ(v, 0.1); });
    EXPECT_THROW(attack_meanshift(m, 0.0), Error);

    double sum = 0;
    model::for_each_entry(g, [&](double& v) { sum += v; });
    const double mean = sum / static_cast<double>(g.coordinate_count());
    auto c = g;
    attack_meanshift(c, -mean);
    double after = 0;
    model::for_each_entry(c, [&](double& v) { after += v; });
    EXPECT_NEAR(after / static_cast<double>(g.coordinate_count()), 0.0, 1e-12);
}

TEST(Attacks, GaussianStatistics) {
    model::GradientRecord g;
    model::LayerGrad l;
    l.d_weight = model::Matrix(100, 200);
    g.layers.push_back(l);
    auto a = g, b = g;
    attack_gaussian(a, 30.0, 5);
    attack_gaussian(b, 30.0, 5);
    EXPECT_EQ(a, b);
    double s = 0, s2 = 0;
    model::for_each_entry(a, [&](double& v) {
        s += v;
        s2 += v * v;
    });
    const double n = 20000;
    const double var = s2 / n - (s / n) * (s / n);
    EXPECT_NEAR(var, 30.0, 1.5);
    EXPECT_THROW(attack_gaussian(g, 0.0, 1), Error);
    EXPECT_EQ(parse_attack("mean_shift"), AttackKind::MeanShift);
    EXPECT_FALSE(parse_attack("krum"));
}

TEST(Attacks, HooksStartAtConfiguredEpoch) {
    std::vector<AttackConfig> cfg{{AttackKind::ZeroGradient, "t-1", 0.0, 30.0, 2}};
    EXPECT_TRUE(make_attack_hooks(cfg, 1, 0).empty());
    auto hooks = make_attack_hooks(cfg, 2, 0);
    ASSERT_TRUE(hooks.count("t-1"));
    Rng rng(3);
    auto g = benign_record(rng);
    hooks["t-1"].on_epoch(g);
    model::for_each_entry(g, [](double& v) { EXPECT_EQ(v, 0.0); });
}

TEST(RankFeatures, HandExample) {
    // model 3 always largest on a two-coordinate layer
    auto f = features_of({{1.0, 5.0}, {2.0, 4.0}, {3.0, 6.0}});
    EXPECT_EQ(f[2], (RankFeature{3.0, 0.0}));
    EXPECT_EQ(f[0], (RankFeature{1.5, 0.5}));
    auto ties = features_of({{1.0}, {1.0}, {2.0}});
    EXPECT_EQ(ties[0].mean_rank, 1.5);
    EXPECT_EQ(ties[1].mean_rank, 1.5);
}

TEST(RankFeatures, MatchesBruteForceOracle) {
    Rng rng(21);
    for (int t = 0; t < 100; ++t) {
        const std::size_t m = 3 + rng.below(5);
        const std::size_t n = 1 + rng.below(30);
        std::vector<std::vector<double>> v(m, std::vector<double>(n));
        for (auto& row : v) {
            for (auto& x : row) x = static_cast<double>(rng.below(4)); // plenty of ties
        }
        auto got = features_of(v);
        auto want = rank_oracle(v);
        for (std::size_t i = 0; i < m; ++i) {
            EXPECT_NEAR(got[i].mean_rank, want[i].mean_rank, 1e-12);
            EXPECT_NEAR(got[i].rank_std, want[i].rank_std, 1e-12);
        }
    }
    std::vector<model::LayerGrad> bad{layer_of({1, 2}), layer_of({1})};
    std::vector<const model::LayerGrad*> ptrs{&bad[0], &bad[1]};
    EXPECT_THROW(rank_features(ptrs), Error);
}

TEST(TwoMeans, SeparatesObviousClusters) {
    std::vector<RankFeature> pts{{1, 1}, {1.1, 1}, {1, 1.1}, {5, 5}, {5.1, 5}};
    auto km = two_means(pts);
    EXPECT_FALSE(km.degenerate);
    EXPECT_EQ(km.assignment[0], km.assignment[1]);
    EXPECT_EQ(km.assignment[3], km.assignment[4]);
    EXPECT_NE(km.assignment[0], km.assignment[3]);
    EXPECT_GT(km.separation, 10.0);
    std::vector<RankFeature> same(4, RankFeature{2, 2});
    EXPECT_TRUE(two_means(same).degenerate);
}

TEST(Detect, ZeroGradientAttackerAttributed) {
    for (std::uint64_t seed = 0; seed < 10; ++seed) {
        Rng rng(seed);
        std::vector<model::GradientRecord> recs;
        for (int i = 0; i < 6; ++i) recs.push_back(benign_record(rng));
        const std::size_t flagged = seed % 6;
        for (auto& v : recs[flagged].layers[1].d_weight.data) v = 0.0;
        for (auto& v : recs[flagged].layers[1].d_bias) v = 0.0;
        std::vector<SampledModel> models;
        for (int i = 0; i < 6; ++i) models.push_back({"ps-" + std::to_string(i), &recs[i]});
        pipeline::ShardAssignment a{{{"t-lo", 0, 1}, {"t-mid", 1, 2}, {"t-hi", 2, 3}}};
        auto r = detect_malicious(models, flagged, a, 1);
        EXPECT_EQ(r.status, DetectionStatus::Detected);
        EXPECT_EQ(r.flagged_layer, 1u);
        EXPECT_EQ(r.malicious_models, (std::vector<std::string>{"ps-" + std::to_string(flagged)}));
        EXPECT_EQ(r.attributed_trainers, (std::vector<std::string>{"t-mid"}));
        // attacker is outside the benign cloud at the attacked layer
        std::vector<RankFeature> benign;
        for (std::size_t i = 0; i < 6; ++i) {
            if (i != flagged) benign.push_back(r.layers[1].features[i]);
        }
        EXPECT_GT(mahalanobis(r.layers[1].features[flagged], benign), 3.0);

        auto round = detection_from_json(to_json(r));
        EXPECT_EQ(round.attributed_trainers, r.attributed_trainers);
        EXPECT_EQ(round.flagged_layer, r.flagged_layer);
    }
}

// Property: ranks, and so the whole report, survive strictly monotone per-coordinate maps.
TEST(Detect, MonotoneInvariance) {
    Rng rng(77);
    std::vector<model::GradientRecord> recs;
    for (int i = 0; i < 5; ++i) recs.push_back(benign_record(rng));
    attack_meanshift(recs[2], 0.3);
    auto mapped = recs;
    for (auto& g : mapped) model::for_each_entry(g, [](double& v) { v = std::exp(3.0 * v) - 7.0; });
    auto run = [](const std::vector<model::GradientRecord>& rs) {
        std::vector<SampledModel> models;
        for (std::size_t i = 0; i < rs.size(); ++i) models.push_back({"m" + std::to_string(i), &rs[i]});
        pipeline::ShardAssignment a{{{"t", 0, 3}}};
        return detect_malicious(models, 2, a, 1);
    };
    auto a = run(recs), b = run(mapped);
    ASSERT_EQ(a.layers.size(), b.layers.size());
    for (std::size_t l = 0; l < a.layers.size(); ++l) {
        EXPECT_EQ(a.layers[l].features, b.layers[l].features);
        EXPECT_EQ(a.layers[l].score, b.layers[l].score);
    }
    EXPECT_EQ(a.flagged_layer, b.flagged_layer);
    EXPECT_EQ(a.malicious_models, b.malicious_models);
}

TEST(Detect, DegenerateAndInsufficient) {
    Rng rng(2);
    auto g = benign_record(rng);
    std::vector<model::GradientRecord> recs(6, g);
    std::vector<SampledModel> models;
    for (int i = 0; i < 6; ++i) models.push_back({"m" + std::to_string(i), &recs[i]});
    pipeline::ShardAssignment a{{{"t", 0, 3}}};
    auto r = detect_malicious(models, 0, a, 1);
    EXPECT_EQ(r.status, DetectionStatus::Degenerate);
    EXPECT_TRUE(r.layers.empty());
    EXPECT_FALSE(r.attributed());
    std::span<const SampledModel> two(models.data(), 2);
    EXPECT_EQ(detect_malicious(two, 0, a, 1).status, DetectionStatus::InsufficientSample);
}

TEST(Sample, BenignSampling) {
    EXPECT_EQ(sample_benign(4, 1, 5, 0), (std::vector<std::size_t>{0, 2, 3}));
    auto s = sample_benign(10, 3, 5, 9);
    EXPECT_EQ(s.size(), 5u);
    EXPECT_TRUE(std::is_sorted(s.begin(), s.end()));
    EXPECT_EQ(std::count(s.begin(), s.end(), 3u), 0);
    EXPECT_EQ(sample_benign(10, 3, 5, 9), s);
}

TEST(CrossValidate, RecomputableAndDecodeFailure) {
    store::BlobSpec spec;
    spec.n_train = 10;
    spec.n_test = 100;
    auto test = store::make_gaussian_blobs(spec, 1).second;
    model::Arch arch;
    arch.dims = {16, 8, 4};
    auto m = model::init_model(arch, 3);
    std::vector<PendingModel> pending{{"ps-a", 1, model::encode_checkpoint(m)},
                                      {"ps-b", 1, model::encode_checkpoint(m)},
                                      {"ps-c", 1, to_bytes("garbage")}};
    auto res = cross_validate("ps-z", pending, test);
    ASSERT_EQ(res.size(), 3u);
    EXPECT_EQ(res[0].accuracy, res[1].accuracy);
    EXPECT_EQ(res[0].accuracy, model::evaluate(m.params, test).accuracy);
    EXPECT_EQ(res[0].validator, "ps-z");
    EXPECT_TRUE(res[2].decode_failure);
    EXPECT_EQ(res[2].accuracy, 0.0);
    EXPECT_EQ(validation_from_json(to_json(res[0])), res[0]);
    EXPECT_TRUE(cross_validate("ps-z", {}, test).empty());
}
