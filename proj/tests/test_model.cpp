#include <gtest/gtest.h>

#include <clusteralign/model.hpp>

#include <cmath>
#include <random>

#include "oracles.hpp"

using namespace clusteralign;
using namespace clusteralign::model;

namespace {

struct ToyBatch {
    LabeledBatch source;
    std::vector<Tensor> target;
};

ToyBatch toy_batch(std::size_t channels, std::size_t K, std::uint64_t seed) {
    std::mt19937_64 rng(seed);
    ToyBatch b;
    for (int i = 0; i < 2; ++i) {
        b.source.inputs.push_back(oracle::random_tensor({4, 4, channels}, rng));
        b.source.labels.push_back(oracle::random_labels(4, 4, K, rng));
        b.target.push_back(oracle::random_tensor({4, 4, channels}, rng));
    }
    return b;
}

Gradients supervised_only(const Segmenter& seg, const LabeledBatch& batch) {
    std::vector<ForwardPass> passes;
    std::vector<ScoreMap> scores;
    for (const auto& x : batch.inputs) {
        passes.push_back(forward(seg, x));
        scores.push_back(passes.back().scores);
    }
    const auto sup = segmentation_loss(scores, batch.labels);
    auto g = zero_gradients(seg);
    for (std::size_t b = 0; b < batch.inputs.size(); ++b) backward(seg, batch.inputs[b], passes[b], sup.grad_logits[b], nullptr, g);
    return g;
}

bool is_classifier(const Segmenter& seg, std::size_t p) { return seg.params()[p].group == ParamGroup::Classifier; }

}  // namespace

TEST(Forward, ZeroWeightsGiveBiasFeaturesAndUniformScores) {
    Segmenter seg(ModelShape{3, 5, 4, 6});
    seg.param(Segmenter::B2) = Tensor({4}, {0.5, -1.0, 2.0, 0.0});
    std::mt19937_64 rng(1);
    const auto pass = forward(seg, oracle::random_tensor({2, 3, 3}, rng));
    for (std::size_t i = 0; i < 6; ++i) {
        EXPECT_EQ(oracle::pixel(pass.features, i), (std::vector<double>{0.5, -1.0, 2.0, 0.0}));
        for (double p : pass.scores.row(i)) EXPECT_DOUBLE_EQ(p, 1.0 / 6);
    }
}

TEST(Forward, IdentityLikeExtractorPassesInputThrough) {
    const auto seg = Segmenter::identity_like(4, 3);
    std::mt19937_64 rng(2);
    const Tensor x = oracle::random_tensor({3, 3, 4}, rng);
    const auto pass = forward(seg, x);
    for (std::size_t i = 0; i < x.size(); ++i) EXPECT_NEAR(pass.features[i], x[i], 1e-4);
}

TEST(Forward, ScoreRowsOnSimplex) {
    std::mt19937_64 rng(3);
    for (int t = 0; t < 20; ++t) {
        const auto seg = Segmenter::random(ModelShape{4, 8, 6, 5}, static_cast<std::uint64_t>(t));
        const auto pass = forward(seg, oracle::random_tensor({4, 4, 4}, rng, 5.0));
        EXPECT_TRUE(pass.scores.all_finite());
        for (std::size_t i = 0; i < pass.scores.rows(); ++i) {
            double s = 0.0;
            for (double p : pass.scores.row(i)) s += p;
            EXPECT_NEAR(s, 1.0, 1e-9);
        }
    }
}

TEST(Forward, ChannelMismatchThrows) {
    const auto seg = Segmenter::random(ModelShape{4, 8, 6, 5}, 0);
    EXPECT_THROW(forward(seg, Tensor({2, 2, 3})), Error);
}

TEST(SegmentationLoss, OneHotScoresGiveZero) {
    const Tensor p({1, 2, 2}, {1, 0, 0, 1});
    EXPECT_LE(segmentation_loss(p, LabelMap(1, 2, std::vector<int>{0, 1})).value, 1e-12);
}

TEST(SegmentationLoss, UniformScoresGiveLogK) {
    const Tensor p({2, 2, 4}, 0.25);
    std::mt19937_64 rng(4);
    EXPECT_NEAR(segmentation_loss(p, oracle::random_labels(2, 2, 4, rng)).value, std::log(4.0), 1e-12);
}

TEST(SegmentationLoss, AllIgnoredIsEmptySupervision) {
    try {
        segmentation_loss(Tensor({1, 2, 2}, 0.5), LabelMap(1, 2, kIgnoreLabel));
        FAIL();
    } catch (const Error& e) {
        EXPECT_STREQ(e.what(), "empty supervision");
    }
}

TEST(SegmentationLoss, IgnoredPixelsDoNotCount) {
    const Tensor p({1, 2, 2}, {0.5, 0.5, 0.9, 0.1});
    const auto loss = segmentation_loss(p, LabelMap(1, 2, std::vector<int>{kIgnoreLabel, 0}));
    EXPECT_NEAR(loss.value, -std::log(0.9), 1e-15);
}

TEST(SegmentationLoss, LogitGradientMatchesFiniteDifferences) {
    std::mt19937_64 rng(5);
    for (int t = 0; t < 10; ++t) {
        const Tensor z = oracle::random_tensor({3, 3, 4}, rng, 2.0);
        LabelMap y = oracle::random_labels(3, 3, 4, rng);
        y[4] = kIgnoreLabel;
        auto scores = [](const Tensor& logits) {
            Tensor p(logits.shape());
            for (std::size_t i = 0; i < logits.rows(); ++i) {
                const auto s = softmax(logits.row(i));
                std::copy(s.begin(), s.end(), p.row(i).begin());
            }
            return p;
        };
        const auto loss = segmentation_loss(scores(z), y);
        const auto report = finite_difference_check(
            [&](const std::vector<Tensor>& in) { return segmentation_loss(scores(in[0]), y).value; }, {z},
            {loss.gradient("logits")}, 1e-5, 100);
        EXPECT_LT(report.worst(), 1e-4);
    }
}

TEST(Objective, ZeroWeightsReduceToSupervisedGradients) {
    const auto seg = Segmenter::random(ModelShape{3, 6, 5, 3}, 7);
    const auto batch = toy_batch(3, 3, 8);
    ObjectiveConfig cfg;
    cfg.lambda_c = cfg.lambda_a = cfg.lambda_n = 0.0;
    const auto res = total_objective(seg, batch.source, batch.target, cfg);
    const auto expected = supervised_only(seg, batch.source);
    for (std::size_t p = 0; p < expected.size(); ++p) EXPECT_EQ(res.grads[p], expected[p]) << p;
}

TEST(Objective, ClassifierIgnoresClusteringAndAlignmentTerms) {
    const auto seg = Segmenter::random(ModelShape{3, 6, 5, 3}, 9);
    const auto batch = toy_batch(3, 3, 10);
    ObjectiveConfig with;
    with.lambda_c = 0.7;
    with.lambda_a = 1.3;
    with.lambda_n = 0.0;
    ObjectiveConfig without = with;
    without.lambda_c = without.lambda_a = 0.0;
    const auto a = total_objective(seg, batch.source, batch.target, with);
    const auto b = total_objective(seg, batch.source, batch.target, without);
    bool extractor_differs = false;
    for (std::size_t p = 0; p < a.grads.size(); ++p) {
        if (is_classifier(seg, p)) {
            EXPECT_EQ(a.grads[p], b.grads[p]);
        } else {
            extractor_differs |= !(a.grads[p] == b.grads[p]);
        }
    }
    EXPECT_TRUE(extractor_differs);
}

TEST(Objective, ClassifierParamsAfterOneStepAreBitIdentical) {
    const auto batch = toy_batch(3, 3, 11);
    ObjectiveConfig with;
    with.lambda_c = 0.9;
    with.lambda_a = 0.4;
    with.lambda_n = 0.0;
    ObjectiveConfig without = with;
    without.lambda_c = without.lambda_a = 0.0;
    auto s1 = Segmenter::random(ModelShape{3, 6, 5, 3}, 12);
    auto s2 = s1;
    SgdState g1, g2;
    sgd_step(s1, total_objective(s1, batch.source, batch.target, with).grads, g1, 0, with);
    sgd_step(s2, total_objective(s2, batch.source, batch.target, without).grads, g2, 0, without);
    EXPECT_EQ(s1.param(Segmenter::WC), s2.param(Segmenter::WC));
    EXPECT_EQ(s1.param(Segmenter::BC), s2.param(Segmenter::BC));
    EXPECT_FALSE(s1.param(Segmenter::W1) == s2.param(Segmenter::W1));
}

TEST(Objective, NcutReachesTheClassifier) {
    const auto seg = Segmenter::random(ModelShape{3, 6, 5, 3}, 13);
    const auto batch = toy_batch(3, 3, 14);
    ObjectiveConfig off;
    off.lambda_c = off.lambda_a = off.lambda_n = 0.0;
    ObjectiveConfig on = off;
    on.lambda_n = 1.0;
    const auto a = total_objective(seg, batch.source, batch.target, on);
    const auto b = total_objective(seg, batch.source, batch.target, off);
    EXPECT_FALSE(a.grads[Segmenter::WC] == b.grads[Segmenter::WC]);
}

TEST(Objective, MissingAlignableClassesAreSkippedNotFatal) {
    const auto seg = Segmenter::random(ModelShape{3, 6, 5, 3}, 15);
    auto batch = toy_batch(3, 3, 16);
    for (auto& y : batch.source.labels) y.labels.assign(y.size(), 0);
    auto ctx = prepare_context(seg, batch.source, batch.target, ObjectiveConfig{});
    for (std::size_t b = 0; b < ctx.pseudo_labels.size(); ++b) {
        ctx.pseudo_labels[b].labels.assign(16, 1);
        ctx.prototypes[b] = clustering::build_prototypes(forward(seg, batch.target[b]).features, ctx.pseudo_labels[b], 3);
    }
    const auto res = evaluate_objective(seg, batch.source, batch.target, ctx, ObjectiveConfig{});
    EXPECT_TRUE(res.losses.a_skipped);
    EXPECT_EQ(res.losses.a, 0.0);
    EXPECT_TRUE(std::isfinite(res.losses.total));
}

TEST(Schedule, StartsAtBaseRate) { EXPECT_EQ(poly_learning_rate(0.01, 0, 1000, 0.9), 0.01); }

TEST(Schedule, HalfLifePoint) {
    const double max_iters = 4000;
    const double half = max_iters * (1.0 - std::pow(0.5, 1.0 / 0.9));
    EXPECT_NEAR(poly_learning_rate(2.5e-4, half, max_iters, 0.9), 1.25e-4, 1e-9);
    EXPECT_NEAR(poly_learning_rate(1.0, half, max_iters, 0.9), 0.5, 1e-9);
}

TEST(Schedule, StrictlyDecreasingToZero) {
    double previous = 1.0 + 1e-9;
    for (std::size_t i = 0; i < 500; ++i) {
        const double lr = poly_learning_rate(1.0, static_cast<double>(i), 500, 0.9);
        EXPECT_LT(lr, previous);
        previous = lr;
    }
    EXPECT_EQ(poly_learning_rate(1.0, 500, 500, 0.9), 0.0);
}

TEST(Sgd, ZeroGradientsZeroDecayLeaveParamsUnchanged) {
    auto seg = Segmenter::random(ModelShape{3, 4, 4, 2}, 17);
    const auto before = seg;
    SgdState state;
    sgd_step(seg, zero_gradients(seg), state, 0.1, 0.9, 0.0);
    EXPECT_EQ(seg, before);
}

TEST(Sgd, WeightDecayShrinksWeightsButNotBiases) {
    auto seg = Segmenter::random(ModelShape{3, 4, 4, 2}, 18);
    const auto before = seg;
    SgdState state;
    sgd_step(seg, zero_gradients(seg), state, 0.1, 0.9, 0.5);
    for (std::size_t p = 0; p < seg.params().size(); ++p) {
        const auto& now = seg.params()[p];
        if (now.is_bias) {
            EXPECT_EQ(now.value, before.params()[p].value) << now.name;
        } else {
            for (std::size_t i = 0; i < now.value.size(); ++i) {
                EXPECT_DOUBLE_EQ(now.value[i], before.params()[p].value[i] * (1.0 - 0.1 * 0.5));
            }
        }
    }
}

TEST(Sgd, MomentumAccumulatesVelocity) {
    Segmenter seg(ModelShape{1, 1, 1, 1});
    auto grads = zero_gradients(seg);
    grads[Segmenter::B1][0] = 1.0;
    SgdState state;
    sgd_step(seg, grads, state, 0.1, 0.9, 0.0);
    EXPECT_DOUBLE_EQ(seg.param(Segmenter::B1)[0], -0.1);
    sgd_step(seg, grads, state, 0.1, 0.9, 0.0);
    EXPECT_DOUBLE_EQ(seg.param(Segmenter::B1)[0], -0.1 - 0.1 * 1.9);
}

TEST(Config, DefaultsAndValidation) {
    const ObjectiveConfig c;
    EXPECT_EQ(c.lambda_c, 0.0015);
    EXPECT_EQ(c.lambda_a, 0.001);
    EXPECT_EQ(c.lambda_n, 0.002);
    EXPECT_EQ(c.momentum, 0.9);
    EXPECT_EQ(c.weight_decay, 1e-4);
    EXPECT_EQ(c.poly_power, 0.9);
    EXPECT_EQ(c.base_lr, 2.5e-4);
    const auto text = with_text_lambdas(c);
    EXPECT_EQ(text.lambda_c, 0.001);
    EXPECT_EQ(text.lambda_a, 0.0015);
    EXPECT_EQ(text.lambda_n, 0.002);
    ObjectiveConfig bad;
    bad.max_iters = 10;
    EXPECT_THROW(bad.validate(), Error);
    bad = ObjectiveConfig{};
    bad.lambda_a = -1;
    EXPECT_THROW(bad.validate(), Error);
}
