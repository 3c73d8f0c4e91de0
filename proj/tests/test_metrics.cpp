#include <gtest/gtest.h>

#include <clusteralign/metrics.hpp>

#include <random>

#include "oracles.hpp"

using namespace clusteralign;
using namespace clusteralign::metrics;

namespace {

LabelMap relabel(const LabelMap& y, const std::vector<int>& perm) {
    LabelMap out = y;
    for (auto& v : out.labels) {
        if (v != kIgnoreLabel) v = perm[static_cast<std::size_t>(v)];
    }
    return out;
}

}  // namespace

TEST(Miou, PerfectPredictionIsOne) {
    std::mt19937_64 rng(1);
    const auto y = oracle::random_labels(4, 4, 3, rng);
    EXPECT_DOUBLE_EQ(miou(std::vector{y}, std::vector{y}, 3).miou, 1.0);
}

TEST(Miou, HandBuiltThreeByThree) {
    const LabelMap truth(3, 3, std::vector<int>{0, 0, 1, 1, 1, 2, 2, 2, 2});
    const LabelMap pred(3, 3, std::vector<int>{0, 1, 1, 1, 1, 2, 2, 0, 2});
    ConfusionMatrix cm(3);
    cm.add(pred, truth);
    EXPECT_EQ(cm.at(0, 0), 1u);
    EXPECT_EQ(cm.at(0, 1), 1u);
    EXPECT_EQ(cm.at(1, 1), 3u);
    EXPECT_EQ(cm.at(2, 2), 3u);
    EXPECT_EQ(cm.at(2, 0), 1u);
    EXPECT_EQ(cm.total(), 9u);
    const auto r = iou_from_confusion(cm);
    EXPECT_NEAR(*r.per_class[0], 1.0 / 3, 1e-15);
    EXPECT_NEAR(*r.per_class[1], 3.0 / 4, 1e-15);
    EXPECT_NEAR(*r.per_class[2], 3.0 / 4, 1e-15);
    EXPECT_NEAR(r.miou, 11.0 / 18, 1e-15);
}

TEST(Miou, FlippedClassHasZeroIou) {
    const LabelMap truth(1, 4, std::vector<int>{0, 1, 1, 2});
    const LabelMap pred(1, 4, std::vector<int>{0, 2, 2, 2});
    const auto r = miou(std::vector{pred}, std::vector{truth}, 3);
    EXPECT_EQ(*r.per_class[1], 0.0);
}

TEST(Miou, AbsentClassesExcludedAndIgnoreUnscored) {
    const LabelMap truth(1, 3, std::vector<int>{0, 0, kIgnoreLabel});
    const LabelMap pred(1, 3, std::vector<int>{0, 0, 3});
    const auto r = miou(std::vector{pred}, std::vector{truth}, 4);
    EXPECT_FALSE(r.per_class[1].has_value());
    EXPECT_FALSE(r.per_class[3].has_value());
    EXPECT_DOUBLE_EQ(r.miou, 1.0);
}

TEST(Miou, OutOfRangeLabelsAndCountMismatchThrow) {
    const LabelMap y(1, 2, std::vector<int>{0, 3});
    EXPECT_THROW(miou(std::vector{y}, std::vector{y}, 3), Error);
    EXPECT_THROW(miou(std::vector{y, y}, std::vector{y}, 4), Error);
}

TEST(Miou, BoundedAndInvariantUnderRelabelling) {
    std::mt19937_64 rng(2);
    for (int t = 0; t < 100; ++t) {
        std::vector<LabelMap> preds, truths;
        for (int b = 0; b < 3; ++b) {
            preds.push_back(oracle::random_labels(4, 4, 4, rng));
            truths.push_back(oracle::random_labels(4, 4, 4, rng));
        }
        const double base = miou(preds, truths, 4).miou;
        EXPECT_GE(base, 0.0);
        EXPECT_LE(base, 1.0);
        std::vector<int> perm{0, 1, 2, 3};
        std::shuffle(perm.begin(), perm.end(), rng);
        for (auto& y : preds) y = relabel(y, perm);
        for (auto& y : truths) y = relabel(y, perm);
        EXPECT_NEAR(miou(preds, truths, 4).miou, base, 1e-12);
    }
}

TEST(Ccd, SameDomainGivesZero) {
    std::mt19937_64 rng(3);
    const Tensor f = oracle::random_tensor({4, 4, 3}, rng);
    const auto y = oracle::random_labels(4, 4, 3, rng);
    const auto r = ccd_from_features(std::vector{f}, std::vector{y}, std::vector{f}, std::vector{y}, 3);
    for (const auto& d : r.per_class) {
        if (d) {
            EXPECT_EQ(*d, 0.0);
        }
    }
    EXPECT_EQ(r.mean, 0.0);
}

TEST(Ccd, SelfNormalizationIsOne) {
    std::mt19937_64 rng(4);
    const Tensor fs = oracle::random_tensor({4, 4, 3}, rng), ft = oracle::random_tensor({4, 4, 3}, rng);
    const auto ys = oracle::random_labels(4, 4, 3, rng), yt = oracle::random_labels(4, 4, 3, rng);
    const auto r = ccd_from_features(std::vector{fs}, std::vector{ys}, std::vector{ft}, std::vector{yt}, 3);
    const auto n = normalize_ccd(r, r);
    for (const auto& v : n.normalized) {
        if (v) {
            EXPECT_DOUBLE_EQ(*v, 1.0);
        }
    }
    EXPECT_DOUBLE_EQ(n.normalized_mean, 1.0);
}

TEST(Ccd, HandComputedDistanceAndAbsentClassFlagged) {
    const Tensor fs({1, 2, 2}, {1, 0, 2, 0});
    const Tensor ft({1, 2, 2}, {3, 4, 2, 0});
    const LabelMap ys(1, 2, std::vector<int>{0, 1});
    const LabelMap yt(1, 2, std::vector<int>{0, 0});
    const auto r = ccd_from_features(std::vector{fs}, std::vector{ys}, std::vector{ft}, std::vector{yt}, 3);
    // Source mean of class 0 is (1, 0); target mean is (2.5, 2).
    EXPECT_NEAR(*r.per_class[0], 2.5, 1e-15);
    EXPECT_FALSE(r.per_class[1].has_value());
    EXPECT_EQ(r.flagged, (std::vector<std::size_t>{1, 2}));
    EXPECT_NEAR(r.mean, 2.5, 1e-15);
}

TEST(Ccd, SymmetricAndOrthogonallyInvariant) {
    std::mt19937_64 rng(5);
    for (int t = 0; t < 20; ++t) {
        const Tensor fs = oracle::random_tensor({4, 4, 2}, rng), ft = oracle::random_tensor({4, 4, 2}, rng);
        const auto ys = oracle::random_labels(4, 4, 3, rng), yt = oracle::random_labels(4, 4, 3, rng);
        const auto r = ccd_from_features(std::vector{fs}, std::vector{ys}, std::vector{ft}, std::vector{yt}, 3);
        const auto swapped = ccd_from_features(std::vector{ft}, std::vector{yt}, std::vector{fs}, std::vector{ys}, 3);
        EXPECT_NEAR(swapped.mean, r.mean, 1e-12);
        const double a = 0.3 + t;
        auto rotate = [a](Tensor f) {
            for (std::size_t i = 0; i < f.rows(); ++i) {
                const double x = f[2 * i], y = f[2 * i + 1];
                f[2 * i] = std::cos(a) * x - std::sin(a) * y;
                f[2 * i + 1] = std::sin(a) * x + std::cos(a) * y;
            }
            return f;
        };
        const auto rotated = ccd_from_features(std::vector{rotate(fs)}, std::vector{ys}, std::vector{rotate(ft)},
                                               std::vector{yt}, 3);
        for (std::size_t k = 0; k < 3; ++k) {
            ASSERT_EQ(rotated.per_class[k].has_value(), r.per_class[k].has_value());
            if (r.per_class[k]) {
                EXPECT_NEAR(*rotated.per_class[k], *r.per_class[k], 1e-12);
            }
        }
    }
}

TEST(Ccd, SegmenterVersionUsesExtractorFeatures) {
    const auto seg = model::Segmenter::random({4, 8, 6, 3}, 1);
    std::mt19937_64 rng(6);
    std::vector<data::Sample> samples;
    for (int i = 0; i < 2; ++i) samples.push_back({oracle::random_tensor({3, 3, 4}, rng), oracle::random_labels(3, 3, 3, rng)});
    EXPECT_EQ(ccd(seg, samples, samples, 3).mean, 0.0);
    EXPECT_THROW(ccd(seg, {}, samples, 3), Error);
}

TEST(Tables, IouTableUsesPercentages) {
    IouReport r;
    r.per_class = {0.5, std::nullopt, 0.25};
    r.miou = 0.375;
    EXPECT_EQ(iou_table_csv(r, {"road", "car"}, "full"), "method,road,car,class2,mIoU\nfull,50.0,,25.0,37.5\n");
}
