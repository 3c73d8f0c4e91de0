#ifndef CLUSTERALIGN_CLUSTERING_HPP
#define CLUSTERALIGN_CLUSTERING_HPP

#include <optional>
#include <vector>

#include "label_map.hpp"
#include "numerics.hpp"

/// Target-domain prototype clustering: pseudo-labels, per-class prototype
/// selection and the prototype clustering loss.
namespace clusteralign::clustering {

/// Per-pixel argmax over classes; ties go to the lowest class index.
inline LabelMap pseudo_labels(const ScoreMap& scores) {
    if (scores.rank() != 3) throw Error("score map must be h x w x K");
    LabelMap y(scores.dim(0), scores.dim(1));
    for (std::size_t i = 0; i < scores.rows(); ++i) {
        const auto row = scores.row(i);
        y[i] = static_cast<int>(std::max_element(row.begin(), row.end()) - row.begin());
    }
    return y;
}

struct ClassFeatures {
    std::vector<std::vector<double>> features;
    /// Flat row-major pixel index of each feature.
    std::vector<std::size_t> pixels;
};

/// Features of every pixel labelled `k`, in row-major pixel order.
inline ClassFeatures select_class_features(const FeatureMap& f, const LabelMap& y, int k,
                                           std::size_t num_classes) {
    require_same_grid(f, y);
    if (k < 0 || static_cast<std::size_t>(k) >= num_classes) throw Error("class out of range");
    ClassFeatures out;
    for (std::size_t i = 0; i < y.size(); ++i) {
        if (y[i] != k) continue;
        const auto row = f.row(i);
        out.features.emplace_back(row.begin(), row.end());
        out.pixels.push_back(i);
    }
    return out;
}

struct PrototypeChoice {
    std::size_t index = 0;
    std::vector<double> prototype;
};

/// Scores closer than this (relative) are treated as tied.
inline constexpr double kPrototypeTieTolerance = 1e-12;

/// Picks the member with the largest summed cosine similarity to all members
/// (itself included). Lowest index wins ties.
///
/// The summed similarity of member m equals dot(unit(b_m), sum of unit
/// vectors), so the scan is linear in the member count.
inline PrototypeChoice select_prototype(const std::vector<std::vector<double>>& features) {
    if (features.empty()) throw Error("absent class");
    const std::size_t c = features.front().size();
    std::vector<std::vector<double>> units;
    units.reserve(features.size());
    std::vector<double> direction_sum(c, 0.0);
    for (const auto& b : features) {
        if (b.size() != c) throw Error("length mismatch");
        const double n = l2_norm(b);
        if (!(n > kNormEpsilon)) throw Error("degenerate feature");
        auto& u = units.emplace_back(b);
        for (std::size_t j = 0; j < c; ++j) {
            u[j] /= n;
            direction_sum[j] += u[j];
        }
    }
    std::size_t best = 0;
    double best_score = -std::numeric_limits<double>::infinity();
    for (std::size_t m = 0; m < units.size(); ++m) {
        const double score = dot(units[m], direction_sum);
        if (m == 0 || score > best_score + kPrototypeTieTolerance * std::max(1.0, std::abs(best_score))) {
            best_score = score;
            best = m;
        }
    }
    return {best, features[best]};
}

/// K optional prototypes, each a copy of the feature at `source_index`.
struct PrototypeSet {
    std::vector<std::optional<std::vector<double>>> prototypes;
    std::vector<std::optional<std::size_t>> source_index;

    std::size_t num_classes() const { return prototypes.size(); }
    bool present(std::size_t k) const { return prototypes[k].has_value(); }
    std::vector<std::size_t> present_classes() const {
        std::vector<std::size_t> out;
        for (std::size_t k = 0; k < prototypes.size(); ++k) {
            if (present(k)) out.push_back(k);
        }
        return out;
    }
};

inline constexpr std::size_t kDefaultPrototypeCandidateCap = 512;

/// Evenly spaced subsample of at most `cap` members (cap == 0 keeps all).
inline ClassFeatures subsample_members(ClassFeatures members, std::size_t cap) {
    const std::size_t m = members.features.size();
    if (cap == 0 || m <= cap) return members;
    ClassFeatures out;
    for (std::size_t j = 0; j < cap; ++j) {
        const std::size_t src = j * m / cap;
        out.features.push_back(std::move(members.features[src]));
        out.pixels.push_back(members.pixels[src]);
    }
    return out;
}

/// One prototype per class with at least one non-degenerate member. Zero-norm
/// features are dropped from the candidate list.
inline PrototypeSet build_prototypes(const FeatureMap& f, const LabelMap& y,
                                     std::size_t num_classes,
                                     std::size_t candidate_cap = kDefaultPrototypeCandidateCap) {
    PrototypeSet set;
    set.prototypes.resize(num_classes);
    set.source_index.resize(num_classes);
    for (std::size_t k = 0; k < num_classes; ++k) {
        auto members = select_class_features(f, y, static_cast<int>(k), num_classes);
        ClassFeatures usable;
        for (std::size_t m = 0; m < members.features.size(); ++m) {
            if (l2_norm(members.features[m]) > kNormEpsilon) {
                usable.features.push_back(std::move(members.features[m]));
                usable.pixels.push_back(members.pixels[m]);
            }
        }
        if (usable.features.empty()) continue;
        usable = subsample_members(std::move(usable), candidate_cap);
        auto choice = select_prototype(usable.features);
        set.source_index[k] = usable.pixels[choice.index];
        set.prototypes[k] = std::move(choice.prototype);
    }
    return set;
}

struct PrototypeProbability {
    std::vector<std::size_t> classes;
    std::vector<double> probabilities;
};

/// Softmax over present classes of cos(feature, prototype).
inline PrototypeProbability prototype_probability(std::span<const double> feature,
                                                  const PrototypeSet& prototypes) {
    PrototypeProbability out;
    out.classes = prototypes.present_classes();
    if (out.classes.empty()) throw Error("no prototypes");
    std::vector<double> sims;
    for (std::size_t k : out.classes) sims.push_back(cosine_similarity(feature, *prototypes.prototypes[k]));
    out.probabilities = softmax(sims);
    return out;
}

/// Prototype clustering loss: mean over scored pixels of -log p(y = label | f).
/// Prototypes are constants. Pixels whose label has no prototype are skipped
/// and counted in LossValue::skipped. Gradient key: "features".
inline LossValue clustering_loss(const FeatureMap& f, const LabelMap& y_hat,
                                 const PrototypeSet& prototypes) {
    require_same_grid(f, y_hat);
    const auto classes = prototypes.present_classes();
    if (classes.empty()) throw Error("no prototypes");
    std::vector<int> slot(prototypes.num_classes(), -1);
    for (std::size_t s = 0; s < classes.size(); ++s) slot[classes[s]] = static_cast<int>(s);

    LossValue out;
    Tensor grad(f.shape());
    std::vector<std::size_t> scored;
    for (std::size_t i = 0; i < y_hat.size(); ++i) {
        const int k = y_hat[i];
        if (k == kIgnoreLabel) continue;
        if (k < 0 || static_cast<std::size_t>(k) >= slot.size() || slot[k] < 0) {
            ++out.skipped;
            continue;
        }
        scored.push_back(i);
    }
    if (scored.empty()) {
        out.gradients["features"] = std::move(grad);
        return out;
    }
    const double inv_count = 1.0 / static_cast<double>(scored.size());
    std::vector<double> sims(classes.size());
    for (std::size_t i : scored) {
        const auto fi = f.row(i);
        for (std::size_t s = 0; s < classes.size(); ++s) {
            sims[s] = cosine_similarity(fi, *prototypes.prototypes[classes[s]]);
        }
        const auto p = softmax(sims);
        const std::size_t target = static_cast<std::size_t>(slot[y_hat[i]]);
        out.value -= std::log(std::max(p[target], kLogFloor)) * inv_count;
        auto gi = grad.row(i);
        for (std::size_t s = 0; s < classes.size(); ++s) {
            const double dlogit = (p[s] - (s == target ? 1.0 : 0.0)) * inv_count;
            accumulate_cosine_gradient(fi, *prototypes.prototypes[classes[s]], dlogit, gi);
        }
    }
    out.gradients["features"] = std::move(grad);
    return out;
}

}  // namespace clusteralign::clustering

#endif  // CLUSTERALIGN_CLUSTERING_HPP
