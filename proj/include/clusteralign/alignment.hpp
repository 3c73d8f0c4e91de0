#ifndef CLUSTERALIGN_ALIGNMENT_HPP
#define CLUSTERALIGN_ALIGNMENT_HPP

#include <optional>
#include <string>
#include <vector>

#include "label_map.hpp"
#include "numerics.hpp"
#include "tensor_io.hpp"

/// Per-class first-order cluster statistics and the contrastive cluster
/// alignment loss between target and source clusters.
namespace clusteralign::alignment {

struct ClusterStats {
    std::vector<std::optional<std::vector<double>>> means;
    std::vector<std::optional<std::vector<double>>> normalized;
    std::vector<std::size_t> counts;
    /// Classes whose mean collapsed to zero norm; they are reported absent.
    std::vector<std::size_t> degenerate;

    std::size_t num_classes() const { return means.size(); }
    bool present(std::size_t k) const { return normalized[k].has_value(); }
};

namespace detail {

inline ClusterStats finalize(std::vector<std::vector<double>> sums, std::vector<std::size_t> counts) {
    const std::size_t K = sums.size();
    ClusterStats stats;
    stats.means.resize(K);
    stats.normalized.resize(K);
    stats.counts = std::move(counts);
    for (std::size_t k = 0; k < K; ++k) {
        if (stats.counts[k] == 0) continue;
        auto mean = std::move(sums[k]);
        for (double& v : mean) v /= static_cast<double>(stats.counts[k]);
        if (!(l2_norm(mean) > kNormEpsilon)) {
            stats.degenerate.push_back(k);
            continue;
        }
        stats.normalized[k] = l2_normalize(mean);
        stats.means[k] = std::move(mean);
    }
    return stats;
}

}  // namespace detail

/// Class means pooled over every (feature map, label map) pair.
inline ClusterStats cluster_stats(std::span<const FeatureMap> maps, std::span<const LabelMap> labels,
                                  std::size_t num_classes) {
    if (maps.size() != labels.size()) throw Error("feature/label batch size mismatch");
    if (maps.empty()) throw Error("empty batch");
    const std::size_t c = maps.front().row_width();
    std::vector<std::vector<double>> sums(num_classes, std::vector<double>(c, 0.0));
    std::vector<std::size_t> counts(num_classes, 0);
    for (std::size_t b = 0; b < maps.size(); ++b) {
        require_same_grid(maps[b], labels[b]);
        if (maps[b].row_width() != c) throw Error("channel mismatch within batch");
        for (std::size_t i = 0; i < labels[b].size(); ++i) {
            const int k = labels[b][i];
            if (k == kIgnoreLabel) continue;
            if (k < 0 || static_cast<std::size_t>(k) >= num_classes) throw Error("label out of range");
            const auto row = maps[b].row(i);
            for (std::size_t j = 0; j < c; ++j) sums[k][j] += row[j];
            ++counts[k];
        }
    }
    return detail::finalize(std::move(sums), std::move(counts));
}

inline ClusterStats cluster_stats(const FeatureMap& f, const LabelMap& y, std::size_t num_classes) {
    return cluster_stats(std::span<const FeatureMap>(&f, 1), std::span<const LabelMap>(&y, 1),
                         num_classes);
}

/// Exponential moving average of class means: decay * previous + (1 - decay) * current.
/// Classes missing from one side take the other side's mean.
inline ClusterStats blend_stats(const ClusterStats& previous, const ClusterStats& current, double decay) {
    const std::size_t K = current.num_classes();
    if (previous.num_classes() != K) throw Error("class count mismatch");
    std::vector<std::vector<double>> sums(K);
    std::vector<std::size_t> counts(K, 0);
    for (std::size_t k = 0; k < K; ++k) {
        const auto& a = previous.means[k];
        const auto& b = current.means[k];
        if (!a && !b) continue;
        counts[k] = previous.counts[k] + current.counts[k];
        sums[k] = a ? *a : *b;
        if (a && b) {
            for (std::size_t j = 0; j < sums[k].size(); ++j) sums[k][j] = decay * (*a)[j] + (1.0 - decay) * (*b)[j];
        }
        // finalize() divides by the count.
        for (double& v : sums[k]) v *= static_cast<double>(counts[k]);
    }
    return detail::finalize(std::move(sums), std::move(counts));
}

/// Contrastive alignment loss over the classes present in both stats.
/// Source statistics are constants. Gradient key "target_means" is a
/// K x c tensor of dL/du_t^k (zero rows for classes outside the intersection).
inline LossValue alignment_loss(const ClusterStats& target, const ClusterStats& source) {
    const std::size_t K = target.num_classes();
    if (source.num_classes() != K) throw Error("class count mismatch");
    std::vector<std::size_t> shared;
    for (std::size_t k = 0; k < K; ++k) {
        if (target.present(k) && source.present(k)) shared.push_back(k);
    }
    if (shared.empty()) throw Error("no alignable classes");
    const std::size_t c = target.normalized[shared.front()]->size();
    const std::size_t n = shared.size();
    const double inv_n = 1.0 / static_cast<double>(n);

    LossValue out;
    out.skipped = K - n;
    Tensor grad({K, c});
    std::vector<double> neg_dist(n);
    std::vector<double> grad_unit(c);
    for (std::size_t a = 0; a < n; ++a) {
        const auto& ut = *target.normalized[shared[a]];
        for (std::size_t b = 0; b < n; ++b) {
            neg_dist[b] = -euclidean_distance(ut, *source.normalized[shared[b]]);
        }
        out.value += (log_sum_exp(neg_dist) - neg_dist[a]) * inv_n;
        const auto q = softmax(neg_dist);

        // dL/dU_t = sum_b (1{b==a} - q_b)/n * (U_t - U_s^b)/D_ab
        std::fill(grad_unit.begin(), grad_unit.end(), 0.0);
        for (std::size_t b = 0; b < n; ++b) {
            const double dist = -neg_dist[b];
            if (dist <= 0.0) continue;
            const double w = ((b == a ? 1.0 : 0.0) - q[b]) * inv_n / dist;
            const auto& us = *source.normalized[shared[b]];
            for (std::size_t j = 0; j < c; ++j) grad_unit[j] += w * (ut[j] - us[j]);
        }
        // Through U = u/|u|: (I - U U^T) g / |u|
        const auto& mean = *target.means[shared[a]];
        const double norm = l2_norm(mean);
        const double along = dot(ut, grad_unit);
        auto row = grad.row(shared[a]);
        for (std::size_t j = 0; j < c; ++j) row[j] = (grad_unit[j] - along * ut[j]) / norm;
    }
    out.gradients["target_means"] = std::move(grad);
    return out;
}

/// Chains dL/du^k back to the pixel features that were averaged into u^k.
inline std::vector<Tensor> mean_gradient_to_features(const Tensor& grad_means, const ClusterStats& stats,
                                                     std::span<const FeatureMap> maps,
                                                     std::span<const LabelMap> labels) {
    std::vector<Tensor> out;
    out.reserve(maps.size());
    for (std::size_t b = 0; b < maps.size(); ++b) {
        Tensor g(maps[b].shape());
        for (std::size_t i = 0; i < labels[b].size(); ++i) {
            const int k = labels[b][i];
            if (k == kIgnoreLabel || stats.counts[k] == 0) continue;
            const auto src = grad_means.row(static_cast<std::size_t>(k));
            auto dst = g.row(i);
            const double inv = 1.0 / static_cast<double>(stats.counts[k]);
            for (std::size_t j = 0; j < dst.size(); ++j) dst[j] = src[j] * inv;
        }
        out.push_back(std::move(g));
    }
    return out;
}

/// Alignment loss of target features under pseudo-labels against constant
/// source statistics. Gradient key "features" for a single map.
inline LossValue alignment_loss(const FeatureMap& f_t, const LabelMap& y_hat, const ClusterStats& source) {
    const auto target = cluster_stats(f_t, y_hat, source.num_classes());
    auto loss = alignment_loss(target, source);
    auto grads = mean_gradient_to_features(loss.gradient("target_means"), target,
                                           std::span<const FeatureMap>(&f_t, 1),
                                           std::span<const LabelMap>(&y_hat, 1));
    loss.gradients["features"] = std::move(grads.front());
    return loss;
}

/// One row per class: k,count,u_0..u_{c-1},U_0..U_{c-1}. Absent classes have empty cells.
inline std::string stats_to_csv(const ClusterStats& stats) {
    std::size_t c = 0;
    for (const auto& m : stats.means) {
        if (m) c = m->size();
    }
    std::string out = "k,count";
    for (std::size_t j = 0; j < c; ++j) out += ",u" + std::to_string(j);
    for (std::size_t j = 0; j < c; ++j) out += ",U" + std::to_string(j);
    out += '\n';
    for (std::size_t k = 0; k < stats.num_classes(); ++k) {
        out += std::to_string(k) + "," + std::to_string(stats.counts[k]);
        for (std::size_t j = 0; j < c; ++j) {
            out += ",";
            if (stats.means[k]) out += format_double((*stats.means[k])[j]);
        }
        for (std::size_t j = 0; j < c; ++j) {
            out += ",";
            if (stats.normalized[k]) out += format_double((*stats.normalized[k])[j]);
        }
        out += '\n';
    }
    return out;
}

}  // namespace clusteralign::alignment

#endif  // CLUSTERALIGN_ALIGNMENT_HPP
