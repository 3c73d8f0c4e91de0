#ifndef CLUSTERALIGN_METRICS_HPP
#define CLUSTERALIGN_METRICS_HPP

#include <optional>
#include <string>
#include <vector>

#include "data.hpp"
#include "label_map.hpp"
#include "model.hpp"
#include "numerics.hpp"

namespace clusteralign::metrics {

/// counts[truth * K + prediction]
struct ConfusionMatrix {
    std::size_t num_classes = 0;
    std::vector<std::uint64_t> counts;

    explicit ConfusionMatrix(std::size_t K = 0) : num_classes(K), counts(K * K, 0) {}

    std::uint64_t at(std::size_t truth, std::size_t pred) const { return counts[truth * num_classes + pred]; }

    std::uint64_t total() const {
        std::uint64_t t = 0;
        for (auto c : counts) t += c;
        return t;
    }

    void add(const LabelMap& prediction, const LabelMap& truth) {
        if (prediction.height != truth.height || prediction.width != truth.width) {
            throw Error("prediction/truth shape mismatch");
        }
        for (std::size_t i = 0; i < truth.size(); ++i) {
            const int t = truth[i];
            const int p = prediction[i];
            if (t == kIgnoreLabel || p == kIgnoreLabel) continue;
            if (t < 0 || p < 0 || static_cast<std::size_t>(t) >= num_classes ||
                static_cast<std::size_t>(p) >= num_classes) {
                throw Error("label out of range for confusion matrix");
            }
            ++counts[static_cast<std::size_t>(t) * num_classes + static_cast<std::size_t>(p)];
        }
    }

    ConfusionMatrix& operator+=(const ConfusionMatrix& other) {
        if (other.num_classes != num_classes) throw Error("class count mismatch");
        for (std::size_t i = 0; i < counts.size(); ++i) counts[i] += other.counts[i];
        return *this;
    }
};

struct IouReport {
    /// Empty for classes absent from both truth and prediction.
    std::vector<std::optional<double>> per_class;
    double miou = 0.0;
};

inline IouReport iou_from_confusion(const ConfusionMatrix& cm) {
    const std::size_t K = cm.num_classes;
    IouReport r;
    r.per_class.resize(K);
    double sum = 0.0;
    std::size_t used = 0;
    for (std::size_t k = 0; k < K; ++k) {
        std::uint64_t tp = cm.at(k, k), fp = 0, fn = 0;
        for (std::size_t j = 0; j < K; ++j) {
            if (j == k) continue;
            fp += cm.at(j, k);
            fn += cm.at(k, j);
        }
        const std::uint64_t denom = tp + fp + fn;
        if (denom == 0) continue;
        r.per_class[k] = static_cast<double>(tp) / static_cast<double>(denom);
        sum += *r.per_class[k];
        ++used;
    }
    r.miou = used ? sum / static_cast<double>(used) : 0.0;
    return r;
}

inline IouReport miou(std::span<const LabelMap> predictions, std::span<const LabelMap> truths, std::size_t K) {
    if (predictions.size() != truths.size()) throw Error("prediction/truth count mismatch");
    ConfusionMatrix cm(K);
    for (std::size_t i = 0; i < truths.size(); ++i) cm.add(predictions[i], truths[i]);
    return iou_from_confusion(cm);
}

inline LabelMap predict(const model::Segmenter& seg, const Tensor& input) {
    return clustering::pseudo_labels(model::forward(seg, input).scores);
}

/// mIoU of a segmenter over labelled samples.
inline IouReport evaluate(const model::Segmenter& seg, const std::vector<data::Sample>& samples) {
    if (samples.empty()) throw Error("empty evaluation set");
    ConfusionMatrix cm(seg.shape().classes);
    for (const auto& s : samples) cm.add(predict(seg, s.input), s.label);
    return iou_from_confusion(cm);
}

// ---------------------------------------------------------------------------
// Cluster centre distance

struct CcdReport {
    /// Empty where the class is missing on either side.
    std::vector<std::optional<double>> per_class;
    double mean = 0.0;
    std::vector<std::size_t> flagged;
    /// Filled by normalize_ccd.
    std::vector<std::optional<double>> normalizer;
    std::vector<std::optional<double>> normalized;
    double normalized_mean = 0.0;
};

/// Per-class Euclidean distance between source and target class means of the
/// given features (ground-truth labels on both sides). With
/// `unit_means`, means are L2-normalized first.
inline CcdReport ccd_from_features(std::span<const FeatureMap> source, std::span<const LabelMap> source_labels,
                                   std::span<const FeatureMap> target, std::span<const LabelMap> target_labels,
                                   std::size_t K, bool unit_means = false) {
    const auto s = alignment::cluster_stats(source, source_labels, K);
    const auto t = alignment::cluster_stats(target, target_labels, K);
    CcdReport r;
    r.per_class.resize(K);
    double sum = 0.0;
    std::size_t used = 0;
    for (std::size_t k = 0; k < K; ++k) {
        if (!s.means[k] || !t.means[k]) {
            r.flagged.push_back(k);
            continue;
        }
        const auto& a = unit_means ? *s.normalized[k] : *s.means[k];
        const auto& b = unit_means ? *t.normalized[k] : *t.means[k];
        r.per_class[k] = euclidean_distance(a, b);
        sum += *r.per_class[k];
        ++used;
    }
    r.mean = used ? sum / static_cast<double>(used) : 0.0;
    return r;
}

inline CcdReport ccd(const model::Segmenter& seg, const std::vector<data::Sample>& source,
                     const std::vector<data::Sample>& target, std::size_t K, bool unit_means = false) {
    if (source.empty() || target.empty()) throw Error("empty dataset");
    auto features = [&seg](const std::vector<data::Sample>& samples, std::vector<FeatureMap>& maps,
                           std::vector<LabelMap>& labels) {
        for (const auto& s : samples) {
            maps.push_back(model::forward(seg, s.input).features);
            labels.push_back(s.label);
        }
    };
    std::vector<FeatureMap> sf, tf;
    std::vector<LabelMap> sl, tl;
    features(source, sf, sl);
    features(target, tf, tl);
    return ccd_from_features(sf, sl, tf, tl, K, unit_means);
}

/// Divides `report` by the per-class distances of a baseline (source-only) report.
inline CcdReport normalize_ccd(CcdReport report, const CcdReport& baseline) {
    const std::size_t K = report.per_class.size();
    if (baseline.per_class.size() != K) throw Error("class count mismatch");
    report.normalizer = baseline.per_class;
    report.normalized.assign(K, std::nullopt);
    double sum = 0.0;
    std::size_t used = 0;
    for (std::size_t k = 0; k < K; ++k) {
        if (!report.per_class[k] || !baseline.per_class[k] || !(*baseline.per_class[k] > 0.0)) continue;
        report.normalized[k] = *report.per_class[k] / *baseline.per_class[k];
        sum += *report.normalized[k];
        ++used;
    }
    report.normalized_mean = used ? sum / static_cast<double>(used) : 0.0;
    return report;
}

inline std::string optional_cell(const std::optional<double>& v) { return v ? format_double(*v) : ""; }

inline std::string ccd_to_csv(const CcdReport& r) {
    std::string out = "class,ccd,normalizer,normalized\n";
    for (std::size_t k = 0; k < r.per_class.size(); ++k) {
        out += std::to_string(k) + "," + optional_cell(r.per_class[k]) + "," +
               (k < r.normalizer.size() ? optional_cell(r.normalizer[k]) : "") + "," +
               (k < r.normalized.size() ? optional_cell(r.normalized[k]) : "") + "\n";
    }
    out += "mean," + format_double(r.mean) + ",," + format_double(r.normalized_mean) + "\n";
    return out;
}

/// One header row of class names plus mIoU, one value row, as in per-class
/// benchmark tables. Values are percentages with one decimal.
inline std::string iou_table_csv(const IouReport& r, const std::vector<std::string>& class_names,
                                 const std::string& row_name) {
    std::string header = "method";
    std::string row = row_name;
    auto pct = [](double v) {
        char buf[32];
        std::snprintf(buf, sizeof buf, "%.1f", 100.0 * v);
        return std::string(buf);
    };
    for (std::size_t k = 0; k < r.per_class.size(); ++k) {
        header += "," + (k < class_names.size() ? class_names[k] : "class" + std::to_string(k));
        row += "," + (r.per_class[k] ? pct(*r.per_class[k]) : std::string());
    }
    return header + ",mIoU\n" + row + "," + pct(r.miou) + "\n";
}

}  // namespace clusteralign::metrics

#endif  // CLUSTERALIGN_METRICS_HPP
