#ifndef CLUSTERALIGN_MODEL_HPP
#define CLUSTERALIGN_MODEL_HPP

#include <optional>
#include <random>
#include <string>
#include <vector>

#include "alignment.hpp"
#include "clustering.hpp"
#include "graphcut.hpp"
#include "label_map.hpp"
#include "numerics.hpp"

namespace clusteralign::model {

enum class ParamGroup { Extractor, Classifier };

struct Param {
    std::string name;
    Tensor value;
    ParamGroup group;
    bool is_bias;
};

struct ModelShape {
    std::size_t input_channels = 4;
    std::size_t hidden = 16;
    std::size_t features = 8;
    std::size_t classes = 5;

    friend bool operator==(const ModelShape&, const ModelShape&) = default;
};

/// Per-pixel segmenter G = C o F.
///   F: f = W2 tanh(W1 x + b1) + b2
///   C: p = softmax(Wc f + bc)
class Segmenter {
public:
    enum Index : std::size_t { W1, B1, W2, B2, WC, BC, kParamCount };

    Segmenter() = default;

    explicit Segmenter(const ModelShape& shape) : shape_(shape) {
        const auto& s = shape;
        params_ = {
            {"extractor.w1", Tensor({s.hidden, s.input_channels}), ParamGroup::Extractor, false},
            {"extractor.b1", Tensor({s.hidden}), ParamGroup::Extractor, true},
            {"extractor.w2", Tensor({s.features, s.hidden}), ParamGroup::Extractor, false},
            {"extractor.b2", Tensor({s.features}), ParamGroup::Extractor, true},
            {"classifier.w", Tensor({s.classes, s.features}), ParamGroup::Classifier, false},
            {"classifier.b", Tensor({s.classes}), ParamGroup::Classifier, true},
        };
    }

    /// Gaussian weights scaled by 1/sqrt(fan_in), small random biases.
    static Segmenter random(const ModelShape& shape, std::uint64_t seed) {
        Segmenter seg(shape);
        std::mt19937_64 rng(seed);
        std::normal_distribution<double> normal(0.0, 1.0);
        for (auto& p : seg.params_) {
            const double scale = p.is_bias ? 0.1 : 1.0 / std::sqrt(static_cast<double>(p.value.dim(1)));
            for (double& v : p.value.values()) v = normal(rng) * scale;
        }
        return seg;
    }

    /// hidden == features == input_channels; F is close to the identity for
    /// inputs of moderate magnitude (tanh is linear near 0).
    static Segmenter identity_like(std::size_t channels, std::size_t classes, double gain = 1e-3) {
        Segmenter seg(ModelShape{channels, channels, channels, classes});
        for (std::size_t i = 0; i < channels; ++i) {
            seg.params_[W1].value[i * channels + i] = gain;
            seg.params_[W2].value[i * channels + i] = 1.0 / gain;
        }
        return seg;
    }

    const ModelShape& shape() const { return shape_; }
    std::vector<Param>& params() { return params_; }
    const std::vector<Param>& params() const { return params_; }
    const Tensor& param(Index i) const { return params_[i].value; }
    Tensor& param(Index i) { return params_[i].value; }

    friend bool operator==(const Segmenter& a, const Segmenter& b) {
        if (!(a.shape_ == b.shape_) || a.params_.size() != b.params_.size()) return false;
        for (std::size_t i = 0; i < a.params_.size(); ++i) {
            if (!(a.params_[i].value == b.params_[i].value)) return false;
        }
        return true;
    }

private:
    ModelShape shape_;
    std::vector<Param> params_;
};

/// One gradient tensor per segmenter parameter, in parameter order.
using Gradients = std::vector<Tensor>;

inline Gradients zero_gradients(const Segmenter& seg) {
    Gradients g;
    for (const auto& p : seg.params()) g.emplace_back(p.value.shape());
    return g;
}

struct ForwardPass {
    Tensor hidden;     // h x w x hidden, post-tanh
    FeatureMap features;
    Tensor logits;
    ScoreMap scores;
};

inline ForwardPass forward(const Segmenter& seg, const Tensor& x) {
    const auto& s = seg.shape();
    if (x.rank() != 3 || x.dim(2) != s.input_channels) throw Error("input shape mismatch");
    const std::size_t h = x.dim(0), w = x.dim(1), n = h * w;
    ForwardPass out{Tensor({h, w, s.hidden}), Tensor({h, w, s.features}), Tensor({h, w, s.classes}),
                    Tensor({h, w, s.classes})};
    const auto& w1 = seg.param(Segmenter::W1);
    const auto& b1 = seg.param(Segmenter::B1);
    const auto& w2 = seg.param(Segmenter::W2);
    const auto& b2 = seg.param(Segmenter::B2);
    const auto& wc = seg.param(Segmenter::WC);
    const auto& bc = seg.param(Segmenter::BC);
    for (std::size_t i = 0; i < n; ++i) {
        const auto xi = x.row(i);
        auto hi = out.hidden.row(i);
        for (std::size_t a = 0; a < s.hidden; ++a) {
            hi[a] = std::tanh(b1[a] + dot(w1.row(a), xi));
        }
        auto fi = out.features.row(i);
        for (std::size_t a = 0; a < s.features; ++a) fi[a] = b2[a] + dot(w2.row(a), hi);
        auto zi = out.logits.row(i);
        for (std::size_t k = 0; k < s.classes; ++k) zi[k] = bc[k] + dot(wc.row(k), fi);
        const auto pi = softmax(zi);
        std::copy(pi.begin(), pi.end(), out.scores.row(i).begin());
    }
    return out;
}

/// Back-propagates dL/dlogits and an extra dL/dfeatures (may be empty) into
/// parameter gradients, accumulating into `grads`.
inline void backward(const Segmenter& seg, const Tensor& x, const ForwardPass& pass,
                     const Tensor& grad_logits, const Tensor* grad_features, Gradients& grads) {
    const auto& s = seg.shape();
    const std::size_t n = x.rows();
    const auto& w2 = seg.param(Segmenter::W2);
    const auto& wc = seg.param(Segmenter::WC);
    auto& gw1 = grads[Segmenter::W1];
    auto& gb1 = grads[Segmenter::B1];
    auto& gw2 = grads[Segmenter::W2];
    auto& gb2 = grads[Segmenter::B2];
    auto& gwc = grads[Segmenter::WC];
    auto& gbc = grads[Segmenter::BC];
    std::vector<double> gf(s.features), gh(s.hidden);
    for (std::size_t i = 0; i < n; ++i) {
        const auto gz = grad_logits.row(i);
        const auto fi = pass.features.row(i);
        const auto hi = pass.hidden.row(i);
        const auto xi = x.row(i);
        if (grad_features) {
            const auto extra = grad_features->row(i);
            std::copy(extra.begin(), extra.end(), gf.begin());
        } else {
            std::fill(gf.begin(), gf.end(), 0.0);
        }
        for (std::size_t k = 0; k < s.classes; ++k) {
            if (gz[k] == 0.0) continue;
            gbc[k] += gz[k];
            auto row = gwc.row(k);
            const auto wrow = wc.row(k);
            for (std::size_t a = 0; a < s.features; ++a) {
                row[a] += gz[k] * fi[a];
                gf[a] += gz[k] * wrow[a];
            }
        }
        std::fill(gh.begin(), gh.end(), 0.0);
        for (std::size_t a = 0; a < s.features; ++a) {
            if (gf[a] == 0.0) continue;
            gb2[a] += gf[a];
            auto row = gw2.row(a);
            const auto wrow = w2.row(a);
            for (std::size_t b = 0; b < s.hidden; ++b) {
                row[b] += gf[a] * hi[b];
                gh[b] += gf[a] * wrow[b];
            }
        }
        for (std::size_t b = 0; b < s.hidden; ++b) {
            const double gpre = gh[b] * (1.0 - hi[b] * hi[b]);
            if (gpre == 0.0) continue;
            gb1[b] += gpre;
            auto row = gw1.row(b);
            for (std::size_t c = 0; c < s.input_channels; ++c) row[c] += gpre * xi[c];
        }
    }
}

/// Softmax Jacobian: dL/dz = p * (dL/dp - <dL/dp, p>).
inline Tensor scores_gradient_to_logits(const ScoreMap& p, const Tensor& grad_p) {
    Tensor out(p.shape());
    for (std::size_t i = 0; i < p.rows(); ++i) {
        const auto pi = p.row(i);
        const auto gi = grad_p.row(i);
        const double inner = dot(pi, gi);
        auto oi = out.row(i);
        for (std::size_t k = 0; k < pi.size(); ++k) oi[k] = pi[k] * (gi[k] - inner);
    }
    return out;
}

struct SegmentationLoss {
    double value = 0.0;
    std::size_t scored = 0;
    /// dL/dlogits per map: (p - onehot) / scored.
    std::vector<Tensor> grad_logits;
};

/// Pixel-wise cross-entropy pooled over a batch; ignore pixels are unscored.
inline SegmentationLoss segmentation_loss(std::span<const ScoreMap> scores, std::span<const LabelMap> labels) {
    if (scores.size() != labels.size()) throw Error("score/label batch size mismatch");
    SegmentationLoss out;
    for (std::size_t b = 0; b < scores.size(); ++b) {
        require_same_grid(scores[b], labels[b]);
        labels[b].validate(scores[b].row_width());
        for (int v : labels[b].labels) out.scored += v != kIgnoreLabel;
    }
    if (out.scored == 0) throw Error("empty supervision");
    const double inv = 1.0 / static_cast<double>(out.scored);
    for (std::size_t b = 0; b < scores.size(); ++b) {
        Tensor g(scores[b].shape());
        for (std::size_t i = 0; i < labels[b].size(); ++i) {
            const int y = labels[b][i];
            if (y == kIgnoreLabel) continue;
            const auto pi = scores[b].row(i);
            out.value -= std::log(std::max(pi[y], kLogFloor)) * inv;
            auto gi = g.row(i);
            for (std::size_t k = 0; k < pi.size(); ++k) gi[k] = pi[k] * inv;
            gi[y] -= inv;
        }
        out.grad_logits.push_back(std::move(g));
    }
    return out;
}

/// Single-map form. Gradient keys: "logits" and "scores".
inline LossValue segmentation_loss(const ScoreMap& p, const LabelMap& y) {
    auto pooled = segmentation_loss(std::span<const ScoreMap>(&p, 1), std::span<const LabelMap>(&y, 1));
    LossValue out;
    out.value = pooled.value;
    Tensor grad_p(p.shape());
    const double inv = 1.0 / static_cast<double>(pooled.scored);
    for (std::size_t i = 0; i < y.size(); ++i) {
        if (y[i] == kIgnoreLabel) continue;
        grad_p.row(i)[y[i]] = -inv / std::max(p.row(i)[y[i]], kLogFloor);
    }
    out.gradients["logits"] = std::move(pooled.grad_logits.front());
    out.gradients["scores"] = std::move(grad_p);
    return out;
}

// ---------------------------------------------------------------------------
// Objective

struct ObjectiveConfig {
    double lambda_c = 0.0015;
    double lambda_a = 0.001;
    double lambda_n = 0.002;
    /// Multiplies all three loss weights. 1 keeps the weights as given.
    double lambda_scale = 1.0;
    double base_lr = 2.5e-4;
    double momentum = 0.9;
    double weight_decay = 1e-4;
    std::size_t warmup_iters = 2000;
    std::size_t adapt_iters = 2000;
    std::size_t max_iters = 4000;
    double poly_power = 0.9;
    std::size_t affinity_stride = 1;
    std::uint64_t seed = 0;

    std::size_t batch_size = 4;
    std::size_t prototype_cap = clustering::kDefaultPrototypeCandidateCap;
    /// Decay of the source-statistics moving average; 0 keeps them batch-local.
    double source_stats_ema = 0.0;

    void validate() const {
        if (lambda_c < 0 || lambda_a < 0 || lambda_n < 0) throw Error("loss weights must be nonnegative");
        if (!(lambda_scale >= 0.0) || !std::isfinite(lambda_scale)) throw Error("lambda_scale must be finite and nonnegative");
        if (!(base_lr > 0.0)) throw Error("base_lr must be positive");
        if (max_iters < warmup_iters + adapt_iters) throw Error("max_iters < warmup_iters + adapt_iters");
        if (affinity_stride == 0) throw Error("affinity_stride must be positive");
        if (batch_size == 0) throw Error("batch_size must be positive");
        if (source_stats_ema < 0.0 || source_stats_ema >= 1.0) throw Error("source_stats_ema must be in [0, 1)");
    }

    double weight_c() const { return lambda_c * lambda_scale; }
    double weight_a() const { return lambda_a * lambda_scale; }
    double weight_n() const { return lambda_n * lambda_scale; }

    friend bool operator==(const ObjectiveConfig&, const ObjectiveConfig&) = default;
};

/// Alternative weight assignment with lambda_c and lambda_a swapped.
inline ObjectiveConfig with_text_lambdas(ObjectiveConfig cfg) {
    cfg.lambda_c = 0.001;
    cfg.lambda_a = 0.0015;
    cfg.lambda_n = 0.002;
    return cfg;
}

/// Toy-task schedule: default weights scaled by 1000, a larger step size and
/// a short schedule.
inline ObjectiveConfig desk_scale_objective() {
    ObjectiveConfig cfg;
    cfg.lambda_scale = 1000.0;
    cfg.base_lr = 0.01;
    cfg.warmup_iters = 600;
    cfg.adapt_iters = 600;
    cfg.max_iters = 1200;
    cfg.batch_size = 2;
    cfg.affinity_stride = 2;
    return cfg;
}

struct LabeledBatch {
    std::vector<Tensor> inputs;
    std::vector<LabelMap> labels;
};

/// Everything the objective treats as a constant within one step: target
/// pseudo-labels, per-map prototypes and source cluster statistics.
struct AdaptationContext {
    std::vector<LabelMap> pseudo_labels;
    std::vector<clustering::PrototypeSet> prototypes;
    alignment::ClusterStats source_stats;
};

struct LossBreakdown {
    double seg = 0.0;
    double target_seg = 0.0;
    double c = 0.0;
    double a = 0.0;
    double n = 0.0;
    double total = 0.0;
    bool c_skipped = false;
    bool a_skipped = false;
    bool n_skipped = false;
};

struct ObjectiveResult {
    LossBreakdown losses;
    Gradients grads;
};

/// Which adaptation terms are evaluated. A disabled term is neither computed
/// nor differentiated; an enabled term with weight 0 is logged only.
struct TermMask {
    bool c = true;
    bool a = true;
    bool n = true;
};

inline AdaptationContext prepare_context(const Segmenter& seg, const LabeledBatch& source,
                                         std::span<const Tensor> target_inputs, const ObjectiveConfig& cfg,
                                         const alignment::ClusterStats* source_ema = nullptr) {
    const std::size_t K = seg.shape().classes;
    AdaptationContext ctx;
    std::vector<FeatureMap> source_features;
    for (const auto& x : source.inputs) source_features.push_back(forward(seg, x).features);
    ctx.source_stats = alignment::cluster_stats(source_features, source.labels, K);
    if (source_ema && cfg.source_stats_ema > 0.0) {
        ctx.source_stats = alignment::blend_stats(*source_ema, ctx.source_stats, cfg.source_stats_ema);
    }
    for (const auto& x : target_inputs) {
        const auto pass = forward(seg, x);
        ctx.pseudo_labels.push_back(clustering::pseudo_labels(pass.scores));
        ctx.prototypes.push_back(
            clustering::build_prototypes(pass.features, ctx.pseudo_labels.back(), K, cfg.prototype_cap));
    }
    return ctx;
}

/// Full objective with the context held fixed. Extractor parameters receive
/// d(L_seg + lc Lc + la La + ln Ln)/dF; classifier parameters receive
/// d(L_seg + ln Ln)/dC because Lc and La reach C only through the argmax.
/// `target_labels`, when given, adds a supervised target term (self-training).
inline ObjectiveResult evaluate_objective(const Segmenter& seg, const LabeledBatch& source,
                                          std::span<const Tensor> target_inputs, const AdaptationContext& ctx,
                                          const ObjectiveConfig& cfg, TermMask mask = {},
                                          std::span<const LabelMap> target_labels = {}) {
    if (source.inputs.empty() || target_inputs.empty()) throw Error("empty batch");
    ObjectiveResult out;
    out.grads = zero_gradients(seg);
    auto& L = out.losses;

    std::vector<ForwardPass> src_pass;
    std::vector<ScoreMap> src_scores;
    for (const auto& x : source.inputs) {
        src_pass.push_back(forward(seg, x));
        src_scores.push_back(src_pass.back().scores);
    }
    auto sup = segmentation_loss(src_scores, source.labels);
    L.seg = sup.value;
    for (std::size_t b = 0; b < source.inputs.size(); ++b) {
        backward(seg, source.inputs[b], src_pass[b], sup.grad_logits[b], nullptr, out.grads);
    }

    const std::size_t B = target_inputs.size();
    std::vector<ForwardPass> tgt_pass;
    std::vector<FeatureMap> tgt_features;
    for (const auto& x : target_inputs) {
        tgt_pass.push_back(forward(seg, x));
        tgt_features.push_back(tgt_pass.back().features);
    }
    std::vector<Tensor> grad_f, grad_p, grad_z;
    for (std::size_t b = 0; b < B; ++b) {
        grad_f.emplace_back(tgt_pass[b].features.shape());
        grad_p.emplace_back(tgt_pass[b].scores.shape());
        grad_z.emplace_back(tgt_pass[b].scores.shape());
    }
    auto add_scaled = [](Tensor& dst, const Tensor& src, double w) {
        for (std::size_t i = 0; i < dst.size(); ++i) dst[i] += w * src[i];
    };
    const double inv_b = 1.0 / static_cast<double>(B);

    if (!target_labels.empty()) {
        std::vector<ScoreMap> tgt_scores;
        for (const auto& p : tgt_pass) tgt_scores.push_back(p.scores);
        auto tsup = segmentation_loss(tgt_scores, target_labels);
        L.target_seg = tsup.value;
        for (std::size_t b = 0; b < B; ++b) add_scaled(grad_z[b], tsup.grad_logits[b], 1.0);
    }

    if (mask.c) {
        std::size_t used = 0;
        std::vector<std::optional<LossValue>> per_map(B);
        for (std::size_t b = 0; b < B; ++b) {
            if (ctx.prototypes[b].present_classes().empty()) continue;
            per_map[b] = clustering::clustering_loss(tgt_features[b], ctx.pseudo_labels[b], ctx.prototypes[b]);
            ++used;
        }
        L.c_skipped = used == 0;
        for (std::size_t b = 0; b < B; ++b) {
            if (!per_map[b]) continue;
            const double w = 1.0 / static_cast<double>(used);
            L.c += per_map[b]->value * w;
            add_scaled(grad_f[b], per_map[b]->gradient("features"), cfg.weight_c() * w);
        }
    }

    if (mask.a) {
        const auto target_stats = alignment::cluster_stats(tgt_features, ctx.pseudo_labels, seg.shape().classes);
        try {
            auto la = alignment::alignment_loss(target_stats, ctx.source_stats);
            L.a = la.value;
            auto per_map = alignment::mean_gradient_to_features(la.gradient("target_means"), target_stats,
                                                                tgt_features, ctx.pseudo_labels);
            for (std::size_t b = 0; b < B; ++b) add_scaled(grad_f[b], per_map[b], cfg.weight_a());
        } catch (const Error&) {
            L.a_skipped = true;
        }
    }

    if (mask.n) {
        for (std::size_t b = 0; b < B; ++b) {
            auto ln = graphcut::ncut_loss(tgt_pass[b].scores, tgt_features[b], cfg.affinity_stride);
            L.n += ln.value * inv_b;
            add_scaled(grad_f[b], ln.gradient("features"), cfg.weight_n() * inv_b);
            add_scaled(grad_p[b], ln.gradient("scores"), cfg.weight_n() * inv_b);
        }
    }

    for (std::size_t b = 0; b < B; ++b) {
        add_scaled(grad_z[b], scores_gradient_to_logits(tgt_pass[b].scores, grad_p[b]), 1.0);
        backward(seg, target_inputs[b], tgt_pass[b], grad_z[b], &grad_f[b], out.grads);
    }
    L.total = L.seg + L.target_seg + cfg.weight_c() * L.c + cfg.weight_a() * L.a + cfg.weight_n() * L.n;
    return out;
}

inline ObjectiveResult total_objective(const Segmenter& seg, const LabeledBatch& source,
                                       std::span<const Tensor> target_inputs, const ObjectiveConfig& cfg,
                                       TermMask mask = {}) {
    const auto ctx = prepare_context(seg, source, target_inputs, cfg);
    return evaluate_objective(seg, source, target_inputs, ctx, cfg, mask);
}

// ---------------------------------------------------------------------------
// Optimizer

/// base_lr * (1 - iter / max_iters)^power; `iter` may be fractional.
inline double poly_learning_rate(double base_lr, double iter, double max_iters, double power) {
    if (!(max_iters > 0.0) || iter >= max_iters) return 0.0;
    return base_lr * std::pow(1.0 - iter / max_iters, power);
}

struct SgdState {
    Gradients velocity;
};

/// Momentum SGD with decoupled weight decay on weights (biases exempt).
inline void sgd_step(Segmenter& seg, const Gradients& grads, SgdState& state, double lr, double momentum,
                     double weight_decay) {
    auto& params = seg.params();
    if (state.velocity.empty()) state.velocity = zero_gradients(seg);
    for (std::size_t p = 0; p < params.size(); ++p) {
        auto& value = params[p].value;
        auto& vel = state.velocity[p];
        const double decay = params[p].is_bias ? 0.0 : weight_decay;
        for (std::size_t i = 0; i < value.size(); ++i) {
            vel[i] = momentum * vel[i] + grads[p][i];
            value[i] -= lr * (vel[i] + decay * value[i]);
        }
    }
}

inline void sgd_step(Segmenter& seg, const Gradients& grads, SgdState& state, std::size_t iter,
                     const ObjectiveConfig& cfg) {
    if (iter >= cfg.max_iters) throw Error("iteration past schedule end");
    sgd_step(seg, grads, state, poly_learning_rate(cfg.base_lr, iter, cfg.max_iters, cfg.poly_power),
             cfg.momentum, cfg.weight_decay);
}

}  // namespace clusteralign::model

#endif  // CLUSTERALIGN_MODEL_HPP
