#ifndef CLUSTERALIGN_GRADCHECK_HPP
#define CLUSTERALIGN_GRADCHECK_HPP

#include <chrono>
#include <random>
#include <string>
#include <vector>

#include "alignment.hpp"
#include "clustering.hpp"
#include "graphcut.hpp"
#include "model.hpp"
#include "numerics.hpp"

namespace clusteralign::gradcheck {

inline constexpr double kTolerance = 1e-4;
inline constexpr double kStep = 1e-5;
inline constexpr std::size_t kProbes = 100;

struct CheckResult {
    std::string name;
    std::size_t instances = 0;
    std::size_t probes = 0;
    double max_error = 0.0;

    bool passed() const { return instances > 0 && max_error < kTolerance; }
};

struct SuiteOptions {
    std::size_t instances = 20;
    std::uint64_t seed = 0;
};

struct SuiteReport {
    std::vector<CheckResult> checks;
    double seconds = 0.0;

    bool passed() const {
        for (const auto& c : checks) {
            if (!c.passed()) return false;
        }
        return !checks.empty();
    }
};

namespace detail {

struct Dims {
    std::size_t h, w, c, K;
};

/// h, w in [2, 4], c in [2, 8], K in [2, 4].
inline Dims random_dims(std::mt19937_64& rng) {
    std::uniform_int_distribution<std::size_t> side(2, 4), feat(2, 8), classes(2, 4);
    return {side(rng), side(rng), feat(rng), classes(rng)};
}

inline Tensor random_tensor(std::vector<std::size_t> shape, std::mt19937_64& rng, double scale = 1.0) {
    Tensor t(std::move(shape));
    std::normal_distribution<double> normal(0.0, scale);
    for (double& v : t.values()) v = normal(rng);
    return t;
}

inline LabelMap random_labels(std::size_t h, std::size_t w, std::size_t K, std::mt19937_64& rng,
                              double ignore_rate = 0.0) {
    LabelMap y(h, w);
    std::uniform_int_distribution<int> cls(0, static_cast<int>(K) - 1);
    std::bernoulli_distribution ignore(ignore_rate);
    for (auto& v : y.labels) v = ignore(rng) ? kIgnoreLabel : cls(rng);
    return y;
}

/// Random simplex rows from scaled Gaussian logits.
inline ScoreMap random_scores(std::size_t h, std::size_t w, std::size_t K, std::mt19937_64& rng) {
    ScoreMap p = random_tensor({h, w, K}, rng, 2.0);
    for (std::size_t i = 0; i < p.rows(); ++i) {
        auto row = p.row(i);
        const auto s = softmax(row);
        std::copy(s.begin(), s.end(), row.begin());
    }
    return p;
}

inline ScoreMap row_softmax(const Tensor& z) {
    ScoreMap p(z.shape());
    for (std::size_t i = 0; i < z.rows(); ++i) {
        const auto s = softmax(z.row(i));
        std::copy(s.begin(), s.end(), p.row(i).begin());
    }
    return p;
}

inline void record(CheckResult& r, const GradientCheckReport& g, std::size_t input) {
    r.max_error = std::max(r.max_error, g.max_relative_error[input]);
    ++r.instances;
}

}  // namespace detail

inline CheckResult check_segmentation(const SuiteOptions& opt) {
    CheckResult r{"L_seg (logits)"};
    std::mt19937_64 rng(opt.seed ^ 0x5e9ULL);
    for (std::size_t t = 0; t < opt.instances; ++t) {
        const auto d = detail::random_dims(rng);
        const Tensor z = detail::random_tensor({d.h, d.w, d.K}, rng, 2.0);
        LabelMap y = detail::random_labels(d.h, d.w, d.K, rng, 0.2);
        y[0] = 0;
        const auto lv = model::segmentation_loss(detail::row_softmax(z), y);
        const auto rep = finite_difference_check(
            [&](const std::vector<Tensor>& in) { return model::segmentation_loss(detail::row_softmax(in[0]), y).value; },
            {z}, {lv.gradient("logits")}, kStep, kProbes, opt.seed + t);
        r.probes += rep.probes_evaluated;
        detail::record(r, rep, 0);
    }
    return r;
}

inline CheckResult check_clustering(const SuiteOptions& opt) {
    CheckResult r{"L_c (features)"};
    std::mt19937_64 rng(opt.seed ^ 0xc1ULL);
    for (std::size_t t = 0; t < opt.instances; ++t) {
        const auto d = detail::random_dims(rng);
        const FeatureMap f = detail::random_tensor({d.h, d.w, d.c}, rng);
        const LabelMap y = detail::random_labels(d.h, d.w, d.K, rng, 0.1);
        const auto protos = clustering::build_prototypes(f, y, d.K);
        if (protos.present_classes().empty()) {
            --t;
            continue;
        }
        const auto lv = clustering::clustering_loss(f, y, protos);
        const auto rep = finite_difference_check(
            [&](const std::vector<Tensor>& in) { return clustering::clustering_loss(in[0], y, protos).value; }, {f},
            {lv.gradient("features")}, kStep, kProbes, opt.seed + t);
        r.probes += rep.probes_evaluated;
        detail::record(r, rep, 0);
    }
    return r;
}

inline CheckResult check_alignment(const SuiteOptions& opt) {
    CheckResult r{"L_a (features)"};
    std::mt19937_64 rng(opt.seed ^ 0xa1ULL);
    for (std::size_t t = 0; t < opt.instances; ++t) {
        const auto d = detail::random_dims(rng);
        const FeatureMap fs = detail::random_tensor({d.h, d.w, d.c}, rng);
        const FeatureMap ft = detail::random_tensor({d.h, d.w, d.c}, rng);
        const auto source = alignment::cluster_stats(fs, detail::random_labels(d.h, d.w, d.K, rng), d.K);
        const LabelMap y = detail::random_labels(d.h, d.w, d.K, rng, 0.1);
        LossValue lv;
        try {
            lv = alignment::alignment_loss(ft, y, source);
        } catch (const Error&) {
            --t;
            continue;
        }
        const auto rep = finite_difference_check(
            [&](const std::vector<Tensor>& in) { return alignment::alignment_loss(in[0], y, source).value; }, {ft},
            {lv.gradient("features")}, kStep, kProbes, opt.seed + t);
        r.probes += rep.probes_evaluated;
        detail::record(r, rep, 0);
    }
    return r;
}

/// Both L_n inputs; returns {scores check, features check}.
inline std::pair<CheckResult, CheckResult> check_ncut(const SuiteOptions& opt) {
    CheckResult rp{"L_n (scores)"}, rf{"L_n (features)"};
    std::mt19937_64 rng(opt.seed ^ 0x9cULL);
    for (std::size_t t = 0; t < opt.instances; ++t) {
        const auto d = detail::random_dims(rng);
        const std::size_t stride = 1 + t % 2;
        const FeatureMap f = detail::random_tensor({d.h, d.w, d.c}, rng);
        const ScoreMap p = detail::random_scores(d.h, d.w, d.K, rng);
        const auto lv = graphcut::ncut_loss(p, f, stride);
        const auto rep = finite_difference_check(
            [&](const std::vector<Tensor>& in) { return graphcut::ncut_loss(in[0], in[1], stride).value; }, {p, f},
            {lv.gradient("scores"), lv.gradient("features")}, kStep, kProbes, opt.seed + t);
        rp.probes += rep.probes_evaluated;
        rf.probes += rep.probes_evaluated;
        detail::record(rp, rep, 0);
        detail::record(rf, rep, 1);
    }
    return {rp, rf};
}

/// Parameter gradients of the assembled objective with the adaptation context
/// frozen. Extractor parameters are checked against the full scalar, the
/// classifier against L_seg + lambda_n L_n only.
inline std::pair<CheckResult, CheckResult> check_routed(const SuiteOptions& opt) {
    CheckResult re{"routed extractor"}, rc{"routed classifier"};
    std::mt19937_64 rng(opt.seed ^ 0x70ULL);
    std::uniform_real_distribution<double> weight(0.2, 1.5);
    for (std::size_t t = 0; t < opt.instances; ++t) {
        const auto d = detail::random_dims(rng);
        const model::ModelShape shape{3, 6, d.c, d.K};
        const auto seg = model::Segmenter::random(shape, opt.seed * 7919 + t);
        model::LabeledBatch source;
        std::vector<Tensor> target;
        for (std::size_t b = 0; b < 2; ++b) {
            source.inputs.push_back(detail::random_tensor({4, 4, 3}, rng, 1.5));
            source.labels.push_back(detail::random_labels(4, 4, d.K, rng));
            target.push_back(detail::random_tensor({4, 4, 3}, rng, 1.5));
        }
        model::ObjectiveConfig cfg;
        cfg.lambda_c = weight(rng);
        cfg.lambda_a = weight(rng);
        cfg.lambda_n = weight(rng);
        cfg.affinity_stride = 1 + t % 2;
        const auto ctx = model::prepare_context(seg, source, target, cfg);
        const auto analytic = model::evaluate_objective(seg, source, target, ctx, cfg).grads;

        std::vector<Tensor> params;
        for (const auto& p : seg.params()) params.push_back(p.value);
        auto rebuild = [&](const std::vector<Tensor>& in) {
            model::Segmenter s = seg;
            for (std::size_t i = 0; i < in.size(); ++i) s.params()[i].value = in[i];
            return model::evaluate_objective(s, source, target, ctx, cfg).losses;
        };
        const auto ext = finite_difference_check([&](const std::vector<Tensor>& in) { return rebuild(in).total; },
                                                 params, analytic, kStep, kProbes, opt.seed + t);
        const auto cls = finite_difference_check(
            [&](const std::vector<Tensor>& in) {
                const auto L = rebuild(in);
                return L.seg + L.target_seg + cfg.weight_n() * L.n;
            },
            params, analytic, kStep, kProbes, opt.seed + t);
        double e = 0.0, c = 0.0;
        for (std::size_t i = 0; i < params.size(); ++i) {
            if (seg.params()[i].group == model::ParamGroup::Extractor) {
                e = std::max(e, ext.max_relative_error[i]);
            } else {
                c = std::max(c, cls.max_relative_error[i]);
            }
        }
        re.max_error = std::max(re.max_error, e);
        rc.max_error = std::max(rc.max_error, c);
        re.probes += ext.probes_evaluated;
        rc.probes += cls.probes_evaluated;
        ++re.instances;
        ++rc.instances;
    }
    return {re, rc};
}

inline SuiteReport run_suite(const SuiteOptions& opt = {}) {
    const auto start = std::chrono::steady_clock::now();
    SuiteReport report;
    report.checks.push_back(check_segmentation(opt));
    report.checks.push_back(check_clustering(opt));
    report.checks.push_back(check_alignment(opt));
    auto [np, nf] = check_ncut(opt);
    report.checks.push_back(np);
    report.checks.push_back(nf);
    auto [re, rc] = check_routed(opt);
    report.checks.push_back(re);
    report.checks.push_back(rc);
    report.seconds = std::chrono::duration<double>(std::chrono::steady_clock::now() - start).count();
    return report;
}

}  // namespace clusteralign::gradcheck

#endif  // CLUSTERALIGN_GRADCHECK_HPP
