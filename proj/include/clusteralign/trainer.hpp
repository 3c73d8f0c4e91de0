#ifndef CLUSTERALIGN_TRAINER_HPP
#define CLUSTERALIGN_TRAINER_HPP

#include <nlohmann/json.hpp>

#include <filesystem>
#include <optional>
#include <random>
#include <string>
#include <vector>

#include "data.hpp"
#include "hashing.hpp"
#include "metrics.hpp"
#include "model.hpp"
#include "tensor_io.hpp"

namespace clusteralign::trainer {

/// Training inputs. Target samples carry no labels; the labelled validation
/// draw is consulted only for the val_mIoU column.
struct TrainData {
    std::vector<data::Sample> source;
    std::vector<data::TargetImage> target;
    std::vector<data::Sample> validation;
};

struct TrainOptions {
    model::ObjectiveConfig objective;
    model::ModelShape shape;
    model::TermMask terms;
};

struct LogRow {
    std::size_t iter = 0;
    double lr = 0.0;
    double seg = 0.0;
    std::optional<double> c, a, n;
    double total = 0.0;
    std::optional<double> val_miou;
    bool adaptation = false;
};

struct EpochSummary {
    std::size_t epoch = 0;
    double c = 0.0, a = 0.0, n = 0.0, total = 0.0;
    std::optional<double> val_miou;
};

struct TrainResult {
    model::Segmenter segmenter;
    std::vector<LogRow> log;
    /// Adaptation-phase epochs (one epoch = one pass over the target set).
    std::vector<EpochSummary> epochs;
    std::optional<double> warmup_val_miou;
};

class TrainingAbort : public Error {
public:
    TrainingAbort(const std::string& what, model::Segmenter last_good, std::size_t iter)
        : Error(what), last_good_(std::move(last_good)), iter_(iter) {}
    const model::Segmenter& last_good() const { return last_good_; }
    std::size_t iteration() const { return iter_; }

private:
    model::Segmenter last_good_;
    std::size_t iter_;
};

inline nlohmann::json objective_to_json(const model::ObjectiveConfig& c) {
    return {{"lambda_c", c.lambda_c},         {"lambda_a", c.lambda_a},
            {"lambda_n", c.lambda_n},         {"lambda_scale", c.lambda_scale},
            {"base_lr", c.base_lr},
            {"momentum", c.momentum},         {"weight_decay", c.weight_decay},
            {"warmup_iters", c.warmup_iters}, {"adapt_iters", c.adapt_iters},
            {"max_iters", c.max_iters},       {"poly_power", c.poly_power},
            {"affinity_stride", c.affinity_stride}, {"seed", c.seed},
            {"batch_size", c.batch_size},     {"prototype_cap", c.prototype_cap},
            {"source_stats_ema", c.source_stats_ema}};
}

inline std::string config_hash(const model::ObjectiveConfig& c) { return sha256_hex(objective_to_json(c).dump()); }

/// Cycles through a dataset in seeded, per-epoch shuffled order.
class BatchSampler {
public:
    BatchSampler(std::size_t n, std::uint64_t seed) : order_(n), rng_(seed) {
        std::iota(order_.begin(), order_.end(), std::size_t{0});
        std::shuffle(order_.begin(), order_.end(), rng_);
    }

    std::vector<std::size_t> next(std::size_t batch) {
        std::vector<std::size_t> out;
        while (out.size() < batch) {
            if (pos_ == order_.size()) {
                std::shuffle(order_.begin(), order_.end(), rng_);
                pos_ = 0;
            }
            out.push_back(order_[pos_++]);
        }
        return out;
    }

private:
    std::vector<std::size_t> order_;
    std::mt19937_64 rng_;
    std::size_t pos_ = 0;
};

inline bool all_finite(const model::Gradients& g) {
    return std::all_of(g.begin(), g.end(), [](const Tensor& t) { return t.all_finite(); });
}

inline model::LabeledBatch gather_source(const std::vector<data::Sample>& source, const std::vector<std::size_t>& idx) {
    model::LabeledBatch b;
    for (auto i : idx) {
        b.inputs.push_back(source[i].input);
        b.labels.push_back(source[i].label);
    }
    return b;
}

inline std::vector<Tensor> gather_target(const std::vector<data::TargetImage>& target,
                                         const std::vector<std::size_t>& idx) {
    std::vector<Tensor> out;
    for (auto i : idx) out.push_back(target[i].input);
    return out;
}

inline std::size_t epoch_length(std::size_t items, std::size_t batch) { return std::max<std::size_t>(1, (items + batch - 1) / batch); }

/// Source warm-up followed by adaptation on the full objective, both under
/// one poly schedule over max_iters. Deterministic under cfg.seed.
inline TrainResult train(const TrainData& data, const TrainOptions& opts,
                         std::optional<model::Segmenter> initial = std::nullopt) {
    const auto& cfg = opts.objective;
    cfg.validate();
    if (data.source.empty()) throw Error("empty source dataset");
    if (cfg.adapt_iters > 0 && data.target.empty()) throw Error("empty target dataset");

    TrainResult result{initial ? *initial : model::Segmenter::random(opts.shape, cfg.seed), {}, {}, std::nullopt};
    auto& seg = result.segmenter;
    model::SgdState sgd;
    BatchSampler source_sampler(data.source.size(), cfg.seed ^ 0x5eedULL);
    BatchSampler target_sampler(std::max<std::size_t>(1, data.target.size()), cfg.seed ^ 0x7a67ULL);
    auto validate = [&]() -> std::optional<double> {
        if (data.validation.empty()) return std::nullopt;
        return metrics::evaluate(seg, data.validation).miou;
    };
    auto guard = [&](double total, const model::Gradients& g, const model::Segmenter& last_good, std::size_t iter) {
        if (!std::isfinite(total) || !all_finite(g)) {
            throw TrainingAbort("non-finite loss at iteration " + std::to_string(iter), last_good, iter);
        }
    };

    std::size_t iter = 0;
    for (; iter < cfg.warmup_iters; ++iter) {
        const auto batch = gather_source(data.source, source_sampler.next(cfg.batch_size));
        std::vector<model::ForwardPass> passes;
        std::vector<ScoreMap> scores;
        for (const auto& x : batch.inputs) {
            passes.push_back(model::forward(seg, x));
            scores.push_back(passes.back().scores);
        }
        const auto sup = model::segmentation_loss(scores, batch.labels);
        auto grads = model::zero_gradients(seg);
        for (std::size_t b = 0; b < batch.inputs.size(); ++b) {
            model::backward(seg, batch.inputs[b], passes[b], sup.grad_logits[b], nullptr, grads);
        }
        guard(sup.value, grads, seg, iter);
        const double lr = model::poly_learning_rate(cfg.base_lr, iter, cfg.max_iters, cfg.poly_power);
        result.log.push_back({iter, lr, sup.value, std::nullopt, std::nullopt, std::nullopt, sup.value,
                              std::nullopt, false});
        model::sgd_step(seg, grads, sgd, lr, cfg.momentum, cfg.weight_decay);
    }
    if (cfg.warmup_iters > 0) {
        result.warmup_val_miou = validate();
        if (!result.log.empty()) result.log.back().val_miou = result.warmup_val_miou;
    }

    const std::size_t per_epoch = epoch_length(data.target.size(), cfg.batch_size);
    std::optional<alignment::ClusterStats> source_ema;
    EpochSummary running;
    std::size_t in_epoch = 0;
    for (std::size_t step = 0; step < cfg.adapt_iters; ++step, ++iter) {
        const auto source = gather_source(data.source, source_sampler.next(cfg.batch_size));
        const auto target = gather_target(data.target, target_sampler.next(cfg.batch_size));
        auto ctx = model::prepare_context(seg, source, target, cfg, source_ema ? &*source_ema : nullptr);
        if (cfg.source_stats_ema > 0.0) source_ema = ctx.source_stats;
        const auto res = model::evaluate_objective(seg, source, target, ctx, cfg, opts.terms);
        guard(res.losses.total, res.grads, seg, iter);
        const double lr = model::poly_learning_rate(cfg.base_lr, iter, cfg.max_iters, cfg.poly_power);
        const auto& L = res.losses;
        LogRow row{iter, lr, L.seg, std::nullopt, std::nullopt, std::nullopt, L.total, std::nullopt, true};
        if (opts.terms.c && !L.c_skipped) row.c = L.c;
        if (opts.terms.a && !L.a_skipped) row.a = L.a;
        if (opts.terms.n && !L.n_skipped) row.n = L.n;
        result.log.push_back(row);
        model::sgd_step(seg, res.grads, sgd, lr, cfg.momentum, cfg.weight_decay);

        running.c += L.c;
        running.a += L.a;
        running.n += L.n;
        running.total += L.total;
        if (++in_epoch == per_epoch || step + 1 == cfg.adapt_iters) {
            const double inv = 1.0 / static_cast<double>(in_epoch);
            running.c *= inv;
            running.a *= inv;
            running.n *= inv;
            running.total *= inv;
            running.epoch = result.epochs.size();
            running.val_miou = validate();
            result.log.back().val_miou = running.val_miou;
            result.epochs.push_back(running);
            running = EpochSummary{};
            in_epoch = 0;
        }
    }
    return result;
}

struct SelfTrainResult {
    model::Segmenter segmenter;
    std::vector<double> coverage;
    std::size_t rounds_completed = 0;
    std::vector<std::string> warnings;
};

inline constexpr double kMinPseudoLabelCoverage = 0.01;

/// Confident target predictions (max probability >= confidence) become labels;
/// everything else is ignored.
inline std::vector<LabelMap> confident_pseudo_labels(const model::Segmenter& seg,
                                                     const std::vector<data::TargetImage>& target, double confidence,
                                                     double& coverage) {
    std::vector<LabelMap> out;
    std::size_t kept = 0, total = 0;
    for (const auto& t : target) {
        const auto pass = model::forward(seg, t.input);
        LabelMap y = clustering::pseudo_labels(pass.scores);
        for (std::size_t i = 0; i < y.size(); ++i) {
            if (pass.scores.row(i)[static_cast<std::size_t>(y[i])] < confidence) {
                y[i] = kIgnoreLabel;
            } else {
                ++kept;
            }
            ++total;
        }
        out.push_back(std::move(y));
    }
    coverage = total ? static_cast<double>(kept) / static_cast<double>(total) : 0.0;
    return out;
}

/// Rounds of pseudo-label self-training. Each round retrains for
/// cfg.adapt_iters steps on target L_seg plus the full objective, with its own
/// poly schedule.
inline SelfTrainResult self_train(const model::Segmenter& trained, const TrainData& data, double confidence,
                                  std::size_t rounds, const TrainOptions& opts) {
    if (!(confidence > 0.5 && confidence <= 1.0)) throw Error("confidence must be in (0.5, 1]");
    if (rounds == 0) throw Error("rounds must be positive");
    if (data.target.empty() || data.source.empty()) throw Error("empty dataset");
    const auto& cfg = opts.objective;
    SelfTrainResult result{trained, {}, 0, {}};
    auto& seg = result.segmenter;
    for (std::size_t round = 0; round < rounds; ++round) {
        double coverage = 0.0;
        const auto pseudo = confident_pseudo_labels(seg, data.target, confidence, coverage);
        result.coverage.push_back(coverage);
        if (coverage < kMinPseudoLabelCoverage) {
            result.warnings.push_back("round " + std::to_string(round) + ": pseudo-label coverage " +
                                      std::to_string(coverage) + " below 1%, round aborted");
            break;
        }
        model::SgdState sgd;
        BatchSampler source_sampler(data.source.size(), cfg.seed ^ (0x51ULL + round));
        BatchSampler target_sampler(data.target.size(), cfg.seed ^ (0x7fULL + round));
        const std::size_t iters = cfg.adapt_iters;
        for (std::size_t it = 0; it < iters; ++it) {
            const auto source = gather_source(data.source, source_sampler.next(cfg.batch_size));
            const auto idx = target_sampler.next(cfg.batch_size);
            const auto target = gather_target(data.target, idx);
            std::vector<LabelMap> labels;
            std::size_t scored = 0;
            for (auto i : idx) {
                labels.push_back(pseudo[i]);
                for (int v : pseudo[i].labels) scored += v != kIgnoreLabel;
            }
            const auto ctx = model::prepare_context(seg, source, target, cfg);
            const auto res = model::evaluate_objective(seg, source, target, ctx, cfg, opts.terms,
                                                       scored ? std::span<const LabelMap>(labels)
                                                              : std::span<const LabelMap>());
            if (!std::isfinite(res.losses.total) || !all_finite(res.grads)) {
                throw TrainingAbort("non-finite loss during self-training", seg, it);
            }
            const double lr = model::poly_learning_rate(cfg.base_lr, it, iters, cfg.poly_power);
            model::sgd_step(seg, res.grads, sgd, lr, cfg.momentum, cfg.weight_decay);
        }
        ++result.rounds_completed;
    }
    return result;
}

// ---------------------------------------------------------------------------
// Artifacts

inline std::string format_optional(const std::optional<double>& v) { return v ? format_double(*v) : ""; }

inline std::string log_to_csv(const std::vector<LogRow>& log) {
    std::string out = "iter,lr,L_seg,L_c,L_a,L_n,total,val_mIoU\n";
    for (const auto& r : log) {
        out += std::to_string(r.iter) + "," + format_double(r.lr) + "," + format_double(r.seg) + "," +
               format_optional(r.c) + "," + format_optional(r.a) + "," + format_optional(r.n) + "," +
               format_double(r.total) + "," + format_optional(r.val_miou) + "\n";
    }
    return out;
}

inline std::string epochs_to_csv(const std::vector<EpochSummary>& epochs) {
    std::string out = "epoch,L_c,L_a,L_n,total,val_mIoU\n";
    for (const auto& e : epochs) {
        out += std::to_string(e.epoch) + "," + format_double(e.c) + "," + format_double(e.a) + "," +
               format_double(e.n) + "," + format_double(e.total) + "," + format_optional(e.val_miou) + "\n";
    }
    return out;
}

/// One <name>.catn per parameter plus manifest.json.
inline void save_checkpoint(const std::filesystem::path& dir, const model::Segmenter& seg, std::size_t iteration,
                            const model::ObjectiveConfig& cfg) {
    std::filesystem::create_directories(dir);
    nlohmann::json params = nlohmann::json::array();
    for (const auto& p : seg.params()) {
        const auto bytes = encode_tensor(p.value);
        const std::string file = p.name + ".catn";
        write_file_bytes(dir / file, bytes);
        params.push_back({{"name", p.name}, {"shape", p.value.shape()}, {"file", file}, {"sha256", sha256_hex(bytes)}});
    }
    const auto& s = seg.shape();
    nlohmann::json manifest = {
        {"format", "clusteralign-checkpoint-v1"},
        {"iteration", iteration},
        {"config_hash", config_hash(cfg)},
        {"model", {{"input_channels", s.input_channels}, {"hidden", s.hidden}, {"features", s.features}, {"classes", s.classes}}},
        {"params", params},
    };
    write_file_bytes(dir / "manifest.json", manifest.dump(2) + "\n");
}

inline model::Segmenter load_checkpoint(const std::filesystem::path& dir) {
    const auto manifest = nlohmann::json::parse(read_file_bytes(dir / "manifest.json"));
    const auto& m = manifest.at("model");
    model::Segmenter seg(model::ModelShape{m.at("input_channels"), m.at("hidden"), m.at("features"), m.at("classes")});
    for (auto& p : seg.params()) {
        const nlohmann::json* entry = nullptr;
        for (const auto& e : manifest.at("params")) {
            if (e.at("name") == p.name) entry = &e;
        }
        if (!entry) throw Error("checkpoint missing parameter " + p.name);
        const auto bytes = read_file_bytes(dir / entry->at("file").get<std::string>());
        if (sha256_hex(bytes) != entry->at("sha256").get<std::string>()) throw Error("checkpoint hash mismatch: " + p.name);
        auto t = decode_tensor(bytes);
        if (t.shape() != p.value.shape()) throw Error("checkpoint shape mismatch: " + p.name);
        p.value = std::move(t);
    }
    return seg;
}

}  // namespace clusteralign::trainer

#endif  // CLUSTERALIGN_TRAINER_HPP
