#ifndef CLUSTERALIGN_EXPERIMENT_HPP
#define CLUSTERALIGN_EXPERIMENT_HPP

#include <yaml-cpp/yaml.h>
#include <nlohmann/json.hpp>

#include <algorithm>
#include <cmath>
#include <filesystem>
#include <map>
#include <optional>
#include <sstream>
#include <string>
#include <vector>

#include "data.hpp"
#include "graphcut.hpp"
#include "hashing.hpp"
#include "metrics.hpp"
#include "model.hpp"
#include "tensor_io.hpp"
#include "trainer.hpp"

namespace clusteralign::experiment {

/// Invalid configuration. `line` is 1-based, 0 when the error has no source
/// position (command-line overrides, cross-field checks).
class ConfigError : public Error {
public:
    ConfigError(const std::string& what, std::size_t line = 0)
        : Error(line ? "line " + std::to_string(line) + ": " + what : what), line_(line) {}
    std::size_t line() const { return line_; }

private:
    std::size_t line_;
};

/// Non-finite loss during a run; `diagnostics` points at the written report.
class NumericAbort : public Error {
public:
    NumericAbort(const std::string& what, std::filesystem::path diagnostics)
        : Error(what), diagnostics_(std::move(diagnostics)) {}
    const std::filesystem::path& diagnostics() const { return diagnostics_; }

private:
    std::filesystem::path diagnostics_;
};

enum class Mode { Single, Ablation, SweepLambdaC, SweepLambdaN };

inline std::string mode_name(Mode m) {
    switch (m) {
        case Mode::Single: return "single";
        case Mode::Ablation: return "ablation";
        case Mode::SweepLambdaC: return "sweep_lambda_c";
        case Mode::SweepLambdaN: return "sweep_lambda_n";
    }
    return "single";
}

struct LossSwitches {
    bool use_a = true;
    bool use_c = true;
    bool use_n = true;

    model::TermMask mask() const { return {use_c, use_a, use_n}; }
    bool any() const { return use_a || use_c || use_n; }
};

struct SelfTrainingConfig {
    bool enabled = false;
    double confidence = 0.9;
    std::size_t rounds = 1;
};

struct DataConfig {
    data::DomainSpec spec = data::default_source_spec();
    data::DomainShift shift;
    data::PairSizes sizes;
    /// Saved datasets replace the generated pair when set.
    std::optional<std::filesystem::path> source_dir, target_dir, validation_dir;
};

struct ExperimentConfig {
    std::string name = "run";
    Mode mode = Mode::Single;
    std::vector<std::uint64_t> seeds = {0};
    /// Relative to the output root.
    std::filesystem::path output = "run";
    DataConfig data;
    model::ObjectiveConfig objective;
    std::size_t hidden = 16;
    std::size_t features = 8;
    LossSwitches losses;
    SelfTrainingConfig self_training;
    bool ccd_baseline = true;
    bool ccd_unit_means = false;

    void validate() const {
        try {
            objective.validate();
            data.spec.validate();
        } catch (const ConfigError&) {
            throw;
        } catch (const Error& e) {
            throw ConfigError(e.what());
        }
        if (seeds.empty()) throw ConfigError("seeds must not be empty");
        if ((losses.use_c || losses.use_n) && objective.warmup_iters == 0) {
            throw ConfigError("L_c and L_n need a warm-up phase (objective.warmup_iters > 0)");
        }
        if (self_training.enabled) {
            if (!(self_training.confidence > 0.5 && self_training.confidence <= 1.0)) {
                throw ConfigError("self_training.confidence must be in (0.5, 1]");
            }
            if (self_training.rounds == 0) throw ConfigError("self_training.rounds must be positive");
        }
        if (hidden == 0 || features == 0) throw ConfigError("model sizes must be positive");
        if (output.empty() || output.is_absolute()) throw ConfigError("output must be a relative path");
        if (data.sizes.source == 0 || data.sizes.target == 0) throw ConfigError("data sizes must be positive");
    }

    model::ModelShape shape(const data::DomainSpec& spec) const {
        return {spec.input_channels, hidden, features, spec.num_classes};
    }
};

// ---------------------------------------------------------------------------
// YAML

namespace detail {

inline std::size_t line_of(const YAML::Node& n) {
    const auto m = n.Mark();
    return m.is_null() ? 0 : static_cast<std::size_t>(m.line) + 1;
}

inline void check_keys(const YAML::Node& n, const std::vector<std::string>& allowed, const std::string& where) {
    if (!n.IsMap()) throw ConfigError(where + ": expected a mapping", line_of(n));
    for (const auto& kv : n) {
        const auto key = kv.first.as<std::string>();
        if (std::find(allowed.begin(), allowed.end(), key) == allowed.end()) {
            throw ConfigError("unknown field " + (where.empty() ? key : where + "." + key), line_of(kv.first));
        }
    }
}

template <class T>
const char* type_name() {
    if constexpr (std::is_same_v<T, bool>) return "a boolean";
    else if constexpr (std::is_same_v<T, std::string>) return "a string";
    else if constexpr (std::is_floating_point_v<T>) return "a number";
    else if constexpr (std::is_unsigned_v<T>) return "a nonnegative integer";
    else return "a value";
}

template <class T>
bool read(const YAML::Node& parent, const char* key, T& out, const std::string& where) {
    const YAML::Node n = parent[key];
    if (!n) return false;
    const std::string path = where.empty() ? key : where + "." + key;
    try {
        if constexpr (std::is_unsigned_v<T> && !std::is_same_v<T, bool>) {
            const auto text = n.as<std::string>();
            if (!text.empty() && text.front() == '-') throw YAML::Exception(n.Mark(), "negative");
        }
        out = n.as<T>();
    } catch (const YAML::Exception&) {
        throw ConfigError(path + ": expected " + type_name<T>(), line_of(n));
    }
    if constexpr (std::is_floating_point_v<T>) {
        if (!std::isfinite(out)) throw ConfigError(path + ": must be finite", line_of(n));
    }
    return true;
}

inline YAML::Node section(const YAML::Node& root, const char* key) {
    const YAML::Node n = root[key];
    if (n && !n.IsMap()) throw ConfigError(std::string(key) + ": expected a mapping", line_of(n));
    return n;
}

/// Applies "a.b.c=value" onto the document, creating mappings as needed.
inline void apply_override(YAML::Node& root, const std::string& assignment) {
    const auto eq = assignment.find('=');
    if (eq == std::string::npos || eq == 0) throw ConfigError("override '" + assignment + "' is not key=value");
    const std::string key = assignment.substr(0, eq);
    const std::string value = assignment.substr(eq + 1);
    std::vector<std::string> parts;
    std::stringstream ss(key);
    for (std::string p; std::getline(ss, p, '.');) {
        if (p.empty()) throw ConfigError("override '" + assignment + "' has an empty key segment");
        parts.push_back(p);
    }
    YAML::Node parsed;
    try {
        parsed = YAML::Load(value);
    } catch (const YAML::Exception&) {
        throw ConfigError("override '" + assignment + "': unparsable value");
    }
    YAML::Node cur;
    cur.reset(root);
    for (std::size_t i = 0; i + 1 < parts.size(); ++i) {
        if (!cur[parts[i]]) cur[parts[i]] = YAML::Node(YAML::NodeType::Map);
        YAML::Node next = cur[parts[i]];
        if (!next.IsMap()) throw ConfigError("override '" + assignment + "': " + parts[i] + " is not a mapping");
        cur.reset(next);
    }
    cur[parts.back()] = parsed;
}

inline void read_objective(const YAML::Node& n, model::ObjectiveConfig& o) {
    check_keys(n,
               {"preset", "lambdas", "lambda_c", "lambda_a", "lambda_n", "lambda_scale", "base_lr", "momentum",
                "weight_decay", "warmup_iters", "adapt_iters", "max_iters", "poly_power", "affinity_stride",
                "batch_size", "prototype_cap", "source_stats_ema"},
               "objective");
    std::string preset = "full";
    read(n, "preset", preset, "objective");
    if (preset == "desk") {
        o = model::desk_scale_objective();
    } else if (preset != "full") {
        throw ConfigError("objective.preset: expected full or desk", line_of(n["preset"]));
    }
    std::string lambdas = "tables";
    read(n, "lambdas", lambdas, "objective");
    if (lambdas == "text") {
        o = model::with_text_lambdas(o);
    } else if (lambdas != "tables") {
        throw ConfigError("objective.lambdas: expected tables or text", line_of(n["lambdas"]));
    }
    const std::string w = "objective";
    read(n, "lambda_c", o.lambda_c, w);
    read(n, "lambda_a", o.lambda_a, w);
    read(n, "lambda_n", o.lambda_n, w);
    read(n, "lambda_scale", o.lambda_scale, w);
    read(n, "base_lr", o.base_lr, w);
    read(n, "momentum", o.momentum, w);
    read(n, "weight_decay", o.weight_decay, w);
    const bool w_set = read(n, "warmup_iters", o.warmup_iters, w);
    const bool a_set = read(n, "adapt_iters", o.adapt_iters, w);
    if (!read(n, "max_iters", o.max_iters, w) && (w_set || a_set)) o.max_iters = o.warmup_iters + o.adapt_iters;
    read(n, "poly_power", o.poly_power, w);
    read(n, "affinity_stride", o.affinity_stride, w);
    read(n, "batch_size", o.batch_size, w);
    read(n, "prototype_cap", o.prototype_cap, w);
    read(n, "source_stats_ema", o.source_stats_ema, w);
    for (const char* key : {"lambda_c", "lambda_a", "lambda_n"}) {
        double v = 0.0;
        if (read(n, key, v, w) && v < 0.0) throw ConfigError(w + "." + key + ": must be nonnegative", line_of(n[key]));
    }
}

inline void read_data(const YAML::Node& n, DataConfig& d) {
    check_keys(n, {"height", "width", "spread", "voronoi_sites", "shift", "sizes", "source_dir", "target_dir",
                   "validation_dir"},
               "data");
    read(n, "height", d.spec.height, "data");
    read(n, "width", d.spec.width, "data");
    read(n, "voronoi_sites", d.spec.voronoi_sites, "data");
    double spread = 0.0;
    if (read(n, "spread", spread, "data")) {
        if (spread < 0.0) throw ConfigError("data.spread: must be nonnegative", line_of(n["spread"]));
        d.spec.class_spread.assign(d.spec.num_classes, spread);
    }
    if (const auto s = n["shift"]) {
        check_keys(s, {"rotation_degrees", "scale", "offset"}, "data.shift");
        read(s, "rotation_degrees", d.shift.rotation_degrees, "data.shift");
        read(s, "scale", d.shift.scale, "data.shift");
        read(s, "offset", d.shift.offset, "data.shift");
        if (d.shift.scale == 0.0) throw ConfigError("data.shift.scale: must be nonzero", line_of(s["scale"]));
    }
    if (const auto s = n["sizes"]) {
        check_keys(s, {"source", "target", "validation"}, "data.sizes");
        read(s, "source", d.sizes.source, "data.sizes");
        read(s, "target", d.sizes.target, "data.sizes");
        read(s, "validation", d.sizes.validation, "data.sizes");
    }
    std::string path;
    if (read(n, "source_dir", path, "data")) d.source_dir = path;
    if (read(n, "target_dir", path, "data")) d.target_dir = path;
    if (read(n, "validation_dir", path, "data")) d.validation_dir = path;
    if (d.source_dir.has_value() != d.target_dir.has_value()) {
        throw ConfigError("data.source_dir and data.target_dir must be given together", line_of(n));
    }
}

}  // namespace detail

/// Parses a YAML experiment description. `overrides` are "dotted.key=value"
/// assignments applied before parsing. Missing fields keep their defaults.
inline ExperimentConfig parse_config(const std::string& text, const std::vector<std::string>& overrides = {}) {
    YAML::Node root;
    try {
        root = YAML::Load(text);
    } catch (const YAML::ParserException& e) {
        throw ConfigError(e.msg, e.mark.is_null() ? 0 : static_cast<std::size_t>(e.mark.line) + 1);
    }
    if (!root || root.IsNull()) root = YAML::Node(YAML::NodeType::Map);
    for (const auto& o : overrides) detail::apply_override(root, o);

    ExperimentConfig cfg;
    detail::check_keys(root,
                       {"name", "mode", "seeds", "output", "data", "objective", "model", "losses", "self_training",
                        "ccd"},
                       "");
    detail::read(root, "name", cfg.name, "");
    std::string mode;
    if (detail::read(root, "mode", mode, "")) {
        bool found = false;
        for (Mode m : {Mode::Single, Mode::Ablation, Mode::SweepLambdaC, Mode::SweepLambdaN}) {
            if (mode == mode_name(m)) {
                cfg.mode = m;
                found = true;
            }
        }
        if (!found) {
            throw ConfigError("mode: expected single, ablation, sweep_lambda_c or sweep_lambda_n",
                              detail::line_of(root["mode"]));
        }
    }
    if (const auto s = root["seeds"]) {
        if (!s.IsSequence()) throw ConfigError("seeds: expected a list of integers", detail::line_of(s));
        cfg.seeds.clear();
        for (const auto& v : s) {
            try {
                if (v.as<std::string>().starts_with('-')) throw YAML::Exception(v.Mark(), "negative");
                cfg.seeds.push_back(v.as<std::uint64_t>());
            } catch (const YAML::Exception&) {
                throw ConfigError("seeds: expected nonnegative integers", detail::line_of(v));
            }
        }
    }
    std::string output;
    if (detail::read(root, "output", output, "")) cfg.output = output;
    if (const auto n = detail::section(root, "data")) detail::read_data(n, cfg.data);
    if (const auto n = detail::section(root, "objective")) detail::read_objective(n, cfg.objective);
    if (const auto n = detail::section(root, "model")) {
        detail::check_keys(n, {"hidden", "features"}, "model");
        detail::read(n, "hidden", cfg.hidden, "model");
        detail::read(n, "features", cfg.features, "model");
    }
    if (const auto n = detail::section(root, "losses")) {
        detail::check_keys(n, {"use_a", "use_c", "use_n"}, "losses");
        detail::read(n, "use_a", cfg.losses.use_a, "losses");
        detail::read(n, "use_c", cfg.losses.use_c, "losses");
        detail::read(n, "use_n", cfg.losses.use_n, "losses");
    }
    if (const auto n = detail::section(root, "self_training")) {
        detail::check_keys(n, {"enabled", "confidence", "rounds"}, "self_training");
        detail::read(n, "enabled", cfg.self_training.enabled, "self_training");
        detail::read(n, "confidence", cfg.self_training.confidence, "self_training");
        detail::read(n, "rounds", cfg.self_training.rounds, "self_training");
    }
    if (const auto n = detail::section(root, "ccd")) {
        detail::check_keys(n, {"baseline", "unit_means"}, "ccd");
        detail::read(n, "baseline", cfg.ccd_baseline, "ccd");
        detail::read(n, "unit_means", cfg.ccd_unit_means, "ccd");
    }
    cfg.validate();
    return cfg;
}

inline ExperimentConfig load_config(const std::filesystem::path& path, const std::vector<std::string>& overrides = {}) {
    std::string text;
    try {
        text = read_file_bytes(path);
    } catch (const Error& e) {
        throw ConfigError(e.what());
    }
    return parse_config(text, overrides);
}

inline nlohmann::json config_to_json(const ExperimentConfig& c) {
    nlohmann::json j = {
        {"name", c.name},
        {"mode", mode_name(c.mode)},
        {"seeds", c.seeds},
        {"output", c.output.generic_string()},
        {"objective", trainer::objective_to_json(c.objective)},
        {"model", {{"hidden", c.hidden}, {"features", c.features}}},
        {"losses", {{"use_a", c.losses.use_a}, {"use_c", c.losses.use_c}, {"use_n", c.losses.use_n}}},
        {"self_training",
         {{"enabled", c.self_training.enabled},
          {"confidence", c.self_training.confidence},
          {"rounds", c.self_training.rounds}}},
        {"ccd", {{"baseline", c.ccd_baseline}, {"unit_means", c.ccd_unit_means}}},
    };
    auto& d = j["data"];
    d["spec"] = data::spec_to_json(c.data.spec);
    d["shift"] = {{"rotation_degrees", c.data.shift.rotation_degrees},
                  {"scale", c.data.shift.scale},
                  {"offset", c.data.shift.offset}};
    d["sizes"] = {{"source", c.data.sizes.source}, {"target", c.data.sizes.target},
                  {"validation", c.data.sizes.validation}};
    if (c.data.source_dir) d["source_dir"] = c.data.source_dir->generic_string();
    if (c.data.target_dir) d["target_dir"] = c.data.target_dir->generic_string();
    if (c.data.validation_dir) d["validation_dir"] = c.data.validation_dir->generic_string();
    return j;
}

// ---------------------------------------------------------------------------
// Runs

/// Labelled views of one seed's data. `target` keeps its labels for CCD and
/// evaluation; the trainer only ever sees `train.target`.
struct SeedData {
    data::DomainSpec spec;
    trainer::TrainData train;
    std::vector<data::Sample> target;
};

inline data::PairSizes seeded_sizes(data::PairSizes sizes, std::uint64_t seed) {
    sizes.source_seed = 100 * seed + 1;
    sizes.target_seed = 100 * seed + 2;
    sizes.validation_seed = 100 * seed + 3;
    return sizes;
}

inline SeedData build_data(const ExperimentConfig& cfg, std::uint64_t seed) {
    SeedData out;
    if (cfg.data.source_dir) {
        auto source = data::load_dataset(*cfg.data.source_dir);
        auto target = data::load_dataset(*cfg.data.target_dir);
        if (source.spec.num_classes != target.spec.num_classes ||
            source.spec.input_channels != target.spec.input_channels) {
            throw Error("source and target datasets disagree on classes or channels");
        }
        out.spec = source.spec;
        out.train.source = std::move(source.samples);
        out.target = std::move(target.samples);
        out.train.validation =
            cfg.data.validation_dir ? data::load_dataset(*cfg.data.validation_dir).samples : out.target;
    } else {
        auto pair = data::make_domain_pair(cfg.data.spec, cfg.data.shift, seeded_sizes(cfg.data.sizes, seed));
        out.spec = cfg.data.spec;
        out.train.source = std::move(pair.source);
        out.target = std::move(pair.target);
        out.train.validation = std::move(pair.target_validation);
        if (out.train.validation.empty()) out.train.validation = out.target;
    }
    out.train.target = data::strip_labels(out.target);
    return out;
}

struct SeedOutcome {
    std::uint64_t seed = 0;
    trainer::TrainResult training;
    metrics::IouReport iou;
    metrics::CcdReport ccd;
    std::optional<metrics::IouReport> self_trained;
    std::vector<double> self_training_coverage;
};

struct RunOutcome {
    std::filesystem::path dir;
    std::vector<SeedOutcome> seeds;

    double mean_miou() const;
    double std_miou() const;
};

/// Sample standard deviation (n - 1); 0 for fewer than two values.
inline double sample_std(const std::vector<double>& v) {
    if (v.size() < 2) return 0.0;
    double mean = 0.0;
    for (double x : v) mean += x;
    mean /= static_cast<double>(v.size());
    double ss = 0.0;
    for (double x : v) ss += (x - mean) * (x - mean);
    return std::sqrt(ss / static_cast<double>(v.size() - 1));
}

inline double mean_of(const std::vector<double>& v) {
    double s = 0.0;
    for (double x : v) s += x;
    return v.empty() ? 0.0 : s / static_cast<double>(v.size());
}

inline double RunOutcome::mean_miou() const {
    std::vector<double> v;
    for (const auto& s : seeds) v.push_back(s.iou.miou);
    return mean_of(v);
}

inline double RunOutcome::std_miou() const {
    std::vector<double> v;
    for (const auto& s : seeds) v.push_back(s.iou.miou);
    return sample_std(v);
}

inline std::string summary_csv(const RunOutcome& run, std::size_t K) {
    std::string out = "seed,mIoU";
    for (std::size_t k = 0; k < K; ++k) out += ",iou_" + std::to_string(k);
    out += ",ccd_mean,ccd_normalized_mean,self_train_mIoU\n";
    for (const auto& s : run.seeds) {
        out += std::to_string(s.seed) + "," + format_double(s.iou.miou);
        for (std::size_t k = 0; k < K; ++k) out += "," + metrics::optional_cell(s.iou.per_class[k]);
        out += "," + format_double(s.ccd.mean) + "," +
               (s.ccd.normalized.empty() ? std::string() : format_double(s.ccd.normalized_mean)) + "," +
               (s.self_trained ? format_double(s.self_trained->miou) : std::string()) + "\n";
    }
    return out;
}

/// manifest.json: run identity plus the SHA-256 of every file under `dir`.
inline void write_manifest(const std::filesystem::path& dir, const ExperimentConfig& cfg,
                           const data::DomainSpec& spec) {
    std::vector<std::filesystem::path> files;
    for (const auto& e : std::filesystem::recursive_directory_iterator(dir)) {
        if (e.is_regular_file() && e.path() != dir / "manifest.json") files.push_back(e.path());
    }
    std::sort(files.begin(), files.end());
    nlohmann::json artifacts = nlohmann::json::array();
    for (const auto& f : files) {
        artifacts.push_back({{"path", std::filesystem::relative(f, dir).generic_string()},
                             {"sha256", sha256_hex(read_file_bytes(f))}});
    }
    const auto config = config_to_json(cfg);
    nlohmann::json manifest = {
        {"format", "clusteralign-run-v1"},
        {"name", cfg.name},
        {"config_hash", sha256_hex(config.dump())},
        {"num_classes", spec.num_classes},
        {"grid", {spec.height, spec.width}},
        {"input_channels", spec.input_channels},
        {"seeds", cfg.seeds},
        {"artifacts", artifacts},
    };
    write_file_bytes(dir / "manifest.json", manifest.dump(2) + "\n");
}

inline trainer::TrainOptions train_options(const ExperimentConfig& cfg, const data::DomainSpec& spec,
                                           std::uint64_t seed) {
    trainer::TrainOptions o;
    o.objective = cfg.objective;
    o.objective.seed = seed;
    o.shape = cfg.shape(spec);
    o.terms = cfg.losses.mask();
    return o;
}

/// Trains every seed of `cfg` and writes its artifacts under root/cfg.output.
/// `baselines`, if given, supplies one source-only segmenter per seed as the
/// CCD normalizer; otherwise one is trained when cfg.ccd_baseline is set.
inline RunOutcome run(const ExperimentConfig& cfg, const std::filesystem::path& root,
                      const std::vector<model::Segmenter>* baselines = nullptr) {
    cfg.validate();
    RunOutcome outcome;
    outcome.dir = root / cfg.output;
    std::filesystem::create_directories(outcome.dir);
    data::DomainSpec spec = cfg.data.spec;
    for (std::size_t si = 0; si < cfg.seeds.size(); ++si) {
        const std::uint64_t seed = cfg.seeds[si];
        const auto sd = build_data(cfg, seed);
        spec = sd.spec;
        const auto dir = outcome.dir / ("seed_" + std::to_string(seed));
        std::filesystem::create_directories(dir);
        const auto opts = train_options(cfg, sd.spec, seed);

        SeedOutcome so;
        so.seed = seed;
        try {
            so.training = trainer::train(sd.train, opts);
        } catch (const trainer::TrainingAbort& e) {
            trainer::save_checkpoint(dir / "abort_checkpoint", e.last_good(), e.iteration(), opts.objective);
            const auto diag = dir / "diagnostics.json";
            write_file_bytes(diag, nlohmann::json{{"error", e.what()}, {"iteration", e.iteration()}, {"seed", seed},
                                                  {"checkpoint", "abort_checkpoint"}}
                                           .dump(2) +
                                       "\n");
            throw NumericAbort(e.what(), diag);
        }
        const auto& seg = so.training.segmenter;
        so.iou = metrics::evaluate(seg, sd.train.validation);
        const std::size_t K = sd.spec.num_classes;
        so.ccd = metrics::ccd(seg, sd.train.source, sd.target, K, cfg.ccd_unit_means);
        std::optional<model::Segmenter> baseline;
        if (baselines && si < baselines->size()) {
            baseline = (*baselines)[si];
        } else if (!cfg.losses.any()) {
            baseline = seg;
        } else if (cfg.ccd_baseline) {
            auto base_opts = opts;
            base_opts.terms = {false, false, false};
            baseline = trainer::train(sd.train, base_opts).segmenter;
        }
        if (baseline) {
            so.ccd = metrics::normalize_ccd(so.ccd,
                                            metrics::ccd(*baseline, sd.train.source, sd.target, K, cfg.ccd_unit_means));
        }

        write_file_bytes(dir / "metrics.csv", trainer::log_to_csv(so.training.log));
        write_file_bytes(dir / "epochs.csv", trainer::epochs_to_csv(so.training.epochs));
        std::vector<std::string> names;
        for (std::size_t k = 0; k < K; ++k) names.push_back("class" + std::to_string(k));
        write_file_bytes(dir / "iou.csv", metrics::iou_table_csv(so.iou, names, cfg.name));
        write_file_bytes(dir / "ccd.csv", metrics::ccd_to_csv(so.ccd));
        trainer::save_checkpoint(dir / "checkpoint", seg, opts.objective.warmup_iters + opts.objective.adapt_iters,
                                 opts.objective);
        const auto probe_features = model::forward(seg, sd.train.validation.front().input).features;
        const std::size_t h = sd.spec.height, w = sd.spec.width;
        for (auto [r, c] : {std::pair<std::size_t, std::size_t>{0, 0}, {h / 2, w / 2}, {h - 1, w - 1}}) {
            write_file_bytes(dir / ("affinity_probe_r" + std::to_string(r) + "_c" + std::to_string(c) + ".csv"),
                             tensor_to_csv(graphcut::affinity_probe(probe_features, r, c)));
        }

        if (cfg.self_training.enabled) {
            const auto st = trainer::self_train(seg, sd.train, cfg.self_training.confidence, cfg.self_training.rounds,
                                                opts);
            so.self_trained = metrics::evaluate(st.segmenter, sd.train.validation);
            so.self_training_coverage = st.coverage;
            std::string csv = "round,coverage\n";
            for (std::size_t r = 0; r < st.coverage.size(); ++r) {
                csv += std::to_string(r) + "," + format_double(st.coverage[r]) + "\n";
            }
            csv += "mIoU_before," + format_double(so.iou.miou) + "\nmIoU_after," + format_double(so.self_trained->miou) +
                   "\n";
            for (const auto& warning : st.warnings) csv += "warning," + warning + "\n";
            write_file_bytes(dir / "self_training.csv", csv);
            trainer::save_checkpoint(dir / "self_trained_checkpoint", st.segmenter, opts.objective.adapt_iters,
                                     opts.objective);
        }
        outcome.seeds.push_back(std::move(so));
    }
    write_file_bytes(outcome.dir / "config.json", config_to_json(cfg).dump(2) + "\n");
    write_file_bytes(outcome.dir / "summary.csv", summary_csv(outcome, spec.num_classes));
    write_manifest(outcome.dir, cfg, spec);
    return outcome;
}

struct AblationRow {
    std::string name;
    LossSwitches losses;
};

/// Rows in the order L_seg, +L_a, +L_a+L_c, +L_a+L_n, full.
inline std::vector<AblationRow> ablation_rows() {
    return {{"source_only", {false, false, false}},
            {"seg_a", {true, false, false}},
            {"seg_a_c", {true, true, false}},
            {"seg_a_n", {true, false, true}},
            {"full", {true, true, true}}};
}

struct ModeOutcome {
    std::vector<RunOutcome> runs;
    std::filesystem::path table;
};

inline ModeOutcome run_ablation(const ExperimentConfig& cfg, const std::filesystem::path& root) {
    ModeOutcome out;
    std::vector<model::Segmenter> baselines;
    std::string csv = "L_seg,L_a,L_c,L_n,mIoU,mIoU_std,ccd_normalized_mean\n";
    for (const auto& row : ablation_rows()) {
        ExperimentConfig c = cfg;
        c.mode = Mode::Single;
        c.name = cfg.name + "/" + row.name;
        c.losses = row.losses;
        c.output = cfg.output / row.name;
        auto r = run(c, root, baselines.empty() ? nullptr : &baselines);
        if (baselines.empty()) {
            for (const auto& s : r.seeds) baselines.push_back(s.training.segmenter);
        }
        std::vector<double> ccd;
        for (const auto& s : r.seeds) ccd.push_back(s.ccd.normalized_mean);
        csv += std::string("1,") + (row.losses.use_a ? "1" : "0") + "," + (row.losses.use_c ? "1" : "0") + "," +
               (row.losses.use_n ? "1" : "0") + "," + format_double(r.mean_miou()) + "," +
               format_double(r.std_miou()) + "," + format_double(mean_of(ccd)) + "\n";
        out.runs.push_back(std::move(r));
    }
    out.table = root / cfg.output / "ablation.csv";
    write_file_bytes(out.table, csv);
    return out;
}

inline const std::vector<double>& sweep_grid(Mode m) {
    static const std::vector<double> lambda_c = {0.001, 0.0015, 0.002, 0.003, 0.004};
    static const std::vector<double> lambda_n = {0.0005, 0.001, 0.002, 0.003, 0.004};
    if (m == Mode::SweepLambdaC) return lambda_c;
    if (m == Mode::SweepLambdaN) return lambda_n;
    throw Error("not a sweep mode");
}

/// One weight swept over its grid with the other held at its default; the
/// table has a header row of weights and rows of mean and std mIoU.
inline ModeOutcome run_sweep(const ExperimentConfig& cfg, const std::filesystem::path& root) {
    const bool sweep_c = cfg.mode == Mode::SweepLambdaC;
    const std::string key = sweep_c ? "lambda_c" : "lambda_n";
    ModeOutcome out;
    std::string header = key, means = "mIoU", stds = "mIoU_std";
    for (double v : sweep_grid(cfg.mode)) {
        ExperimentConfig c = cfg;
        c.mode = Mode::Single;
        if (sweep_c) {
            c.objective.lambda_c = v;
        } else {
            c.objective.lambda_n = v;
        }
        const std::string label = format_double(v);
        c.name = cfg.name + "/" + key + "=" + label;
        c.output = cfg.output / (key + "_" + label);
        auto r = run(c, root);
        header += "," + label;
        means += "," + format_double(r.mean_miou());
        stds += "," + format_double(r.std_miou());
        out.runs.push_back(std::move(r));
    }
    out.table = root / cfg.output / ("sweep_" + key + ".csv");
    write_file_bytes(out.table, header + "\n" + means + "\n" + stds + "\n");
    return out;
}

inline ModeOutcome run_mode(const ExperimentConfig& cfg, const std::filesystem::path& root) {
    switch (cfg.mode) {
        case Mode::Ablation: return run_ablation(cfg, root);
        case Mode::SweepLambdaC:
        case Mode::SweepLambdaN: return run_sweep(cfg, root);
        case Mode::Single: break;
    }
    ModeOutcome out;
    out.runs.push_back(run(cfg, root));
    out.table = out.runs.back().dir / "summary.csv";
    return out;
}

// ---------------------------------------------------------------------------
// Compare

struct RunSummary {
    std::filesystem::path dir;
    nlohmann::json manifest;
    std::vector<std::string> columns;
    /// column -> per-seed values (blank cells skipped)
    std::map<std::string, std::vector<double>> values;
};

inline RunSummary read_run(const std::filesystem::path& dir) {
    RunSummary r;
    r.dir = dir;
    try {
        r.manifest = nlohmann::json::parse(read_file_bytes(dir / "manifest.json"));
    } catch (const nlohmann::json::exception& e) {
        throw Error(dir.string() + ": bad manifest: " + e.what());
    }
    std::istringstream in(read_file_bytes(dir / "summary.csv"));
    std::string line;
    std::size_t line_no = 0;
    while (std::getline(in, line)) {
        ++line_no;
        if (line.empty()) continue;
        const auto cells = split_csv_line(line);
        if (r.columns.empty()) {
            r.columns = cells;
            continue;
        }
        if (cells.size() != r.columns.size()) throw ParseError(dir.string() + ": summary.csv: wrong cell count", line_no);
        for (std::size_t i = 1; i < cells.size(); ++i) {
            if (!cells[i].empty()) r.values[r.columns[i]].push_back(parse_double_cell(cells[i], line_no));
        }
    }
    if (r.columns.empty()) throw Error(dir.string() + ": empty summary.csv");
    return r;
}

/// Per-metric seed mean and sample std for each run, with deltas of the mean
/// against the first run. Runs must agree on class count, grid and channels.
inline std::string compare(const std::vector<std::filesystem::path>& dirs) {
    if (dirs.size() < 2) throw Error("compare needs at least two runs");
    std::vector<RunSummary> runs;
    for (const auto& d : dirs) runs.push_back(read_run(d));
    std::vector<std::string> mismatched;
    for (const char* field : {"num_classes", "grid", "input_channels"}) {
        for (std::size_t i = 1; i < runs.size(); ++i) {
            if (runs[i].manifest.value(field, nlohmann::json()) != runs[0].manifest.value(field, nlohmann::json())) {
                mismatched.push_back(field);
                break;
            }
        }
    }
    if (!mismatched.empty()) {
        std::string msg = "incompatible runs, mismatched fields:";
        for (const auto& f : mismatched) msg += " " + f;
        throw Error(msg);
    }
    std::string out = "run,metric,seeds,mean,std,delta\n";
    for (const auto& r : runs) {
        for (std::size_t c = 1; c < r.columns.size(); ++c) {
            const auto& col = r.columns[c];
            const auto it = r.values.find(col);
            if (it == r.values.end()) continue;
            const double m = mean_of(it->second);
            std::string delta;
            const auto base = runs[0].values.find(col);
            if (base != runs[0].values.end()) delta = format_double(m - mean_of(base->second));
            out += r.dir.generic_string() + "," + col + "," + std::to_string(it->second.size()) + "," +
                   format_double(m) + "," + format_double(sample_std(it->second)) + "," + delta + "\n";
        }
    }
    return out;
}

}  // namespace clusteralign::experiment

#endif  // CLUSTERALIGN_EXPERIMENT_HPP
