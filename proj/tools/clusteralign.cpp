// clusteralign command-line runner.
//
//   clusteralign run CONFIG [--mode M] [--set key=value]...
//   clusteralign compare RUN_DIR RUN_DIR... [--out FILE]
//   clusteralign check-grads [--instances N] [--seed S]
//   clusteralign gen-data --out DIR [--config CONFIG] [--domain source|target] [--count N] [--seed S]
//   clusteralign eval --checkpoint DIR --data DIR [--out FILE]
//
// Relative paths resolve against $CLUSTERALIGN_OUTPUT_ROOT (default: the
// working directory). Exit codes: 0 success, 1 failure, 2 invalid config or
// usage, 3 numeric abort.

#include <CLI11.hpp>

#include <clusteralign/experiment.hpp>
#include <clusteralign/gradcheck.hpp>

#include <cstdio>
#include <cstdlib>
#include <iostream>

namespace ca = clusteralign;
namespace fs = std::filesystem;

namespace {

constexpr int kExitFailure = 1;
constexpr int kExitConfig = 2;
constexpr int kExitNumeric = 3;

fs::path output_root() {
    const char* env = std::getenv("CLUSTERALIGN_OUTPUT_ROOT");
    return env && *env ? fs::path(env) : fs::current_path();
}

fs::path resolve(const fs::path& p) { return p.is_absolute() ? p : output_root() / p; }

void emit(const std::string& text, const std::string& out) {
    if (out.empty()) {
        std::cout << text;
    } else {
        ca::write_file_bytes(resolve(out), text);
    }
}

int cmd_run(const std::string& config, const std::string& mode, const std::vector<std::string>& sets) {
    auto overrides = sets;
    if (!mode.empty()) overrides.push_back("mode=" + mode);
    auto cfg = ca::experiment::load_config(resolve(config), overrides);
    for (auto* dir : {&cfg.data.source_dir, &cfg.data.target_dir, &cfg.data.validation_dir}) {
        if (*dir) *dir = resolve(**dir);
    }
    const auto root = output_root();
    const auto result = ca::experiment::run_mode(cfg, root);
    for (const auto& r : result.runs) {
        std::printf("%s: mIoU %.4f (std %.4f, %zu seeds)\n", r.dir.string().c_str(), r.mean_miou(), r.std_miou(),
                    r.seeds.size());
    }
    std::printf("table: %s\n", result.table.string().c_str());
    return 0;
}

int cmd_compare(const std::vector<std::string>& dirs, const std::string& out) {
    std::vector<fs::path> paths;
    for (const auto& d : dirs) paths.push_back(resolve(d));
    emit(ca::experiment::compare(paths), out);
    return 0;
}

int cmd_check_grads(std::size_t instances, std::uint64_t seed) {
    const auto report = ca::gradcheck::run_suite({instances, seed});
    for (const auto& c : report.checks) {
        std::printf("%-20s instances %3zu  probes %5zu  max rel err %.3e  %s\n", c.name.c_str(), c.instances,
                    c.probes, c.max_error, c.passed() ? "PASS" : "FAIL");
    }
    std::printf("tolerance %.0e, %.2f s\n", ca::gradcheck::kTolerance, report.seconds);
    return report.passed() ? 0 : kExitFailure;
}

int cmd_gen_data(const std::string& out, const std::string& config, const std::vector<std::string>& sets,
                 const std::string& domain, std::size_t count, std::uint64_t seed) {
    const auto cfg = config.empty() ? ca::experiment::parse_config("", sets) : ca::experiment::load_config(resolve(config), sets);
    const auto spec = domain == "target" ? ca::data::shifted_spec(cfg.data.spec, cfg.data.shift) : cfg.data.spec;
    const auto samples = ca::data::generate(spec, count, seed);
    ca::data::save_dataset(resolve(out), samples, spec, seed);
    std::printf("wrote %zu %s samples to %s\n", count, domain.c_str(), resolve(out).string().c_str());
    return 0;
}

int cmd_eval(const std::string& checkpoint, const std::string& data_dir, const std::string& out) {
    const auto seg = ca::trainer::load_checkpoint(resolve(checkpoint));
    const auto dataset = ca::data::load_dataset(resolve(data_dir));
    if (dataset.spec.num_classes != seg.shape().classes || dataset.spec.input_channels != seg.shape().input_channels) {
        throw ca::Error("checkpoint and dataset disagree on classes or channels");
    }
    const auto report = ca::metrics::evaluate(seg, dataset.samples);
    std::vector<std::string> names;
    for (std::size_t k = 0; k < seg.shape().classes; ++k) names.push_back("class" + std::to_string(k));
    emit(ca::metrics::iou_table_csv(report, names, fs::path(checkpoint).filename().string()), out);
    return 0;
}

}  // namespace

int main(int argc, char** argv) {
    CLI::App app{"Cluster-alignment domain adaptation experiments"};
    app.require_subcommand(1);

    std::string config, mode, out, domain = "source", checkpoint, data_dir;
    std::vector<std::string> sets, dirs;
    std::size_t instances = 20, count = 64;
    std::uint64_t seed = 0;

    auto* run = app.add_subcommand("run", "Train and evaluate as described by a config file");
    run->add_option("config", config, "YAML config")->required();
    run->add_option("--mode", mode, "single, ablation, sweep_lambda_c or sweep_lambda_n");
    run->add_option("--set", sets, "Override a config field, key=value");

    auto* cmp = app.add_subcommand("compare", "Seed-averaged metric deltas between runs");
    cmp->add_option("runs", dirs, "Run directories")->required()->expected(2, -1);
    cmp->add_option("--out", out, "Write the table here instead of stdout");

    auto* grads = app.add_subcommand("check-grads", "Finite-difference gradient suite");
    grads->add_option("--instances", instances, "Random instances per check")->check(CLI::PositiveNumber);
    grads->add_option("--seed", seed, "Suite seed");

    auto* gen = app.add_subcommand("gen-data", "Generate and save a synthetic dataset");
    gen->add_option("--out", out, "Dataset directory")->required();
    gen->add_option("--config", config, "YAML config supplying the domain");
    gen->add_option("--set", sets, "Override a config field, key=value");
    gen->add_option("--domain", domain, "source or target")->check(CLI::IsMember({"source", "target"}));
    gen->add_option("--count", count, "Number of samples")->check(CLI::PositiveNumber);
    gen->add_option("--seed", seed, "Generation seed");

    auto* eval = app.add_subcommand("eval", "mIoU of a checkpoint on a saved dataset");
    eval->add_option("--checkpoint", checkpoint, "Checkpoint directory")->required();
    eval->add_option("--data", data_dir, "Dataset directory")->required();
    eval->add_option("--out", out, "Write the table here instead of stdout");

    try {
        app.parse(argc, argv);
    } catch (const CLI::ParseError& e) {
        const int code = app.exit(e);
        return code == 0 ? 0 : kExitConfig;
    }

    try {
        if (*run) return cmd_run(config, mode, sets);
        if (*cmp) return cmd_compare(dirs, out);
        if (*grads) return cmd_check_grads(instances, seed);
        if (*gen) return cmd_gen_data(out, config, sets, domain, count, seed);
        if (*eval) return cmd_eval(checkpoint, data_dir, out);
    } catch (const ca::experiment::ConfigError& e) {
        std::fprintf(stderr, "invalid config: %s\n", e.what());
        return kExitConfig;
    } catch (const ca::experiment::NumericAbort& e) {
        std::fprintf(stderr, "numeric abort: %s\ndiagnostics: %s\n", e.what(), e.diagnostics().string().c_str());
        return kExitNumeric;
    } catch (const std::exception& e) {
        std::fprintf(stderr, "error: %s\n", e.what());
        return kExitFailure;
    }
    return kExitFailure;
}
