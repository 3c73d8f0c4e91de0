// Acceptance report: one PASS/FAIL line per criterion. Exit status is nonzero
// when any criterion fails.

#include <clusteralign/experiment.hpp>
#include <clusteralign/gradcheck.hpp>

#include <chrono>
#include <cstdio>
#include <functional>
#include <random>

#include "oracles.hpp"

using namespace clusteralign;
namespace fs = std::filesystem;

namespace {

constexpr double kGradTolerance = 1e-4;
constexpr double kGradSeconds = 60.0;
constexpr double kOracleNcutTolerance = 1e-9;
constexpr double kOracleSeconds = 60.0;
constexpr double kClosedFormTolerance = 1e-4;
constexpr double kAblationGap = 0.01;
constexpr double kAblationSeconds = 600.0;
constexpr std::size_t kMinSeeds = 5;
constexpr double kCcdCeiling = 0.9;
constexpr double kLossDrop = 0.20;
constexpr double kSelfTrainConfidence = 0.9;
constexpr double kSelfTrainFloor = -0.01;

struct Line {
    int id;
    std::string name;
    bool pass;
    std::string detail;
};

std::vector<Line> lines;

void report(int id, const std::string& name, bool pass, const std::string& detail) {
    lines.push_back({id, name, pass, detail});
    std::printf("[%s] %d %s: %s\n", pass ? "PASS" : "FAIL", id, name.c_str(), detail.c_str());
    std::fflush(stdout);
}

double seconds_since(std::chrono::steady_clock::time_point t) {
    return std::chrono::duration<double>(std::chrono::steady_clock::now() - t).count();
}

std::string fmt(const char* f, auto... args) {
    char buf[512];
    std::snprintf(buf, sizeof buf, f, args...);
    return buf;
}

void gradient_fidelity() {
    const auto r = gradcheck::run_suite({20, 0});
    double worst = 0.0;
    std::size_t fewest = static_cast<std::size_t>(-1);
    for (const auto& c : r.checks) {
        worst = std::max(worst, c.max_error);
        fewest = std::min(fewest, c.instances);
    }
    report(1, "gradient fidelity", r.passed() && worst < kGradTolerance && fewest >= 20 && r.seconds < kGradSeconds,
           fmt("%zu checks, >= %zu instances each, max rel err %.3e (< %.0e), %.1f s", r.checks.size(), fewest, worst,
               kGradTolerance, r.seconds));
}

void oracle_equivalence() {
    const auto start = std::chrono::steady_clock::now();
    std::mt19937_64 rng(2024);
    double ncut_gap = 0.0;
    std::uniform_int_distribution<std::size_t> nodes(2, 12), classes(1, 4);
    for (int t = 0; t < 200; ++t) {
        const std::size_t n = nodes(rng), K = classes(rng);
        const auto g = oracle::graph_from(oracle::random_stochastic(n, rng));
        std::uniform_int_distribution<int> lab(0, static_cast<int>(K) - 1);
        std::vector<int> labels(n);
        for (auto& v : labels) v = lab(rng);
        Tensor p({n, K});
        for (std::size_t i = 0; i < n; ++i) p[i * K + static_cast<std::size_t>(labels[i])] = 1.0;
        ncut_gap = std::max(ncut_gap, std::abs(graphcut::ncut_loss(p, g).value - graphcut::hard_ncut_value(labels, g, K)));
    }
    std::size_t mismatches = 0;
    std::uniform_int_distribution<std::size_t> members(1, 50);
    for (int t = 0; t < 200; ++t) {
        const Tensor f = oracle::random_tensor({members(rng), 4}, rng);
        std::vector<std::vector<double>> v;
        for (std::size_t i = 0; i < f.dim(0); ++i) v.push_back(oracle::pixel(f, i));
        mismatches += clustering::select_prototype(v).index != oracle::prototype_index(v);
    }
    const double secs = seconds_since(start);
    report(2, "oracle equivalence", ncut_gap <= kOracleNcutTolerance && mismatches == 0 && secs < kOracleSeconds,
           fmt("ncut one-hot vs hard max gap %.2e over 200 graphs; prototype mismatches %zu/200; %.2f s", ncut_gap,
               mismatches, secs));
}

void closed_forms() {
    std::vector<std::pair<std::string, double>> errors;
    const auto sm = softmax(std::vector<double>{1.0, 0.0});
    errors.emplace_back("softmax", std::abs(sm[0] - 0.7311));

    const Tensor f({2, 2, 2}, {1, 0, 0, 1, 0, 1, 1, 0});
    const LabelMap y(2, 2, std::vector<int>{0, 1, 1, 0});
    errors.emplace_back("L_c", std::abs(clustering::clustering_loss(f, y, clustering::build_prototypes(f, y, 2)).value - 0.3133));

    const auto stats = alignment::detail::finalize({{1, 0}, {-1, 0}}, {1, 1});
    errors.emplace_back("L_a", std::abs(alignment::alignment_loss(stats, stats).value - 0.1269));

    const auto two = oracle::graph_from({{0.5, 0.5}, {0.5, 0.5}});
    errors.emplace_back("L_n two-node", std::abs(graphcut::ncut_loss(Tensor({2, 2}, {1, 0, 0, 1}), two).value - 1.0));

    std::mt19937_64 rng(3);
    const auto g = oracle::graph_from(oracle::random_stochastic(6, rng));
    errors.emplace_back("L_n uniform", std::abs(graphcut::ncut_loss(Tensor({6, 4}, 0.25), g).value - 3.0));

    const double half = 4000.0 * (1.0 - std::pow(0.5, 1.0 / 0.9));
    errors.emplace_back("lr half-life", std::abs(model::poly_learning_rate(1.0, half, 4000.0, 0.9) - 0.5));

    bool ok = true;
    std::string detail;
    for (const auto& [name, err] : errors) {
        ok = ok && err < kClosedFormTolerance;
        detail += (detail.empty() ? "" : "; ") + name + fmt(" %.1e", err);
    }
    report(3, "closed-form fixtures", ok, detail + fmt(" (tol %.0e)", kClosedFormTolerance));
}

void invariants() {
    std::mt19937_64 rng(11);
    std::size_t violations = 0, checked = 0;
    auto expect = [&](bool c) {
        ++checked;
        violations += !c;
    };
    for (int t = 0; t < 50; ++t) {
        const Tensor f = oracle::random_tensor({4, 4, 5}, rng);
        const std::size_t K = 2 + static_cast<std::size_t>(t % 3);
        const auto seg = model::Segmenter::random({5, 6, 5, K}, static_cast<std::uint64_t>(t));
        const auto pass = model::forward(seg, f);
        for (std::size_t i = 0; i < pass.scores.rows(); ++i) {
            double s = 0.0;
            for (double v : pass.scores.row(i)) s += v;
            expect(std::abs(s - 1.0) < 1e-12);
        }
        const auto g = graphcut::affinity_matrix(f, 1);
        for (std::size_t i = 0; i < g.nodes; ++i) {
            double s = 0.0;
            for (std::size_t j = 0; j < g.nodes; ++j) s += g.a(i, j);
            expect(std::abs(s - 1.0) < 1e-9);
        }
        const double ln = graphcut::ncut_loss(Tensor({g.nodes, K}, pass.scores.values()), g).value;
        expect(ln >= 0.0 && ln <= static_cast<double>(K) + 1e-12);
        Tensor scaled = f;
        for (double& v : scaled.values()) v *= 4.25;
        const auto gs = graphcut::affinity_matrix(scaled, 1);
        double gap = 0.0;
        for (std::size_t i = 0; i < g.affinity.size(); ++i) gap = std::max(gap, std::abs(gs.affinity[i] - g.affinity[i]));
        expect(gap < 1e-12);
        const LabelMap y = oracle::random_labels(4, 4, K, rng);
        const double lc = clustering::clustering_loss(f, y, clustering::build_prototypes(f, y, K)).value;
        const double lcs = clustering::clustering_loss(scaled, y, clustering::build_prototypes(scaled, y, K)).value;
        expect(std::abs(lc - lcs) < 1e-12);
        expect(decode_tensor(encode_tensor(f)) == f);
    }
    const auto tmp = fs::temp_directory_path() / "clusteralign_acceptance_roundtrip";
    fs::remove_all(tmp);
    const auto spec = data::default_source_spec();
    const auto samples = data::generate(spec, 3, 5);
    expect(samples == data::generate(spec, 3, 5));
    data::save_dataset(tmp / "data", samples, spec, 5);
    expect(data::load_dataset(tmp / "data").samples == samples);
    const auto seg = model::Segmenter::random({4, 16, 8, 5}, 9);
    trainer::save_checkpoint(tmp / "ckpt", seg, 0, model::ObjectiveConfig{});
    expect(trainer::load_checkpoint(tmp / "ckpt") == seg);
    report(7, "invariant suites", violations == 0,
           fmt("%zu/%zu property checks hold (simplex, row-stochastic A, 0<=L_n<=K, scale invariance, determinism, "
               "round trips); full suites run under ctest",
               checked - violations, checked));
}

}  // namespace

int main() {
    gradient_fidelity();
    oracle_equivalence();
    closed_forms();
    invariants();

    const auto cfg = experiment::load_config(fs::path(CLUSTERALIGN_CONFIG_DIR) / "ablation.yaml");
    const auto root = fs::temp_directory_path() / "clusteralign_acceptance";
    fs::remove_all(root);
    const auto start = std::chrono::steady_clock::now();
    const auto ablation = experiment::run_ablation(cfg, root);
    const double ablation_secs = seconds_since(start);

    std::vector<double> m;
    for (const auto& r : ablation.runs) m.push_back(r.mean_miou());
    const double src = m[0], a = m[1], ac = m[2], an = m[3], full = m[4];
    const bool order = a - src >= kAblationGap && ac - a >= kAblationGap && an - a >= kAblationGap && full >= ac &&
                       full >= an;
    report(4, "ablation ordering",
           order && cfg.seeds.size() >= kMinSeeds && ablation_secs < kAblationSeconds,
           fmt("%zu seeds: source-only %.4f, +L_a %.4f, +L_a+L_c %.4f, +L_a+L_n %.4f, full %.4f; gaps %.4f %.4f %.4f "
               "(>= %.2f); %.0f s",
               cfg.seeds.size(), src, a, ac, an, full, a - src, ac - a, an - a, kAblationGap, ablation_secs));

    const auto& full_run = ablation.runs[4];
    std::vector<double> ccd;
    for (const auto& s : full_run.seeds) ccd.push_back(s.ccd.normalized_mean);
    const double ccd_mean = experiment::mean_of(ccd);
    report(5, "CCD reduction", ccd_mean < kCcdCeiling,
           fmt("full-method normalized CCD %.4f (< %.2f), %zu seeds", ccd_mean, kCcdCeiling, ccd.size()));

    const auto& epochs = full_run.seeds.front().training.epochs;
    bool finite = !epochs.empty();
    for (const auto& e : epochs) finite = finite && std::isfinite(e.c) && std::isfinite(e.a) && std::isfinite(e.n);
    auto drop = [&](double trainer::EpochSummary::*field) {
        return epochs.empty() ? 0.0 : 1.0 - epochs.back().*field / epochs.front().*field;
    };
    const double dc = drop(&trainer::EpochSummary::c), da = drop(&trainer::EpochSummary::a),
                 dn = drop(&trainer::EpochSummary::n);
    const double v0 = epochs.empty() ? 0.0 : epochs.front().val_miou.value_or(0.0);
    const double v1 = epochs.empty() ? 0.0 : epochs.back().val_miou.value_or(0.0);
    report(6, "training stability",
           finite && dc >= kLossDrop && da >= kLossDrop && dn >= kLossDrop && v1 > v0,
           fmt("%zu epochs, finite=%s; first-to-last drop L_c %.1f%%, L_a %.1f%%, L_n %.1f%% (>= %.0f%% each); "
               "val mIoU %.4f -> %.4f",
               epochs.size(), finite ? "yes" : "no", 100 * dc, 100 * da, 100 * dn, 100 * kLossDrop, v0, v1));

    std::vector<double> deltas;
    for (const auto& s : full_run.seeds) {
        const auto sd = experiment::build_data(cfg, s.seed);
        auto opts = experiment::train_options(cfg, sd.spec, s.seed);
        const auto st = trainer::self_train(s.training.segmenter, sd.train, kSelfTrainConfidence, 1, opts);
        deltas.push_back(metrics::evaluate(st.segmenter, sd.train.validation).miou - s.iou.miou);
    }
    const double delta = experiment::mean_of(deltas);
    report(8, "self-training non-degradation", delta >= kSelfTrainFloor,
           fmt("one round at confidence %.2f: mIoU delta %+.4f (>= %+.2f), %zu seeds", kSelfTrainConfidence, delta,
               kSelfTrainFloor, deltas.size()));

    std::sort(lines.begin(), lines.end(), [](const Line& x, const Line& y) { return x.id < y.id; });
    std::size_t passed = 0;
    std::printf("\nsummary\n");
    for (const auto& l : lines) {
        passed += l.pass;
        std::printf("  %d %-30s %s\n", l.id, l.name.c_str(), l.pass ? "PASS" : "FAIL");
    }
    std::printf("%zu/%zu criteria pass\n", passed, lines.size());
    return passed == lines.size() ? 0 : 1;
}
