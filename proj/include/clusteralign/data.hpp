#ifndef CLUSTERALIGN_DATA_HPP
#define CLUSTERALIGN_DATA_HPP

#include <Eigen/Dense>
#include <nlohmann/json.hpp>

#include <array>
#include <cmath>
#include <filesystem>
#include <numbers>
#include <random>
#include <sstream>
#include <string>
#include <vector>

#include "hashing.hpp"
#include "label_map.hpp"
#include "numerics.hpp"
#include "tensor_io.hpp"

/// Synthetic two-domain pixel-labelled data: Voronoi class layouts, Gaussian
/// class-conditional inputs and an affine domain transform.
namespace clusteralign::data {

struct DomainSpec {
    std::size_t num_classes = 5;
    std::size_t height = 16;
    std::size_t width = 16;
    std::size_t input_channels = 4;
    /// num_classes x input_channels
    std::vector<std::vector<double>> class_means;
    std::vector<double> class_spread;
    /// input_channels x input_channels, row-major
    std::vector<double> transform;
    std::vector<double> offset;
    /// Voronoi sites per sample. The first num_classes sites take one class
    /// each (shuffled) so every class appears in every sample.
    std::size_t voronoi_sites = 10;

    void validate() const {
        const std::size_t K = num_classes, C = input_channels;
        if (K == 0 || C == 0 || height == 0 || width == 0) throw Error("degenerate spec: empty dimension");
        if (class_means.size() != K || class_spread.size() != K) throw Error("degenerate spec: class table size");
        for (const auto& m : class_means) {
            if (m.size() != C) throw Error("degenerate spec: class mean length");
        }
        for (std::size_t a = 0; a < K; ++a) {
            for (std::size_t b = a + 1; b < K; ++b) {
                if (class_means[a] == class_means[b]) throw Error("degenerate spec: duplicate class means");
            }
        }
        for (double s : class_spread) {
            if (!(s >= 0.0)) throw Error("degenerate spec: negative spread");
        }
        if (transform.size() != C * C || offset.size() != C) throw Error("degenerate spec: transform size");
        Eigen::Map<const Eigen::Matrix<double, Eigen::Dynamic, Eigen::Dynamic, Eigen::RowMajor>> m(
            transform.data(), static_cast<Eigen::Index>(C), static_cast<Eigen::Index>(C));
        if (!Eigen::FullPivLU<Eigen::MatrixXd>(m).isInvertible()) throw Error("degenerate spec: singular transform");
        if (voronoi_sites < K) throw Error("degenerate spec: fewer Voronoi sites than classes");
        if (voronoi_sites > height * width) throw Error("degenerate spec: more Voronoi sites than pixels");
    }

    friend bool operator==(const DomainSpec&, const DomainSpec&) = default;
};

inline std::vector<double> identity_transform(std::size_t c) {
    std::vector<double> m(c * c, 0.0);
    for (std::size_t i = 0; i < c; ++i) m[i * c + i] = 1.0;
    return m;
}

/// Default toy source domain: five classes on a ring in channels 0-1, with
/// weaker class structure in channels 2-3.
inline DomainSpec default_source_spec() {
    DomainSpec spec;
    const std::size_t K = spec.num_classes;
    for (std::size_t k = 0; k < K; ++k) {
        const double theta = 2.0 * std::numbers::pi * static_cast<double>(k) / static_cast<double>(K);
        spec.class_means.push_back({2.5 * std::cos(theta), 2.5 * std::sin(theta), 2.5 * std::cos(2.0 * theta),
                                    2.5 * std::sin(2.0 * theta)});
    }
    spec.class_spread.assign(K, 1.0);
    spec.transform = identity_transform(spec.input_channels);
    spec.offset.assign(spec.input_channels, 0.0);
    return spec;
}

struct Sample {
    Tensor input;  // h x w x input_channels
    LabelMap label;

    friend bool operator==(const Sample&, const Sample&) = default;
};

/// Input-only view of a sample; the trainer's target side sees only these.
struct TargetImage {
    Tensor input;
};

inline std::vector<TargetImage> strip_labels(const std::vector<Sample>& samples) {
    std::vector<TargetImage> out;
    for (const auto& s : samples) out.push_back({s.input});
    return out;
}

inline std::uint64_t sample_seed(std::uint64_t seed, std::uint64_t index) {
    std::seed_seq seq{static_cast<std::uint32_t>(seed), static_cast<std::uint32_t>(seed >> 32),
                      static_cast<std::uint32_t>(index), static_cast<std::uint32_t>(index >> 32)};
    std::array<std::uint32_t, 2> out{};
    seq.generate(out.begin(), out.end());
    return (static_cast<std::uint64_t>(out[0]) << 32) | out[1];
}

inline LabelMap voronoi_layout(const DomainSpec& spec, std::mt19937_64& rng) {
    const std::size_t n = spec.height * spec.width;
    std::vector<std::size_t> cells(n);
    std::iota(cells.begin(), cells.end(), std::size_t{0});
    // Partial Fisher-Yates: the first voronoi_sites entries are distinct sites.
    for (std::size_t i = 0; i < spec.voronoi_sites; ++i) {
        std::uniform_int_distribution<std::size_t> pick(i, n - 1);
        std::swap(cells[i], cells[pick(rng)]);
    }
    std::vector<int> site_class(spec.voronoi_sites);
    std::iota(site_class.begin(), site_class.begin() + static_cast<std::ptrdiff_t>(spec.num_classes), 0);
    std::shuffle(site_class.begin(), site_class.begin() + static_cast<std::ptrdiff_t>(spec.num_classes), rng);
    std::uniform_int_distribution<int> any_class(0, static_cast<int>(spec.num_classes) - 1);
    for (std::size_t s = spec.num_classes; s < spec.voronoi_sites; ++s) site_class[s] = any_class(rng);

    LabelMap y(spec.height, spec.width);
    for (std::size_t r = 0; r < spec.height; ++r) {
        for (std::size_t c = 0; c < spec.width; ++c) {
            std::size_t best = 0;
            long best_d = std::numeric_limits<long>::max();
            for (std::size_t s = 0; s < spec.voronoi_sites; ++s) {
                const long dr = static_cast<long>(cells[s] / spec.width) - static_cast<long>(r);
                const long dc = static_cast<long>(cells[s] % spec.width) - static_cast<long>(c);
                const long d = dr * dr + dc * dc;
                if (d < best_d) {
                    best_d = d;
                    best = s;
                }
            }
            y[r * spec.width + c] = site_class[best];
        }
    }
    return y;
}

inline Sample generate_sample(const DomainSpec& spec, std::uint64_t seed) {
    std::mt19937_64 rng(seed);
    Sample s;
    s.label = voronoi_layout(spec, rng);
    const std::size_t C = spec.input_channels;
    s.input = Tensor({spec.height, spec.width, C});
    std::normal_distribution<double> normal(0.0, 1.0);
    std::vector<double> z(C);
    for (std::size_t i = 0; i < s.label.size(); ++i) {
        const auto k = static_cast<std::size_t>(s.label[i]);
        for (std::size_t j = 0; j < C; ++j) {
            const double noise = spec.class_spread[k] > 0.0 ? spec.class_spread[k] * normal(rng) : 0.0;
            z[j] = spec.class_means[k][j] + noise;
        }
        auto x = s.input.row(i);
        for (std::size_t a = 0; a < C; ++a) {
            double v = spec.offset[a];
            for (std::size_t b = 0; b < C; ++b) v += spec.transform[a * C + b] * z[b];
            x[a] = v;
        }
    }
    return s;
}

/// n samples, each a pure function of (spec, seed, index).
inline std::vector<Sample> generate(const DomainSpec& spec, std::size_t n, std::uint64_t seed) {
    spec.validate();
    if (n == 0) throw Error("sample count must be positive");
    std::vector<Sample> out;
    out.reserve(n);
    for (std::size_t i = 0; i < n; ++i) out.push_back(generate_sample(spec, sample_seed(seed, i)));
    return out;
}

struct DomainShift {
    double rotation_degrees = 30.0;
    double scale = 1.0;
    double offset = 1.0;
};

/// Target spec = base spec followed by the shift: rotate channels 0-1, scale
/// every channel, then add `offset` to every channel.
inline DomainSpec shifted_spec(const DomainSpec& base, const DomainShift& shift) {
    if (!std::isfinite(shift.rotation_degrees) || !std::isfinite(shift.scale) || !std::isfinite(shift.offset)) {
        throw Error("non-finite shift");
    }
    const std::size_t C = base.input_channels;
    std::vector<double> s = identity_transform(C);
    const double t = shift.rotation_degrees * std::numbers::pi / 180.0;
    if (C >= 2) {
        s[0] = std::cos(t);
        s[1] = -std::sin(t);
        s[C] = std::sin(t);
        s[C + 1] = std::cos(t);
    }
    for (double& v : s) v *= shift.scale;
    DomainSpec out = base;
    for (std::size_t a = 0; a < C; ++a) {
        out.offset[a] = shift.offset;
        for (std::size_t b = 0; b < C; ++b) {
            double m = 0.0;
            out.offset[a] += s[a * C + b] * base.offset[b];
            for (std::size_t j = 0; j < C; ++j) m += s[a * C + j] * base.transform[j * C + b];
            out.transform[a * C + b] = m;
        }
    }
    return out;
}

struct DomainPair {
    DomainSpec source_spec, target_spec;
    std::vector<Sample> source;
    std::vector<Sample> target;
    /// Held-out labelled target draw, for evaluation only.
    std::vector<Sample> target_validation;
};

struct PairSizes {
    std::size_t source = 64;
    std::size_t target = 64;
    std::size_t validation = 32;
    std::uint64_t source_seed = 1;
    std::uint64_t target_seed = 2;
    std::uint64_t validation_seed = 3;
};

inline DomainPair make_domain_pair(const DomainSpec& base, const DomainShift& shift, const PairSizes& sizes = {}) {
    DomainPair pair;
    pair.source_spec = base;
    pair.target_spec = shifted_spec(base, shift);
    pair.source = generate(pair.source_spec, sizes.source, sizes.source_seed);
    pair.target = generate(pair.target_spec, sizes.target, sizes.target_seed);
    if (sizes.validation > 0) {
        pair.target_validation = generate(pair.target_spec, sizes.validation, sizes.validation_seed);
    }
    return pair;
}

// ---------------------------------------------------------------------------
// Persistence

inline nlohmann::json spec_to_json(const DomainSpec& s) {
    return {{"num_classes", s.num_classes}, {"height", s.height}, {"width", s.width},
            {"input_channels", s.input_channels}, {"class_means", s.class_means},
            {"class_spread", s.class_spread}, {"transform", s.transform}, {"offset", s.offset},
            {"voronoi_sites", s.voronoi_sites}};
}

inline DomainSpec spec_from_json(const nlohmann::json& j) {
    DomainSpec s;
    j.at("num_classes").get_to(s.num_classes);
    j.at("height").get_to(s.height);
    j.at("width").get_to(s.width);
    j.at("input_channels").get_to(s.input_channels);
    j.at("class_means").get_to(s.class_means);
    j.at("class_spread").get_to(s.class_spread);
    j.at("transform").get_to(s.transform);
    j.at("offset").get_to(s.offset);
    j.at("voronoi_sites").get_to(s.voronoi_sites);
    return s;
}

inline std::string spec_hash(const DomainSpec& s) { return sha256_hex(spec_to_json(s).dump()); }

/// Writes manifest.json, inputs.catn (n x h x w x c) and labels.catn
/// (n x h x w, ignore stored as -1).
inline void save_dataset(const std::filesystem::path& dir, const std::vector<Sample>& samples,
                         const DomainSpec& spec, std::uint64_t seed) {
    if (samples.empty()) throw Error("empty dataset");
    std::filesystem::create_directories(dir);
    const std::size_t n = samples.size(), h = spec.height, w = spec.width, c = spec.input_channels;
    Tensor inputs({n, h, w, c});
    Tensor labels({n, h, w});
    for (std::size_t s = 0; s < n; ++s) {
        if (samples[s].input.shape() != std::vector<std::size_t>{h, w, c}) throw Error("sample shape mismatch");
        std::copy(samples[s].input.values().begin(), samples[s].input.values().end(),
                  inputs.values().begin() + static_cast<std::ptrdiff_t>(s * h * w * c));
        for (std::size_t i = 0; i < h * w; ++i) labels[s * h * w + i] = samples[s].label[i];
    }
    const auto input_bytes = encode_tensor(inputs);
    const auto label_bytes = encode_tensor(labels);
    write_file_bytes(dir / "inputs.catn", input_bytes);
    write_file_bytes(dir / "labels.catn", label_bytes);
    nlohmann::json manifest = {
        {"format", "clusteralign-dataset-v1"},
        {"count", n},
        {"num_classes", spec.num_classes},
        {"grid", {h, w}},
        {"input_channels", c},
        {"seed", seed},
        {"spec_hash", spec_hash(spec)},
        {"spec", spec_to_json(spec)},
        {"files",
         {{"inputs.catn", {{"sha256", sha256_hex(input_bytes)}}},
          {"labels.catn", {{"sha256", sha256_hex(label_bytes)}}}}},
    };
    write_file_bytes(dir / "manifest.json", manifest.dump(2) + "\n");
}

struct LoadedDataset {
    DomainSpec spec;
    std::uint64_t seed = 0;
    std::vector<Sample> samples;
};

inline LoadedDataset load_dataset(const std::filesystem::path& dir) {
    nlohmann::json manifest;
    try {
        manifest = nlohmann::json::parse(read_file_bytes(dir / "manifest.json"));
    } catch (const nlohmann::json::parse_error& e) {
        throw ParseError(std::string("bad manifest: ") + e.what(), e.byte);
    }
    LoadedDataset out;
    out.spec = spec_from_json(manifest.at("spec"));
    out.seed = manifest.at("seed").get<std::uint64_t>();
    const auto input_bytes = read_file_bytes(dir / "inputs.catn");
    const auto label_bytes = read_file_bytes(dir / "labels.catn");
    const Tensor inputs = decode_tensor(input_bytes);
    const Tensor labels = decode_tensor(label_bytes);
    if (sha256_hex(input_bytes) != manifest["files"]["inputs.catn"]["sha256"].get<std::string>() ||
        sha256_hex(label_bytes) != manifest["files"]["labels.catn"]["sha256"].get<std::string>()) {
        throw Error("dataset content hash mismatch");
    }
    const std::size_t n = manifest.at("count").get<std::size_t>();
    const std::size_t h = out.spec.height, w = out.spec.width, c = out.spec.input_channels;
    if (inputs.shape() != std::vector<std::size_t>{n, h, w, c}) throw ParseError("inputs shape mismatch", 8);
    if (labels.shape() != std::vector<std::size_t>{n, h, w}) throw ParseError("labels shape mismatch", 8);
    for (std::size_t s = 0; s < n; ++s) {
        Sample sample;
        sample.input = Tensor({h, w, c}, std::vector<double>(inputs.values().begin() + static_cast<std::ptrdiff_t>(s * h * w * c),
                                                            inputs.values().begin() + static_cast<std::ptrdiff_t>((s + 1) * h * w * c)));
        sample.label = LabelMap(h, w);
        for (std::size_t i = 0; i < h * w; ++i) sample.label[i] = static_cast<int>(labels[s * h * w + i]);
        sample.label.validate(out.spec.num_classes);
        out.samples.push_back(std::move(sample));
    }
    return out;
}

/// CSV sample schema (docs/csv_sample_schema.md):
///   header  row,col,label,x0,...,x{c-1}
///   one line per pixel, every (row, col) of the h x w grid exactly once;
///   label -1 marks an ignored pixel.
inline Sample sample_from_csv(const std::string& text, std::size_t height, std::size_t width) {
    std::istringstream in(text);
    std::string line;
    std::size_t line_no = 0;
    std::size_t channels = 0;
    Sample s;
    std::vector<bool> seen(height * width, false);
    while (std::getline(in, line)) {
        ++line_no;
        if (!line.empty() && line.back() == '\r') line.pop_back();
        if (line.empty()) continue;
        const auto cells = split_csv_line(line);
        if (channels == 0) {
            if (cells.size() < 4 || cells[0] != "row" || cells[1] != "col" || cells[2] != "label") {
                throw ParseError("expected header row,col,label,x0,...", line_no);
            }
            channels = cells.size() - 3;
            s.input = Tensor({height, width, channels});
            s.label = LabelMap(height, width, kIgnoreLabel);
            continue;
        }
        if (cells.size() != channels + 3) throw ParseError("wrong cell count", line_no);
        const double r = parse_double_cell(cells[0], line_no);
        const double c = parse_double_cell(cells[1], line_no);
        if (r < 0 || c < 0 || r >= static_cast<double>(height) || c >= static_cast<double>(width) ||
            r != std::floor(r) || c != std::floor(c)) {
            throw ParseError("pixel outside grid", line_no);
        }
        const std::size_t idx = static_cast<std::size_t>(r) * width + static_cast<std::size_t>(c);
        if (seen[idx]) throw ParseError("duplicate pixel", line_no);
        seen[idx] = true;
        s.label[idx] = static_cast<int>(parse_double_cell(cells[2], line_no));
        auto x = s.input.row(idx);
        for (std::size_t j = 0; j < channels; ++j) x[j] = parse_double_cell(cells[3 + j], line_no);
    }
    if (channels == 0) throw ParseError("missing header", line_no);
    for (bool b : seen) {
        if (!b) throw ParseError("missing pixels", line_no);
    }
    return s;
}

inline std::string sample_to_csv(const Sample& s) {
    const std::size_t h = s.label.height, w = s.label.width, c = s.input.row_width();
    std::string out = "row,col,label";
    for (std::size_t j = 0; j < c; ++j) out += ",x" + std::to_string(j);
    out += '\n';
    for (std::size_t r = 0; r < h; ++r) {
        for (std::size_t col = 0; col < w; ++col) {
            const std::size_t i = r * w + col;
            out += std::to_string(r) + "," + std::to_string(col) + "," + std::to_string(s.label[i]);
            for (double v : s.input.row(i)) out += "," + format_double(v);
            out += '\n';
        }
    }
    return out;
}

}  // namespace clusteralign::data

#endif  // CLUSTERALIGN_DATA_HPP
