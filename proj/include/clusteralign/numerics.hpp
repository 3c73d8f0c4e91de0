#ifndef CLUSTERALIGN_NUMERICS_HPP
#define CLUSTERALIGN_NUMERICS_HPP

#include <algorithm>
#include <cmath>
#include <cstddef>
#include <cstdint>
#include <functional>
#include <limits>
#include <map>
#include <numeric>
#include <random>
#include <span>
#include <stdexcept>
#include <string>
#include <vector>

namespace clusteralign {

/// Base error for every failure raised by the library. The message carries
/// the short reason string ("empty input", "degenerate vector", ...).
class Error : public std::runtime_error {
public:
    using std::runtime_error::runtime_error;
};

inline constexpr double kNormEpsilon = 1e-12;
inline constexpr double kLogFloor = 1e-12;

/// Dense row-major tensor of doubles.
class Tensor {
public:
    Tensor() = default;

    explicit Tensor(std::vector<std::size_t> shape, double fill = 0.0)
        : shape_(std::move(shape)), data_(element_count(shape_), fill) {}

    Tensor(std::vector<std::size_t> shape, std::vector<double> data)
        : shape_(std::move(shape)), data_(std::move(data)) {
        if (data_.size() != element_count(shape_)) {
            throw Error("tensor data length does not match shape");
        }
    }

    static std::size_t element_count(const std::vector<std::size_t>& shape) {
        return std::accumulate(shape.begin(), shape.end(), std::size_t{1},
                               std::multiplies<>());
    }

    const std::vector<std::size_t>& shape() const { return shape_; }
    std::size_t rank() const { return shape_.size(); }
    std::size_t dim(std::size_t axis) const { return shape_.at(axis); }
    std::size_t size() const { return data_.size(); }

    std::span<double> data() { return data_; }
    std::span<const double> data() const { return data_; }
    std::vector<double>& values() { return data_; }
    const std::vector<double>& values() const { return data_; }

    double& operator[](std::size_t i) { return data_[i]; }
    double operator[](std::size_t i) const { return data_[i]; }

    /// Row view over the last axis: for an h x w x c map, row(i) is pixel i.
    std::span<double> row(std::size_t i) {
        const std::size_t width = shape_.back();
        return std::span<double>(data_).subspan(i * width, width);
    }
    std::span<const double> row(std::size_t i) const {
        const std::size_t width = shape_.back();
        return std::span<const double>(data_).subspan(i * width, width);
    }
    std::size_t rows() const { return shape_.empty() ? 0 : data_.size() / shape_.back(); }
    std::size_t row_width() const { return shape_.empty() ? 0 : shape_.back(); }

    bool all_finite() const {
        return std::all_of(data_.begin(), data_.end(),
                           [](double v) { return std::isfinite(v); });
    }

    friend bool operator==(const Tensor&, const Tensor&) = default;

private:
    std::vector<std::size_t> shape_;
    std::vector<double> data_;
};

/// h x w x c per-pixel features.
using FeatureMap = Tensor;
/// h x w x K per-pixel class probabilities.
using ScoreMap = Tensor;

/// Scalar loss with one gradient per named tensor argument.
struct LossValue {
    double value = 0.0;
    std::map<std::string, Tensor> gradients;
    /// Pixels or classes that were excluded from the loss (absent class, etc).
    std::size_t skipped = 0;

    const Tensor& gradient(const std::string& name) const {
        auto it = gradients.find(name);
        if (it == gradients.end()) throw Error("no gradient named '" + name + "'");
        return it->second;
    }
};

inline double dot(std::span<const double> a, std::span<const double> b) {
    double s = 0.0;
    for (std::size_t i = 0; i < a.size(); ++i) s += a[i] * b[i];
    return s;
}

inline double l2_norm(std::span<const double> v) { return std::sqrt(dot(v, v)); }

/// Max-subtracted softmax.
inline std::vector<double> softmax(std::span<const double> v) {
    if (v.empty()) throw Error("empty input");
    const double peak = *std::max_element(v.begin(), v.end());
    std::vector<double> out(v.size());
    double total = 0.0;
    for (std::size_t i = 0; i < v.size(); ++i) {
        out[i] = std::exp(v[i] - peak);
        total += out[i];
    }
    for (double& x : out) x /= total;
    return out;
}

/// log(sum(exp(v))) with the same stabilization as softmax.
inline double log_sum_exp(std::span<const double> v) {
    if (v.empty()) throw Error("empty input");
    const double peak = *std::max_element(v.begin(), v.end());
    double total = 0.0;
    for (double x : v) total += std::exp(x - peak);
    return peak + std::log(total);
}

inline double cosine_similarity(std::span<const double> a, std::span<const double> b) {
    if (a.size() != b.size()) throw Error("length mismatch");
    const double na = l2_norm(a);
    const double nb = l2_norm(b);
    if (na <= kNormEpsilon || nb <= kNormEpsilon) throw Error("degenerate vector");
    return std::clamp(dot(a, b) / (na * nb), -1.0, 1.0);
}

/// d cos(a, b) / d a, accumulated as scale * gradient into `out`.
inline void accumulate_cosine_gradient(std::span<const double> a, std::span<const double> b,
                                       double scale, std::span<double> out) {
    const double na = l2_norm(a);
    const double nb = l2_norm(b);
    const double cos_ab = dot(a, b) / (na * nb);
    for (std::size_t i = 0; i < a.size(); ++i) {
        out[i] += scale * (b[i] / (na * nb) - cos_ab * a[i] / (na * na));
    }
}

inline std::vector<double> l2_normalize(std::span<const double> v) {
    const double n = l2_norm(v);
    if (!(n > kNormEpsilon)) throw Error("zero-norm statistic");
    std::vector<double> out(v.begin(), v.end());
    for (double& x : out) x /= n;
    return out;
}

inline double euclidean_distance(std::span<const double> a, std::span<const double> b) {
    if (a.size() != b.size()) throw Error("length mismatch");
    double s = 0.0;
    for (std::size_t i = 0; i < a.size(); ++i) {
        const double d = a[i] - b[i];
        s += d * d;
    }
    return std::sqrt(s);
}

// ---------------------------------------------------------------------------
// Finite-difference gradient verification

struct GradientCheckReport {
    /// Max relative error per input, same order as the inputs.
    std::vector<double> max_relative_error;
    std::size_t probes_evaluated = 0;

    double worst() const {
        return max_relative_error.empty()
                   ? 0.0
                   : *std::max_element(max_relative_error.begin(), max_relative_error.end());
    }
};

/// Errors are |analytic - numeric| / max(|analytic|, |numeric|, floor); the
/// floor keeps gradients that are zero up to round-off from reading as 100%.
inline constexpr double kGradientMagnitudeFloor = 1e-5;

inline double relative_gradient_error(double analytic, double numeric,
                                      double floor = kGradientMagnitudeFloor) {
    const double scale = std::max({std::abs(analytic), std::abs(numeric), floor});
    return std::abs(analytic - numeric) / scale;
}

using ScalarFunction = std::function<double(const std::vector<Tensor>&)>;

/// Compares analytic gradients against central differences at `probes`
/// random coordinates of every input (all coordinates when the input is
/// smaller than `probes`).
inline GradientCheckReport finite_difference_check(const ScalarFunction& loss,
                                                   std::vector<Tensor> inputs,
                                                   const std::vector<Tensor>& analytic,
                                                   double eps, std::size_t probes,
                                                   std::uint64_t seed = 0) {
    if (eps < 1e-7 || eps > 1e-3) throw Error("finite-difference step out of range");
    if (analytic.size() != inputs.size()) throw Error("gradient count mismatch");
    if (!std::isfinite(loss(inputs))) throw Error("unstable probe");

    std::mt19937_64 rng(seed);
    GradientCheckReport report;
    report.max_relative_error.assign(inputs.size(), 0.0);
    for (std::size_t t = 0; t < inputs.size(); ++t) {
        const std::size_t n = inputs[t].size();
        if (analytic[t].size() != n) throw Error("gradient shape mismatch");
        std::vector<std::size_t> coords(n);
        std::iota(coords.begin(), coords.end(), std::size_t{0});
        if (n > probes) {
            std::shuffle(coords.begin(), coords.end(), rng);
            coords.resize(probes);
        }
        for (std::size_t c : coords) {
            const double saved = inputs[t][c];
            inputs[t][c] = saved + eps;
            const double up = loss(inputs);
            inputs[t][c] = saved - eps;
            const double down = loss(inputs);
            inputs[t][c] = saved;
            if (!std::isfinite(up) || !std::isfinite(down)) throw Error("unstable probe");
            const double numeric = (up - down) / (2.0 * eps);
            report.max_relative_error[t] = std::max(
                report.max_relative_error[t], relative_gradient_error(analytic[t][c], numeric));
            ++report.probes_evaluated;
        }
    }
    return report;
}

}  // namespace clusteralign

#endif  // CLUSTERALIGN_NUMERICS_HPP
