// Independent reference implementations used only by the tests. They share no
// code path with the library beyond the Tensor/LabelMap containers.
#ifndef CLUSTERALIGN_TESTS_ORACLES_HPP
#define CLUSTERALIGN_TESTS_ORACLES_HPP

#include <clusteralign/alignment.hpp>
#include <clusteralign/graphcut.hpp>
#include <clusteralign/label_map.hpp>
#include <clusteralign/numerics.hpp>

#include <cmath>
#include <random>
#include <vector>

namespace oracle {

using clusteralign::LabelMap;
using clusteralign::Tensor;

inline double cosine(const std::vector<double>& a, const std::vector<double>& b) {
    double ab = 0, aa = 0, bb = 0;
    for (std::size_t i = 0; i < a.size(); ++i) {
        ab += a[i] * b[i];
        aa += a[i] * a[i];
        bb += b[i] * b[i];
    }
    return ab / (std::sqrt(aa) * std::sqrt(bb));
}

inline std::vector<double> pixel(const Tensor& t, std::size_t i) {
    const std::size_t w = t.shape().back();
    return std::vector<double>(t.values().begin() + static_cast<std::ptrdiff_t>(i * w),
                               t.values().begin() + static_cast<std::ptrdiff_t>((i + 1) * w));
}

/// Exhaustive O(M^2) summed-similarity argmax; scores within a relative 1e-12
/// count as tied and the lowest index wins.
inline std::size_t prototype_index(const std::vector<std::vector<double>>& members) {
    std::size_t best = 0;
    double best_score = -1e300;
    for (std::size_t m = 0; m < members.size(); ++m) {
        double s = 0.0;
        for (std::size_t q = 0; q < members.size(); ++q) s += cosine(members[m], members[q]);
        if (m == 0 || s > best_score + 1e-12 * std::max(1.0, std::abs(best_score))) {
            best_score = s;
            best = m;
        }
    }
    return best;
}

inline std::vector<int> argmax_labels(const Tensor& scores) {
    const std::size_t K = scores.shape().back();
    std::vector<int> out;
    for (std::size_t i = 0; i < scores.size() / K; ++i) {
        int best = 0;
        for (std::size_t k = 1; k < K; ++k) {
            if (scores[i * K + k] > scores[i * K + static_cast<std::size_t>(best)]) best = static_cast<int>(k);
        }
        out.push_back(best);
    }
    return out;
}

/// Row-softmax of cosine similarities, element by element, at the given stride.
inline std::vector<std::vector<double>> affinity(const Tensor& f, std::size_t stride) {
    std::vector<std::size_t> nodes;
    for (std::size_t r = 0; r < f.dim(0); r += stride) {
        for (std::size_t c = 0; c < f.dim(1); c += stride) nodes.push_back(r * f.dim(1) + c);
    }
    const std::size_t n = nodes.size();
    std::vector<std::vector<double>> A(n, std::vector<double>(n));
    for (std::size_t i = 0; i < n; ++i) {
        double z = 0.0;
        for (std::size_t j = 0; j < n; ++j) {
            A[i][j] = std::exp(cosine(pixel(f, nodes[i]), pixel(f, nodes[j])));
            z += A[i][j];
        }
        for (auto& v : A[i]) v /= z;
    }
    return A;
}

struct TwoPassStats {
    std::vector<std::size_t> counts;
    std::vector<std::vector<double>> means;
};

/// Counts first, then per-class sums divided in a second sweep.
inline TwoPassStats class_means(const Tensor& f, const LabelMap& y, std::size_t K) {
    const std::size_t c = f.shape().back();
    TwoPassStats s{std::vector<std::size_t>(K, 0), std::vector<std::vector<double>>(K, std::vector<double>(c, 0.0))};
    for (int v : y.labels) {
        if (v >= 0) ++s.counts[static_cast<std::size_t>(v)];
    }
    for (std::size_t k = 0; k < K; ++k) {
        if (s.counts[k] == 0) continue;
        for (std::size_t i = 0; i < y.size(); ++i) {
            if (y[i] != static_cast<int>(k)) continue;
            for (std::size_t j = 0; j < c; ++j) s.means[k][j] += f[i * c + j] / static_cast<double>(s.counts[k]);
        }
    }
    return s;
}

/// Builds an AffinityGraph from an explicit row-stochastic matrix.
inline clusteralign::graphcut::AffinityGraph graph_from(const std::vector<std::vector<double>>& A) {
    clusteralign::graphcut::AffinityGraph g;
    const std::size_t n = A.size();
    g.nodes = n;
    g.affinity = Tensor({n, n});
    g.similarity = Tensor({n, n});
    g.degree.assign(n, 0.0);
    g.height = 1;
    g.width = n;
    for (std::size_t i = 0; i < n; ++i) {
        g.pixel_index.emplace_back(0, i);
        g.pixels.push_back(i);
        for (std::size_t j = 0; j < n; ++j) {
            g.affinity[i * n + j] = A[i][j];
            g.degree[i] += A[i][j];
        }
    }
    return g;
}

/// Random strictly positive row-stochastic n x n matrix.
inline std::vector<std::vector<double>> random_stochastic(std::size_t n, std::mt19937_64& rng) {
    std::uniform_real_distribution<double> u(0.05, 1.0);
    std::vector<std::vector<double>> A(n, std::vector<double>(n));
    for (auto& row : A) {
        double s = 0.0;
        for (auto& v : row) s += v = u(rng);
        for (auto& v : row) v /= s;
    }
    return A;
}

inline Tensor random_tensor(std::vector<std::size_t> shape, std::mt19937_64& rng, double scale = 1.0) {
    Tensor t(std::move(shape));
    std::normal_distribution<double> n(0.0, scale);
    for (double& v : t.values()) v = n(rng);
    return t;
}

inline LabelMap random_labels(std::size_t h, std::size_t w, std::size_t K, std::mt19937_64& rng) {
    LabelMap y(h, w);
    std::uniform_int_distribution<int> cls(0, static_cast<int>(K) - 1);
    for (auto& v : y.labels) v = cls(rng);
    return y;
}

inline Tensor random_simplex(std::size_t h, std::size_t w, std::size_t K, std::mt19937_64& rng) {
    Tensor p({h, w, K});
    std::uniform_real_distribution<double> u(0.01, 1.0);
    for (std::size_t i = 0; i < h * w; ++i) {
        double s = 0.0;
        for (std::size_t k = 0; k < K; ++k) s += p[i * K + k] = u(rng);
        for (std::size_t k = 0; k < K; ++k) p[i * K + k] /= s;
    }
    return p;
}

}  // namespace oracle

#endif  // CLUSTERALIGN_TESTS_ORACLES_HPP
