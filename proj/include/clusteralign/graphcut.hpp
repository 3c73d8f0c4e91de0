#ifndef CLUSTERALIGN_GRAPHCUT_HPP
#define CLUSTERALIGN_GRAPHCUT_HPP

#include <Eigen/Dense>

#include <random>
#include <string>
#include <utility>
#include <vector>

#include "label_map.hpp"
#include "numerics.hpp"
#include "tensor_io.hpp"

/// Feature affinity graph over target pixels, the soft normalized-cut loss,
/// and hard Ncut / spectral clustering references.
namespace clusteralign::graphcut {

inline constexpr double kClassMassEpsilon = 1e-12;

struct AffinityGraph {
    std::size_t nodes = 0;
    /// n x n, row-stochastic, A(i, j) = softmax_j cos(f_i, f_j).
    Tensor affinity;
    /// n x n cosine similarities the affinity was built from.
    Tensor similarity;
    /// Row sums of the affinity.
    std::vector<double> degree;
    /// Grid position and flat pixel index of every node.
    std::vector<std::pair<std::size_t, std::size_t>> pixel_index;
    std::vector<std::size_t> pixels;
    std::size_t height = 0, width = 0, stride = 1;

    double a(std::size_t i, std::size_t j) const { return affinity[i * nodes + j]; }
};

/// Smallest stride that keeps the node count at or below `max_nodes`.
inline std::size_t default_stride(std::size_t h, std::size_t w, std::size_t max_nodes = 4096) {
    std::size_t s = 1;
    while (((h + s - 1) / s) * ((w + s - 1) / s) > max_nodes) ++s;
    return s;
}

inline AffinityGraph affinity_matrix(const FeatureMap& f, std::size_t stride) {
    if (f.rank() != 3) throw Error("feature map must be h x w x c");
    if (stride == 0) throw Error("stride must be positive");
    AffinityGraph g;
    g.height = f.dim(0);
    g.width = f.dim(1);
    g.stride = stride;
    for (std::size_t r = 0; r < g.height; r += stride) {
        for (std::size_t c = 0; c < g.width; c += stride) {
            g.pixel_index.emplace_back(r, c);
            g.pixels.push_back(r * g.width + c);
        }
    }
    const std::size_t n = g.nodes = g.pixels.size();
    const std::size_t ch = f.row_width();

    std::vector<double> units(n * ch);
    for (std::size_t a = 0; a < n; ++a) {
        const auto row = f.row(g.pixels[a]);
        const double norm = l2_norm(row);
        if (!(norm > kNormEpsilon)) throw Error("degenerate feature");
        for (std::size_t j = 0; j < ch; ++j) units[a * ch + j] = row[j] / norm;
    }
    g.similarity = Tensor({n, n});
    g.affinity = Tensor({n, n});
    g.degree.assign(n, 0.0);
    for (std::size_t a = 0; a < n; ++a) {
        const std::span<const double> ua(units.data() + a * ch, ch);
        auto sim = g.similarity.row(a);
        for (std::size_t b = 0; b < n; ++b) {
            sim[b] = a == b ? 1.0 : std::clamp(dot(ua, {units.data() + b * ch, ch}), -1.0, 1.0);
        }
        const auto soft = softmax(sim);
        auto aff = g.affinity.row(a);
        double total = 0.0;
        for (std::size_t b = 0; b < n; ++b) {
            aff[b] = soft[b];
            total += soft[b];
        }
        g.degree[a] = total;
    }
    return g;
}

/// Rows of a h x w x K score map at the graph's nodes, as an n x K tensor.
inline Tensor restrict_to_graph(const ScoreMap& p, const AffinityGraph& g) {
    if (p.rank() != 3 || p.dim(0) != g.height || p.dim(1) != g.width) {
        throw Error("score map does not match graph grid");
    }
    const std::size_t K = p.row_width();
    Tensor out({g.nodes, K});
    for (std::size_t a = 0; a < g.nodes; ++a) {
        const auto src = p.row(g.pixels[a]);
        std::copy(src.begin(), src.end(), out.row(a).begin());
    }
    return out;
}

/// Soft normalized cut: sum_k p_k^T A (1 - p_k) / (d^T p_k) over classes with
/// non-negligible mass. `node_scores` is n x K. Gradient keys: "scores"
/// (n x K) and "affinity" (n x n, dL/dA including the degree path).
inline LossValue ncut_loss(const Tensor& node_scores, const AffinityGraph& g) {
    if (node_scores.rank() != 2 || node_scores.dim(0) != g.nodes) {
        throw Error("shape mismatch between scores and graph");
    }
    const std::size_t n = g.nodes;
    const std::size_t K = node_scores.dim(1);
    const auto& A = g.affinity;
    const auto& P = node_scores;

    // A p_k and A^T p_k for every class, stored n x K.
    std::vector<double> Ap(n * K, 0.0), ATp(n * K, 0.0);
    for (std::size_t i = 0; i < n; ++i) {
        for (std::size_t j = 0; j < n; ++j) {
            const double aij = A[i * n + j];
            for (std::size_t k = 0; k < K; ++k) {
                Ap[i * K + k] += aij * P[j * K + k];
                ATp[j * K + k] += aij * P[i * K + k];
            }
        }
    }
    std::vector<double> numer(K, 0.0), denom(K, 0.0);
    for (std::size_t i = 0; i < n; ++i) {
        for (std::size_t k = 0; k < K; ++k) {
            const double p = P[i * K + k];
            denom[k] += g.degree[i] * p;
            numer[k] += g.degree[i] * p - p * Ap[i * K + k];
        }
    }

    LossValue out;
    Tensor grad_p({n, K});
    std::vector<double> a_coef(K, 0.0), inv_den(K, 0.0);
    for (std::size_t k = 0; k < K; ++k) {
        if (!(denom[k] > kClassMassEpsilon)) {
            ++out.skipped;
            continue;
        }
        out.value += numer[k] / denom[k];
        inv_den[k] = 1.0 / denom[k];
        a_coef[k] = inv_den[k] - numer[k] * inv_den[k] * inv_den[k];
        for (std::size_t i = 0; i < n; ++i) {
            const double d = g.degree[i];
            grad_p[i * K + k] = (d - Ap[i * K + k] - ATp[i * K + k]) * inv_den[k] -
                                numer[k] * d * inv_den[k] * inv_den[k];
        }
    }

    // dL/dA_ij = sum_k p_ik a_k - sum_k p_ik p_jk / den_k
    Tensor grad_a({n, n});
    std::vector<double> scaled(K);
    for (std::size_t i = 0; i < n; ++i) {
        double base = 0.0;
        for (std::size_t k = 0; k < K; ++k) {
            base += P[i * K + k] * a_coef[k];
            scaled[k] = P[i * K + k] * inv_den[k];
        }
        auto row = grad_a.row(i);
        for (std::size_t j = 0; j < n; ++j) {
            double cross = 0.0;
            for (std::size_t k = 0; k < K; ++k) cross += scaled[k] * P[j * K + k];
            row[j] = base - cross;
        }
    }
    out.gradients["scores"] = std::move(grad_p);
    out.gradients["affinity"] = std::move(grad_a);
    return out;
}

/// Chains dL/dA through the row softmax and the cosine similarities back to
/// the h x w x c feature map (zero at pixels that are not graph nodes).
inline Tensor affinity_gradient_to_features(const FeatureMap& f, const AffinityGraph& g,
                                            const Tensor& grad_affinity) {
    const std::size_t n = g.nodes;
    const std::size_t ch = f.row_width();
    // dL/dS_ij = A_ij (G_ij - sum_j' A_ij' G_ij')
    Tensor grad_s({n, n});
    for (std::size_t i = 0; i < n; ++i) {
        const auto arow = g.affinity.row(i);
        const auto grow = grad_affinity.row(i);
        const double mean = dot(arow, grow);
        auto srow = grad_s.row(i);
        for (std::size_t j = 0; j < n; ++j) srow[j] = arow[j] * (grow[j] - mean);
    }
    std::vector<double> units(n * ch), norms(n);
    for (std::size_t a = 0; a < n; ++a) {
        const auto row = f.row(g.pixels[a]);
        norms[a] = l2_norm(row);
        for (std::size_t j = 0; j < ch; ++j) units[a * ch + j] = row[j] / norms[a];
    }
    Tensor out(f.shape());
    std::vector<double> acc(ch);
    for (std::size_t i = 0; i < n; ++i) {
        std::fill(acc.begin(), acc.end(), 0.0);
        double radial = 0.0;
        for (std::size_t j = 0; j < n; ++j) {
            if (j == i) continue;
            const double h = grad_s[i * n + j] + grad_s[j * n + i];
            radial += h * g.similarity[i * n + j];
            for (std::size_t t = 0; t < ch; ++t) acc[t] += h * units[j * ch + t];
        }
        auto dst = out.row(g.pixels[i]);
        for (std::size_t t = 0; t < ch; ++t) dst[t] = (acc[t] - radial * units[i * ch + t]) / norms[i];
    }
    return out;
}

/// L_n of a score map over the affinity graph of a feature map. Gradient
/// keys: "scores" (h x w x K) and "features" (h x w x c, through A only).
inline LossValue ncut_loss(const ScoreMap& p, const FeatureMap& f, std::size_t stride) {
    const auto g = affinity_matrix(f, stride);
    auto loss = ncut_loss(restrict_to_graph(p, g), g);
    Tensor grad_p(p.shape());
    const auto& node_grad = loss.gradient("scores");
    for (std::size_t a = 0; a < g.nodes; ++a) {
        const auto src = node_grad.row(a);
        std::copy(src.begin(), src.end(), grad_p.row(g.pixels[a]).begin());
    }
    loss.gradients["features"] = affinity_gradient_to_features(f, g, loss.gradient("affinity"));
    loss.gradients["scores"] = std::move(grad_p);
    loss.gradients.erase("affinity");
    return loss;
}

/// K-way normalized cut of a hard labelling, summed edge by edge.
inline double hard_ncut_value(const std::vector<int>& labels, const AffinityGraph& g, std::size_t K) {
    if (labels.size() != g.nodes) throw Error("label count does not match graph");
    double total = 0.0;
    for (std::size_t k = 0; k < K; ++k) {
        double cut = 0.0, assoc = 0.0;
        bool any = false;
        for (std::size_t i = 0; i < g.nodes; ++i) {
            if (labels[i] != static_cast<int>(k)) continue;
            any = true;
            for (std::size_t j = 0; j < g.nodes; ++j) {
                assoc += g.a(i, j);
                if (labels[j] != static_cast<int>(k)) cut += g.a(i, j);
            }
        }
        if (any) total += cut / assoc;
    }
    return total;
}

/// Spectral clustering on the symmetrized affinity: K smallest eigenvectors
/// of the normalized Laplacian, row-normalized, then seeded k-means.
inline std::vector<int> spectral_cluster(const AffinityGraph& g, std::size_t K, std::uint64_t seed = 0,
                                         std::size_t max_kmeans_iters = 100) {
    const std::size_t n = g.nodes;
    if (K == 0 || n < K) throw Error("spectral clustering needs n >= K >= 1");
    Eigen::MatrixXd W(n, n);
    for (std::size_t i = 0; i < n; ++i) {
        for (std::size_t j = 0; j < n; ++j) W(i, j) = 0.5 * (g.a(i, j) + g.a(j, i));
    }
    const Eigen::VectorXd inv_sqrt_deg = W.rowwise().sum().array().rsqrt();
    Eigen::MatrixXd L = -(inv_sqrt_deg.asDiagonal() * W * inv_sqrt_deg.asDiagonal());
    L.diagonal().array() += 1.0;
    Eigen::SelfAdjointEigenSolver<Eigen::MatrixXd> solver(L);
    if (solver.info() != Eigen::Success) {
        throw Error("eigensolver did not converge on a " + std::to_string(n) + "-node Laplacian");
    }
    // Eigenvalues come back ascending.
    Eigen::MatrixXd embed = solver.eigenvectors().leftCols(static_cast<Eigen::Index>(K));
    for (Eigen::Index i = 0; i < embed.rows(); ++i) {
        const double norm = embed.row(i).norm();
        if (norm > kNormEpsilon) embed.row(i) /= norm;
    }

    // k-means++ style seeding: first center random, then farthest-weighted.
    std::mt19937_64 rng(seed);
    std::vector<Eigen::Index> chosen;
    chosen.push_back(static_cast<Eigen::Index>(std::uniform_int_distribution<std::size_t>(0, n - 1)(rng)));
    std::vector<double> nearest(n);
    while (chosen.size() < K) {
        double total = 0.0;
        for (std::size_t i = 0; i < n; ++i) {
            double best = std::numeric_limits<double>::infinity();
            for (auto c : chosen) best = std::min(best, (embed.row(static_cast<Eigen::Index>(i)) - embed.row(c)).squaredNorm());
            nearest[i] = best;
            total += best;
        }
        Eigen::Index next = -1;
        if (total > 0.0) {
            double pick = std::uniform_real_distribution<double>(0.0, total)(rng);
            for (std::size_t i = 0; i < n; ++i) {
                pick -= nearest[i];
                if (pick <= 0.0 && nearest[i] > 0.0) {
                    next = static_cast<Eigen::Index>(i);
                    break;
                }
            }
        }
        if (next < 0) {
            // Remaining points coincide with centers; take the first unchosen node.
            for (std::size_t i = 0; i < n && next < 0; ++i) {
                if (std::find(chosen.begin(), chosen.end(), static_cast<Eigen::Index>(i)) == chosen.end()) {
                    next = static_cast<Eigen::Index>(i);
                }
            }
        }
        chosen.push_back(next);
    }
    Eigen::MatrixXd centers(static_cast<Eigen::Index>(K), embed.cols());
    for (std::size_t k = 0; k < K; ++k) centers.row(static_cast<Eigen::Index>(k)) = embed.row(chosen[k]);

    std::vector<int> labels(n, -1);
    // Seed nodes keep their own cluster on the first assignment so that K == n
    // (and coincident points) still yields K non-empty clusters.
    for (std::size_t k = 0; k < K; ++k) labels[static_cast<std::size_t>(chosen[k])] = static_cast<int>(k);
    for (std::size_t iter = 0; iter < max_kmeans_iters; ++iter) {
        bool changed = false;
        for (std::size_t i = 0; i < n; ++i) {
            if (iter == 0 && labels[i] >= 0) continue;
            int best = 0;
            double best_d = std::numeric_limits<double>::infinity();
            for (std::size_t k = 0; k < K; ++k) {
                const double d = (embed.row(static_cast<Eigen::Index>(i)) - centers.row(static_cast<Eigen::Index>(k))).squaredNorm();
                if (d < best_d) {
                    best_d = d;
                    best = static_cast<int>(k);
                }
            }
            if (labels[i] != best) {
                labels[i] = best;
                changed = true;
            }
        }
        if (!changed && iter > 0) break;
        Eigen::MatrixXd sums = Eigen::MatrixXd::Zero(centers.rows(), centers.cols());
        std::vector<std::size_t> counts(K, 0);
        for (std::size_t i = 0; i < n; ++i) {
            sums.row(labels[i]) += embed.row(static_cast<Eigen::Index>(i));
            ++counts[static_cast<std::size_t>(labels[i])];
        }
        for (std::size_t k = 0; k < K; ++k) {
            if (counts[k] > 0) centers.row(static_cast<Eigen::Index>(k)) = sums.row(static_cast<Eigen::Index>(k)) / static_cast<double>(counts[k]);
        }
    }
    return labels;
}

inline std::string affinity_to_csv(const AffinityGraph& g) { return tensor_to_csv(g.affinity); }

inline std::string affinity_to_edge_list(const AffinityGraph& g) {
    std::string out = "i,j,a_ij\n";
    for (std::size_t i = 0; i < g.nodes; ++i) {
        for (std::size_t j = 0; j < g.nodes; ++j) {
            out += std::to_string(i) + "," + std::to_string(j) + "," + format_double(g.a(i, j)) + "\n";
        }
    }
    return out;
}

/// Cosine similarity of the probe pixel to every pixel, as an h x w grid.
inline Tensor affinity_probe(const FeatureMap& f, std::size_t row, std::size_t col) {
    if (f.rank() != 3 || row >= f.dim(0) || col >= f.dim(1)) throw Error("probe outside feature map");
    const auto probe = f.row(row * f.dim(1) + col);
    Tensor out({f.dim(0), f.dim(1)});
    for (std::size_t i = 0; i < out.size(); ++i) out[i] = cosine_similarity(probe, f.row(i));
    return out;
}

}  // namespace clusteralign::graphcut

#endif  // CLUSTERALIGN_GRAPHCUT_HPP
