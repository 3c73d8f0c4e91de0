#ifndef CLUSTERALIGN_LABEL_MAP_HPP
#define CLUSTERALIGN_LABEL_MAP_HPP

#include <cstddef>
#include <vector>

#include "numerics.hpp"

namespace clusteralign {

inline constexpr int kIgnoreLabel = -1;

/// h x w grid of class indices; kIgnoreLabel marks unscored pixels.
struct LabelMap {
    std::size_t height = 0;
    std::size_t width = 0;
    std::vector<int> labels;

    LabelMap() = default;
    LabelMap(std::size_t h, std::size_t w, int fill = 0)
        : height(h), width(w), labels(h * w, fill) {}
    LabelMap(std::size_t h, std::size_t w, std::vector<int> values)
        : height(h), width(w), labels(std::move(values)) {
        if (labels.size() != h * w) throw Error("label map size mismatch");
    }

    std::size_t size() const { return labels.size(); }
    int operator[](std::size_t i) const { return labels[i]; }
    int& operator[](std::size_t i) { return labels[i]; }
    int at(std::size_t r, std::size_t c) const { return labels[r * width + c]; }

    /// Throws unless every non-ignore label is below `num_classes`.
    void validate(std::size_t num_classes) const {
        for (int v : labels) {
            if (v == kIgnoreLabel) continue;
            if (v < 0 || static_cast<std::size_t>(v) >= num_classes) {
                throw Error("label " + std::to_string(v) + " out of range");
            }
        }
    }

    friend bool operator==(const LabelMap&, const LabelMap&) = default;
};

/// Checks that a feature/score map is h x w x * and matches the label grid.
inline void require_same_grid(const Tensor& map, const LabelMap& y) {
    if (map.rank() != 3 || map.dim(0) != y.height || map.dim(1) != y.width) {
        throw Error("shape mismatch between map and labels");
    }
}

}  // namespace clusteralign

#endif  // CLUSTERALIGN_LABEL_MAP_HPP
