#pragma once

#include <cstdint>
#include <utility>
#include <vector>

#include "feainf/graph.hpp"
#include "feainf/tensor.hpp"

namespace feainf {

/// Bank of T = H1*W1 fixed feature masks. Mask t carries 1 + alpha*u on every
/// channel of its focal cell (row t/W1, column t%W1) and alpha*u elsewhere,
/// with u drawn once from U(0,1) per entry. Masks are frozen after
/// construction and persist through checkpoints.
struct MaskBank {
    int h1 = 0, w1 = 0, c1 = 0;
    double alpha = 0.0;
    uint64_t seed = 0;
    std::vector<Tensor> masks; // T tensors {H1,W1,C1}

    int count() const { return static_cast<int>(masks.size()); }
    std::pair<int, int> focal(int t) const { return {t / w1, t % w1}; }

    static MaskBank build(int h1, int w1, int c1, double alpha, uint64_t seed);
};

/// Region vectors z_t = spatial mean of mask t times the feature maps.
std::vector<Tensor> extract_features(const Tensor& feature_maps, const MaskBank& bank);

/// In-graph extraction; masks enter as constants. Returns T vector nodes {C1}.
std::vector<int> build_extract(Graph& g, int feature_node, const MaskBank& bank);

/// Single-region variant for graphs that only track one detection region.
int build_extract_region(Graph& g, int feature_node, const MaskBank& bank, int region);

} // namespace feainf
