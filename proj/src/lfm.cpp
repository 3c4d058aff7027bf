#include "feainf/lfm.hpp"

#include "feainf/rng.hpp"

namespace feainf {

MaskBank MaskBank::build(int h1, int w1, int c1, double alpha, uint64_t seed) {
    if (h1 < 1 || w1 < 1 || c1 < 1) throw ShapeError("mask bank extents must be positive");
    if (alpha < 0.0) throw DomainError("mask alpha must be non-negative");
    MaskBank bank;
    bank.h1 = h1;
    bank.w1 = w1;
    bank.c1 = c1;
    bank.alpha = alpha;
    bank.seed = seed;
    Rng rng(seed);
    const int T = h1 * w1;
    bank.masks.reserve(static_cast<size_t>(T));
    for (int t = 0; t < T; ++t) {
        Tensor m({h1, w1, c1});
        const int fr = t / w1, fc = t % w1;
        for (int i = 0; i < h1; ++i)
            for (int j = 0; j < w1; ++j) {
                const double base = (i == fr && j == fc) ? 1.0 : 0.0;
                for (int c = 0; c < c1; ++c) m.at3(i, j, c) = base + alpha * rng.uniform01();
            }
        bank.masks.push_back(std::move(m));
    }
    return bank;
}

std::vector<Tensor> extract_features(const Tensor& feature_maps, const MaskBank& bank) {
    if (feature_maps.shape != Shape{bank.h1, bank.w1, bank.c1})
        throw ShapeError("feature maps " + shape_str(feature_maps.shape) + " do not match mask bank " +
                         shape_str({bank.h1, bank.w1, bank.c1}));
    std::vector<Tensor> out;
    out.reserve(bank.masks.size());
    const int hw = bank.h1 * bank.w1;
    for (const Tensor& m : bank.masks) {
        Tensor z({bank.c1});
        for (int p = 0; p < hw; ++p)
            for (int c = 0; c < bank.c1; ++c) z[c] += m[p * bank.c1 + c] * feature_maps[p * bank.c1 + c];
        for (int c = 0; c < bank.c1; ++c) z[c] /= hw;
        out.push_back(std::move(z));
    }
    return out;
}

std::vector<int> build_extract(Graph& g, int feature_node, const MaskBank& bank) {
    std::vector<int> z;
    z.reserve(bank.masks.size());
    for (const Tensor& m : bank.masks) z.push_back(g.spatial_mean(g.mul(g.constant(m), feature_node)));
    return z;
}

int build_extract_region(Graph& g, int feature_node, const MaskBank& bank, int region) {
    if (region < 0 || region >= bank.count()) throw ShapeError("region index out of range");
    return g.spatial_mean(g.mul(g.constant(bank.masks[static_cast<size_t>(region)]), feature_node));
}

} // namespace feainf
