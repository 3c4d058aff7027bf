#pragma once

#include "feainf/model.hpp"
#include "feainf/rng.hpp"
#include "feainf/synthdata.hpp"

namespace helpers {

// Small encoder geometries that keep graph sizes test-friendly.
// 16 -> 8 -> 4 -> 3 grid (T = 9) with narrow channels.
inline feainf::EncoderConfig tiny_config(int hw = 16, int c1 = 8) {
    feainf::EncoderConfig cfg;
    cfg.height = hw;
    cfg.width = hw;
    cfg.channels = 1;
    cfg.convs = {{3, 2, 1, 4}, {3, 2, 1, 6}, {2, 1, 0, 6}};
    cfg.feature_channels = c1;
    return cfg;
}

// Single-region model: 16 -> 8 -> 4 -> 2 -> 1.
inline feainf::EncoderConfig single_region_config() {
    feainf::EncoderConfig cfg;
    cfg.height = 16;
    cfg.width = 16;
    cfg.channels = 1;
    cfg.convs = {{3, 2, 1, 4}, {3, 2, 1, 6}, {3, 2, 1, 6}, {2, 1, 0, 6}};
    cfg.feature_channels = 8;
    return cfg;
}

inline feainf::Tensor random_image(int h, int w, feainf::Rng& rng) {
    feainf::Tensor img({h, w, 1});
    for (double& v : img.data) v = rng.uniform01();
    return img;
}

inline feainf::Tensor random_vector(int n, feainf::Rng& rng, double lo = 0.0, double hi = 1.0) {
    feainf::Tensor v({n});
    for (double& x : v.data) x = rng.uniform(lo, hi);
    return v;
}

} // namespace helpers
