#pragma once

#include <map>
#include <string>

#include "feainf/tensor.hpp"

namespace feainf {

/// Adam moment buffers, one pair per parameter name. Step counters are kept
/// per name so parameter groups can be stepped with different learning rates.
struct AdamState {
    struct Moments {
        int step = 0;
        Tensor m, v;
    };
    double beta1 = 0.9;
    double beta2 = 0.999;
    double eps = 1e-8;
    std::map<std::string, Moments> by_name;
};

/// One Adam update for every entry of grads; params not named in grads are
/// left untouched. Throws ShapeError on param/grad shape mismatch.
void adam_step(std::map<std::string, Tensor>& params, const std::map<std::string, Tensor>& grads,
               double lr, AdamState& state);

/// Variant for a single tensor (used by the mask optimizer).
void adam_step(Tensor& param, const Tensor& grad, double lr, AdamState::Moments& state,
               double beta1 = 0.9, double beta2 = 0.999, double eps = 1e-8);

} // namespace feainf
