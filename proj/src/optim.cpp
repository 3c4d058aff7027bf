#include "feainf/optim.hpp"

#include <cmath>

namespace feainf {

void adam_step(Tensor& param, const Tensor& grad, double lr, AdamState::Moments& state,
               double beta1, double beta2, double eps) {
    if (!param.same_shape(grad))
        throw ShapeError("adam: gradient shape " + shape_str(grad.shape) + " does not match parameter " +
                         shape_str(param.shape));
    if (lr <= 0.0) throw DomainError("adam: learning rate must be positive");
    if (state.m.shape != param.shape) {
        state.m = Tensor(param.shape);
        state.v = Tensor(param.shape);
        state.step = 0;
    }
    state.step += 1;
    const double bc1 = 1.0 - std::pow(beta1, state.step);
    const double bc2 = 1.0 - std::pow(beta2, state.step);
    for (int i = 0; i < param.numel(); ++i) {
        const double g = grad[i];
        state.m[i] = beta1 * state.m[i] + (1.0 - beta1) * g;
        state.v[i] = beta2 * state.v[i] + (1.0 - beta2) * g * g;
        const double mhat = state.m[i] / bc1;
        const double vhat = state.v[i] / bc2;
        param[i] -= lr * mhat / (std::sqrt(vhat) + eps);
    }
}

void adam_step(std::map<std::string, Tensor>& params, const std::map<std::string, Tensor>& grads,
               double lr, AdamState& state) {
    for (const auto& [name, grad] : grads) {
        auto it = params.find(name);
        if (it == params.end()) throw ShapeError("adam: unknown parameter '" + name + "'");
        adam_step(it->second, grad, lr, state.by_name[name], state.beta1, state.beta2, state.eps);
    }
}

} // namespace feainf
