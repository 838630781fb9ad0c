#pragma once

#include <cmath>
#include <cstdint>
#include <string>
#include <utility>
#include <vector>

#include "msflow/tensor.hpp"

namespace msflow {

template <typename T>
struct AdamState {
    std::vector<T> first_moment;
    std::vector<T> second_moment;
    std::uint64_t step = 0;

    explicit AdamState(std::size_t n = 0) : first_moment(n, T(0)), second_moment(n, T(0)) {}
};

struct AdamConfig {
    double beta1 = 0.9;
    double beta2 = 0.999;
    double eps = 1e-8;
};

/// One bias-corrected Adam update of `param` in place.
template <typename T>
void adam_step(Tensor<T>& param, const Tensor<T>& grad, AdamState<T>& state, double lr, const AdamConfig& cfg = {}) {
    param.require_same_dims(grad, "adam_step");
    if (state.first_moment.size() != param.size()) state = AdamState<T>(param.size());
    require_finite(grad, "adam_step gradient");
    ++state.step;
    const double bc1 = 1.0 - std::pow(cfg.beta1, static_cast<double>(state.step));
    const double bc2 = 1.0 - std::pow(cfg.beta2, static_cast<double>(state.step));
    for (std::size_t i = 0; i < param.size(); ++i) {
        const double g = grad[i];
        const double m = cfg.beta1 * state.first_moment[i] + (1.0 - cfg.beta1) * g;
        const double v = cfg.beta2 * state.second_moment[i] + (1.0 - cfg.beta2) * g * g;
        state.first_moment[i] = static_cast<T>(m);
        state.second_moment[i] = static_cast<T>(v);
        const double update = lr * (m / bc1) / (std::sqrt(v / bc2) + cfg.eps);
        param[i] = static_cast<T>(param[i] - update);
    }
}

/// A trainable tensor with its gradient accumulator and optimizer state.
template <typename T>
struct Parameter {
    std::string name;
    Tensor<T> value;
    Tensor<T> grad;
    AdamState<T> adam;

    Parameter() = default;
    Parameter(std::string n, Tensor<T> v)
        : name(std::move(n)), value(std::move(v)), grad(Tensor<T>::zeros_like(value)), adam(value.size()) {}

    void zero_grad() { grad.fill(T(0)); }
    void accumulate(const Tensor<T>& g) { grad += g; }
};

}  // namespace msflow
