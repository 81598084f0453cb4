#pragma once

#include <cmath>
#include <functional>
#include <string>
#include <vector>

#include "bpim/autograd.hpp"
#include "bpim/nn.hpp"

namespace bpim::testing {

inline double rel_err(double a, double b, double floor = 1e-10) {
    return std::abs(a - b) / std::max(floor, std::max(std::abs(a), std::abs(b)));
}

/// Central finite difference of `f` with respect to element i of `v`.
inline double central_diff(Var& v, std::int64_t i, const std::function<double()>& f, double h = 1e-6) {
    NoGradGuard ng;
    const double orig = v.value()[i];
    v.mutable_value()[i] = orig + h;
    const double up = f();
    v.mutable_value()[i] = orig - h;
    const double down = f();
    v.mutable_value()[i] = orig;
    return (up - down) / (2.0 * h);
}

/// sum(x * r) for a fixed random r: a scalar probe of every output element.
inline Var probe(const Var& x, const Tensor& r) { return ops::sum(ops::mul(x, Var(r))); }

/// Checks d/dx of `loss(inputs)` for every element of every input against
/// central differences; returns the worst relative error (absolute below `atol`).
inline double check_gradients(std::vector<Var> inputs, const std::function<Var(const std::vector<Var>&)>& loss,
                              double h = 1e-6, double atol = 1e-7) {
    for (auto& v : inputs) v.zero_grad();
    backward(loss(inputs));
    double worst = 0.0;
    for (auto& v : inputs) {
        const Tensor g = v.grad();
        for (std::int64_t i = 0; i < v.value().numel(); ++i) {
            const double fd = central_diff(v, i, [&] { return loss(inputs).value()[0]; }, h);
            const double an = g.empty() ? 0.0 : g[i];
            if (std::abs(fd - an) <= atol) continue;
            worst = std::max(worst, rel_err(an, fd));
        }
    }
    return worst;
}

}  // namespace bpim::testing
