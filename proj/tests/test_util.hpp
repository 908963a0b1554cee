#pragma once

#include <cmath>
#include <functional>
#include <span>
#include <vector>

#include "ofa/tensor.hpp"

namespace ofa::testutil {

// max|a-b| / (max|b| + 1e-8), the gradient-check metric used throughout.
inline double rel_err_inf(std::span<const double> got, std::span<const double> want) {
    double num = 0.0, den = 0.0;
    for (size_t i = 0; i < got.size(); ++i) {
        num = std::max(num, std::abs(got[i] - want[i]));
        den = std::max(den, std::abs(want[i]));
    }
    return num / (den + 1e-8);
}

// Full-precision central-difference check of d(f)/d(param) against backward().
// `forward` must rebuild the graph from the current parameter values.
inline double grad_check(const std::function<Tensor()>& forward, std::vector<Tensor> params,
                         double h = 1e-5) {
    PrecisionGuard pg(Precision::Float64);
    for (auto& p : params) p.zero_grad();
    Tensor loss = forward();
    backward(loss);
    double worst = 0.0;
    for (auto& p : params) {
        const std::vector<double> ad = p.grad();
        auto f = [&]() {
            NoGradGuard ng;
            return forward().item();
        };
        const std::vector<double> fd = finite_diff_grad(f, p, h);
        worst = std::max(worst, rel_err_inf(ad, fd));
    }
    return worst;
}

}  // namespace ofa::testutil
