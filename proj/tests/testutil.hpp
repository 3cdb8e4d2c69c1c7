#pragma once

// Shared test helpers: finite-difference gradient checking and random tensors.
// The FD harness is the independent oracle for every differentiable primitive;
// it must stay free of any knowledge of the analytic backward paths.

#include <cmath>
#include <functional>
#include <vector>

#include "glamelab/num.hpp"

namespace testutil {

using glame::Rng;
using glame::num::Tape;
using glame::num::Tensor;

inline Tensor rand_tensor(glame::num::Shape shape, Rng& rng, float lo = -1.0f, float hi = 1.0f) {
    return Tensor::uniform(std::move(shape), rng, lo, hi);
}

// Central finite differences of a scalar-valued function w.r.t. one input,
// step h applied per element.
inline Tensor fd_grad(const std::function<float(const Tensor&)>& f, const Tensor& x,
                      float h = 1e-3f) {
    std::vector<float> g(static_cast<size_t>(x.numel()));
    for (int64_t i = 0; i < x.numel(); ++i) {
        std::vector<float> plus = x.values();
        std::vector<float> minus = x.values();
        plus[static_cast<size_t>(i)] += h;
        minus[static_cast<size_t>(i)] -= h;
        const float fp = f(Tensor(x.shape(), std::move(plus)));
        const float fm = f(Tensor(x.shape(), std::move(minus)));
        g[static_cast<size_t>(i)] = (fp - fm) / (2.0f * h);
    }
    return Tensor(x.shape(), std::move(g));
}

// Relative L2 error between analytic and numeric gradients.
inline double grad_rel_error(const Tensor& analytic, const Tensor& numeric) {
    double num = 0.0, den = 0.0;
    const float* a = analytic.data();
    const float* n = numeric.data();
    for (int64_t i = 0; i < numeric.numel(); ++i) {
        const double d = static_cast<double>(a[i]) - n[i];
        num += d * d;
        den += static_cast<double>(n[i]) * n[i];
    }
    return std::sqrt(num) / std::max(std::sqrt(den), 1e-10);
}

// Runs a differentiable scalar loss twice: once on a tape for the analytic
// gradient of `x`, once through FD. `loss` must treat `x` as its only
// watched variable (other tensors are constants).
//
// Returns the relative error.
inline double check_grad(const std::function<Tensor(Tape*, const Tensor&)>& loss, const Tensor& x,
                         float h = 1e-3f) {
    Tape tape;
    Tensor xt = tape.watch(x);
    Tensor out = loss(&tape, xt);
    auto grads = tape.backward(out);
    Tensor analytic = grads.at(xt);
    Tensor numeric = fd_grad([&](const Tensor& xv) { return loss(nullptr, xv).item(); }, x, h);
    return grad_rel_error(analytic, numeric);
}

}  // namespace testutil
