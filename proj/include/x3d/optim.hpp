#pragma once
#include <cmath>
#include <cstddef>
#include <vector>

#include "x3d/errors.hpp"

namespace x3d {

enum class OptimKind { Adam, Adan };

// Per-parameter-group moment accumulators. Buffers are sized on the first
// step; afterwards their shapes must match the parameters.
struct OptimState {
    long long step = 0;
    std::vector<double> m;       // gradient first moment
    std::vector<double> v;       // Adam: squared moment; Adan: gradient-difference moment
    std::vector<double> n;       // Adan only: squared Nesterov-combined moment
    std::vector<double> g_prev;  // Adan only: previous gradient

    void ensure(std::size_t size, bool adan) {
        if (step == 0) {
            m.assign(size, 0.0);
            v.assign(size, 0.0);
            if (adan) {
                n.assign(size, 0.0);
                g_prev.assign(size, 0.0);
            }
        } else if (m.size() != size) {
            throw DomainError("optimizer state shape does not match the parameters");
        }
    }
};

inline bool all_finite(const std::vector<double>& xs) {
    for (double x : xs)
        if (!std::isfinite(x)) return false;
    return true;
}

// Bias-corrected Adam. Returns false, leaving parameters and state untouched,
// when the gradient is non-finite; the caller decides how loudly to skip.
inline bool adam_step(OptimState& st, std::vector<double>& params,
                      const std::vector<double>& grads, double lr, double b1 = 0.9,
                      double b2 = 0.999, double eps = 1e-8) {
    if (params.size() != grads.size())
        throw DomainError("gradient shape does not match the parameters");
    if (!all_finite(grads)) return false;
    st.ensure(params.size(), false);
    st.step += 1;
    const double c1 = 1.0 - std::pow(b1, double(st.step));
    const double c2 = 1.0 - std::pow(b2, double(st.step));
    for (std::size_t i = 0; i < params.size(); ++i) {
        const double g = grads[i];
        st.m[i] = b1 * st.m[i] + (1.0 - b1) * g;
        st.v[i] = b2 * st.v[i] + (1.0 - b2) * g * g;
        const double mhat = st.m[i] / c1;
        const double vhat = st.v[i] / c2;
        params[i] -= lr * mhat / (std::sqrt(vhat) + eps);
    }
    return true;
}

// Adan with Nesterov-style gradient-difference momentum, decay factors given
// as retention coefficients. The first step treats the previous gradient as
// the current one, so the difference track starts at zero.
inline bool adan_step(OptimState& st, std::vector<double>& params,
                      const std::vector<double>& grads, double lr, double b1 = 0.98,
                      double b2 = 0.92, double b3 = 0.99, double eps = 1e-8) {
    if (params.size() != grads.size())
        throw DomainError("gradient shape does not match the parameters");
    if (!all_finite(grads)) return false;
    st.ensure(params.size(), true);
    const bool first = st.step == 0;
    st.step += 1;
    const double c1 = 1.0 - std::pow(b1, double(st.step));
    const double c2 = 1.0 - std::pow(b2, double(st.step));
    const double c3 = 1.0 - std::pow(b3, double(st.step));
    for (std::size_t i = 0; i < params.size(); ++i) {
        const double g = grads[i];
        const double diff = first ? 0.0 : g - st.g_prev[i];
        const double combined = g + b2 * diff;
        st.m[i] = b1 * st.m[i] + (1.0 - b1) * g;
        st.v[i] = b2 * st.v[i] + (1.0 - b2) * diff;
        st.n[i] = b3 * st.n[i] + (1.0 - b3) * combined * combined;
        const double mhat = st.m[i] / c1;
        const double vhat = st.v[i] / c2;
        const double nhat = st.n[i] / c3;
        params[i] -= lr * (mhat + b2 * vhat) / (std::sqrt(nhat) + eps);
        st.g_prev[i] = g;
    }
    return true;
}

inline bool optim_step(OptimKind kind, OptimState& st, std::vector<double>& params,
                       const std::vector<double>& grads, double lr) {
    return kind == OptimKind::Adam ? adam_step(st, params, grads, lr)
                                   : adan_step(st, params, grads, lr);
}

} // namespace x3d
