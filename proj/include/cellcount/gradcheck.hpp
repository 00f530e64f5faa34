#pragma once

#include <functional>

#include "cellcount/engine.hpp"

namespace cellcount {

// Central-difference probe of d(loss)/d(storage[i]) over the selected
// elements, compared against the gradient from backward() as a vector:
// ||analytic - numeric|| / max(||analytic||, ||numeric||).
//
// `loss_fn` must rebuild the forward pass from current leaf values and reduce
// the scalar in double precision; float32 op outputs are accurate enough, but
// a float32 reduction would drown the h=1e-3 signal in rounding noise.
inline double finite_diff_rel_err(const std::function<double()>& loss_fn,
                                  Tensor4& storage, const Tensor4& analytic,
                                  const std::vector<int64_t>& indices,
                                  double step = 1e-3) {
    double diff2 = 0.0, a2 = 0.0, n2 = 0.0;
    for (int64_t idx : indices) {
        const size_t ui = static_cast<size_t>(idx);
        const float saved = storage[ui];
        storage[ui] = static_cast<float>(saved + step);
        const double lp = loss_fn();
        storage[ui] = static_cast<float>(saved - step);
        const double lm = loss_fn();
        storage[ui] = saved;
        const double numeric = (lp - lm) / (2.0 * step);
        const double a = analytic[ui];
        diff2 += (a - numeric) * (a - numeric);
        a2 += a * a;
        n2 += numeric * numeric;
    }
    return std::sqrt(diff2) / std::max({std::sqrt(a2), std::sqrt(n2), 1e-12});
}

// double-precision sample-mean squared error against a constant target,
// matching the reduction of mse_loss
inline double mse_value(const Tensor4& pred, const Tensor4& target) {
    require_same_shape(pred, target, "mse_value");
    double acc = 0.0;
    for (int64_t i = 0; i < pred.numel(); ++i) {
        const double d = static_cast<double>(pred[static_cast<size_t>(i)]) -
                         target[static_cast<size_t>(i)];
        acc += d * d;
    }
    return acc / static_cast<double>(pred.shape().b);
}

// deterministic element subset for large tensors
inline std::vector<int64_t> probe_indices(int64_t numel, int64_t count, Rng& rng) {
    std::vector<int64_t> idx;
    if (numel <= count) {
        idx.resize(static_cast<size_t>(numel));
        for (int64_t i = 0; i < numel; ++i) idx[static_cast<size_t>(i)] = i;
        return idx;
    }
    idx.reserve(static_cast<size_t>(count));
    for (int64_t i = 0; i < count; ++i) idx.push_back(rng.uniform_int(0, numel - 1));
    return idx;
}

// random tensor with entries bounded away from zero, so that ReLU kinks and
// pooling ties stay clear of the finite-difference step
inline Tensor4 random_tensor(Shape4 shape, Rng& rng, float lo = -1.0f, float hi = 1.0f,
                             float dead_zone = 0.0f) {
    Tensor4 t(shape);
    for (int64_t i = 0; i < t.numel(); ++i) {
        float x = static_cast<float>(rng.uniform(lo, hi));
        if (dead_zone > 0.0f && std::abs(x) < dead_zone)
            x = x >= 0.0f ? x + dead_zone : x - dead_zone;
        t[static_cast<size_t>(i)] = x;
    }
    return t;
}

} // namespace cellcount
