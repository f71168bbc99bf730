#pragma once

#include <cmath>
#include <functional>
#include <vector>

#include "vlpt/graph.hpp"
#include "vlpt/rng.hpp"
#include "vlpt/tensor.hpp"

namespace testutil {

inline double rel_err(double a, double b) {
    const double denom = std::max(1e-6, std::abs(a) + std::abs(b));
    return std::abs(a - b) / denom;
}

/// Central-difference gradient check. `f` evaluates the scalar loss from the
/// current contents of `x`; `g` is the analytic gradient. Checks up to
/// `samples` randomly chosen entries.
inline double max_fd_error(vlpt::TensorD& x, const vlpt::TensorD& g,
                           const std::function<double()>& f, double h, vlpt::Rng& rng,
                           int samples) {
    double worst = 0.0;
    const int64_t n = x.numel();
    for (int s = 0; s < samples; ++s) {
        const int64_t i = static_cast<int64_t>(rng.below(static_cast<uint64_t>(n)));
        const double saved = x.data[static_cast<size_t>(i)];
        x.data[static_cast<size_t>(i)] = saved + h;
        const double fp = f();
        x.data[static_cast<size_t>(i)] = saved - h;
        const double fm = f();
        x.data[static_cast<size_t>(i)] = saved;
        const double fd = (fp - fm) / (2.0 * h);
        worst = std::max(worst, rel_err(fd, g.data[static_cast<size_t>(i)]));
    }
    return worst;
}

inline void fill_uniform(vlpt::TensorD& t, vlpt::Rng& rng, double lo = -1.0, double hi = 1.0) {
    for (auto& v : t.data) v = rng.uniform(lo, hi);
}

inline void fill_uniform(vlpt::Tensor& t, vlpt::Rng& rng, double lo = -1.0, double hi = 1.0) {
    for (auto& v : t.data) v = static_cast<float>(rng.uniform(lo, hi));
}

} // namespace testutil
