#pragma once

#include <cmath>
#include <functional>

#include "rcp/tensor.hpp"

namespace rcp {

// Central-difference gradient oracle: (f(x + h e_i) - f(x - h e_i)) / 2h per
// coordinate. `f` must be a pure scalar function of the tensor values; it is
// evaluated without any tape, so nothing is recorded.
inline Tensor finite_diff_grad(const std::function<double(const Tensor&)>& f, const Tensor& x,
                               double h = 1e-5) {
    Tensor probe = x.clone();
    probe.set_requires_grad(false);
    Tensor g(x.shape());
    for (std::size_t i = 0; i < probe.numel(); ++i) {
        const double saved = probe.data()[i];
        probe.data()[i] = saved + h;
        const double fp = f(probe);
        probe.data()[i] = saved - h;
        const double fm = f(probe);
        probe.data()[i] = saved;
        g.data()[i] = (fp - fm) / (2.0 * h);
    }
    return g;
}

// Scale-floored relative error between an analytic gradient and the finite
// difference estimate: max_i |a_i - f_i| / max(|a_i|, |f_i|, 1). Behaves as an
// absolute error for small gradients and a relative one for large.
inline double grad_rel_error(const Tensor& analytic, const Tensor& fd) {
    double worst = 0.0;
    for (std::size_t i = 0; i < analytic.numel(); ++i) {
        const double a = analytic.data()[i];
        const double b = fd.data()[i];
        const double denom = std::max({std::fabs(a), std::fabs(b), 1.0});
        worst = std::max(worst, std::fabs(a - b) / denom);
    }
    return worst;
}

}  // namespace rcp
