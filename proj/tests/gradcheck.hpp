#pragma once

// Central finite-difference gradient checking in double precision.

#include <cmath>
#include <functional>
#include <vector>

#include "xmorpher/rng.hpp"
#include "xmorpher/tensor.hpp"

namespace testutil {

// Relative error with a small-magnitude escape: values that are both tiny are
// treated as matching, since FD noise dominates there.
inline double rel_err(double a, double b) {
    const double mx = std::max(std::abs(a), std::abs(b));
    if (mx < 1e-7) return 0.0;
    return std::abs(a - b) / mx;
}

// Checks d(loss)/d(x) for one tensor against central differences. `loss_fn`
// must rebuild the graph from the current contents of `x` on every call.
inline double max_grad_rel_err(xm::Tensor<double>& x,
                               const std::function<xm::Tensor<double>()>& loss_fn,
                               double step = 1e-5) {
    x.set_requires_grad(true);
    x.zero_grad();
    auto loss = loss_fn();
    xm::backward(loss);
    const std::vector<double> analytic = x.grad();

    double worst = 0.0;
    auto data = x.mutable_data();
    for (std::size_t i = 0; i < data.size(); ++i) {
        const double keep = data[i];
        data[i] = keep + step;
        const double fp = loss_fn().item();
        data[i] = keep - step;
        const double fm = loss_fn().item();
        data[i] = keep;
        const double fd = (fp - fm) / (2.0 * step);
        worst = std::max(worst, rel_err(analytic[i], fd));
    }
    return worst;
}

// Same check across a list of tensors (e.g. every parameter of a block).
inline double max_grad_rel_err_all(std::vector<xm::Tensor<double>> tensors,
                                   const std::function<xm::Tensor<double>()>& loss_fn,
                                   double step = 1e-5) {
    double worst = 0.0;
    for (auto& t : tensors) worst = std::max(worst, max_grad_rel_err(t, loss_fn, step));
    return worst;
}

// Deterministic pseudo-random fill for test inputs.
inline std::vector<double> random_vec(std::size_t n, xm::Rng& rng, double lo = -1.0,
                                      double hi = 1.0) {
    std::vector<double> v(n);
    for (auto& x : v) x = rng.uniform(lo, hi);
    return v;
}

// Loss with fixed random weights; catches transposition errors that a plain
// sum would miss.
inline xm::Tensor<double> weighted_loss(const xm::Tensor<double>& y, std::uint64_t seed = 99) {
    xm::Rng rng(seed);
    std::vector<double> w(y.size());
    for (auto& x : w) x = rng.uniform(-1.0, 1.0);
    return xm::sum(xm::mul(y, xm::Tensor<double>::from(y.shape(), std::move(w))));
}

} // namespace testutil
