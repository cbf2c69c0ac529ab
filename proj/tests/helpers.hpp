#pragma once

#include <cmath>
#include <random>
#include <vector>

#include "msn/random.hpp"
#include "msn/tensor.hpp"

namespace msn::test {

inline Tensor<double> random_tensor(std::vector<int> shape, Rng& rng, double lo = -1.0,
                                    double hi = 1.0) {
    Tensor<double> t(std::move(shape));
    std::uniform_real_distribution<double> dist(lo, hi);
    for (auto& v : t.vec()) v = dist(rng);
    return t;
}

inline LabelMap random_labels(int h, int w, int n_classes, Rng& rng, double ignore_frac = 0.0,
                              int ignore_label = -1) {
    LabelMap y({h, w});
    std::uniform_int_distribution<int> cls(0, n_classes - 1);
    std::uniform_real_distribution<double> unit(0.0, 1.0);
    for (auto& v : y.vec()) v = unit(rng) < ignore_frac ? ignore_label : cls(rng);
    return y;
}

// Central finite difference of f() w.r.t. one tensor entry.
template <typename F>
double fd(F&& f, double& slot, double eps = 1e-3) {
    const double orig = slot;
    slot = orig + eps;
    const double lp = f();
    slot = orig - eps;
    const double lm = f();
    slot = orig;
    return (lp - lm) / (2.0 * eps);
}

// FD is unreliable where the loss is locally non-smooth (a ReLU kink inside
// the central interval); accept a coordinate only when two step sizes agree.
template <typename F>
bool fd_smooth(F&& f, double& slot, double& out, double eps = 1e-3) {
    const double n1 = fd(f, slot, eps);
    const double n2 = fd(f, slot, eps / 2);
    out = n2;
    if (std::abs(n1) < 1e-10 && std::abs(n2) < 1e-10) return true;
    const double denom = std::max({std::abs(n1), std::abs(n2), 1e-8});
    return std::abs(n1 - n2) / denom < 1e-4;
}

inline double rel_err(double a, double b) {
    const double denom = std::max({std::abs(a), std::abs(b), 1e-8});
    return std::abs(a - b) / denom;
}

}  // namespace msn::test
