#pragma once

#include <random>

#include "mpq/tensor.hpp"

namespace mpq::testing {

// Central finite difference of a scalar-valued function w.r.t. one entry of
// a parameter tensor. Used as the independent gradient oracle.
template <typename LossFn>
double finite_diff(const TensorPtr& param, std::size_t idx, LossFn loss, double h = 1e-3) {
    float saved = param->v[idx];
    param->v[idx] = saved + static_cast<float>(h);
    double up = loss();
    param->v[idx] = saved - static_cast<float>(h);
    double down = loss();
    param->v[idx] = saved;
    return (up - down) / (2.0 * h);
}

inline bool rel_close(double a, double b, double rel_tol, double abs_tol = 1e-6) {
    double diff = std::abs(a - b);
    return diff <= abs_tol || diff <= rel_tol * std::max(std::abs(a), std::abs(b));
}

// Gradient check on every entry of `param` for a graph built by `build`
// (which must return a scalar loss tensor using the current parameter
// values). Returns the relative L2 error between the analytic gradient and
// the finite-difference oracle, which stays well conditioned when individual
// entries are near zero.
template <typename BuildFn>
double grad_check(const TensorPtr& param, BuildFn build, double h = 1e-3) {
    param->zero_grad();
    auto loss = build();
    backward(loss);
    double diff2 = 0.0, fd2 = 0.0, an2 = 0.0;
    for (std::size_t i = 0; i < param->numel(); ++i) {
        double fd = finite_diff(param, i, [&] { return build()->item(); }, h);
        double an = param->g[i];
        diff2 += (fd - an) * (fd - an);
        fd2 += fd * fd;
        an2 += an * an;
    }
    return std::sqrt(diff2) / (std::sqrt(fd2) + std::sqrt(an2) + 1e-12);
}

inline std::vector<float> random_vec(std::size_t n, std::mt19937& rng, float lo = -1.f,
                                     float hi = 1.f) {
    std::uniform_real_distribution<float> d(lo, hi);
    std::vector<float> v(n);
    for (auto& x : v) x = d(rng);
    return v;
}

inline double median(std::vector<double> v) {
    std::sort(v.begin(), v.end());
    std::size_t n = v.size();
    return n % 2 ? v[n / 2] : 0.5 * (v[n / 2 - 1] + v[n / 2]);
}

}  // namespace mpq::testing
