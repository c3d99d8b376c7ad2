#pragma once

#include <cmath>
#include <functional>

#include "purigrad/models.hpp"
#include "purigrad/rng.hpp"
#include "purigrad/tensor.hpp"

namespace testutil {

using namespace purigrad;

inline Tensor random_tensor(Shape dims, Rng& rng, double lo = -2.0, double hi = 2.0) {
    std::vector<double> v(static_cast<size_t>(shape_numel(dims)));
    rng.fill_uniform(v, lo, hi);
    return Tensor::from(std::move(dims), std::move(v));
}

/// Central finite differences of a scalar function, step h.
inline Tensor fd_gradient(const std::function<double(const Tensor&)>& f, const Tensor& x,
                          double h = 1e-5) {
    std::vector<double> g(static_cast<size_t>(x.numel()));
    for (int64_t i = 0; i < x.numel(); ++i) {
        Tensor xp = x.clone();
        Tensor xm = x.clone();
        xp.mutable_data()[static_cast<size_t>(i)] += h;
        xm.mutable_data()[static_cast<size_t>(i)] -= h;
        g[static_cast<size_t>(i)] = (f(xp) - f(xm)) / (2.0 * h);
    }
    return Tensor::from(x.dims(), std::move(g));
}

inline double rel_err(double got, double want, double floor = 1e-9) {
    return std::abs(got - want) / std::max({std::abs(got), std::abs(want), floor});
}

inline double max_rel_err(const Tensor& got, const Tensor& want, double floor = 1e-6) {
    double m = 0.0;
    for (int64_t i = 0; i < got.numel(); ++i)
        m = std::max(m, rel_err(got.at(i), want.at(i), floor));
    return m;
}

inline double rel_l2_dist(const Tensor& a, const Tensor& b) {
    double num = 0.0, den = 0.0;
    for (int64_t i = 0; i < a.numel(); ++i) {
        double d = a.at(i) - b.at(i);
        num += d * d;
        den += b.at(i) * b.at(i);
    }
    return std::sqrt(num) / std::max(std::sqrt(den), 1e-300);
}

inline models::Mlp random_mlp(std::vector<int64_t> dims, models::Act act, uint64_t seed,
                              models::ActParams actp = {}) {
    Rng rng(seed);
    return models::Mlp::init(std::move(dims), act, rng, actp);
}

}  // namespace testutil
