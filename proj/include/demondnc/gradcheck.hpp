#pragma once

#include <cmath>
#include <cstddef>
#include <functional>
#include <string>
#include <utility>
#include <vector>

#include "demondnc/rng.hpp"
#include "demondnc/tensor.hpp"

namespace demondnc {

template <class T>
struct GradCheckReport {
    T max_rel_err = T(0);
    std::size_t checked = 0;
    std::string worst;

    bool ok(T tol) const { return max_rel_err <= tol; }
};

// Central finite-difference comparison against backward(). `loss_fn` maps a
// vector of leaf tensors (same order as `inits`) to a scalar tensor. The
// relative error is |a - n| / max(1, |a|, |n|), so tiny gradients are judged
// on absolute error.
template <class T, class LossFn>
GradCheckReport<T> check_gradients(const std::vector<std::pair<Shape, std::vector<T>>>& inits, LossFn loss_fn,
                                   T h = T(1e-5)) {
    std::vector<Tensor<T>> params;
    params.reserve(inits.size());
    for (const auto& [shape, data] : inits) params.push_back(Tensor<T>::param(shape, data));
    Tensor<T> loss = loss_fn(params);
    backward(loss);
    std::vector<std::vector<T>> analytic;
    for (const auto& p : params) analytic.push_back(p.grad());

    auto eval_at = [&](std::size_t pi, std::size_t ei, T delta) {
        NoGradGuard ng;
        std::vector<Tensor<T>> probe;
        probe.reserve(inits.size());
        for (std::size_t i = 0; i < inits.size(); ++i) {
            std::vector<T> v = inits[i].second;
            if (i == pi) v[ei] += delta;
            probe.push_back(Tensor<T>::from(inits[i].first, std::move(v)));
        }
        return loss_fn(probe).item();
    };

    GradCheckReport<T> rep;
    for (std::size_t pi = 0; pi < inits.size(); ++pi) {
        for (std::size_t ei = 0; ei < inits[pi].second.size(); ++ei) {
            const T fp = eval_at(pi, ei, h);
            const T fm = eval_at(pi, ei, -h);
            const T numeric = (fp - fm) / (T(2) * h);
            const T a = analytic[pi][ei];
            const T denom = std::max(T(1), std::max(std::abs(a), std::abs(numeric)));
            const T rel = std::abs(a - numeric) / denom;
            ++rep.checked;
            if (rel > rep.max_rel_err) {
                rep.max_rel_err = rel;
                rep.worst = "input " + std::to_string(pi) + " element " + std::to_string(ei) + ": analytic " +
                            std::to_string(a) + " numeric " + std::to_string(numeric);
            }
        }
    }
    return rep;
}

// Random init helper for gradient checks; values uniform in [lo, hi], resampled
// so no element lands within `margin` of the points in `avoid` (kinks of
// piecewise ops break finite differences).
template <class T>
std::vector<T> random_values(Rng& rng, std::size_t n, T lo, T hi, const std::vector<T>& avoid = {},
                             T margin = T(1e-3)) {
    std::vector<T> out(n);
    for (auto& v : out) {
        for (;;) {
            v = static_cast<T>(rng.uniform(double(lo), double(hi)));
            bool clear = true;
            for (const T a : avoid)
                if (std::abs(v - a) < margin) {
                    clear = false;
                    break;
                }
            if (clear) break;
        }
    }
    return out;
}

}  // namespace demondnc
