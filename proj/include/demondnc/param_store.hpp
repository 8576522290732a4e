#pragma once

#include <algorithm>
#include <cmath>
#include <cstddef>
#include <cstdint>
#include <string>
#include <unordered_map>
#include <vector>

#include "demondnc/errors.hpp"
#include "demondnc/tensor.hpp"

namespace demondnc {

template <class T>
struct AdamConfig {
    T lr = T(1e-3);
    T beta1 = T(0.9);
    T beta2 = T(0.999);
    T eps = T(1e-8);
};

// Named trainable parameters with Adam state. Iteration order is insertion
// order so optimizer sweeps and serialization are reproducible.
template <class T>
class ParameterStore {
public:
    struct Slot {
        std::string name;
        Tensor<T> value;
        std::vector<T> m;
        std::vector<T> v;
    };

    Tensor<T>& add(const std::string& name, Tensor<T> init) {
        if (index_.count(name)) throw ArgumentError("parameter already registered: " + name);
        Slot s;
        s.name = name;
        s.value = Tensor<T>::param(init.shape(), init.value());
        s.m.assign(s.value.numel(), T(0));
        s.v.assign(s.value.numel(), T(0));
        index_[name] = slots_.size();
        slots_.push_back(std::move(s));
        return slots_.back().value;
    }

    // Registers an existing tensor as a slot without copying it into a fresh
    // leaf; used when the caller owns the leaves (gradient checking).
    Tensor<T>& adopt(const std::string& name, Tensor<T> t) {
        if (index_.count(name)) throw ArgumentError("parameter already registered: " + name);
        Slot s;
        s.name = name;
        s.value = std::move(t);
        s.m.assign(s.value.numel(), T(0));
        s.v.assign(s.value.numel(), T(0));
        index_[name] = slots_.size();
        slots_.push_back(std::move(s));
        return slots_.back().value;
    }

    Tensor<T>& get(const std::string& name) {
        auto it = index_.find(name);
        if (it == index_.end()) throw ArgumentError("unknown parameter: " + name);
        return slots_[it->second].value;
    }
    const Tensor<T>& get(const std::string& name) const {
        auto it = index_.find(name);
        if (it == index_.end()) throw ArgumentError("unknown parameter: " + name);
        return slots_[it->second].value;
    }
    bool has(const std::string& name) const { return index_.count(name) != 0; }

    std::vector<Slot>& slots() { return slots_; }
    const std::vector<Slot>& slots() const { return slots_; }

    std::size_t total_params() const {
        std::size_t n = 0;
        for (const auto& s : slots_) n += s.value.numel();
        return n;
    }

    void zero_grad() {
        for (auto& s : slots_) {
            auto& g = s.value.node()->grad;
            std::fill(g.begin(), g.end(), T(0));
        }
    }

    T grad_norm() const {
        T acc = T(0);
        for (const auto& s : slots_)
            for (const T g : s.value.node()->grad) acc += g * g;
        return std::sqrt(acc);
    }

    // Global-norm clipping; returns the pre-clip norm.
    T clip_grad_norm(T max_norm) {
        const T nrm = grad_norm();
        if (nrm > max_norm && nrm > T(0)) {
            const T f = max_norm / nrm;
            for (auto& s : slots_)
                for (T& g : s.value.node()->grad) g *= f;
        }
        return nrm;
    }

    // One bias-corrected Adam update over all slots; gradients are left
    // untouched (call zero_grad before the next accumulation).
    void adam_step(const AdamConfig<T>& cfg) {
        ++t_;
        const T bc1 = T(1) - std::pow(cfg.beta1, static_cast<T>(t_));
        const T bc2 = T(1) - std::pow(cfg.beta2, static_cast<T>(t_));
        for (auto& s : slots_) {
            auto& val = s.value.node()->value;
            const auto& g = s.value.node()->grad;
            if (g.size() != val.size()) continue;  // adopted non-trainable slot
            for (std::size_t i = 0; i < val.size(); ++i) {
                s.m[i] = cfg.beta1 * s.m[i] + (T(1) - cfg.beta1) * g[i];
                s.v[i] = cfg.beta2 * s.v[i] + (T(1) - cfg.beta2) * g[i] * g[i];
                const T mh = s.m[i] / bc1;
                const T vh = s.v[i] / bc2;
                val[i] -= cfg.lr * mh / (std::sqrt(vh) + cfg.eps);
            }
        }
    }

    std::uint64_t step_count() const { return t_; }
    void set_step_count(std::uint64_t t) { t_ = t; }

private:
    std::vector<Slot> slots_;
    std::unordered_map<std::string, std::size_t> index_;
    std::uint64_t t_ = 0;
};

}  // namespace demondnc
