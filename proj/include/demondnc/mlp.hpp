#pragma once

#include <cstddef>
#include <string>
#include <vector>

#include "demondnc/param_store.hpp"
#include "demondnc/rng.hpp"
#include "demondnc/tensor.hpp"

namespace demondnc {

enum class Act { Relu, Tanh };

// Fully connected net over row batches: X [B x in] -> [B x out].
// Hidden layers use the chosen activation; the output layer is linear.
template <class T>
class Mlp {
public:
    Mlp() = default;

    // Registers weights in `store` under `prefix`. Weights start uniform in
    // [-1/sqrt(fan_in), 1/sqrt(fan_in)], biases at zero; `zero_last` zeroes
    // the output layer so the net starts as the constant zero function.
    Mlp(ParameterStore<T>& store, const std::string& prefix, std::size_t in_dim,
        const std::vector<std::size_t>& hidden, std::size_t out_dim, Act act, Rng& rng, bool zero_last = false)
        : store_(&store), prefix_(prefix), act_(act) {
        dims_.push_back(in_dim);
        dims_.insert(dims_.end(), hidden.begin(), hidden.end());
        dims_.push_back(out_dim);
        for (std::size_t l = 0; l + 1 < dims_.size(); ++l) {
            const std::size_t fan_in = dims_[l], fan_out = dims_[l + 1];
            const bool last = (l + 2 == dims_.size());
            std::vector<T> w(fan_in * fan_out, T(0));
            if (!(last && zero_last)) {
                const T bound = T(1) / std::sqrt(static_cast<T>(fan_in));
                for (auto& v : w) v = static_cast<T>(rng.uniform(-double(bound), double(bound)));
            }
            store.add(layer_name(l, "w"), Tensor<T>::from({fan_in, fan_out}, std::move(w)));
            store.add(layer_name(l, "b"), Tensor<T>::zeros({fan_out}));
        }
    }

    Tensor<T> forward(const Tensor<T>& x) const {
        if (x.shape().size() != 2 || x.extent(1) != dims_.front())
            throw ShapeError("mlp: expected [B x " + std::to_string(dims_.front()) + "], got " +
                             shape_str(x.shape()));
        Tensor<T> h = x;
        const std::size_t layers = dims_.size() - 1;
        for (std::size_t l = 0; l < layers; ++l) {
            const Tensor<T>& w = store_->get(layer_name(l, "w"));
            const Tensor<T>& b = store_->get(layer_name(l, "b"));
            h = add(matmul(h, w), broadcast_rows(b, h.extent(0)));
            if (l + 1 < layers) h = (act_ == Act::Relu) ? relu(h) : demondnc::tanh(h);
        }
        return h;
    }

    std::size_t in_dim() const { return dims_.front(); }
    std::size_t out_dim() const { return dims_.back(); }

    // Point at a new store after the owning object moved.
    void rebind(ParameterStore<T>& store) { store_ = &store; }

private:
    std::string layer_name(std::size_t l, const char* part) const {
        return prefix_ + ".l" + std::to_string(l) + "." + part;
    }

    ParameterStore<T>* store_ = nullptr;
    std::string prefix_;
    Act act_ = Act::Relu;
    std::vector<std::size_t> dims_;
};

}  // namespace demondnc
