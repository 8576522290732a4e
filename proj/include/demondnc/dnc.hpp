#pragma once

#include <algorithm>
#include <cmath>
#include <cstddef>
#include <functional>
#include <numeric>
#include <string>
#include <vector>

#include "demondnc/param_store.hpp"
#include "demondnc/rng.hpp"
#include "demondnc/tensor.hpp"

namespace demondnc {

struct DncToggles {
    bool mask = false;       // key masking in content addressing
    bool dealloc = false;    // erase freed cells before writing
    bool sharpness = false;  // learned sharpening of temporal read distributions

    bool operator==(const DncToggles&) const = default;
};

struct DncConfig {
    std::size_t N = 16;  // memory cells
    std::size_t W = 16;  // word length
    std::size_t R = 1;   // read heads
    std::size_t controller_hidden = 64;
    std::size_t depth = 1;  // stacked recurrent layers
    std::size_t input_dim = 0;
    std::size_t output_dim = 0;
    DncToggles toggles;

    void validate() const {
        if (N < 1 || W < 1 || R < 1) throw ConfigError("dnc: N, W, R must all be >= 1");
        if (controller_hidden < 1 || depth < 1) throw ConfigError("dnc: controller_hidden and depth must be >= 1");
        if (input_dim < 1 || output_dim < 1) throw ConfigError("dnc: input_dim and output_dim must be >= 1");
    }

    bool operator==(const DncConfig&) const = default;
};

// ---------------------------------------------------------------------------
// Interface vector layout
// ---------------------------------------------------------------------------

struct XiSegment {
    std::string name;
    std::size_t offset;
    std::size_t len;
};

// Field order is fixed: read keys, read strengths, write key, write strength,
// erase, write vector, free gates, allocation gate, write gate, read modes,
// then (mask toggle) R read masks and one write mask, then (sharpness toggle)
// forward exponents followed by backward exponents.
inline std::vector<XiSegment> xi_layout(const DncConfig& cfg) {
    std::vector<XiSegment> segs;
    std::size_t off = 0;
    auto push = [&](std::string name, std::size_t len) {
        segs.push_back({std::move(name), off, len});
        off += len;
    };
    for (std::size_t i = 0; i < cfg.R; ++i) push("read_key" + std::to_string(i), cfg.W);
    for (std::size_t i = 0; i < cfg.R; ++i) push("read_strength" + std::to_string(i), 1);
    push("write_key", cfg.W);
    push("write_strength", 1);
    push("erase", cfg.W);
    push("write_vec", cfg.W);
    for (std::size_t i = 0; i < cfg.R; ++i) push("free_gate" + std::to_string(i), 1);
    push("alloc_gate", 1);
    push("write_gate", 1);
    for (std::size_t i = 0; i < cfg.R; ++i) push("read_modes" + std::to_string(i), 3);
    if (cfg.toggles.mask) {
        for (std::size_t i = 0; i < cfg.R; ++i) push("read_mask" + std::to_string(i), cfg.W);
        push("write_mask", cfg.W);
    }
    if (cfg.toggles.sharpness) {
        for (std::size_t i = 0; i < cfg.R; ++i) push("sharp_f" + std::to_string(i), 1);
        for (std::size_t i = 0; i < cfg.R; ++i) push("sharp_b" + std::to_string(i), 1);
    }
    return segs;
}

inline std::size_t interface_len(const DncConfig& cfg) {
    std::size_t n = cfg.R * cfg.W + 3 * cfg.W + 5 * cfg.R + 3;
    if (cfg.toggles.mask) n += (cfg.R + 1) * cfg.W;
    if (cfg.toggles.sharpness) n += 2 * cfg.R;
    return n;
}

template <class T>
struct InterfaceVector {
    std::vector<Tensor<T>> read_keys;       // R x [W], linear
    std::vector<Tensor<T>> read_strengths;  // R x [1], oneplus (> 1)
    Tensor<T> write_key;                    // [W], linear
    Tensor<T> write_strength;               // [1], oneplus
    Tensor<T> erase;                        // [W], sigmoid
    Tensor<T> write_vec;                    // [W], linear
    std::vector<Tensor<T>> free_gates;      // R x [1], sigmoid
    Tensor<T> alloc_gate;                   // [1], sigmoid
    Tensor<T> write_gate;                   // [1], sigmoid
    std::vector<Tensor<T>> read_modes;      // R x [3] simplex: backward, content, forward
    std::vector<Tensor<T>> read_masks;      // R x [W], sigmoid (mask toggle)
    Tensor<T> write_mask;                   // [W], sigmoid (mask toggle)
    std::vector<Tensor<T>> sharp_f;         // R x [1], oneplus (sharpness toggle)
    std::vector<Tensor<T>> sharp_b;         // R x [1], oneplus (sharpness toggle)
};

template <class T>
InterfaceVector<T> parse_interface(const Tensor<T>& xi, const DncConfig& cfg) {
    if (xi.shape().size() != 1 || xi.numel() != interface_len(cfg))
        throw ConfigError("parse_interface: expected length " + std::to_string(interface_len(cfg)) + ", got " +
                          shape_str(xi.shape()));
    InterfaceVector<T> iv;
    std::size_t off = 0;
    auto take = [&](std::size_t len) {
        Tensor<T> s = slice(xi, off, len);
        off += len;
        return s;
    };
    for (std::size_t i = 0; i < cfg.R; ++i) iv.read_keys.push_back(take(cfg.W));
    for (std::size_t i = 0; i < cfg.R; ++i) iv.read_strengths.push_back(oneplus(take(1)));
    iv.write_key = take(cfg.W);
    iv.write_strength = oneplus(take(1));
    iv.erase = sigmoid(take(cfg.W));
    iv.write_vec = take(cfg.W);
    for (std::size_t i = 0; i < cfg.R; ++i) iv.free_gates.push_back(sigmoid(take(1)));
    iv.alloc_gate = sigmoid(take(1));
    iv.write_gate = sigmoid(take(1));
    for (std::size_t i = 0; i < cfg.R; ++i) iv.read_modes.push_back(softmax_rows(take(3)));
    if (cfg.toggles.mask) {
        for (std::size_t i = 0; i < cfg.R; ++i) iv.read_masks.push_back(sigmoid(take(cfg.W)));
        iv.write_mask = sigmoid(take(cfg.W));
    }
    if (cfg.toggles.sharpness) {
        for (std::size_t i = 0; i < cfg.R; ++i) iv.sharp_f.push_back(oneplus(take(1)));
        for (std::size_t i = 0; i < cfg.R; ++i) iv.sharp_b.push_back(oneplus(take(1)));
    }
    return iv;
}

// ---------------------------------------------------------------------------
// Addressing mechanics
// ---------------------------------------------------------------------------

// softmax over beta * cosine(M[i] (* mask), k (* mask)); pass an undefined
// tensor for no mask.
template <class T>
Tensor<T> content_weighting(const Tensor<T>& m, const Tensor<T>& k, const Tensor<T>& beta,
                            const Tensor<T>& mask = Tensor<T>()) {
    Tensor<T> mm = m, km = k;
    if (mask.defined()) {
        mm = mul(m, broadcast_rows(mask, m.extent(0)));
        km = mul(k, mask);
    }
    return softmax_rows(mul(cosine_rows(mm, km), beta));
}

template <class T>
struct UsageOut {
    Tensor<T> u;    // [N]
    Tensor<T> psi;  // [N] retention
};

// psi = prod_i (1 - f_i * w_r_prev_i); u = (u_prev + w_w_prev - u_prev*w_w_prev) * psi.
// The middle term is computed as 1 - (1-u)(1-w), which is the same quantity
// but cannot round above 1.
template <class T>
UsageOut<T> usage_update(const Tensor<T>& u_prev, const Tensor<T>& w_w_prev,
                         const std::vector<Tensor<T>>& w_r_prev, const std::vector<Tensor<T>>& free_gates) {
    if (w_r_prev.size() != free_gates.size())
        throw ArgumentError("usage_update: read weighting and free gate counts differ");
    const std::size_t n = u_prev.extent(0);
    Tensor<T> ones = Tensor<T>::full({n}, T(1));
    Tensor<T> psi = ones;
    for (std::size_t i = 0; i < w_r_prev.size(); ++i)
        psi = mul(psi, sub(ones, mul(w_r_prev[i], free_gates[i])));
    Tensor<T> grown = sub(ones, mul(sub(ones, u_prev), sub(ones, w_w_prev)));
    return {mul(grown, psi), psi};
}

// a[phi_j] = (1 - u[phi_j]) * prod_{l<j} u[phi_l], phi the stable ascending
// argsort of u (ties to the lower index). The permutation is a constant of
// the backward pass; gradients flow through the algebraic factors only.
template <class T>
Tensor<T> allocation_weighting(const Tensor<T>& u) {
    if (u.shape().size() != 1) throw ShapeError("allocation_weighting: usage must be rank-1");
    const std::size_t n = u.extent(0);
    const auto& uv = u.value();
    std::vector<std::size_t> phi(n);
    std::iota(phi.begin(), phi.end(), std::size_t(0));
    std::stable_sort(phi.begin(), phi.end(), [&](std::size_t a, std::size_t b) { return uv[a] < uv[b]; });
    std::vector<T> out(n);
    T prod = T(1);
    for (std::size_t j = 0; j < n; ++j) {
        out[phi[j]] = (T(1) - uv[phi[j]]) * prod;
        prod *= uv[phi[j]];
    }
    auto pu = u.node();
    detail::BackFn<T> back = [pu, phi, n](TensorNode<T>&, const std::vector<T>& g, GradTable<T>& table) {
        if (!pu->requires_grad) return;
        auto& gu = table.of(*pu);
        const auto& uv = pu->value;
        std::vector<T> v(n), gs(n), pre(n);
        for (std::size_t j = 0; j < n; ++j) {
            v[j] = uv[phi[j]];
            gs[j] = g[phi[j]];
        }
        T prod = T(1);
        for (std::size_t j = 0; j < n; ++j) {
            pre[j] = prod;
            prod *= v[j];
        }
        std::vector<T> gv(n, T(0));
        for (std::size_t j = 0; j < n; ++j) gv[j] -= gs[j] * pre[j];
        // d a_sorted[j] / d v_l for l < j, accumulated without division so
        // exact zeros in u are safe.
        for (std::size_t l = 0; l < n; ++l) {
            T run = T(1), acc = T(0);
            for (std::size_t j = l + 1; j < n; ++j) {
                acc += gs[j] * (T(1) - v[j]) * run;
                run *= v[j];
            }
            gv[l] += pre[l] * acc;
        }
        for (std::size_t j = 0; j < n; ++j) gu[phi[j]] += gv[j];
    };
    return detail::make_op<T>({n}, std::move(out), {pu}, std::move(back), "allocation_weighting");
}

template <class T>
Tensor<T> write_weighting(const Tensor<T>& g_w, const Tensor<T>& g_a, const Tensor<T>& a, const Tensor<T>& c_w) {
    Tensor<T> one = Tensor<T>::scalar(T(1));
    return mul(add(mul(a, g_a), mul(c_w, sub(one, g_a))), g_w);
}

// M = M_prev * (1 - w_w e^T) + w_w v^T; with dealloc, freed rows are first
// scaled down by psi.
template <class T>
Tensor<T> memory_write(const Tensor<T>& m_prev, const Tensor<T>& w_w, const Tensor<T>& e, const Tensor<T>& v,
                       const Tensor<T>& psi, bool dealloc) {
    Tensor<T> base = m_prev;
    if (dealloc) base = mul(base, broadcast_cols(psi, m_prev.extent(1)));
    Tensor<T> we = outer(w_w, e);
    return add(sub(base, mul(base, we)), outer(w_w, v));
}

template <class T>
struct LinkOut {
    Tensor<T> L;  // [N x N]
    Tensor<T> p;  // [N]
};

// L[i,j] = (1 - w_w[i] - w_w[j]) L_prev[i,j] + w_w[i] p_prev[j], zero diagonal;
// p = (1 - sum w_w) p_prev + w_w.
template <class T>
LinkOut<T> link_update(const Tensor<T>& l_prev, const Tensor<T>& p_prev, const Tensor<T>& w_w) {
    const std::size_t n = w_w.extent(0);
    Tensor<T> wi = broadcast_cols(w_w, n);
    Tensor<T> wj = broadcast_rows(w_w, n);
    Tensor<T> keep = sub(sub(Tensor<T>::full({n, n}, T(1)), wi), wj);
    Tensor<T> l = zero_diag(add(mul(keep, l_prev), outer(w_w, p_prev)));
    Tensor<T> p = add(mul(p_prev, sub(Tensor<T>::scalar(T(1)), sum(w_w))), w_w);
    return {l, p};
}

// normalize((x + 1e-8)^s); the sum guard keeps an all-zero input at an
// all-zero output instead of NaN.
template <class T>
Tensor<T> sharpen(const Tensor<T>& x, const Tensor<T>& s) {
    if (x.shape().size() != 1) throw ShapeError("sharpen: operand must be rank-1");
    if (s.numel() != 1) throw ShapeError("sharpen: exponent must be scalar");
    constexpr double kEps = 1e-8;
    constexpr double kGuard = 1e-32;
    const std::size_t n = x.extent(0);
    const auto& xv = x.value();
    const T sv = s.value()[0];
    for (const T v : xv)
        if (v + T(kEps) <= T(0)) throw DomainError("sharpen: operand must be >= -1e-8");
    std::vector<T> pv(n);
    T total = T(kGuard);
    for (std::size_t i = 0; i < n; ++i) {
        pv[i] = std::pow(xv[i] + T(kEps), sv);
        total += pv[i];
    }
    std::vector<T> out(n);
    for (std::size_t i = 0; i < n; ++i) out[i] = pv[i] / total;
    auto px = x.node();
    auto ps = s.node();
    detail::BackFn<T> back = [px, ps, n, total](TensorNode<T>& self, const std::vector<T>& g,
                                                GradTable<T>& table) {
        const auto& xv = px->value;
        const T sv = ps->value[0];
        const auto& yv = self.value;
        T dot = T(0);
        for (std::size_t i = 0; i < n; ++i) dot += g[i] * yv[i];
        if (px->requires_grad) {
            auto& gx = table.of(*px);
            for (std::size_t k = 0; k < n; ++k) {
                const T dp = sv * std::pow(xv[k] + T(kEps), sv - T(1));
                gx[k] += dp / total * (g[k] - dot);
            }
        }
        if (ps->requires_grad) {
            auto& gsl = table.of(*ps);
            T wbar = T(0);
            for (std::size_t i = 0; i < n; ++i) wbar += yv[i] * std::log(xv[i] + T(kEps));
            T acc = T(0);
            for (std::size_t i = 0; i < n; ++i) acc += g[i] * yv[i] * (std::log(xv[i] + T(kEps)) - wbar);
            gsl[0] += acc;
        }
    };
    return detail::make_op<T>({n}, std::move(out), {px, ps}, std::move(back), "sharpen");
}

// w_r = pi[0] * backward + pi[1] * content + pi[2] * forward. Pass undefined
// exponents when the sharpness toggle is off.
template <class T>
Tensor<T> read_weighting(const Tensor<T>& l, const Tensor<T>& w_r_prev, const Tensor<T>& c_r,
                         const Tensor<T>& pi, const Tensor<T>& s_f = Tensor<T>(),
                         const Tensor<T>& s_b = Tensor<T>()) {
    Tensor<T> b = tmv(l, w_r_prev);
    Tensor<T> f = mv(l, w_r_prev);
    if (s_f.defined()) f = sharpen(f, s_f);
    if (s_b.defined()) b = sharpen(b, s_b);
    Tensor<T> w = mul(b, slice(pi, 0, 1));
    w = add(w, mul(c_r, slice(pi, 1, 1)));
    return add(w, mul(f, slice(pi, 2, 1)));
}

// ---------------------------------------------------------------------------
// Full cell
// ---------------------------------------------------------------------------

template <class T>
struct DncState {
    Tensor<T> M;                 // [N x W]
    Tensor<T> u;                 // [N]
    Tensor<T> p;                 // [N]
    Tensor<T> L;                 // [N x N]
    Tensor<T> w_w;               // [N]
    std::vector<Tensor<T>> w_r;  // R x [N]
    std::vector<Tensor<T>> r;    // R x [W]
    std::vector<Tensor<T>> h;    // depth x [H]
    std::vector<Tensor<T>> c;    // depth x [H]
};

template <class T>
struct DncStepOut {
    DncState<T> state;
    Tensor<T> y;   // [output_dim] raw logits / values
    Tensor<T> xi;  // raw interface emission, pre-nonlinearity
};

template <class T>
class Dnc {
public:
    using XiHook = std::function<Tensor<T>(const Tensor<T>&)>;

    Dnc() = default;
    explicit Dnc(DncConfig cfg) : cfg_(std::move(cfg)) { cfg_.validate(); }

    const DncConfig& config() const { return cfg_; }

    // Trainable parameter count; a pure function of everything except N.
    std::size_t param_count() const {
        const std::size_t H = cfg_.controller_hidden;
        const std::size_t xi = interface_len(cfg_);
        std::size_t n = 0;
        for (std::size_t l = 0; l < cfg_.depth; ++l) {
            const std::size_t in = (l == 0) ? cfg_.input_dim + cfg_.R * cfg_.W : H;
            n += in * 4 * H + H * 4 * H + 4 * H;
        }
        n += H * xi + xi;                              // interface head
        n += H * cfg_.output_dim + cfg_.output_dim;    // output head
        n += cfg_.R * cfg_.W * cfg_.output_dim;        // read contribution to output
        return n;
    }

    void init_params(ParameterStore<T>& store, Rng& rng, const std::string& prefix = "dnc") const {
        const std::size_t H = cfg_.controller_hidden;
        auto uniform_init = [&](std::size_t rows, std::size_t cols, std::size_t fan_in) {
            std::vector<T> w(rows * cols);
            const double bound = 1.0 / std::sqrt(double(fan_in));
            for (auto& v : w) v = static_cast<T>(rng.uniform(-bound, bound));
            return Tensor<T>::from({rows, cols}, std::move(w));
        };
        for (std::size_t l = 0; l < cfg_.depth; ++l) {
            const std::size_t in = (l == 0) ? cfg_.input_dim + cfg_.R * cfg_.W : H;
            const std::string lp = prefix + ".l" + std::to_string(l);
            store.add(lp + ".wx", uniform_init(in, 4 * H, in));
            store.add(lp + ".wh", uniform_init(H, 4 * H, H));
            std::vector<T> b(4 * H, T(0));
            for (std::size_t i = H; i < 2 * H; ++i) b[i] = T(1);  // forget bias
            store.add(lp + ".b", Tensor<T>::from({4 * H}, std::move(b)));
        }
        const std::size_t xi = interface_len(cfg_);
        store.add(prefix + ".xi.w", uniform_init(H, xi, H));
        store.add(prefix + ".xi.b", Tensor<T>::zeros({xi}));
        store.add(prefix + ".y.w", uniform_init(H, cfg_.output_dim, H));
        store.add(prefix + ".y.b", Tensor<T>::zeros({cfg_.output_dim}));
        store.add(prefix + ".r.w", uniform_init(cfg_.R * cfg_.W, cfg_.output_dim, cfg_.R * cfg_.W));
    }

    DncState<T> initial_state() const {
        DncState<T> s;
        s.M = Tensor<T>::zeros({cfg_.N, cfg_.W});
        s.u = Tensor<T>::zeros({cfg_.N});
        s.p = Tensor<T>::zeros({cfg_.N});
        s.L = Tensor<T>::zeros({cfg_.N, cfg_.N});
        s.w_w = Tensor<T>::zeros({cfg_.N});
        for (std::size_t i = 0; i < cfg_.R; ++i) {
            s.w_r.push_back(Tensor<T>::zeros({cfg_.N}));
            s.r.push_back(Tensor<T>::zeros({cfg_.W}));
        }
        for (std::size_t l = 0; l < cfg_.depth; ++l) {
            s.h.push_back(Tensor<T>::zeros({cfg_.controller_hidden}));
            s.c.push_back(Tensor<T>::zeros({cfg_.controller_hidden}));
        }
        return s;
    }

    // One cell update. x_aug must already carry any additive perturbation.
    // The hook, when set, maps the raw interface emission before parsing;
    // tests use it to pin individual fields.
    DncStepOut<T> step(ParameterStore<T>& store, const DncState<T>& s, const Tensor<T>& x_aug,
                       const XiHook& hook = {}, const std::string& prefix = "dnc") const {
        if (x_aug.shape().size() != 1 || x_aug.numel() != cfg_.input_dim)
            throw ShapeError("dnc step: input must be [" + std::to_string(cfg_.input_dim) + "], got " +
                             shape_str(x_aug.shape()));
        const std::size_t H = cfg_.controller_hidden;

        DncState<T> ns;
        std::vector<Tensor<T>> cat{x_aug};
        for (const auto& rv : s.r) cat.push_back(rv);
        Tensor<T> in = concat(cat);
        for (std::size_t l = 0; l < cfg_.depth; ++l) {
            const std::string lp = prefix + ".l" + std::to_string(l);
            Tensor<T> z = add(add(tmv(store.get(lp + ".wx"), in), tmv(store.get(lp + ".wh"), s.h[l])),
                              store.get(lp + ".b"));
            Tensor<T> ig = sigmoid(slice(z, 0, H));
            Tensor<T> fg = sigmoid(slice(z, H, H));
            Tensor<T> gg = demondnc::tanh(slice(z, 2 * H, H));
            Tensor<T> og = sigmoid(slice(z, 3 * H, H));
            Tensor<T> cell = add(mul(fg, s.c[l]), mul(ig, gg));
            Tensor<T> hid = mul(og, demondnc::tanh(cell));
            ns.c.push_back(cell);
            ns.h.push_back(hid);
            in = hid;
        }
        const Tensor<T>& top = ns.h.back();

        Tensor<T> xi = add(tmv(store.get(prefix + ".xi.w"), top), store.get(prefix + ".xi.b"));
        if (hook) xi = hook(xi);
        InterfaceVector<T> iv = parse_interface(xi, cfg_);

        UsageOut<T> uo = usage_update(s.u, s.w_w, s.w_r, iv.free_gates);
        Tensor<T> a = allocation_weighting(uo.u);
        Tensor<T> c_w = content_weighting(s.M, iv.write_key, iv.write_strength,
                                          cfg_.toggles.mask ? iv.write_mask : Tensor<T>());
        ns.w_w = write_weighting(iv.write_gate, iv.alloc_gate, a, c_w);
        ns.M = memory_write(s.M, ns.w_w, iv.erase, iv.write_vec, uo.psi, cfg_.toggles.dealloc);
        LinkOut<T> lo = link_update(s.L, s.p, ns.w_w);
        ns.L = lo.L;
        ns.p = lo.p;
        ns.u = uo.u;

        std::vector<Tensor<T>> reads;
        for (std::size_t i = 0; i < cfg_.R; ++i) {
            Tensor<T> c_r = content_weighting(ns.M, iv.read_keys[i], iv.read_strengths[i],
                                              cfg_.toggles.mask ? iv.read_masks[i] : Tensor<T>());
            Tensor<T> w_r = read_weighting(ns.L, s.w_r[i], c_r, iv.read_modes[i],
                                           cfg_.toggles.sharpness ? iv.sharp_f[i] : Tensor<T>(),
                                           cfg_.toggles.sharpness ? iv.sharp_b[i] : Tensor<T>());
            ns.w_r.push_back(w_r);
            Tensor<T> r = tmv(ns.M, w_r);
            ns.r.push_back(r);
            reads.push_back(r);
        }

        Tensor<T> r_cat = concat(reads);
        Tensor<T> y = add(add(tmv(store.get(prefix + ".y.w"), top), store.get(prefix + ".y.b")),
                          tmv(store.get(prefix + ".r.w"), r_cat));

        DncStepOut<T> out;
        out.state = std::move(ns);
        out.y = std::move(y);
        out.xi = std::move(xi);
        return out;
    }

private:
    DncConfig cfg_;
};

}  // namespace demondnc
