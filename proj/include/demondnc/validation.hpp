#pragma once

#include <algorithm>
#include <cmath>
#include <cstddef>
#include <cstdint>
#include <string>
#include <vector>

#include "demondnc/demon.hpp"
#include "demondnc/dnc.hpp"
#include "demondnc/gradcheck.hpp"
#include "demondnc/mine.hpp"
#include "demondnc/rng.hpp"

namespace demondnc {

// ---------------------------------------------------------------------------
// MINE validation suites (shared by unit tests, the acceptance gate, and the
// mi-check subcommand)
// ---------------------------------------------------------------------------

template <class T>
struct GaussianMiResult {
    T rho = T(0);
    T oracle = T(0);
    T estimate = T(0);
    std::size_t updates = 0;
    std::size_t held_pairs = 0;
};

// Trains a fresh estimator on streamed 1-D correlated Gaussian pairs and
// returns the held-out bound. Every 10th streamed pair is diverted to the
// held-out pool; training stops early once the held-out estimate is safely
// inside `tol` of the closed form.
template <class T>
GaussianMiResult<T> validate_gaussian_mi(T rho, std::uint64_t seed, std::size_t max_updates = 20000,
                                         T tol = T(0.05), std::size_t batch = 256) {
    Rng rng(seed);
    MineConfig<T> mc;
    mc.snapshot_dim = 1;
    MineEstimator<T> est(mc, rng);

    GaussianMiResult<T> res;
    res.rho = rho;
    res.oracle = gaussian_mi_oracle(rho);

    const T cross = std::sqrt(T(1) - rho * rho);
    const std::size_t chunk = batch + (batch + 8) / 9;  // train share ~= batch after the 1-in-10 split
    const std::size_t held_cap = 4096;
    std::vector<MinePair<T>> held;

    const std::size_t check_every = 100;
    for (std::size_t u = 0; u < max_updates; ++u) {
        std::vector<MinePair<T>> pairs;
        pairs.reserve(chunk);
        for (std::size_t i = 0; i < chunk; ++i) {
            const T x = static_cast<T>(rng.normal());
            const T y = rho * x + cross * static_cast<T>(rng.normal());
            est.observe({x});
            est.observe({y});
            pairs.push_back({{x}, {y}});
        }
        auto split = split_holdout(pairs);
        held.insert(held.end(), split.held.begin(), split.held.end());
        if (held.size() > held_cap) held.erase(held.begin(), held.end() - held_cap);
        est.mine_update(shuffle_marginals(split.train, rng));
        res.updates = u + 1;
        if ((u + 1) % check_every == 0 && held.size() >= 64) {
            res.estimate = est.estimate_mi(held, rng);
            if (std::abs(res.estimate - res.oracle) <= tol * T(0.7)) break;
        }
    }
    if (held.size() >= 2) res.estimate = est.estimate_mi(held, rng);
    res.held_pairs = held.size();
    return res;
}

// Largest discrepancy between the plug-in MI sum and H(X)+H(Y)-H(X,Y) over
// random joint tables.
template <class T>
T discrete_tables_max_err(std::size_t n_tables, std::uint64_t seed) {
    Rng rng(seed);
    T worst = T(0);
    for (std::size_t t = 0; t < n_tables; ++t) {
        const std::size_t m = 2 + rng.uniform_int(4);
        const std::size_t n = 2 + rng.uniform_int(4);
        std::vector<T> p(m * n);
        T total = T(0);
        for (auto& v : p) {
            v = static_cast<T>(-std::log(1.0 - rng.uniform()));  // Exp(1)
            total += v;
        }
        for (auto& v : p) v /= total;
        const Tensor<T> table = Tensor<T>::from({m, n}, p);
        const T plug_in = discrete_mi_oracle(table);

        std::vector<T> px(m, T(0)), py(n, T(0));
        for (std::size_t i = 0; i < m; ++i)
            for (std::size_t j = 0; j < n; ++j) {
                px[i] += p[i * n + j];
                py[j] += p[i * n + j];
            }
        auto entropy = [](const std::vector<T>& q) {
            T h = T(0);
            for (const T v : q)
                if (v > T(0)) h -= v * std::log(v);
            return h;
        };
        const T three = entropy(px) + entropy(py) - entropy(p);
        worst = std::max(worst, std::abs(plug_in - three));
    }
    return worst;
}

template <class T>
struct PpoEnvResult {
    T first_reward = T(0);
    T last_reward = T(0);
    T improvement = T(0);  // (last - first) / |first|
    bool clip_fraction_ok = true;
    bool ratio_finite = true;
    std::size_t updates = 0;
};

// Stateless bandit with a known optimum: reward = -||a - c||^2 for a fixed
// target c inside the action range. Every step is its own episode.
template <class T>
PpoEnvResult<T> validate_ppo_env(std::uint64_t seed, std::size_t updates = 200, std::size_t steps_per_update = 128) {
    Rng rng(seed);
    DemonConfig<T> dc;
    dc.state_dim = 2;
    dc.action_dim = 2;
    dc.hidden = 64;
    DemonAgent<T> agent(dc, rng);
    PpoConfig<T> pc;
    pc.lr = T(1e-3);

    const std::vector<T> state(dc.state_dim, T(0));
    const std::vector<T> target = {T(0.05), T(-0.03)};

    PpoEnvResult<T> out;
    out.updates = updates;
    for (std::size_t u = 0; u < updates; ++u) {
        RolloutBuffer<T> buf;
        std::vector<T> rewards;
        rewards.reserve(steps_per_update);
        T mean_r = T(0);
        for (std::size_t s = 0; s < steps_per_update; ++s) {
            ActOut<T> a = agent.act(state, rng);
            T r = T(0);
            for (std::size_t d = 0; d < dc.action_dim; ++d) {
                const T diff = a.action[d] - target[d];
                r -= diff * diff;
            }
            buf.push(state, std::move(a.raw), a.logp, agent.value(state), /*terminal=*/true);
            rewards.push_back(r);
            mean_r += r;
        }
        buf.set_rewards(std::move(rewards));
        mean_r /= static_cast<T>(steps_per_update);
        if (u == 0) out.first_reward = mean_r;
        if (u + 1 == updates) out.last_reward = mean_r;

        const PpoStats<T> st = agent.ppo_update(buf, pc, rng);
        if (st.clip_fraction < T(0) || st.clip_fraction > T(1)) out.clip_fraction_ok = false;
        if (!std::isfinite(st.mean_ratio)) out.ratio_finite = false;
    }
    out.improvement = (out.last_reward - out.first_reward) / std::abs(out.first_reward);
    return out;
}

// ---------------------------------------------------------------------------
// Gradient and invariant suites (shared by the acceptance gate and the
// grad-check subcommand)
// ---------------------------------------------------------------------------

namespace detail {

template <class T>
Tensor<T> project_scalar(const Tensor<T>& out, Rng& rng) {
    std::vector<T> w(out.numel());
    for (auto& v : w) v = static_cast<T>(rng.uniform(-1.0, 1.0));
    return sum(mul(flatten(out), Tensor<T>::from({out.numel()}, std::move(w))));
}

}  // namespace detail

struct OpGradReport {
    double max_rel_err = 0.0;
    std::size_t checked = 0;
    std::string worst_op;

    bool ok(double tol) const { return max_rel_err <= tol; }
};

// Finite-difference sweep over every differentiable op at one random draw.
// Kinked ops get inputs resampled away from their kinks.
inline OpGradReport validate_diffcore_ops(std::uint64_t seed) {
    using T = double;
    using TV = std::vector<T>;
    const std::vector<Shape> shapes = {{3}, {2, 3}, {4, 2}};
    const Shape shape = shapes[seed % shapes.size()];
    Rng rng(mix_seed(seed, 17));
    const std::size_t n = shape_numel(shape);

    OpGradReport report;
    auto fold = [&report](const GradCheckReport<T>& rep, const char* name) {
        report.checked += rep.checked;
        if (rep.max_rel_err > report.max_rel_err) {
            report.max_rel_err = rep.max_rel_err;
            report.worst_op = std::string(name) + " (" + rep.worst + ")";
        }
    };
    auto check1 = [&](auto fn, TV vals, const char* name) {
        const std::uint64_t ws = mix_seed(seed, 1000);
        fold(check_gradients<T>({{shape, std::move(vals)}},
                                [&](const std::vector<Tensor<T>>& p) {
                                    Rng r2(ws);
                                    return detail::project_scalar(fn(p[0]), r2);
                                }),
             name);
    };
    auto checkn = [&](std::vector<std::pair<Shape, TV>> inits, auto fn, const char* name) {
        const std::uint64_t ws = mix_seed(seed, 2000);
        fold(check_gradients<T>(inits,
                                [&](const std::vector<Tensor<T>>& p) {
                                    Rng r2(ws);
                                    return detail::project_scalar(fn(p), r2);
                                }),
             name);
    };

    TV smooth = random_values<T>(rng, n, -2.0, 2.0);
    TV pos = random_values<T>(rng, n, 0.1, 3.0);
    TV kinked = random_values<T>(rng, n, -2.0, 2.0, {0.0, -1.0, 1.0});

    check1([](const Tensor<T>& x) { return add(x, x); }, smooth, "add");
    check1([](const Tensor<T>& x) { return sub(scale(x, 2.0), x); }, smooth, "sub");
    check1([](const Tensor<T>& x) { return mul(x, x); }, smooth, "mul");
    check1([](const Tensor<T>& x) { return demondnc::div(Tensor<T>::full(x.shape(), 1.7), x); }, pos, "div");
    check1([](const Tensor<T>& x) { return neg(x); }, smooth, "neg");
    check1([](const Tensor<T>& x) { return sigmoid(x); }, smooth, "sigmoid");
    check1([](const Tensor<T>& x) { return demondnc::tanh(x); }, smooth, "tanh");
    check1([](const Tensor<T>& x) { return demondnc::exp(x); }, smooth, "exp");
    check1([](const Tensor<T>& x) { return demondnc::log(x); }, pos, "log");
    check1([](const Tensor<T>& x) { return relu(x); }, kinked, "relu");
    check1([](const Tensor<T>& x) { return softplus(x); }, smooth, "softplus");
    check1([](const Tensor<T>& x) { return oneplus(x); }, smooth, "oneplus");
    check1([](const Tensor<T>& x) { return clamp(x, -1.0, 1.0); }, kinked, "clamp");
    check1([](const Tensor<T>& x) { return scale(x, -1.3); }, smooth, "scale");
    check1([](const Tensor<T>& x) { return add_scalar(x, 0.4); }, smooth, "add_scalar");
    check1([](const Tensor<T>& x) { return demondnc::sum(x); }, smooth, "sum");
    check1([](const Tensor<T>& x) { return mean(x); }, smooth, "mean");
    check1([](const Tensor<T>& x) { return softmax_rows(x); }, smooth, "softmax_rows");
    check1([](const Tensor<T>& x) { return flatten(x); }, smooth, "flatten");
    check1([n](const Tensor<T>& x) { return slice(flatten(x), 1, n - 1); }, smooth, "slice");

    {
        TV a = random_values<T>(rng, n, -2.0, 2.0);
        TV b(n);
        for (std::size_t i = 0; i < n; ++i) b[i] = a[i] + (rng.bit() ? 0.5 : -0.5);
        checkn({{shape, a}, {shape, b}},
               [](const std::vector<Tensor<T>>& p) { return minimum(p[0], p[1]); }, "minimum");
    }

    auto w = [&](std::size_t k) { return random_values<T>(rng, k, -1.5, 1.5); };
    checkn({{{3, 4}, w(12)}, {{4, 2}, w(8)}},
           [](const std::vector<Tensor<T>>& p) { return matmul(p[0], p[1]); }, "matmul");
    checkn({{{3, 4}, w(12)}, {{4}, w(4)}}, [](const std::vector<Tensor<T>>& p) { return mv(p[0], p[1]); }, "mv");
    checkn({{{3, 4}, w(12)}, {{3}, w(3)}}, [](const std::vector<Tensor<T>>& p) { return tmv(p[0], p[1]); },
           "tmv");
    checkn({{{3}, w(3)}, {{4}, w(4)}}, [](const std::vector<Tensor<T>>& p) { return outer(p[0], p[1]); },
           "outer");
    checkn({{{3, 4}, w(12)}}, [](const std::vector<Tensor<T>>& p) { return row_sum(p[0]); }, "row_sum");
    checkn({{{5}, w(5)}}, [](const std::vector<Tensor<T>>& p) { return lse(p[0]); }, "lse");
    checkn({{{3}, w(3)}, {{2}, w(2)}},
           [](const std::vector<Tensor<T>>& p) { return concat(std::vector<Tensor<T>>{p[0], p[1]}); }, "concat");
    checkn({{{3}, w(3)}}, [](const std::vector<Tensor<T>>& p) { return broadcast_rows(p[0], 4); },
           "broadcast_rows");
    checkn({{{3}, w(3)}}, [](const std::vector<Tensor<T>>& p) { return broadcast_cols(p[0], 4); },
           "broadcast_cols");
    checkn({{{3, 3}, w(9)}}, [](const std::vector<Tensor<T>>& p) { return zero_diag(p[0]); }, "zero_diag");
    checkn({{{4, 3}, w(12)}, {{3}, w(3)}},
           [](const std::vector<Tensor<T>>& p) { return cosine_rows(p[0], p[1]); }, "cosine_rows");
    {
        TV u = random_values<T>(rng, 5, 0.05, 0.95);
        checkn({{{5}, u}},
               [](const std::vector<Tensor<T>>& p) { return allocation_weighting(p[0]); }, "allocation");
        checkn({{{4}, {0.3, 0.1, 0.45, 0.15}}, {{1}, {2.3}}},
               [](const std::vector<Tensor<T>>& p) { return sharpen(p[0], p[1]); }, "sharpen");
    }
    return report;
}

// Gradients of a random projection of three unrolled steps (outputs, final
// memory, final usage) with respect to every parameter, all toggles on.
inline GradCheckReport<double> validate_dnc_step_gradients(std::uint64_t seed) {
    using T = double;
    DncConfig cfg;
    cfg.N = 4;
    cfg.W = 3;
    cfg.R = 1;
    cfg.controller_hidden = 8;
    cfg.input_dim = 5;
    cfg.output_dim = 4;
    cfg.toggles = {true, true, true};
    Dnc<T> dnc(cfg);

    ParameterStore<T> ref;
    Rng rng(seed);
    dnc.init_params(ref, rng);

    std::vector<std::pair<Shape, std::vector<T>>> inits;
    std::vector<std::string> names;
    for (const auto& slot : ref.slots()) {
        inits.push_back({slot.value.shape(), slot.value.value()});
        names.push_back(slot.name);
    }
    std::vector<std::vector<T>> xs;
    for (int t = 0; t < 3; ++t) {
        std::vector<T> x(cfg.input_dim);
        for (auto& v : x) v = rng.normal();
        xs.push_back(std::move(x));
    }
    const std::uint64_t ws = mix_seed(seed, 555);

    auto loss_fn = [&](const std::vector<Tensor<T>>& params) {
        ParameterStore<T> store;
        for (std::size_t i = 0; i < params.size(); ++i) store.adopt(names[i], params[i]);
        auto s = dnc.initial_state();
        std::vector<Tensor<T>> ys;
        for (const auto& x : xs) {
            auto out = dnc.step(store, s, Tensor<T>::from({cfg.input_dim}, x));
            s = std::move(out.state);
            ys.push_back(out.y);
        }
        ys.push_back(flatten(s.M));
        ys.push_back(s.u);
        Rng r2(ws);
        return detail::project_scalar(concat(ys), r2);
    };
    return check_gradients<T>(inits, loss_fn);
}

struct DncInvariantReport {
    std::size_t steps = 0;
    std::size_t violations = 0;
    bool gated_write_identity = false;
    std::string first_violation;

    bool ok() const { return violations == 0 && gated_write_identity; }
};

// Runs `steps` random steps checking usage, weighting, and link bounds, then
// pins the write gate shut and requires bit-identical memory.
inline DncInvariantReport validate_dnc_invariants(std::uint64_t seed, std::size_t steps = 1000) {
    using T = double;
    DncConfig cfg;
    cfg.N = 6;
    cfg.W = 4;
    cfg.R = 2;
    cfg.controller_hidden = 10;
    cfg.input_dim = 5;
    cfg.output_dim = 3;
    cfg.toggles = {true, true, true};
    Dnc<T> dnc(cfg);
    ParameterStore<T> store;
    Rng rng(seed);
    dnc.init_params(store, rng);

    DncInvariantReport report;
    report.steps = steps;
    auto fail = [&report](std::size_t t, const std::string& what) {
        ++report.violations;
        if (report.first_violation.empty())
            report.first_violation = "step " + std::to_string(t) + ": " + what;
    };

    NoGradGuard ng;
    auto s = dnc.initial_state();
    for (std::size_t t = 0; t < steps; ++t) {
        std::vector<T> x(cfg.input_dim);
        for (auto& v : x) v = rng.normal(0.0, 2.0);
        s = dnc.step(store, s, Tensor<T>::from({cfg.input_dim}, std::move(x))).state;

        T sw = 0;
        for (std::size_t i = 0; i < cfg.N; ++i) {
            if (!(s.u.at(i) >= 0.0 && s.u.at(i) <= 1.0)) fail(t, "usage out of [0,1]");
            if (!(s.w_w.at(i) >= 0.0)) fail(t, "negative write weight");
            sw += s.w_w.at(i);
        }
        if (!(sw <= 1.0 + 1e-9)) fail(t, "write weighting above simplex");
        for (const auto& wr : s.w_r) {
            T sr = 0;
            for (std::size_t i = 0; i < cfg.N; ++i) {
                if (!(wr.at(i) >= 0.0)) fail(t, "negative read weight");
                sr += wr.at(i);
            }
            if (!(sr <= 1.0 + 1e-9)) fail(t, "read weighting above simplex");
        }
        for (std::size_t i = 0; i < cfg.N; ++i) {
            if (s.L.at(i, i) != 0.0) fail(t, "link diagonal nonzero");
            T row = 0, col = 0;
            for (std::size_t j = 0; j < cfg.N; ++j) {
                if (!(s.L.at(i, j) >= 0.0 && s.L.at(i, j) <= 1.0)) fail(t, "link entry out of [0,1]");
                row += s.L.at(i, j);
                col += s.L.at(j, i);
            }
            if (!(row <= 1.0 + 1e-9 && col <= 1.0 + 1e-9)) fail(t, "link row/col above simplex");
        }
    }

    // with dealloc off, a write gate pinned shut must not move memory
    DncConfig cfg2 = cfg;
    cfg2.toggles.dealloc = false;
    Dnc<T> dnc2(cfg2);
    ParameterStore<T> store2;
    dnc2.init_params(store2, rng);
    const auto segs = xi_layout(cfg2);
    const std::size_t total = interface_len(cfg2);
    auto hook = [&segs, total](const Tensor<T>& xi) {
        std::vector<T> v = xi.value();
        for (const auto& seg : segs)
            if (seg.name == "write_gate")
                for (std::size_t k = 0; k < seg.len; ++k) v[seg.offset + k] = T(-1e4);
        return Tensor<T>::from({total}, std::move(v));
    };
    auto s2 = dnc2.initial_state();
    for (int t = 0; t < 5; ++t) {
        std::vector<T> x(cfg2.input_dim);
        for (auto& v : x) v = rng.normal();
        s2 = dnc2.step(store2, s2, Tensor<T>::from({cfg2.input_dim}, std::move(x))).state;
    }
    const std::vector<T> before = s2.M.value();
    const auto out = dnc2.step(store2, s2, Tensor<T>::full({cfg2.input_dim}, 0.3), hook);
    report.gated_write_identity = out.state.M.value() == before;
    return report;
}

}  // namespace demondnc
