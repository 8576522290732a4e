#pragma once

#include <algorithm>
#include <cmath>
#include <cstddef>
#include <cstdint>
#include <numeric>
#include <string>
#include <vector>

#include "demondnc/mine.hpp"
#include "demondnc/mlp.hpp"
#include "demondnc/param_store.hpp"
#include "demondnc/rng.hpp"
#include "demondnc/tensor.hpp"

namespace demondnc {

// ---------------------------------------------------------------------------
// State encoding and reward
// ---------------------------------------------------------------------------

// s_t = [x_t ; flatten(M_t)], raw.
template <class T>
std::vector<T> state_encode(const std::vector<T>& x, const Tensor<T>& m) {
    std::vector<T> s = x;
    s.insert(s.end(), m.value().begin(), m.value().end());
    return s;
}

// Same, with the memory part standardized by the estimator's frozen statistics.
template <class T>
std::vector<T> state_encode(const std::vector<T>& x, const Tensor<T>& m, const RunningNorm<T>& norm) {
    if (m.numel() != norm.dim()) throw ConfigError("state_encode: memory extent does not match normalizer");
    std::vector<T> s = x;
    const auto z = norm.apply(m.value());
    s.insert(s.end(), z.begin(), z.end());
    return s;
}

// Welford statistics of a scalar stream; standardize guards a tiny std.
template <class T>
class RunningScalarStats {
public:
    void observe(T v) {
        ++count_;
        const T d = v - mean_;
        mean_ += d / static_cast<T>(count_);
        m2_ += d * (v - mean_);
    }
    T mean() const { return mean_; }
    T stddev() const { return count_ > 1 ? std::sqrt(m2_ / static_cast<T>(count_ - 1)) : T(1); }
    T standardize(T v) const { return (v - mean_) / (stddev() + T(1e-8)); }
    std::uint64_t count() const { return count_; }

    T raw_mean() const { return mean_; }
    T raw_m2() const { return m2_; }
    void restore(T mean, T m2, std::uint64_t count) {
        mean_ = mean;
        m2_ = m2;
        count_ = count;
    }

private:
    T mean_ = T(0);
    T m2_ = T(0);
    std::uint64_t count_ = 0;
};

// Per-step MI rewards for a window of consecutive-snapshot pairs: each pair
// contributes T(M_t, M_{t+1}) minus the window's log-mean-exp marginal term,
// with marginals drawn by the fixed cyclic derangement so the reward is a
// pure function of the window. With `stats` set, every raw reward is
// observed and then standardized.
template <class T>
std::vector<T> reward_from_mi(const MineEstimator<T>& est, const std::vector<MinePair<T>>& window,
                              RunningScalarStats<T>* stats = nullptr) {
    if (window.size() < 2) throw ArgumentError("reward_from_mi: need at least 2 pairs");
    auto rewards = est.pair_contributions(cyclic_marginals(window));
    if (stats) {
        for (const T r : rewards) stats->observe(r);
        for (T& r : rewards) r = stats->standardize(r);
    }
    return rewards;
}

// ---------------------------------------------------------------------------
// GAE
// ---------------------------------------------------------------------------

template <class T>
struct GaeOut {
    std::vector<T> advantages;
    std::vector<T> returns;
};

// delta_t = r_t + gamma V_{t+1} - V_t; A_t = sum_l (gamma lambda)^l delta_{t+l},
// cut at episode boundaries (done flags); returns = A + V.
template <class T>
GaeOut<T> gae(const std::vector<T>& rewards, const std::vector<T>& values, T bootstrap_value, T gamma, T lam,
              const std::vector<bool>& done = {}) {
    const std::size_t n = rewards.size();
    if (values.size() != n || (!done.empty() && done.size() != n))
        throw ArgumentError("gae: rewards, values, and flags must have equal length");
    GaeOut<T> out;
    out.advantages.assign(n, T(0));
    out.returns.assign(n, T(0));
    T adv = T(0);
    for (std::size_t i = n; i-- > 0;) {
        const bool terminal = !done.empty() && done[i];
        const T next_v = terminal ? T(0) : (i + 1 < n ? values[i + 1] : bootstrap_value);
        if (terminal) adv = T(0);
        const T delta = rewards[i] + gamma * next_v - values[i];
        adv = delta + gamma * lam * adv;
        out.advantages[i] = adv;
        out.returns[i] = adv + values[i];
    }
    return out;
}

// ---------------------------------------------------------------------------
// Policy / value agent
// ---------------------------------------------------------------------------

template <class T>
struct PpoConfig {
    T clip_eps = T(0.2);
    T gamma = T(0.99);
    T lam = T(0.95);
    std::size_t epochs = 4;
    std::size_t minibatch = 64;
    T value_coef = T(0.5);
    T entropy_coef = T(0.01);
    T lr = T(3e-4);

    void validate() const {
        if (!(clip_eps > T(0) && clip_eps < T(1))) throw ConfigError("ppo: clip_eps must be in (0,1)");
        if (gamma < T(0) || gamma > T(1) || lam < T(0) || lam > T(1))
            throw ConfigError("ppo: gamma and lambda must be in [0,1]");
        if (epochs < 1 || minibatch < 1) throw ConfigError("ppo: epochs and minibatch must be >= 1");
        if (!(lr > T(0))) throw ConfigError("ppo: lr must be positive");
    }

    bool operator==(const PpoConfig&) const = default;
};

// -mean(min(rho A, clip(rho, 1-eps, 1+eps) A)), rho = exp(logp_new - logp_old).
template <class T>
Tensor<T> ppo_clip_loss(const Tensor<T>& logp_new, const Tensor<T>& logp_old, const Tensor<T>& adv, T eps) {
    Tensor<T> ratio = demondnc::exp(sub(logp_new, logp_old));
    Tensor<T> unclipped = mul(ratio, adv);
    Tensor<T> clipped = mul(clamp(ratio, T(1) - eps, T(1) + eps), adv);
    return neg(mean(minimum(unclipped, clipped)));
}

template <class T>
struct RolloutBuffer {
    std::vector<std::vector<T>> states;
    std::vector<std::vector<T>> raws;  // pre-squash actions
    std::vector<T> logp;
    std::vector<T> rewards;
    std::vector<T> values;
    std::vector<bool> done;

    std::size_t size() const { return states.size(); }

    void push(std::vector<T> state, std::vector<T> raw, T lp, T value, bool terminal) {
        states.push_back(std::move(state));
        raws.push_back(std::move(raw));
        logp.push_back(lp);
        values.push_back(value);
        done.push_back(terminal);
    }

    void set_rewards(std::vector<T> r) {
        if (r.size() != states.size()) throw ArgumentError("rollout: reward count does not match steps");
        rewards = std::move(r);
    }

    void clear() {
        states.clear();
        raws.clear();
        logp.clear();
        rewards.clear();
        values.clear();
        done.clear();
    }
};

template <class T>
struct PpoStats {
    T policy_loss = T(0);
    T value_loss = T(0);
    T entropy = T(0);
    T mean_ratio = T(0);
    T clip_fraction = T(0);
    T grad_norm = T(0);
};

template <class T>
struct DemonConfig {
    std::size_t state_dim = 0;
    std::size_t action_dim = 0;
    std::size_t hidden = 64;
    T alpha = T(0.1);  // action scale; ||a||_inf <= alpha by construction
    T log_std_init = T(-0.6931471805599453);  // ln(0.5)
    T log_std_min = T(-5);
    T log_std_max = T(2);
    T grad_clip = T(10);
};

template <class T>
struct ActOut {
    std::vector<T> action;  // alpha * tanh(raw)
    std::vector<T> raw;
    T logp = T(0);
};

template <class T>
class DemonAgent {
public:
    DemonAgent() = default;

    DemonAgent(DemonConfig<T> cfg, Rng& rng) : cfg_(cfg) {
        if (cfg.state_dim < 1 || cfg.action_dim < 1)
            throw ConfigError("demon: state_dim and action_dim must be >= 1");
        if (!(cfg.alpha > T(0))) throw ConfigError("demon: alpha must be positive");
        pi_ = Mlp<T>(store_, "pi", cfg.state_dim, {cfg.hidden, cfg.hidden}, cfg.action_dim, Act::Tanh, rng);
        v_ = Mlp<T>(store_, "v", cfg.state_dim, {cfg.hidden, cfg.hidden}, 1, Act::Tanh, rng);
        store_.add("log_std", Tensor<T>::full({cfg.action_dim}, cfg.log_std_init));
    }

    // Copies would alias the underlying parameter tensors; moves rebind the nets.
    DemonAgent(const DemonAgent&) = delete;
    DemonAgent& operator=(const DemonAgent&) = delete;
    DemonAgent(DemonAgent&& o) noexcept
        : cfg_(o.cfg_), store_(std::move(o.store_)), pi_(std::move(o.pi_)), v_(std::move(o.v_)), adam_(o.adam_) {
        pi_.rebind(store_);
        v_.rebind(store_);
    }
    DemonAgent& operator=(DemonAgent&& o) noexcept {
        cfg_ = o.cfg_;
        store_ = std::move(o.store_);
        pi_ = std::move(o.pi_);
        v_ = std::move(o.v_);
        adam_ = o.adam_;
        pi_.rebind(store_);
        v_.rebind(store_);
        return *this;
    }

    const DemonConfig<T>& config() const { return cfg_; }
    ParameterStore<T>& params() { return store_; }
    const ParameterStore<T>& params() const { return store_; }

    // Stochastic action for collection; logp is the density of the squashed
    // action (Gaussian log-density of raw plus the tanh/scale correction).
    ActOut<T> act(const std::vector<T>& state, Rng& rng) const {
        NoGradGuard ng;
        const std::vector<T> mu = mean_of(state);
        const std::vector<T> ls = clamped_log_std();
        ActOut<T> out;
        out.raw.resize(cfg_.action_dim);
        out.action.resize(cfg_.action_dim);
        T lp = T(0);
        for (std::size_t d = 0; d < cfg_.action_dim; ++d) {
            const T sigma = std::exp(ls[d]);
            const T raw = mu[d] + sigma * static_cast<T>(rng.normal());
            const T z = (raw - mu[d]) / sigma;
            lp += -T(0.5) * z * z - ls[d];
            lp -= squash_correction(raw);
            out.raw[d] = raw;
            out.action[d] = cfg_.alpha * std::tanh(raw);
        }
        lp -= T(0.5) * static_cast<T>(cfg_.action_dim) * std::log(T(2) * pi_const());
        out.logp = lp;
        return out;
    }

    // Deterministic evaluation action: alpha * tanh(mean(s)).
    std::vector<T> act_mean(const std::vector<T>& state) const {
        std::vector<T> mu = policy_mean(state);
        for (auto& v : mu) v = cfg_.alpha * std::tanh(v);
        return mu;
    }

    std::vector<T> policy_mean(const std::vector<T>& state) const {
        NoGradGuard ng;
        return mean_of(state);
    }

    std::vector<T> log_std_clamped() const { return clamped_log_std(); }

    T value(const std::vector<T>& state) const {
        NoGradGuard ng;
        return v_.forward(Tensor<T>::from({1, cfg_.state_dim}, state)).item();
    }

    // Differentiable log-density of stored raw actions under current
    // parameters; states [n x state_dim], raws [n x action_dim] -> [n].
    Tensor<T> log_prob(const Tensor<T>& states, const Tensor<T>& raws) {
        const std::size_t n = states.extent(0);
        Tensor<T> mu = pi_.forward(states);
        Tensor<T> ls = clamp(store_.get("log_std"), cfg_.log_std_min, cfg_.log_std_max);
        Tensor<T> lsb = broadcast_rows(ls, n);
        Tensor<T> z = mul(sub(raws, mu), demondnc::exp(neg(lsb)));
        Tensor<T> per_dim = sub(scale(mul(z, z), T(-0.5)), lsb);
        std::vector<T> corr(n, T(0));
        const auto& rv = raws.value();
        for (std::size_t i = 0; i < n; ++i)
            for (std::size_t d = 0; d < cfg_.action_dim; ++d)
                corr[i] += squash_correction(rv[i * cfg_.action_dim + d]);
        const T base = T(0.5) * static_cast<T>(cfg_.action_dim) * std::log(T(2) * pi_const());
        for (auto& c : corr) c += base;
        return sub(row_sum(per_dim), Tensor<T>::from({n}, std::move(corr)));
    }

    // Entropy of the pre-squash Gaussian (state independent).
    Tensor<T> entropy() {
        Tensor<T> ls = clamp(store_.get("log_std"), cfg_.log_std_min, cfg_.log_std_max);
        const T c = T(0.5) * (T(1) + std::log(T(2) * pi_const()));
        return add_scalar(sum(ls), c * static_cast<T>(cfg_.action_dim));
    }

    // Clipped-surrogate update over the buffer; behavior log-probs are read
    // only. Advantages are standardized across the whole buffer per update.
    PpoStats<T> ppo_update(const RolloutBuffer<T>& buf, const PpoConfig<T>& cfg, Rng& rng) {
        cfg.validate();
        const std::size_t n = buf.size();
        if (n == 0) throw ArgumentError("ppo_update: empty buffer");
        if (buf.rewards.size() != n) throw ArgumentError("ppo_update: rewards not populated");

        adam_.lr = cfg.lr;
        GaeOut<T> g = gae(buf.rewards, buf.values, T(0), cfg.gamma, cfg.lam, buf.done);
        T am = T(0);
        for (const T a : g.advantages) am += a;
        am /= static_cast<T>(n);
        T av = T(0);
        for (const T a : g.advantages) av += (a - am) * (a - am);
        const T astd = std::max(std::sqrt(av / static_cast<T>(n)), T(1e-8));
        std::vector<T> adv(n);
        for (std::size_t i = 0; i < n; ++i) adv[i] = (g.advantages[i] - am) / astd;

        std::vector<T> flat_s, flat_r;
        flat_s.reserve(n * cfg_.state_dim);
        flat_r.reserve(n * cfg_.action_dim);
        for (const auto& s : buf.states) flat_s.insert(flat_s.end(), s.begin(), s.end());
        for (const auto& r : buf.raws) flat_r.insert(flat_r.end(), r.begin(), r.end());

        PpoStats<T> stats;
        std::size_t batches = 0, clip_hits = 0, samples = 0;
        std::vector<std::size_t> idx(n);
        std::iota(idx.begin(), idx.end(), std::size_t(0));
        for (std::size_t ep = 0; ep < cfg.epochs; ++ep) {
            rng.shuffle(idx);
            for (std::size_t start = 0; start < n; start += cfg.minibatch) {
                const std::size_t m = std::min(cfg.minibatch, n - start);
                std::vector<T> sb(m * cfg_.state_dim), rb(m * cfg_.action_dim), lp(m), ad(m), rt(m);
                for (std::size_t k = 0; k < m; ++k) {
                    const std::size_t i = idx[start + k];
                    std::copy_n(flat_s.begin() + i * cfg_.state_dim, cfg_.state_dim,
                                sb.begin() + k * cfg_.state_dim);
                    std::copy_n(flat_r.begin() + i * cfg_.action_dim, cfg_.action_dim,
                                rb.begin() + k * cfg_.action_dim);
                    lp[k] = buf.logp[i];
                    ad[k] = adv[i];
                    rt[k] = g.returns[i];
                }
                Tensor<T> st = Tensor<T>::from({m, cfg_.state_dim}, std::move(sb));
                Tensor<T> ra = Tensor<T>::from({m, cfg_.action_dim}, std::move(rb));
                Tensor<T> lpo = Tensor<T>::from({m}, std::move(lp));
                Tensor<T> at = Tensor<T>::from({m}, std::move(ad));
                Tensor<T> rtt = Tensor<T>::from({m}, std::move(rt));

                Tensor<T> lpn = log_prob(st, ra);
                Tensor<T> pl = ppo_clip_loss(lpn, lpo, at, cfg.clip_eps);
                Tensor<T> vpred = flatten(v_.forward(st));
                Tensor<T> verr = sub(vpred, rtt);
                Tensor<T> vl = mean(mul(verr, verr));
                Tensor<T> ent = entropy();
                Tensor<T> total = sub(add(pl, scale(vl, cfg.value_coef)), scale(ent, cfg.entropy_coef));

                store_.zero_grad();
                backward(total);
                stats.grad_norm += store_.clip_grad_norm(cfg_.grad_clip);
                store_.adam_step(adam_);

                stats.policy_loss += pl.item();
                stats.value_loss += vl.item();
                stats.entropy += ent.item();
                for (std::size_t k = 0; k < m; ++k) {
                    const T rho = std::exp(lpn.at(k) - lpo.at(k));
                    stats.mean_ratio += rho;
                    if (std::abs(rho - T(1)) > cfg.clip_eps) ++clip_hits;
                }
                samples += m;
                ++batches;
            }
        }
        const T nb = static_cast<T>(batches);
        stats.policy_loss /= nb;
        stats.value_loss /= nb;
        stats.entropy /= nb;
        stats.grad_norm /= nb;
        stats.mean_ratio /= static_cast<T>(samples);
        stats.clip_fraction = static_cast<T>(clip_hits) / static_cast<T>(samples);
        return stats;
    }

private:
    static constexpr T pi_const() { return T(3.14159265358979323846); }

    // log |d a / d raw| = log alpha + log(1 - tanh^2 raw), the latter in the
    // overflow-safe form 2 (ln 2 - raw - softplus(-2 raw)).
    T squash_correction(T raw) const {
        return std::log(cfg_.alpha) + T(2) * (std::log(T(2)) - raw - softplus_value(T(-2) * raw));
    }

    std::vector<T> mean_of(const std::vector<T>& state) const {
        if (state.size() != cfg_.state_dim) throw ConfigError("demon: state dimension mismatch");
        return pi_.forward(Tensor<T>::from({1, cfg_.state_dim}, state)).value();
    }

    std::vector<T> clamped_log_std() const {
        std::vector<T> ls = store_.get("log_std").value();
        for (auto& v : ls) v = std::min(std::max(v, cfg_.log_std_min), cfg_.log_std_max);
        return ls;
    }

    DemonConfig<T> cfg_;
    ParameterStore<T> store_;
    Mlp<T> pi_;
    Mlp<T> v_;
    AdamConfig<T> adam_;
};

}  // namespace demondnc
