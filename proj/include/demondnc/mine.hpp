#pragma once

#include <algorithm>
#include <cmath>
#include <cstddef>
#include <string>
#include <vector>

#include "demondnc/mlp.hpp"
#include "demondnc/param_store.hpp"
#include "demondnc/rng.hpp"
#include "demondnc/tensor.hpp"

namespace demondnc {

// ---------------------------------------------------------------------------
// Oracles
// ---------------------------------------------------------------------------

template <class T>
T gaussian_mi_oracle(T rho) {
    if (!(std::abs(rho) < T(1))) throw DomainError("gaussian_mi_oracle: |rho| must be < 1");
    return -T(0.5) * std::log(T(1) - rho * rho);
}

// sum p(i,j) ln(p(i,j) / (p_i p_j)) with 0 ln 0 := 0.
template <class T>
T discrete_mi_oracle(const Tensor<T>& joint) {
    if (joint.shape().size() != 2) throw ArgumentError("discrete_mi_oracle: table must be rank-2");
    const std::size_t m = joint.extent(0), n = joint.extent(1);
    const auto& p = joint.value();
    T total = T(0);
    for (const T v : p) {
        if (v < T(0)) throw ArgumentError("discrete_mi_oracle: negative probability");
        total += v;
    }
    if (std::abs(total - T(1)) > T(1e-9)) throw ArgumentError("discrete_mi_oracle: probabilities must sum to 1");
    std::vector<T> px(m, T(0)), py(n, T(0));
    for (std::size_t i = 0; i < m; ++i)
        for (std::size_t j = 0; j < n; ++j) {
            px[i] += p[i * n + j];
            py[j] += p[i * n + j];
        }
    T mi = T(0);
    for (std::size_t i = 0; i < m; ++i)
        for (std::size_t j = 0; j < n; ++j) {
            const T v = p[i * n + j];
            if (v > T(0)) mi += v * std::log(v / (px[i] * py[j]));
        }
    return mi;
}

// ---------------------------------------------------------------------------
// Batches
// ---------------------------------------------------------------------------

template <class T>
struct MinePair {
    std::vector<T> x;
    std::vector<T> y;
};

template <class T>
struct MiBatch {
    std::vector<MinePair<T>> joint;
    std::vector<MinePair<T>> marginal;
};

template <class T>
MiBatch<T> shuffle_marginals(const std::vector<MinePair<T>>& pairs, const std::vector<std::size_t>& perm) {
    if (pairs.size() < 2) throw ArgumentError("shuffle_marginals: need at least 2 pairs");
    if (perm.size() != pairs.size()) throw ArgumentError("shuffle_marginals: permutation size mismatch");
    MiBatch<T> b;
    b.joint = pairs;
    b.marginal.reserve(pairs.size());
    for (std::size_t i = 0; i < pairs.size(); ++i) b.marginal.push_back({pairs[i].x, pairs[perm[i]].y});
    return b;
}

template <class T>
MiBatch<T> shuffle_marginals(const std::vector<MinePair<T>>& pairs, Rng& rng) {
    if (pairs.size() < 2) throw ArgumentError("shuffle_marginals: need at least 2 pairs");
    return shuffle_marginals(pairs, rng.permutation(pairs.size()));
}

template <class T>
struct HoldoutSplit {
    std::vector<MinePair<T>> train;
    std::vector<MinePair<T>> held;
};

// Every 10th pair goes to the held-out side.
template <class T>
HoldoutSplit<T> split_holdout(const std::vector<MinePair<T>>& pairs) {
    HoldoutSplit<T> s;
    for (std::size_t i = 0; i < pairs.size(); ++i) {
        if (i % 10 == 9)
            s.held.push_back(pairs[i]);
        else
            s.train.push_back(pairs[i]);
    }
    return s;
}

// ---------------------------------------------------------------------------
// Input standardization
// ---------------------------------------------------------------------------

// Per-coordinate Welford statistics, frozen after a warm-up count so the
// reward scale stays fixed while the DNC's memory magnitudes drift.
template <class T>
class RunningNorm {
public:
    RunningNorm() = default;
    explicit RunningNorm(std::size_t dim, std::size_t freeze_after = 1000)
        : mean_(dim, T(0)), m2_(dim, T(0)), freeze_after_(freeze_after) {}

    void observe(const std::vector<T>& v) {
        if (v.size() != mean_.size()) throw ShapeError("running norm: dimension mismatch");
        if (frozen()) return;
        ++count_;
        for (std::size_t i = 0; i < v.size(); ++i) {
            const T d = v[i] - mean_[i];
            mean_[i] += d / static_cast<T>(count_);
            m2_[i] += d * (v[i] - mean_[i]);
        }
    }

    std::vector<T> apply(const std::vector<T>& v) const {
        std::vector<T> out(v.size());
        for (std::size_t i = 0; i < v.size(); ++i) {
            const T sd = count_ > 1 ? std::sqrt(m2_[i] / static_cast<T>(count_ - 1)) : T(1);
            out[i] = (v[i] - mean_[i]) / (sd + T(1e-6));
        }
        return out;
    }

    bool frozen() const { return count_ >= freeze_after_; }
    std::size_t count() const { return count_; }
    std::size_t dim() const { return mean_.size(); }

    std::vector<T>& mean() { return mean_; }
    std::vector<T>& m2() { return m2_; }
    const std::vector<T>& mean() const { return mean_; }
    const std::vector<T>& m2() const { return m2_; }
    std::uint64_t raw_count() const { return count_; }
    void set_raw_count(std::uint64_t c) { count_ = c; }

private:
    std::vector<T> mean_;
    std::vector<T> m2_;
    std::uint64_t count_ = 0;
    std::size_t freeze_after_ = 1000;
};

// ---------------------------------------------------------------------------
// Donsker-Varadhan bound
// ---------------------------------------------------------------------------

// mean_joint(T) - log(mean_marginal(e^T)). Both sides are shifted by the
// marginal max before exponentiation, so |T| up to ~700 is safe and a
// constant statistic cancels to exactly zero.
template <class T>
Tensor<T> dv_bound_from_stats(const Tensor<T>& t_joint, const Tensor<T>& t_marg) {
    if (t_joint.numel() < 2 || t_marg.numel() < 2)
        throw ArgumentError("dv bound: need at least 2 joint and 2 marginal statistics");
    const auto& mv = t_marg.value();
    const T mx = *std::max_element(mv.begin(), mv.end());
    const T ln_n = std::log(static_cast<T>(t_marg.numel()));
    Tensor<T> logsum = demondnc::log(sum(demondnc::exp(add_scalar(t_marg, -mx))));
    return sub(add_scalar(mean(t_joint), -mx), add_scalar(logsum, -ln_n));
}

template <class T>
struct MineConfig {
    std::size_t snapshot_dim = 0;
    std::size_t hidden = 64;
    T lr = T(1e-3);
    T ema_decay = T(0.99);
    T grad_clip = T(10);
    std::size_t norm_warmup = 1000;
};

// Marginal pairing by a cyclic shift of the targets: x_i keeps its slot, y
// moves one pair ahead. A fixed derangement, so the resulting batch is
// reproducible and duplicating the input duplicates the marginal multiset.
template <class T>
MiBatch<T> cyclic_marginals(const std::vector<MinePair<T>>& pairs) {
    if (pairs.size() < 2) throw ArgumentError("mine: need at least 2 pairs to decouple marginals");
    MiBatch<T> out;
    out.joint = pairs;
    out.marginal.reserve(pairs.size());
    for (std::size_t i = 0; i < pairs.size(); ++i)
        out.marginal.push_back({pairs[i].x, pairs[(i + 1) % pairs.size()].y});
    return out;
}

template <class T>
class MineEstimator {
public:
    MineEstimator() = default;

    MineEstimator(MineConfig<T> cfg, Rng& rng) : cfg_(cfg), norm_(cfg.snapshot_dim, cfg.norm_warmup) {
        if (cfg.snapshot_dim < 1) throw ConfigError("mine: snapshot_dim must be >= 1");
        net_ = Mlp<T>(store_, "mine", 2 * cfg.snapshot_dim, {cfg.hidden, cfg.hidden}, 1, Act::Relu, rng,
                      /*zero_last=*/true);
        adam_.lr = cfg.lr;
    }

    // Copies would alias the underlying parameter tensors; moves rebind the net.
    MineEstimator(const MineEstimator&) = delete;
    MineEstimator& operator=(const MineEstimator&) = delete;
    MineEstimator(MineEstimator&& o) noexcept
        : cfg_(o.cfg_), store_(std::move(o.store_)), net_(std::move(o.net_)), norm_(std::move(o.norm_)),
          adam_(o.adam_), log_ema_(o.log_ema_), ema_init_(o.ema_init_) {
        net_.rebind(store_);
    }
    MineEstimator& operator=(MineEstimator&& o) noexcept {
        cfg_ = o.cfg_;
        store_ = std::move(o.store_);
        net_ = std::move(o.net_);
        norm_ = std::move(o.norm_);
        adam_ = o.adam_;
        log_ema_ = o.log_ema_;
        ema_init_ = o.ema_init_;
        net_.rebind(store_);
        return *this;
    }

    // Feeds the input standardizer; call once per memory snapshot.
    void observe(const std::vector<T>& snapshot) { norm_.observe(snapshot); }

    // Statistic values for a list of pairs, as a rank-1 tensor.
    Tensor<T> statistics(const std::vector<MinePair<T>>& pairs) const {
        const std::size_t d = cfg_.snapshot_dim;
        std::vector<T> rows;
        rows.reserve(pairs.size() * 2 * d);
        for (const auto& pr : pairs) {
            if (pr.x.size() != d || pr.y.size() != d) throw ShapeError("mine: snapshot dimension mismatch");
            const auto nx = norm_.apply(pr.x);
            const auto ny = norm_.apply(pr.y);
            rows.insert(rows.end(), nx.begin(), nx.end());
            rows.insert(rows.end(), ny.begin(), ny.end());
        }
        return flatten(net_.forward(Tensor<T>::from({pairs.size(), 2 * d}, std::move(rows))));
    }

    T dv_lower_bound(const MiBatch<T>& batch) const {
        check_batch(batch);
        NoGradGuard ng;
        return dv_bound_from_stats(statistics(batch.joint), statistics(batch.marginal)).item();
    }

    // Per-pair contributions T_i - log-mean-exp(marginal); their mean is the
    // DV bound. Used to spread the MI reward over a demon trajectory.
    std::vector<T> pair_contributions(const MiBatch<T>& batch) const {
        check_batch(batch);
        NoGradGuard ng;
        const Tensor<T> tj = statistics(batch.joint);
        const Tensor<T> tm = statistics(batch.marginal);
        const T lme = demondnc::lse(tm).item() - std::log(static_cast<T>(tm.numel()));
        std::vector<T> out(tj.numel());
        for (std::size_t i = 0; i < out.size(); ++i) out[i] = tj.at(i) - lme;
        return out;
    }

    // One ascent step on the DV bound. The log-denominator gradient uses the
    // exponential moving average of mean(e^T) instead of the batch mean; the
    // EMA (kept in log space) is refreshed first, seeded from the first batch.
    // Returns the negative bound as the loss value.
    T mine_update(const MiBatch<T>& batch) {
        check_batch(batch);
        const Tensor<T> tj = statistics(batch.joint);
        const Tensor<T> tm = statistics(batch.marginal);
        const T ln_n = std::log(static_cast<T>(tm.numel()));
        const T log_batch = lse(tm.detach()).item() - ln_n;
        if (!ema_init_) {
            log_ema_ = log_batch;
            ema_init_ = true;
        } else {
            const T hi = std::max(log_ema_ + std::log(cfg_.ema_decay), log_batch + std::log(T(1) - cfg_.ema_decay));
            log_ema_ = hi + std::log(std::exp(log_ema_ + std::log(cfg_.ema_decay) - hi) +
                                     std::exp(log_batch + std::log(T(1) - cfg_.ema_decay) - hi));
        }
        const T loss_value = -dv_bound_from_stats(tj.detach(), tm.detach()).item();
        Tensor<T> surrogate = add(neg(mean(tj)), mean(demondnc::exp(add_scalar(tm, -log_ema_))));
        store_.zero_grad();
        backward(surrogate);
        store_.clip_grad_norm(cfg_.grad_clip);
        store_.adam_step(adam_);
        return loss_value;
    }

    // Bound on freshly shuffled marginals with current parameters; no update.
    T estimate_mi(const std::vector<MinePair<T>>& pairs, Rng& rng) const {
        return dv_lower_bound(shuffle_marginals(pairs, rng));
    }

    T ema_denominator() const { return std::exp(log_ema_); }
    T log_ema() const { return log_ema_; }
    bool ema_initialized() const { return ema_init_; }
    void set_log_ema(T v, bool init) {
        log_ema_ = v;
        ema_init_ = init;
    }

    ParameterStore<T>& params() { return store_; }
    const ParameterStore<T>& params() const { return store_; }
    RunningNorm<T>& norm() { return norm_; }
    const RunningNorm<T>& norm() const { return norm_; }
    const MineConfig<T>& config() const { return cfg_; }

private:
    static void check_batch(const MiBatch<T>& batch) {
        if (batch.joint.size() < 2 || batch.joint.size() != batch.marginal.size())
            throw ArgumentError("mine: batch needs >= 2 joint/marginal pairs of equal count");
    }

    MineConfig<T> cfg_;
    ParameterStore<T> store_;
    Mlp<T> net_;
    RunningNorm<T> norm_;
    AdamConfig<T> adam_;
    T log_ema_ = T(0);
    bool ema_init_ = false;
};

}  // namespace demondnc
