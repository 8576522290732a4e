#pragma once

#include <algorithm>
#include <chrono>
#include <cmath>
#include <cstddef>
#include <cstdint>
#include <filesystem>
#include <fstream>
#include <string>
#include <utility>
#include <vector>

#include "demondnc/babi.hpp"
#include "demondnc/checkpoint.hpp"
#include "demondnc/config.hpp"
#include "demondnc/demon.hpp"
#include "demondnc/dnc.hpp"
#include "demondnc/metrics.hpp"
#include "demondnc/mine.hpp"
#include "demondnc/tasks.hpp"

namespace demondnc {

// Post-step memory snapshots are taken at every multiple of the stride plus
// the final step, so a T-step sequence yields ceil((T-1)/stride) pairs.
inline std::vector<std::size_t> snapshot_indices(std::size_t steps, std::size_t stride) {
    if (steps == 0) throw ArgumentError("snapshot_indices: steps must be >= 1");
    if (stride == 0) throw ArgumentError("snapshot_indices: stride must be >= 1");
    std::vector<std::size_t> idx;
    for (std::size_t t = 0; t < steps; t += stride) idx.push_back(t);
    if (idx.back() != steps - 1) idx.push_back(steps - 1);
    return idx;
}

template <class T>
struct EvalResult {
    double mean_error = 0.0;
    double std_error = 0.0;
    std::size_t n = 0;
    bool babi = false;
};

// Orchestrates the interleaved loop: supervised DNC update, then MINE, then
// PPO, once each per batch. MI rewards always use the estimator state from
// before that batch's mine_update.
template <class T>
class Trainer {
public:
    explicit Trainer(ExperimentConfig cfg)
        : cfg_(std::move(cfg)),
          rng_task_(mix_seed(cfg_.seed, 0xA1)),
          rng_mine_(mix_seed(cfg_.seed, 0xB2)),
          rng_demon_(mix_seed(cfg_.seed, 0xC3)) {
        cfg_.validate();
        if (!cfg_.babi_dir.empty()) {
            babi_ = true;
            corpus_ = babi_parse(cfg_.babi_dir);
            if (cfg_.babi_story_limit > 0 && corpus_.stories.size() > cfg_.babi_story_limit)
                corpus_.stories.resize(cfg_.babi_story_limit);
            encoded_ = babi_encode<T>(corpus_, cfg_.babi_max_story_len);
            if (encoded_.samples.empty()) throw ConfigError("trainer: no bAbI stories under the length cap");
            input_dim_ = corpus_.vocab_size();
            output_dim_ = corpus_.vocab_size();
            for (const auto& s : encoded_.samples) {
                std::vector<std::size_t> answers;
                const std::size_t out = s.targets.extent(1);
                for (std::size_t t = 0; t < s.steps(); ++t) {
                    if (s.loss_mask.at(t) == T(0)) continue;
                    std::size_t best = 0;
                    for (std::size_t c = 1; c < out; ++c)
                        if (s.targets.at(t * out + c) > s.targets.at(t * out + best)) best = c;
                    answers.push_back(best);
                }
                sample_answers_.push_back(std::move(answers));
            }
        } else {
            input_dim_ = cfg_.task.input_dim();
            output_dim_ = cfg_.task.output_dim();
        }

        DncConfig dc = cfg_.dnc;
        if (dc.input_dim == 0) dc.input_dim = input_dim_;
        if (dc.output_dim == 0) dc.output_dim = output_dim_;
        if (dc.input_dim != input_dim_ || dc.output_dim != output_dim_)
            throw ConfigError("trainer: dnc input/output dims do not match the task");
        dnc_ = Dnc<T>(dc);

        Rng rng_init(mix_seed(cfg_.seed, 0xD4));
        dnc_.init_params(dnc_store_, rng_init);
        dnc_adam_.lr = static_cast<T>(cfg_.dnc_lr);

        MineConfig<T> mc;
        mc.snapshot_dim = dc.N * dc.W;
        mc.hidden = cfg_.mine.hidden;
        mc.lr = static_cast<T>(cfg_.mine.lr);
        mc.ema_decay = static_cast<T>(cfg_.mine.ema_decay);
        mc.grad_clip = static_cast<T>(cfg_.mine.grad_clip);
        mc.norm_warmup = cfg_.mine.norm_warmup;
        est_ = MineEstimator<T>(mc, rng_init);

        DemonConfig<T> demc;
        demc.state_dim = input_dim_ + dc.N * dc.W;
        demc.action_dim = input_dim_;
        demc.hidden = cfg_.demon_hidden;
        demc.alpha = static_cast<T>(cfg_.demon_alpha);
        demc.grad_clip = static_cast<T>(cfg_.grad_clip);
        agent_ = DemonAgent<T>(demc, rng_init);

        ppo_.clip_eps = static_cast<T>(cfg_.ppo.clip_eps);
        ppo_.gamma = static_cast<T>(cfg_.ppo.gamma);
        ppo_.lam = static_cast<T>(cfg_.ppo.lam);
        ppo_.epochs = cfg_.ppo.epochs;
        ppo_.minibatch = cfg_.ppo.minibatch;
        ppo_.value_coef = static_cast<T>(cfg_.ppo.value_coef);
        ppo_.entropy_coef = static_cast<T>(cfg_.ppo.entropy_coef);
        ppo_.lr = static_cast<T>(cfg_.ppo.lr);

        start_ = std::chrono::steady_clock::now();
    }

    const ExperimentConfig& config() const { return cfg_; }
    std::uint64_t step() const { return step_; }
    const AdamConfig<T>& dnc_adam() const { return dnc_adam_; }
    const Dnc<T>& dnc() const { return dnc_; }
    ParameterStore<T>& dnc_params() { return dnc_store_; }
    MineEstimator<T>& mine() { return est_; }
    DemonAgent<T>& demon() { return agent_; }

    // One batch: supervised DNC update, then (demon runs only) MI rewards
    // from the pre-update estimator, mine_update, and a PPO update.
    MetricsRecord training_step(bool compute_mi = true) {
        const bool demon = cfg_.demon_enabled;
        if (cfg_.dnc_lr_final > 0.0) {
            // geometric schedule; a pure function of step_ so resumed runs see the same lr
            const double frac = static_cast<double>(step_) / static_cast<double>(cfg_.steps);
            dnc_adam_.lr = static_cast<T>(cfg_.dnc_lr * std::pow(cfg_.dnc_lr_final / cfg_.dnc_lr, frac));
        }
        Tensor<T> total_loss;
        T loss_denom = T(0);
        double err_sum = 0.0;
        std::size_t err_count = 0;

        RolloutBuffer<T> buf;
        std::vector<std::vector<MinePair<T>>> windows;
        std::vector<std::vector<std::size_t>> reward_slots;
        std::vector<std::size_t> seq_steps;
        std::vector<std::vector<T>> snapshots;

        for (std::size_t b = 0; b < cfg_.batch_size; ++b) {
            const TaskSample<T> sample = next_sample();
            const std::size_t steps = sample.steps();
            DncState<T> state = dnc_.initial_state();

            std::vector<T> probs;  // bit tasks: sigmoid outputs for bit_error
            if (!babi_) probs.resize(steps * output_dim_, T(0));
            std::size_t babi_wrong = 0, babi_total = 0;

            std::vector<MinePair<T>> window;
            std::vector<std::size_t> slots;
            std::vector<T> prev_snap;
            Tensor<T> seq_loss;
            const std::vector<std::size_t> snaps_at = snapshot_indices(steps, cfg_.snapshot_stride);
            std::size_t snap_cursor = 0;

            for (std::size_t t = 0; t < steps; ++t) {
                std::vector<T> x(sample.inputs.value().begin() + t * input_dim_,
                                 sample.inputs.value().begin() + (t + 1) * input_dim_);
                if (demon) {
                    const std::vector<T> senc = state_encode(x, state.M, est_.norm());
                    ActOut<T> act = agent_.act(senc, rng_demon_);
                    const T value = agent_.value(senc);
                    buf.push(senc, std::move(act.raw), act.logp, value, t + 1 == steps);
                    for (std::size_t d = 0; d < input_dim_; ++d) x[d] += act.action[d];
                }
                DncStepOut<T> out = dnc_.step(dnc_store_, state, Tensor<T>::from({input_dim_}, std::move(x)));
                state = std::move(out.state);

                if (sample.loss_mask.at(t) != T(0)) {
                    const Tensor<T> y = out.y;
                    std::vector<T> tgt(sample.targets.value().begin() + t * output_dim_,
                                       sample.targets.value().begin() + (t + 1) * output_dim_);
                    Tensor<T> row_loss;
                    if (babi_) {
                        std::size_t ans = 0;
                        for (std::size_t c = 1; c < output_dim_; ++c)
                            if (tgt[c] > tgt[ans]) ans = c;
                        row_loss = sum(sub(lse(y), slice(y, ans, 1)));
                        loss_denom += T(1);
                        std::size_t best = 0;
                        for (std::size_t c = 1; c < output_dim_; ++c)
                            if (y.at(c) > y.at(best)) best = c;
                        babi_wrong += (best != ans) ? 1 : 0;
                        ++babi_total;
                    } else {
                        const Tensor<T> tr = Tensor<T>::from({output_dim_}, tgt);
                        row_loss = sum(sub(softplus(y), mul(y, tr)));
                        loss_denom += static_cast<T>(output_dim_);
                    }
                    seq_loss = seq_loss.defined() ? add(seq_loss, row_loss) : row_loss;
                }
                if (!babi_)
                    for (std::size_t c = 0; c < output_dim_; ++c)
                        probs[t * output_dim_ + c] = sigmoid_value(out.y.at(c));

                if (demon && snap_cursor < snaps_at.size() && t == snaps_at[snap_cursor]) {
                    ++snap_cursor;
                    std::vector<T> snap = state.M.value();
                    snapshots.push_back(snap);
                    if (!prev_snap.empty()) {
                        window.push_back({prev_snap, snap});
                        slots.push_back(t);
                    }
                    prev_snap = std::move(snap);
                }
            }

            if (seq_loss.defined()) total_loss = total_loss.defined() ? add(total_loss, seq_loss) : seq_loss;
            if (babi_) {
                if (babi_total > 0) {
                    err_sum += static_cast<double>(babi_wrong) / static_cast<double>(babi_total);
                    ++err_count;
                }
            } else {
                err_sum += static_cast<double>(
                    bit_error(Tensor<T>::from({steps, output_dim_}, std::move(probs)), sample.targets,
                              sample.loss_mask));
                ++err_count;
            }
            windows.push_back(std::move(window));
            reward_slots.push_back(std::move(slots));
            seq_steps.push_back(steps);
        }

        MetricsRecord rec;
        rec.step = step_ + 1;
        rec.babi = babi_;
        rec.error = err_count ? err_sum / static_cast<double>(err_count) : 0.0;

        if (!total_loss.defined() || loss_denom == T(0))
            throw DomainError("trainer: batch produced no masked steps");
        Tensor<T> loss = scale(total_loss, T(1) / loss_denom);
        rec.task_loss = static_cast<double>(loss.item());

        // (1) supervised update
        dnc_store_.zero_grad();
        backward(loss);
        dnc_store_.clip_grad_norm(static_cast<T>(cfg_.grad_clip));
        dnc_store_.adam_step(dnc_adam_);

        if (demon) {
            // rewards from the pre-update estimator
            std::vector<T> rewards;
            double reward_sum = 0.0;
            std::size_t reward_n = 0;
            for (std::size_t b = 0; b < windows.size(); ++b) {
                std::vector<T> seq_rewards(seq_steps[b], T(0));
                if (windows[b].size() >= 2) {
                    const std::vector<T> raw = reward_from_mi(est_, windows[b]);
                    for (const T r : raw) {
                        reward_sum += static_cast<double>(r);
                        ++reward_n;
                        reward_stats_.observe(r);
                    }
                    for (std::size_t j = 0; j < raw.size(); ++j)
                        seq_rewards[reward_slots[b][j]] = reward_stats_.standardize(raw[j]);
                }
                rewards.insert(rewards.end(), seq_rewards.begin(), seq_rewards.end());
            }
            buf.set_rewards(std::move(rewards));
            rec.demon_reward_mean = reward_n ? reward_sum / static_cast<double>(reward_n) : 0.0;

            // (2) MINE
            for (const auto& snap : snapshots) est_.observe(snap);
            std::vector<MinePair<T>> all_pairs;
            for (auto& w : windows) all_pairs.insert(all_pairs.end(), w.begin(), w.end());
            if (all_pairs.size() >= 2) {
                HoldoutSplit<T> split = split_holdout(all_pairs);
                for (auto& p : split.held) {
                    if (held_pool_.size() >= kHeldPoolCap) held_pool_.erase(held_pool_.begin());
                    held_pool_.push_back(std::move(p));
                }
                if (split.train.size() >= 2) est_.mine_update(shuffle_marginals(split.train, rng_mine_));
            }
            if (compute_mi && held_pool_.size() >= 16)
                last_mi_ = static_cast<double>(est_.estimate_mi(held_pool_, rng_mine_));

            // (3) PPO
            const PpoStats<T> st = agent_.ppo_update(buf, ppo_, rng_demon_);
            rec.clip_fraction = static_cast<double>(st.clip_fraction);
            rec.mean_ratio = static_cast<double>(st.mean_ratio);
        }
        rec.mi_estimate = last_mi_;
        rec.wall_clock = elapsed();

        ++step_;
        return rec;
    }

    // Full budget with logging, checkpointing, and optional early stop.
    // Logged error and task_loss are means over the interval since the last
    // log step, so the early-stop gate sees a smoothed signal rather than one
    // lucky batch. A non-finite loss writes a diagnostic line before rethrowing.
    std::vector<MetricsRecord> train() {
        const bool to_disk = !cfg_.out_dir.empty();
        std::ofstream metrics;
        std::string ckpt_path;
        if (to_disk) {
            std::filesystem::create_directories(cfg_.out_dir);
            config_save(cfg_, cfg_.out_dir + "/config.json");
            metrics.open(cfg_.out_dir + "/metrics.txt", std::ios::trunc);
            if (!metrics) throw IoError("trainer: cannot write metrics under " + cfg_.out_dir);
            ckpt_path = cfg_.out_dir + "/checkpoint.bin";
        }

        std::vector<MetricsRecord> logged;
        double win_err = 0.0, win_loss = 0.0;
        std::uint64_t win_n = 0;
        while (step_ < cfg_.steps) {
            const std::uint64_t next = step_ + 1;
            const bool log_now = (next % cfg_.log_interval == 0) || next == cfg_.steps;
            MetricsRecord rec;
            try {
                rec = training_step(log_now);
            } catch (const NumericError& e) {
                if (to_disk) {
                    metrics << "# abort step=" << (step_ + 1) << " reason=" << e.what() << "\n";
                    metrics.flush();
                }
                throw;
            }
            win_err += rec.error;
            win_loss += rec.task_loss;
            ++win_n;
            bool hit_target = false;
            if (log_now) {
                rec.error = win_err / static_cast<double>(win_n);
                rec.task_loss = win_loss / static_cast<double>(win_n);
                win_err = win_loss = 0.0;
                win_n = 0;
                hit_target = cfg_.target_error > 0.0 && rec.error <= cfg_.target_error;
                logged.push_back(rec);
                if (to_disk) {
                    metrics << metrics_line(rec) << "\n";
                    metrics.flush();
                }
            }
            if (to_disk && (step_ % cfg_.checkpoint_interval == 0 || step_ == cfg_.steps || hit_target))
                save_checkpoint(ckpt_path);
            if (hit_target) break;
        }
        if (to_disk) {
            if (!logged.empty()) metrics << metrics_summary_line(logged) << "\n";
            save_checkpoint(ckpt_path);
        }
        return logged;
    }

    // Forward-only evaluation with the deterministic demon action. Touches no
    // trainer state: fresh per-sample rngs, no norm updates, no grads.
    EvalResult<T> evaluate(std::size_t n_samples, std::uint64_t seed) {
        if (n_samples == 0) throw ArgumentError("evaluate: n_samples must be >= 1");
        std::vector<double> errors;
        if (babi_) {
            const std::size_t n = std::min(n_samples, encoded_.samples.size());
            for (std::size_t i = 0; i < n; ++i) errors.push_back(eval_sample(encoded_.samples[i], i));
        } else {
            for (std::size_t i = 0; i < n_samples; ++i) {
                Rng rng(mix_seed(seed, i));
                const TaskSample<T> sample = gen_task<T>(cfg_.task, rng);
                errors.push_back(eval_sample(sample, 0));
            }
        }
        const auto [mean, sd] = mean_std(errors);
        return {mean, sd, errors.size(), babi_};
    }

    void save_checkpoint(const std::string& path) const {
        CheckpointFile file;
        file.digest = config_digest(cfg_);
        pack_store(file, "dnc", dnc_store_);
        pack_store(file, "mine", est_.params());
        pack_store(file, "demon", agent_.params());
        file.add("harness.step", {2}, pack_u64(step_));
        file.add("mine.log_ema", {1}, pack_f32<T>({est_.log_ema()}));
        file.add("mine.ema_init", {1}, {est_.ema_initialized() ? 1u : 0u});
        file.add("mine.norm.mean", {static_cast<std::uint32_t>(est_.norm().dim())},
                 pack_f32(est_.norm().mean()));
        file.add("mine.norm.m2", {static_cast<std::uint32_t>(est_.norm().dim())}, pack_f32(est_.norm().m2()));
        file.add("mine.norm.count", {2}, pack_u64(est_.norm().raw_count()));
        file.add("reward.stats", {2}, pack_f32<T>({reward_stats_.raw_mean(), reward_stats_.raw_m2()}));
        file.add("reward.count", {2}, pack_u64(reward_stats_.count()));
        std::vector<T> held;
        const std::size_t dim = est_.config().snapshot_dim;
        for (const auto& p : held_pool_) {
            held.insert(held.end(), p.x.begin(), p.x.end());
            held.insert(held.end(), p.y.begin(), p.y.end());
        }
        file.add("mine.held", {static_cast<std::uint32_t>(held_pool_.size()), static_cast<std::uint32_t>(2 * dim)},
                 pack_f32(held));
        file.add("mine.last_mi", {1}, pack_f32<T>({static_cast<T>(last_mi_)}));
        const auto add_text = [&file](const std::string& name, const std::string& text) {
            std::vector<std::uint32_t> words = pack_text(text);
            const std::uint32_t n = static_cast<std::uint32_t>(words.size());
            file.add(name, {n}, std::move(words));
        };
        add_text("rng.task", rng_task_.serialize());
        add_text("rng.mine", rng_mine_.serialize());
        add_text("rng.demon", rng_demon_.serialize());
        checkpoint_write(file, path);
    }

    // Refuses checkpoints whose config digest differs from this trainer's.
    void load_checkpoint(const std::string& path) { load_checkpoint(path, config_digest(cfg_)); }

    // Same, against an explicit digest (eval may tweak the task while loading
    // weights trained under the original config).
    void load_checkpoint(const std::string& path, const ConfigDigest& expected) {
        const CheckpointFile file = checkpoint_read(path, expected);
        unpack_store(file, "dnc", dnc_store_);
        unpack_store(file, "mine", est_.params());
        unpack_store(file, "demon", agent_.params());
        step_ = unpack_u64(file.find("harness.step").words);
        est_.set_log_ema(unpack_f32<T>(file.find("mine.log_ema").words)[0],
                         file.find("mine.ema_init").words[0] != 0);
        est_.norm().mean() = unpack_f32<T>(file.find("mine.norm.mean").words);
        est_.norm().m2() = unpack_f32<T>(file.find("mine.norm.m2").words);
        est_.norm().set_raw_count(unpack_u64(file.find("mine.norm.count").words));
        const auto rs = unpack_f32<T>(file.find("reward.stats").words);
        reward_stats_.restore(rs[0], rs[1], unpack_u64(file.find("reward.count").words));
        const auto& held = file.find("mine.held");
        const std::size_t dim = est_.config().snapshot_dim;
        if (!held.extents.empty() && held.extents.size() == 2 && held.extents[1] != 2 * dim && held.extents[0] > 0)
            throw IoError("checkpoint: held pool dimension mismatch");
        const auto flat = unpack_f32<T>(held.words);
        held_pool_.clear();
        for (std::size_t i = 0; i + 2 * dim <= flat.size(); i += 2 * dim) {
            MinePair<T> p;
            p.x.assign(flat.begin() + i, flat.begin() + i + dim);
            p.y.assign(flat.begin() + i + dim, flat.begin() + i + 2 * dim);
            held_pool_.push_back(std::move(p));
        }
        last_mi_ = static_cast<double>(unpack_f32<T>(file.find("mine.last_mi").words)[0]);
        rng_task_.deserialize(unpack_text(file.find("rng.task").words));
        rng_mine_.deserialize(unpack_text(file.find("rng.mine").words));
        rng_demon_.deserialize(unpack_text(file.find("rng.demon").words));
    }

private:
    static constexpr std::size_t kHeldPoolCap = 1024;

    TaskSample<T> next_sample() {
        if (babi_) return encoded_.samples[rng_task_.uniform_int(encoded_.samples.size())];
        return gen_task<T>(cfg_.task, rng_task_);
    }

    // Error of one sequence under the current parameters, demon deterministic.
    double eval_sample(const TaskSample<T>& sample, std::size_t sample_idx) {
        NoGradGuard ng;
        const std::size_t steps = sample.steps();
        DncState<T> state = dnc_.initial_state();
        std::vector<T> probs;
        if (!babi_) probs.resize(steps * output_dim_, T(0));
        std::size_t wrong = 0, total = 0, q = 0;
        for (std::size_t t = 0; t < steps; ++t) {
            std::vector<T> x(sample.inputs.value().begin() + t * input_dim_,
                             sample.inputs.value().begin() + (t + 1) * input_dim_);
            if (cfg_.demon_enabled) {
                const std::vector<T> a = agent_.act_mean(state_encode(x, state.M, est_.norm()));
                for (std::size_t d = 0; d < input_dim_; ++d) x[d] += a[d];
            }
            DncStepOut<T> out = dnc_.step(dnc_store_, state, Tensor<T>::from({input_dim_}, std::move(x)));
            state = std::move(out.state);
            if (babi_) {
                if (sample.loss_mask.at(t) != T(0)) {
                    std::size_t best = 0;
                    for (std::size_t c = 1; c < output_dim_; ++c)
                        if (out.y.at(c) > out.y.at(best)) best = c;
                    wrong += (best != sample_answers_[sample_idx][q]) ? 1 : 0;
                    ++q;
                    ++total;
                }
            } else {
                for (std::size_t c = 0; c < output_dim_; ++c)
                    probs[t * output_dim_ + c] = sigmoid_value(out.y.at(c));
            }
        }
        if (babi_) return total ? static_cast<double>(wrong) / static_cast<double>(total) : 0.0;
        return static_cast<double>(bit_error(Tensor<T>::from({steps, output_dim_}, std::move(probs)),
                                             sample.targets, sample.loss_mask));
    }

    double elapsed() const {
        return std::chrono::duration<double>(std::chrono::steady_clock::now() - start_).count();
    }

    ExperimentConfig cfg_;
    bool babi_ = false;
    BabiCorpus corpus_;
    BabiEncoded<T> encoded_;
    std::vector<std::vector<std::size_t>> sample_answers_;
    std::size_t input_dim_ = 0;
    std::size_t output_dim_ = 0;

    Dnc<T> dnc_;
    ParameterStore<T> dnc_store_;
    AdamConfig<T> dnc_adam_;
    MineEstimator<T> est_;
    DemonAgent<T> agent_;
    PpoConfig<T> ppo_;

    Rng rng_task_;
    Rng rng_mine_;
    Rng rng_demon_;
    RunningScalarStats<T> reward_stats_;
    std::vector<MinePair<T>> held_pool_;
    double last_mi_ = 0.0;
    std::uint64_t step_ = 0;
    std::chrono::steady_clock::time_point start_;
};

}  // namespace demondnc
