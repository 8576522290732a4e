#include <catch2/catch_amalgamated.hpp>

#include <cmath>
#include <vector>

#include "demondnc/mine.hpp"
#include "demondnc/validation.hpp"

using namespace demondnc;
using Catch::Approx;

namespace {
using T = double;
using TV = std::vector<T>;

std::vector<MinePair<T>> random_pairs(Rng& rng, std::size_t n, std::size_t d) {
    std::vector<MinePair<T>> out(n);
    for (auto& p : out) {
        p.x.resize(d);
        p.y.resize(d);
        for (auto& v : p.x) v = rng.normal();
        for (auto& v : p.y) v = rng.normal();
    }
    return out;
}
}  // namespace

TEST_CASE("gaussian oracle fixed values") {
    REQUIRE(gaussian_mi_oracle<T>(0.0) == 0.0);
    REQUIRE(gaussian_mi_oracle<T>(0.5) == Approx(0.14384103622589045).margin(1e-12));
    REQUIRE(gaussian_mi_oracle<T>(0.9) == Approx(0.8303656034108254).margin(1e-12));
    REQUIRE(gaussian_mi_oracle<T>(-0.9) == gaussian_mi_oracle<T>(0.9));
    REQUIRE_THROWS_AS(gaussian_mi_oracle<T>(1.0), DomainError);
    REQUIRE_THROWS_AS(gaussian_mi_oracle<T>(-1.5), DomainError);
}

TEST_CASE("discrete oracle fixed values") {
    auto product = Tensor<T>::from({2, 2}, {0.32, 0.48, 0.08, 0.12});  // p=(0.8,0.2), q=(0.4,0.6)
    REQUIRE(discrete_mi_oracle(product) == Approx(0.0).margin(1e-12));

    auto diag = Tensor<T>::from({2, 2}, {0.5, 0.0, 0.0, 0.5});
    REQUIRE(discrete_mi_oracle(diag) == Approx(std::log(2.0)).margin(1e-12));

    auto table = Tensor<T>::from({2, 2}, {0.4, 0.1, 0.1, 0.4});
    REQUIRE(discrete_mi_oracle(table) == Approx(0.19274475702175742).margin(1e-9));

    REQUIRE_THROWS_AS(discrete_mi_oracle(Tensor<T>::from({2, 2}, {0.5, 0.5, 0.5, -0.5})), ArgumentError);
    REQUIRE_THROWS_AS(discrete_mi_oracle(Tensor<T>::from({2, 2}, {0.5, 0.5, 0.5, 0.5})), ArgumentError);
}

TEST_CASE("discrete oracle equals three-entropy formula on 100 random tables") {
    REQUIRE(discrete_tables_max_err<T>(100, 2026) <= 1e-12);
}

TEST_CASE("dv bound hand values") {
    auto tj = Tensor<T>::from({3}, {1, 2, 3});
    auto tm = Tensor<T>::from({3}, {0, 0, 0});
    REQUIRE(dv_bound_from_stats(tj, tm).item() == Approx(2.0).margin(1e-12));

    // constant statistic gives exactly zero
    for (T c : {0.0, 0.5, 1.0, -2.0}) {
        auto j = Tensor<T>::full({4}, c);
        auto m = Tensor<T>::full({4}, c);
        REQUIRE(dv_bound_from_stats(j, m).item() == 0.0);
    }
    for (T c : {0.3, -1.7, 123.456}) {
        auto j = Tensor<T>::full({5}, c);
        auto m = Tensor<T>::full({5}, c);
        REQUIRE(dv_bound_from_stats(j, m).item() == Approx(0.0).margin(1e-13));
    }

    REQUIRE_THROWS_AS(dv_bound_from_stats(Tensor<T>::from({1}, {1.0}), Tensor<T>::from({1}, {1.0})),
                      ArgumentError);
}

TEST_CASE("dv bound survives statistics of magnitude 700") {
    auto tj = Tensor<T>::from({2}, {700.0, 690.0});
    auto tm = Tensor<T>::from({2}, {700.0, -700.0});
    const T b = dv_bound_from_stats(tj, tm).item();
    REQUIRE(std::isfinite(b));
    REQUIRE(b == Approx(695.0 - (700.0 - std::log(2.0))).margin(1e-9));
}

TEST_CASE("shuffle_marginals permutes only the second elements") {
    Rng rng(4);
    auto pairs = random_pairs(rng, 6, 2);
    auto batch = shuffle_marginals(pairs, rng);
    REQUIRE(batch.joint.size() == 6);
    REQUIRE(batch.marginal.size() == 6);
    for (std::size_t i = 0; i < 6; ++i) REQUIRE(batch.marginal[i].x == pairs[i].x);

    // multiset of y's preserved
    std::vector<TV> ys, ys2;
    for (const auto& p : pairs) ys.push_back(p.y);
    for (const auto& p : batch.marginal) ys2.push_back(p.y);
    std::sort(ys.begin(), ys.end());
    std::sort(ys2.begin(), ys2.end());
    REQUIRE(ys == ys2);

    // forced swap on two pairs
    auto two = std::vector<MinePair<T>>{pairs[0], pairs[1]};
    auto swapped = shuffle_marginals(two, std::vector<std::size_t>{1, 0});
    REQUIRE(swapped.marginal[0].y == pairs[1].y);
    REQUIRE(swapped.marginal[1].y == pairs[0].y);

    // determinism
    Rng r1(99), r2(99);
    auto b1 = shuffle_marginals(pairs, r1);
    auto b2 = shuffle_marginals(pairs, r2);
    for (std::size_t i = 0; i < 6; ++i) REQUIRE(b1.marginal[i].y == b2.marginal[i].y);

    REQUIRE_THROWS_AS(shuffle_marginals(std::vector<MinePair<T>>{pairs[0]}, rng), ArgumentError);
}

TEST_CASE("holdout split takes every 10th pair") {
    Rng rng(8);
    auto pairs = random_pairs(rng, 25, 1);
    auto split = split_holdout(pairs);
    REQUIRE(split.held.size() == 2);
    REQUIRE(split.train.size() == 23);
    REQUIRE(split.held[0].x == pairs[9].x);
    REQUIRE(split.held[1].x == pairs[19].x);
}

TEST_CASE("running norm standardizes and freezes") {
    RunningNorm<T> norm(2, 10);
    Rng rng(11);
    for (int i = 0; i < 10; ++i) norm.observe({rng.normal(5.0, 2.0), rng.normal(-1.0, 0.5)});
    REQUIRE(norm.frozen());
    const auto before = norm.mean();
    norm.observe({1000.0, 1000.0});
    REQUIRE(norm.mean() == before);

    TV z = norm.apply(before);
    REQUIRE(z[0] == Approx(0.0).margin(1e-12));
    REQUIRE(z[1] == Approx(0.0).margin(1e-12));
    REQUIRE_THROWS_AS(norm.observe({1.0}), ShapeError);
}

TEST_CASE("untrained estimator reports exactly zero") {
    Rng rng(3);
    MineConfig<T> mc;
    mc.snapshot_dim = 3;
    MineEstimator<T> est(mc, rng);
    auto pairs = random_pairs(rng, 16, 3);
    REQUIRE(est.estimate_mi(pairs, rng) == 0.0);

    auto batch = shuffle_marginals(pairs, rng);
    auto contrib = est.pair_contributions(batch);
    for (const T c : contrib) REQUIRE(c == 0.0);
}

TEST_CASE("estimate invariant to pair order under a fixed permutation") {
    Rng rng(5);
    MineConfig<T> mc;
    mc.snapshot_dim = 2;
    MineEstimator<T> est(mc, rng);
    // train a little so the statistic is nontrivial
    for (int i = 0; i < 30; ++i) {
        auto pairs = random_pairs(rng, 32, 2);
        for (auto& p : pairs) p.y = p.x;
        est.mine_update(shuffle_marginals(pairs, rng));
    }
    auto pairs = random_pairs(rng, 8, 2);
    auto rev = pairs;
    std::reverse(rev.begin(), rev.end());
    // identity permutation on both: the mean and lme are order-free
    std::vector<std::size_t> id{0, 1, 2, 3, 4, 5, 6, 7};
    const T a = est.dv_lower_bound(shuffle_marginals(pairs, id));
    const T b = est.dv_lower_bound(shuffle_marginals(rev, id));
    REQUIRE(a == Approx(b).margin(1e-10));
}

TEST_CASE("ema denominator stays positive across updates on random data") {
    Rng rng(7);
    MineConfig<T> mc;
    mc.snapshot_dim = 2;
    mc.hidden = 16;
    MineEstimator<T> est(mc, rng);
    for (int i = 0; i < 10000; ++i) {
        auto pairs = random_pairs(rng, 8, 2);
        est.mine_update(shuffle_marginals(pairs, rng));
        REQUIRE(std::isfinite(est.log_ema()));
        REQUIRE(est.ema_denominator() > 0.0);
    }
}

TEST_CASE("independent streams stay near zero") {
    auto res = validate_gaussian_mi<T>(0.0, 12, 2000, 0.05);
    CAPTURE(res.updates, res.estimate);
    REQUIRE(res.estimate >= -0.05);
    REQUIRE(res.estimate <= 0.1);
}

TEST_CASE("correlated gaussians converge to the closed form") {
    auto res = validate_gaussian_mi<T>(0.9, 21, 20000, 0.05);
    CAPTURE(res.updates, res.estimate, res.oracle);
    REQUIRE(std::abs(res.estimate - res.oracle) <= 0.05);
}

TEST_CASE("identical snapshots give a growing estimate") {
    Rng rng(31);
    MineConfig<T> mc;
    mc.snapshot_dim = 2;
    MineEstimator<T> est(mc, rng);
    std::vector<MinePair<T>> held;
    std::vector<T> checkpoints;
    for (int block = 0; block < 5; ++block) {
        for (int u = 0; u < 40; ++u) {
            auto pairs = random_pairs(rng, 64, 2);
            for (auto& p : pairs) p.y = p.x;
            for (auto& p : pairs) {
                est.observe(p.x);
                est.observe(p.y);
            }
            auto split = split_holdout(pairs);
            held.insert(held.end(), split.held.begin(), split.held.end());
            if (held.size() > 1024) held.erase(held.begin(), held.end() - 1024);
            est.mine_update(shuffle_marginals(split.train, rng));
        }
        checkpoints.push_back(est.estimate_mi(held, rng));
    }
    CAPTURE(checkpoints[0], checkpoints[1], checkpoints[2], checkpoints[3], checkpoints[4]);
    REQUIRE(checkpoints.back() > checkpoints.front() + 0.2);
    int rises = 0;
    for (int i = 1; i < 5; ++i)
        if (checkpoints[i] >= checkpoints[i - 1] - 0.02) ++rises;
    REQUIRE(rises >= 3);
}
