#include <catch2/catch_amalgamated.hpp>

#include <cmath>
#include <cstring>
#include <vector>

#include "demondnc/dnc.hpp"
#include "demondnc/gradcheck.hpp"
#include "demondnc/param_store.hpp"
#include "demondnc/rng.hpp"

using namespace demondnc;
using Catch::Approx;

namespace {

using T = double;
using TV = std::vector<T>;

DncConfig small_cfg(bool mask, bool dealloc, bool sharp) {
    DncConfig cfg;
    cfg.N = 4;
    cfg.W = 3;
    cfg.R = 2;
    cfg.controller_hidden = 8;
    cfg.input_dim = 5;
    cfg.output_dim = 4;
    cfg.toggles = {mask, dealloc, sharp};
    return cfg;
}

// Replaces one xi segment with a constant; used to pin gates.
Dnc<T>::XiHook pin_segment(const DncConfig& cfg, const std::string& name, T value) {
    const auto segs = xi_layout(cfg);
    for (const auto& s : segs) {
        if (s.name != name) continue;
        const std::size_t off = s.offset, len = s.len, total = interface_len(cfg);
        return [off, len, total, value](const Tensor<T>& xi) {
            std::vector<Tensor<T>> parts;
            if (off > 0) parts.push_back(slice(xi, 0, off));
            parts.push_back(Tensor<T>::full({len}, value));
            if (off + len < total) parts.push_back(slice(xi, off + len, total - off - len));
            return concat(parts);
        };
    }
    throw ArgumentError("no xi segment named " + name);
}

Dnc<T>::XiHook chain(Dnc<T>::XiHook a, Dnc<T>::XiHook b) {
    return [a, b](const Tensor<T>& xi) { return b(a(xi)); };
}

}  // namespace

TEST_CASE("xi layout is contiguous and matches interface_len") {
    for (int m = 0; m < 2; ++m)
        for (int d = 0; d < 2; ++d)
            for (int s = 0; s < 2; ++s) {
                DncConfig cfg = small_cfg(m, d, s);
                const auto segs = xi_layout(cfg);
                std::size_t off = 0;
                for (const auto& seg : segs) {
                    REQUIRE(seg.offset == off);
                    off += seg.len;
                }
                REQUIRE(off == interface_len(cfg));
            }
}

TEST_CASE("interface length arithmetic") {
    DncConfig base = small_cfg(false, false, false);
    REQUIRE(interface_len(base) == base.R * base.W + 3 * base.W + 5 * base.R + 3);

    DncConfig masked = small_cfg(true, false, false);
    REQUIRE(interface_len(masked) == interface_len(base) + (base.R + 1) * base.W);

    DncConfig sharp = small_cfg(false, false, true);
    REQUIRE(interface_len(sharp) == interface_len(base) + 2 * base.R);
}

TEST_CASE("parse_interface of zero vector gives documented neutral values") {
    DncConfig cfg = small_cfg(true, true, true);
    auto iv = parse_interface(Tensor<T>::zeros({interface_len(cfg)}), cfg);
    const T ln2p1 = 1.0 + std::log(2.0);
    for (std::size_t i = 0; i < cfg.R; ++i) {
        REQUIRE(iv.read_strengths[i].item() == Approx(ln2p1).margin(1e-12));
        REQUIRE(iv.free_gates[i].item() == Approx(0.5).margin(1e-15));
        for (int k = 0; k < 3; ++k)
            REQUIRE(iv.read_modes[i].at(k) == Approx(1.0 / 3.0).margin(1e-15));
        REQUIRE(iv.sharp_f[i].item() == Approx(ln2p1).margin(1e-12));
        REQUIRE(iv.sharp_b[i].item() == Approx(ln2p1).margin(1e-12));
    }
    REQUIRE(iv.write_strength.item() == Approx(ln2p1).margin(1e-12));
    REQUIRE(iv.alloc_gate.item() == Approx(0.5).margin(1e-15));
    REQUIRE(iv.write_gate.item() == Approx(0.5).margin(1e-15));
    for (std::size_t j = 0; j < cfg.W; ++j) {
        REQUIRE(iv.erase.at(j) == Approx(0.5).margin(1e-15));
        REQUIRE(iv.write_mask.at(j) == Approx(0.5).margin(1e-15));
        REQUIRE(iv.write_vec.at(j) == 0.0);
        REQUIRE(iv.write_key.at(j) == 0.0);
    }
    REQUIRE_THROWS_AS(parse_interface(Tensor<T>::zeros({interface_len(cfg) + 1}), cfg), ConfigError);
}

TEST_CASE("content weighting concentrates on the matching row") {
    auto m = Tensor<T>::from({3, 3}, {1, 0, 0, 0, 1, 0, 0, 0, 1});
    auto k = Tensor<T>::from({3}, {1, 0, 0});
    auto w = content_weighting(m, k, Tensor<T>::scalar(100.0));
    REQUIRE(w.at(0) >= 0.99);
    T s = 0;
    for (int i = 0; i < 3; ++i) {
        REQUIRE(w.at(i) >= 0.0);
        s += w.at(i);
    }
    REQUIRE(s == Approx(1.0).margin(1e-12));
}

TEST_CASE("content weighting mask hides disagreeing coordinates") {
    auto m = Tensor<T>::from({2, 2}, {1, 5, 1, -3});
    auto k = Tensor<T>::from({2}, {1, 9});
    auto mask = Tensor<T>::from({2}, {1, 0});
    auto w = content_weighting(m, k, Tensor<T>::scalar(7.0), mask);
    REQUIRE(w.at(0) == Approx(0.5).margin(1e-12));
    REQUIRE(w.at(1) == Approx(0.5).margin(1e-12));
}

TEST_CASE("content weighting of zero key is uniform") {
    Rng rng(3);
    auto m = Tensor<T>::from({4, 3}, random_values<T>(rng, 12, -1.0, 1.0));
    auto w = content_weighting(m, Tensor<T>::zeros({3}), Tensor<T>::scalar(5.0));
    for (int i = 0; i < 4; ++i) REQUIRE(w.at(i) == Approx(0.25).margin(1e-12));
}

TEST_CASE("content weighting argmax invariant under positive key rescale") {
    Rng rng(17);
    for (int rep = 0; rep < 10; ++rep) {
        auto mvals = random_values<T>(rng, 15, -1.0, 1.0);
        auto kvals = random_values<T>(rng, 3, -1.0, 1.0);
        auto m = Tensor<T>::from({5, 3}, mvals);
        const T c = rng.uniform(0.1, 10.0);
        TV scaled = kvals;
        for (auto& v : scaled) v *= c;
        auto w1 = content_weighting(m, Tensor<T>::from({3}, kvals), Tensor<T>::scalar(3.0));
        auto w2 = content_weighting(m, Tensor<T>::from({3}, scaled), Tensor<T>::scalar(3.0));
        const auto& v1 = w1.value();
        const auto& v2 = w2.value();
        const auto a1 = std::max_element(v1.begin(), v1.end()) - v1.begin();
        const auto a2 = std::max_element(v2.begin(), v2.end()) - v2.begin();
        REQUIRE(a1 == a2);
    }
}

TEST_CASE("usage update closed free gates only grow usage") {
    auto u = Tensor<T>::from({3}, {0.2, 0.5, 0.9});
    auto ww = Tensor<T>::from({3}, {0.3, 0.1, 0.05});
    std::vector<Tensor<T>> wr{Tensor<T>::from({3}, {0.5, 0.25, 0.25})};
    std::vector<Tensor<T>> f{Tensor<T>::scalar(0.0)};
    auto out = usage_update(u, ww, wr, f);
    for (int i = 0; i < 3; ++i) {
        REQUIRE(out.psi.at(i) == 1.0);
        REQUIRE(out.u.at(i) >= u.at(i));
        REQUIRE(out.u.at(i) <= 1.0);
    }
}

TEST_CASE("usage update full free zeroes the freed cell") {
    auto u = Tensor<T>::from({3}, {0.7, 0.4, 0.2});
    auto ww = Tensor<T>::from({3}, {0.1, 0.2, 0.3});
    std::vector<Tensor<T>> wr{Tensor<T>::from({3}, {0, 1, 0})};
    std::vector<Tensor<T>> f{Tensor<T>::scalar(1.0)};
    auto out = usage_update(u, ww, wr, f);
    REQUIRE(out.psi.at(1) == 0.0);
    REQUIRE(out.u.at(1) == 0.0);
    REQUIRE(out.u.at(0) > 0.0);
}

TEST_CASE("usage stays in unit interval over 1000 random applications") {
    Rng rng(9);
    const std::size_t n = 6;
    Tensor<T> u = Tensor<T>::zeros({n});
    for (int it = 0; it < 1000; ++it) {
        TV wwv(n), wrv(n);
        T sw = 0, sr = 0;
        for (std::size_t i = 0; i < n; ++i) {
            wwv[i] = rng.uniform();
            wrv[i] = rng.uniform();
            sw += wwv[i];
            sr += wrv[i];
        }
        for (std::size_t i = 0; i < n; ++i) {
            wwv[i] /= std::max(sw, 1.0);
            wrv[i] /= std::max(sr, 1.0);
        }
        std::vector<Tensor<T>> wr{Tensor<T>::from({n}, wrv)};
        std::vector<Tensor<T>> f{Tensor<T>::scalar(rng.uniform())};
        auto out = usage_update(u, Tensor<T>::from({n}, wwv), wr, f);
        u = out.u.detach();
        for (std::size_t i = 0; i < n; ++i) {
            REQUIRE(u.at(i) >= 0.0);
            REQUIRE(u.at(i) <= 1.0);
        }
    }
}

TEST_CASE("allocation weighting fixed cases") {
    auto a1 = allocation_weighting(Tensor<T>::from({4}, {0, 0, 0, 0}));
    REQUIRE(a1.value() == TV{1, 0, 0, 0});

    auto a2 = allocation_weighting(Tensor<T>::from({4}, {1, 1, 0, 1}));
    REQUIRE(a2.at(2) == 1.0);
    REQUIRE(a2.at(0) == 0.0);
    REQUIRE(a2.at(1) == 0.0);
    REQUIRE(a2.at(3) == 0.0);

    auto a3 = allocation_weighting(Tensor<T>::from({2}, {0.5, 0.25}));
    REQUIRE(a3.at(0) == Approx(0.125).margin(1e-15));
    REQUIRE(a3.at(1) == Approx(0.75).margin(1e-15));
}

TEST_CASE("allocation weighting sums below one and is nonnegative") {
    Rng rng(23);
    for (int rep = 0; rep < 50; ++rep) {
        TV u(5);
        for (auto& v : u) v = rng.uniform();
        auto a = allocation_weighting(Tensor<T>::from({5}, u));
        T s = 0;
        for (int i = 0; i < 5; ++i) {
            REQUIRE(a.at(i) >= 0.0);
            s += a.at(i);
        }
        REQUIRE(s <= 1.0 + 1e-9);
    }
}

TEST_CASE("allocation weighting gradient vs finite differences") {
    Rng rng(31);
    // keep entries well separated so the sort permutation is locally constant
    TV u = {0.12, 0.55, 0.91, 0.33, 0.74};
    auto rep = check_gradients<T>({{{5}, u}}, [&](const std::vector<Tensor<T>>& p) {
        Rng r2(77);
        TV w(5);
        for (auto& v : w) v = r2.uniform(0.5, 1.5);
        return sum(mul(allocation_weighting(p[0]), Tensor<T>::from({5}, w)));
    });
    CAPTURE(rep.worst);
    REQUIRE(rep.ok(1e-4));

    // zero-usage entries must not produce NaN gradients
    auto repz = check_gradients<T>({{{3}, {0.0, 0.4, 0.8}}}, [](const std::vector<Tensor<T>>& p) {
        return sum(mul(allocation_weighting(p[0]), Tensor<T>::from({3}, {1.0, 2.0, 3.0})));
    });
    CAPTURE(repz.worst);
    REQUIRE(repz.ok(1e-4));
}

TEST_CASE("write weighting gate algebra") {
    auto a = Tensor<T>::from({3}, {1, 0, 0});
    auto c = Tensor<T>::from({3}, {0, 1, 0});
    auto z = write_weighting(Tensor<T>::scalar(0.0), Tensor<T>::scalar(0.3), a, c);
    REQUIRE(z.value() == TV{0, 0, 0});

    auto ga1 = write_weighting(Tensor<T>::scalar(0.8), Tensor<T>::scalar(1.0), a, c);
    REQUIRE(ga1.at(0) == Approx(0.8).margin(1e-15));
    REQUIRE(ga1.at(1) == 0.0);

    auto half = write_weighting(Tensor<T>::scalar(0.5), Tensor<T>::scalar(0.5), a, c);
    REQUIRE(half.at(0) == Approx(0.25).margin(1e-15));
    REQUIRE(half.at(1) == Approx(0.25).margin(1e-15));
    REQUIRE(half.at(2) == 0.0);
}

TEST_CASE("memory write identity, row replace, and erase-on-free") {
    Rng rng(5);
    TV mv = random_values<T>(rng, 12, -1.0, 1.0);
    auto m = Tensor<T>::from({4, 3}, mv);
    auto psi1 = Tensor<T>::full({4}, 1.0);

    auto same = memory_write(m, Tensor<T>::zeros({4}), Tensor<T>::full({3}, 0.7),
                             Tensor<T>::from({3}, {1, 2, 3}), psi1, false);
    REQUIRE(same.value() == mv);  // bit-identical

    auto ww = Tensor<T>::from({4}, {0, 1, 0, 0});
    auto v = Tensor<T>::from({3}, {9, 8, 7});
    auto rewritten = memory_write(m, ww, Tensor<T>::full({3}, 1.0), v, psi1, false);
    for (int j = 0; j < 3; ++j) {
        REQUIRE(rewritten.at(1, j) == Approx(v.at(j)).margin(1e-15));
        REQUIRE(rewritten.at(0, j) == mv[j]);
    }

    auto psi = Tensor<T>::from({4}, {1, 1, 0, 1});
    auto erased = memory_write(m, Tensor<T>::zeros({4}), Tensor<T>::full({3}, 0.5),
                               Tensor<T>::zeros({3}), psi, true);
    for (int j = 0; j < 3; ++j) {
        REQUIRE(erased.at(2, j) == 0.0);
        REQUIRE(erased.at(0, j) == mv[j]);
    }
}

TEST_CASE("link update recurrence") {
    const std::size_t n = 3;
    auto l0 = Tensor<T>::zeros({n, n});
    auto p0 = Tensor<T>::zeros({n});

    auto keep = link_update(Tensor<T>::from({n, n}, {0, .5, 0, 0, 0, .5, 0, 0, 0}),
                            Tensor<T>::from({n}, {.2, .3, .5}), Tensor<T>::zeros({n}));
    REQUIRE(keep.L.at(0, 1) == 0.5);
    REQUIRE(keep.p.at(2) == 0.5);

    auto first = link_update(l0, p0, Tensor<T>::from({n}, {1, 0, 0}));
    for (std::size_t i = 0; i < n * n; ++i) REQUIRE(first.L.value()[i] == 0.0);
    REQUIRE(first.p.value() == TV{1, 0, 0});

    auto second = link_update(first.L, first.p, Tensor<T>::from({n}, {0, 1, 0}));
    REQUIRE(second.L.at(1, 0) == 1.0);
    for (std::size_t i = 0; i < n; ++i)
        for (std::size_t j = 0; j < n; ++j)
            if (!(i == 1 && j == 0)) REQUIRE(second.L.at(i, j) == 0.0);
    REQUIRE(second.p.value() == TV{0, 1, 0});
}

TEST_CASE("read weighting pure content mode and zero link") {
    auto l = Tensor<T>::from({3, 3}, {0, 0.2, 0, 0.7, 0, 0.1, 0, 0.5, 0});
    auto wr = Tensor<T>::from({3}, {0.2, 0.3, 0.5});
    auto cr = Tensor<T>::from({3}, {0.1, 0.6, 0.3});

    auto content = read_weighting(l, wr, cr, Tensor<T>::from({3}, {0, 1, 0}));
    for (int i = 0; i < 3; ++i) REQUIRE(content.at(i) == Approx(cr.at(i)).margin(1e-15));

    auto zl = read_weighting(Tensor<T>::zeros({3, 3}), wr, cr, Tensor<T>::from({3}, {0.5, 0, 0.5}));
    for (int i = 0; i < 3; ++i) REQUIRE(zl.at(i) == 0.0);
}

TEST_CASE("sharpen drives distributions toward one-hot") {
    auto f = Tensor<T>::from({2}, {0.6, 0.4});
    auto sharp = sharpen(f, Tensor<T>::scalar(40.0));
    REQUIRE(sharp.at(0) > 0.99);
    REQUIRE(sharp.at(0) + sharp.at(1) == Approx(1.0).margin(1e-9));

    auto zero = sharpen(Tensor<T>::zeros({3}), Tensor<T>::scalar(2.0));
    for (int i = 0; i < 3; ++i) REQUIRE(zero.at(i) >= 0.0);
}

TEST_CASE("sharpen gradient vs finite differences") {
    auto rep = check_gradients<T>({{{4}, {0.3, 0.1, 0.45, 0.15}}, {{1}, {2.3}}},
                                  [](const std::vector<Tensor<T>>& p) {
                                      return sum(mul(sharpen(p[0], p[1]),
                                                     Tensor<T>::from({4}, {1.0, -0.5, 2.0, 0.25})));
                                  });
    CAPTURE(rep.worst);
    REQUIRE(rep.ok(1e-4));
}

TEST_CASE("parameter count independent of N") {
    for (int m = 0; m < 2; ++m)
        for (int s = 0; s < 2; ++s) {
            std::vector<std::size_t> counts;
            std::size_t formula = 0;
            for (std::size_t n : {std::size_t(4), std::size_t(16), std::size_t(64)}) {
                DncConfig cfg = small_cfg(m, false, s);
                cfg.N = n;
                Dnc<T> dnc(cfg);
                ParameterStore<T> store;
                Rng rng(1);
                dnc.init_params(store, rng);
                counts.push_back(store.total_params());
                formula = dnc.param_count();
            }
            REQUIRE(counts[0] == counts[1]);
            REQUIRE(counts[1] == counts[2]);
            REQUIRE(counts[2] == formula);
        }
}

TEST_CASE("gated write leaves memory bit-identical") {
    DncConfig cfg = small_cfg(false, false, false);
    Dnc<T> dnc(cfg);
    ParameterStore<T> store;
    Rng rng(7);
    dnc.init_params(store, rng);

    NoGradGuard ng;
    auto s = dnc.initial_state();
    for (int t = 0; t < 3; ++t) {
        TV x(cfg.input_dim);
        for (auto& v : x) v = rng.normal();
        s = dnc.step(store, s, Tensor<T>::from({cfg.input_dim}, x)).state;
    }
    const TV before = s.M.value();
    auto hook = pin_segment(cfg, "write_gate", -1e4);
    auto out = dnc.step(store, s, Tensor<T>::full({cfg.input_dim}, 0.3), hook);
    REQUIRE(std::memcmp(out.state.M.value().data(), before.data(), before.size() * sizeof(T)) == 0);

    // with dealloc on, also closing the free gates keeps memory frozen
    DncConfig cfg2 = small_cfg(true, true, true);
    Dnc<T> dnc2(cfg2);
    ParameterStore<T> store2;
    Rng rng2(8);
    dnc2.init_params(store2, rng2);
    auto s2 = dnc2.initial_state();
    for (int t = 0; t < 3; ++t) {
        TV x(cfg2.input_dim);
        for (auto& v : x) v = rng2.normal();
        s2 = dnc2.step(store2, s2, Tensor<T>::from({cfg2.input_dim}, x)).state;
    }
    const TV before2 = s2.M.value();
    auto hook2 = chain(pin_segment(cfg2, "write_gate", -1e4),
                       chain(pin_segment(cfg2, "free_gate0", -1e4), pin_segment(cfg2, "free_gate1", -1e4)));
    auto out2 = dnc2.step(store2, s2, Tensor<T>::full({cfg2.input_dim}, 0.3), hook2);
    REQUIRE(std::memcmp(out2.state.M.value().data(), before2.data(), before2.size() * sizeof(T)) == 0);
}

TEST_CASE("state invariants hold over 1000 random steps") {
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
    Rng rng(101);
    dnc.init_params(store, rng);

    NoGradGuard ng;
    auto s = dnc.initial_state();
    for (int t = 0; t < 1000; ++t) {
        TV x(cfg.input_dim);
        for (auto& v : x) v = rng.normal(0.0, 2.0);
        s = dnc.step(store, s, Tensor<T>::from({cfg.input_dim}, x)).state;

        T sw = 0;
        for (std::size_t i = 0; i < cfg.N; ++i) {
            REQUIRE(s.u.at(i) >= 0.0);
            REQUIRE(s.u.at(i) <= 1.0);
            REQUIRE(s.w_w.at(i) >= 0.0);
            sw += s.w_w.at(i);
        }
        REQUIRE(sw <= 1.0 + 1e-9);
        for (const auto& wr : s.w_r) {
            T sr = 0;
            for (std::size_t i = 0; i < cfg.N; ++i) {
                REQUIRE(wr.at(i) >= 0.0);
                sr += wr.at(i);
            }
            REQUIRE(sr <= 1.0 + 1e-9);
        }
        for (std::size_t i = 0; i < cfg.N; ++i) {
            REQUIRE(s.L.at(i, i) == 0.0);
            T row = 0, col = 0;
            for (std::size_t j = 0; j < cfg.N; ++j) {
                REQUIRE(s.L.at(i, j) >= 0.0);
                REQUIRE(s.L.at(i, j) <= 1.0);
                row += s.L.at(i, j);
                col += s.L.at(j, i);
            }
            REQUIRE(row <= 1.0 + 1e-9);
            REQUIRE(col <= 1.0 + 1e-9);
        }
    }
}

TEST_CASE("full step gradients match finite differences, all toggles on") {
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
    Rng rng(42);
    dnc.init_params(ref, rng);

    std::vector<std::pair<Shape, TV>> inits;
    std::vector<std::string> names;
    for (const auto& slot : ref.slots()) {
        inits.push_back({slot.value.shape(), slot.value.value()});
        names.push_back(slot.name);
    }

    std::vector<TV> xs;
    for (int t = 0; t < 3; ++t) {
        TV x(cfg.input_dim);
        for (auto& v : x) v = rng.normal();
        xs.push_back(x);
    }

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
        Rng wr(555);
        Tensor<T> catd = concat(ys);
        TV w(catd.numel());
        for (auto& v : w) v = wr.uniform(-1.0, 1.0);
        return sum(mul(catd, Tensor<T>::from({catd.numel()}, std::move(w))));
    };

    auto rep = check_gradients<T>(inits, loss_fn);
    CAPTURE(rep.worst, rep.checked);
    REQUIRE(rep.checked == dnc.param_count());
    REQUIRE(rep.ok(1e-4));
}
