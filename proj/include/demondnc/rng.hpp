#pragma once

#include <cmath>
#include <cstdint>
#include <random>
#include <sstream>
#include <string>
#include <vector>

#include "demondnc/errors.hpp"

namespace demondnc {

// Deterministic random stream. Wraps std::mt19937_64 but draws uniforms and
// normals through fixed, stateless transforms so that the sequence of values
// is a pure function of the engine state. (std::normal_distribution caches a
// spare value, which would make checkpointed state incomplete.)
class Rng {
public:
    Rng() : engine_(0x9e3779b97f4a7c15ull) {}
    explicit Rng(std::uint64_t seed) : engine_(seed) {}

    std::uint64_t next_u64() { return engine_(); }

    // Uniform in [0, 1) with 53 random bits.
    double uniform() { return static_cast<double>(next_u64() >> 11) * 0x1.0p-53; }

    double uniform(double lo, double hi) { return lo + (hi - lo) * uniform(); }

    // Unbiased integer in [0, n).
    std::uint64_t uniform_int(std::uint64_t n) {
        if (n == 0) throw ArgumentError("uniform_int: n must be positive");
        const std::uint64_t limit = UINT64_MAX - UINT64_MAX % n;
        std::uint64_t x;
        do {
            x = next_u64();
        } while (x >= limit);
        return x % n;
    }

    bool bit() { return (next_u64() >> 63) != 0; }

    // Box-Muller without caching: consumes two uniforms per normal.
    double normal() {
        double u1 = uniform();
        while (u1 <= 0.0) u1 = uniform();
        const double u2 = uniform();
        return std::sqrt(-2.0 * std::log(u1)) * std::cos(6.283185307179586477 * u2);
    }

    double normal(double mean, double stddev) { return mean + stddev * normal(); }

    // Fisher-Yates; identical output for identical state on every platform.
    template <class V>
    void shuffle(V& v) {
        for (std::size_t i = v.size(); i > 1; --i) {
            const std::size_t j = static_cast<std::size_t>(uniform_int(i));
            using std::swap;
            swap(v[i - 1], v[j]);
        }
    }

    std::vector<std::size_t> permutation(std::size_t n) {
        std::vector<std::size_t> p(n);
        for (std::size_t i = 0; i < n; ++i) p[i] = i;
        shuffle(p);
        return p;
    }

    // Engine state as its standard textual serialization, packed into bytes.
    std::string serialize() const {
        std::ostringstream os;
        os << engine_;
        return os.str();
    }

    void deserialize(const std::string& s) {
        std::istringstream is(s);
        is >> engine_;
        if (is.fail()) throw ArgumentError("Rng::deserialize: malformed state");
    }

private:
    std::mt19937_64 engine_;
};

// Stable 64-bit mix for deriving sub-seeds (eval streams, per-run seeds).
inline std::uint64_t mix_seed(std::uint64_t a, std::uint64_t b) {
    std::uint64_t x = a + 0x9e3779b97f4a7c15ull + (b << 6) + (b >> 2);
    x ^= x >> 30;
    x *= 0xbf58476d1ce4e5b9ull;
    x ^= x >> 27;
    x *= 0x94d049bb133111ebull;
    x ^= x >> 31;
    return x;
}

}  // namespace demondnc
