#pragma once

#include <cmath>
#include <cstdint>
#include <random>
#include <string>
#include <vector>

#include "caal/common.hpp"

namespace caal {

// Deterministic RNG with portable distributions. std::mt19937_64 has a
// standard-pinned sequence; the std:: distributions do not, so uniform /
// normal / bernoulli are implemented here. Streams fork by tag so that
// shards (per patient, per round, per MC pass) draw independently of
// evaluation order.
class Rng {
public:
    explicit Rng(uint64_t seed) : engine_(seed), seed_(seed) {}

    uint64_t next_u64() { return engine_(); }

    // [0,1), 53-bit resolution
    double uniform() { return (next_u64() >> 11) * 0x1.0p-53; }

    double uniform(double lo, double hi) { return lo + (hi - lo) * uniform(); }

    // standard normal, Box-Muller (no spare cached: stream position must be
    // a pure function of draw count)
    double normal() {
        double u1 = uniform();
        double u2 = uniform();
        while (u1 <= 1e-300) u1 = uniform();
        return std::sqrt(-2.0 * std::log(u1)) * std::cos(6.283185307179586476925286766559 * u2);
    }

    bool bernoulli(double p) { return uniform() < p; }

    // uniform integer in [lo, hi] via rejection-free Lemire-style reduction
    int64_t uniform_int(int64_t lo, int64_t hi) {
        uint64_t span = static_cast<uint64_t>(hi - lo) + 1;
        // modulo bias is < 2^-50 for span < 2^14 which covers all call sites;
        // use 128-bit multiply reduction to stay exact anyway
        unsigned __int128 m = static_cast<unsigned __int128>(next_u64()) * span;
        return lo + static_cast<int64_t>(m >> 64);
    }

    // categorical draw from unnormalized nonnegative weights
    size_t categorical(const std::vector<double>& weights) {
        double total = 0.0;
        for (double w : weights) total += w;
        if (total <= 0.0) throw DomainError("categorical: weights sum to zero");
        double u = uniform() * total;
        double acc = 0.0;
        for (size_t i = 0; i < weights.size(); ++i) {
            acc += weights[i];
            if (u < acc) return i;
        }
        return weights.size() - 1;
    }

    template <typename T>
    void shuffle(std::vector<T>& v) {
        for (size_t i = v.size(); i > 1; --i) {
            size_t j = static_cast<size_t>(uniform_int(0, static_cast<int64_t>(i) - 1));
            std::swap(v[i - 1], v[j]);
        }
    }

    // independent child stream; child seed is a hash of (parent seed, tag)
    Rng fork(const std::string& tag) const {
        uint64_t h = fnv1a64(tag, seed_ ^ 0x9e3779b97f4a7c15ull);
        // splitmix finalizer to decorrelate nearby tags
        h += 0x9e3779b97f4a7c15ull;
        h = (h ^ (h >> 30)) * 0xbf58476d1ce4e5b9ull;
        h = (h ^ (h >> 27)) * 0x94d049bb133111ebull;
        h = h ^ (h >> 31);
        return Rng(h);
    }

    Rng fork(const std::string& tag, int64_t index) const {
        return fork(tag + "#" + std::to_string(index));
    }

    uint64_t seed() const { return seed_; }

private:
    std::mt19937_64 engine_;
    uint64_t seed_;
};

}  // namespace caal
