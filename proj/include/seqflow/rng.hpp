#pragma once

#include <cmath>
#include <cstdint>
#include <random>
#include <vector>

#include "seqflow/tensor.hpp"

namespace seqflow {

namespace detail {
inline uint64_t splitmix64(uint64_t x) {
    x += 0x9E3779B97F4A7C15ULL;
    x = (x ^ (x >> 30)) * 0xBF58476D1CE4E5B9ULL;
    x = (x ^ (x >> 27)) * 0x94D049BB133111EBULL;
    return x ^ (x >> 31);
}
}  // namespace detail

// Deterministic seeded generator. The normal/uniform transforms are written
// out here (rather than using std::*_distribution) so the sample stream is
// fixed by this code alone: identical seed + identical call sequence gives a
// bit-identical stream on every run and platform with the same FP behavior.
class Rng {
public:
    explicit Rng(uint64_t seed) : seed_(seed), gen_(seed) {}

    uint64_t seed() const { return seed_; }

    uint64_t next_u64() { return gen_(); }

    // Uniform on [0, 1), 53-bit resolution.
    double uniform() { return static_cast<double>(gen_() >> 11) * 0x1.0p-53; }

    // Standard normal via Box-Muller (cosine branch only, so each call
    // consumes exactly two generator words).
    double normal() {
        const double u1 = 1.0 - uniform();  // (0, 1]
        const double u2 = uniform();
        return std::sqrt(-2.0 * std::log(u1)) * std::cos(2.0 * M_PI * u2);
    }

    // Uniform integer in [0, n).
    int uniform_int(int n) {
        if (n <= 0) throw UsageError("Rng::uniform_int: n must be positive");
        // Rejection sampling to avoid modulo bias.
        const uint64_t un = static_cast<uint64_t>(n);
        const uint64_t limit = UINT64_MAX - UINT64_MAX % un;
        uint64_t x;
        do {
            x = gen_();
        } while (x >= limit);
        return static_cast<int>(x % un);
    }

    bool bernoulli(double p) { return uniform() < p; }

    // Deterministically derived independent stream (used to split work across
    // shards: fork(shard_index) per shard).
    Rng fork(uint64_t stream) const {
        return Rng(detail::splitmix64(seed_ ^ detail::splitmix64(stream + 1)));
    }

    void fill_normal(Tensor& t) {
        for (long long i = 0; i < t.numel(); ++i) t[i] = normal();
    }

    void fill_uniform(Tensor& t, double lo, double hi) {
        for (long long i = 0; i < t.numel(); ++i) t[i] = lo + (hi - lo) * uniform();
    }

    // Fisher-Yates; std::shuffle is implementation-defined, this is not.
    template <typename T>
    void shuffle(std::vector<T>& v) {
        for (size_t i = v.size(); i > 1; --i) {
            const size_t j = static_cast<size_t>(uniform_int(static_cast<int>(i)));
            std::swap(v[i - 1], v[j]);
        }
    }

private:
    uint64_t seed_;
    std::mt19937_64 gen_;
};

inline Tensor gaussian_sample(Rng& rng, std::vector<int> shape) {
    Tensor t(std::move(shape));
    rng.fill_normal(t);
    return t;
}

}  // namespace seqflow
