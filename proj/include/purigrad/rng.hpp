#pragma once

#include <cstdint>
#include <span>

namespace purigrad {

/// Deterministic, implementation-independent random stream (xoshiro256++
/// seeded through splitmix64). Substreams are derived from the construction
/// seed, not the consumed state, so derivation is order-independent:
///   child_seed(seed, k) = splitmix64_next(seed XOR golden_gamma * (k + 1))
/// The exact scheme is part of the on-disk reproducibility contract (see
/// docs/FORMATS.md).
class Rng {
public:
    explicit Rng(uint64_t seed);

    uint64_t seed() const { return seed_; }

    /// Independent child stream for index `k`. Stateless with respect to
    /// how much of this stream has been consumed.
    Rng derive(uint64_t k) const { return Rng(child_seed(seed_, k)); }

    static uint64_t child_seed(uint64_t seed, uint64_t k);

    uint64_t next_u64();

    /// Uniform on [0, 1).
    double uniform();
    /// Uniform on [lo, hi).
    double uniform(double lo, double hi);

    /// Standard normal via Box-Muller (one value per draw, no cache).
    double normal();

    void fill_normal(std::span<double> out);
    void fill_uniform(std::span<double> out, double lo, double hi);

private:
    uint64_t seed_;
    uint64_t s_[4];
};

}  // namespace purigrad
