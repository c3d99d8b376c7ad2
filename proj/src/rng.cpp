#include "purigrad/rng.hpp"

#include <cmath>
#include <numbers>

namespace purigrad {

namespace {

constexpr uint64_t kGoldenGamma = 0x9E3779B97F4A7C15ull;

uint64_t splitmix64_next(uint64_t& state) {
    uint64_t z = (state += kGoldenGamma);
    z = (z ^ (z >> 30)) * 0xBF58476D1CE4E5B9ull;
    z = (z ^ (z >> 27)) * 0x94D049BB133111EBull;
    return z ^ (z >> 31);
}

uint64_t rotl(uint64_t x, int k) { return (x << k) | (x >> (64 - k)); }

}  // namespace

Rng::Rng(uint64_t seed) : seed_(seed) {
    uint64_t sm = seed;
    for (auto& lane : s_) lane = splitmix64_next(sm);
}

uint64_t Rng::child_seed(uint64_t seed, uint64_t k) {
    uint64_t sm = seed ^ (kGoldenGamma * (k + 1));
    return splitmix64_next(sm);
}

uint64_t Rng::next_u64() {
    // xoshiro256++
    uint64_t result = rotl(s_[0] + s_[3], 23) + s_[0];
    uint64_t t = s_[1] << 17;
    s_[2] ^= s_[0];
    s_[3] ^= s_[1];
    s_[1] ^= s_[2];
    s_[0] ^= s_[3];
    s_[2] ^= t;
    s_[3] = rotl(s_[3], 45);
    return result;
}

double Rng::uniform() {
    return static_cast<double>(next_u64() >> 11) * 0x1.0p-53;
}

double Rng::uniform(double lo, double hi) { return lo + (hi - lo) * uniform(); }

double Rng::normal() {
    // u1 in (0,1] so log(u1) stays finite.
    double u1 = static_cast<double>((next_u64() >> 11) + 1) * 0x1.0p-53;
    double u2 = uniform();
    return std::sqrt(-2.0 * std::log(u1)) * std::cos(2.0 * std::numbers::pi * u2);
}

void Rng::fill_normal(std::span<double> out) {
    for (double& v : out) v = normal();
}

void Rng::fill_uniform(std::span<double> out, double lo, double hi) {
    for (double& v : out) v = uniform(lo, hi);
}

}  // namespace purigrad
