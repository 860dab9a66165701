#include "lbt/rng.hpp"

#include <cmath>
#include <numbers>
#include <stdexcept>

namespace lbt {

namespace {

std::uint64_t splitmix64(std::uint64_t& x) {
    x += 0x9e3779b97f4a7c15ULL;
    std::uint64_t z = x;
    z = (z ^ (z >> 30)) * 0xbf58476d1ce4e5b9ULL;
    z = (z ^ (z >> 27)) * 0x94d049bb133111ebULL;
    return z ^ (z >> 31);
}

inline std::uint64_t rotl(std::uint64_t x, int k) {
    return (x << k) | (x >> (64 - k));
}

}  // namespace

Rng::Rng(std::uint64_t seed) {
    std::uint64_t x = seed;
    for (auto& w : s_) w = splitmix64(x);
}

std::uint64_t Rng::next_u64() {
    const std::uint64_t result = rotl(s_[0] + s_[3], 23) + s_[0];
    const std::uint64_t t = s_[1] << 17;
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

double Rng::uniform(double lo, double hi) {
    return lo + (hi - lo) * uniform();
}

std::uint64_t Rng::uniform_int(std::uint64_t n) {
    if (n == 0) throw std::invalid_argument("uniform_int: n must be > 0");
    // Rejection sampling over the top multiple of n keeps the draw unbiased.
    const std::uint64_t limit = n * ((~std::uint64_t{0}) / n);
    std::uint64_t v;
    do {
        v = next_u64();
    } while (v >= limit);
    return v % n;
}

double Rng::normal() {
    const double u1 = 1.0 - uniform();  // (0, 1], keeps log finite
    const double u2 = uniform();
    return std::sqrt(-2.0 * std::log(u1)) *
           std::cos(2.0 * std::numbers::pi * u2);
}

bool Rng::bernoulli(double p) {
    return uniform() < p;
}

std::uint64_t derive_seed(std::uint64_t base, std::string_view tag,
                          std::uint64_t a, std::uint64_t b) {
    // FNV-1a over the tag, then splitmix rounds folding in the operands.
    std::uint64_t h = 0xcbf29ce484222325ULL;
    for (char c : tag) {
        h ^= static_cast<unsigned char>(c);
        h *= 0x100000001b3ULL;
    }
    std::uint64_t x = base;
    std::uint64_t out = splitmix64(x);
    x ^= h;
    out ^= splitmix64(x);
    x ^= a + 0x9e3779b97f4a7c15ULL;
    out ^= splitmix64(x);
    x ^= b + 0x7f4a7c159e3779b9ULL;
    out ^= splitmix64(x);
    return out;
}

}  // namespace lbt
