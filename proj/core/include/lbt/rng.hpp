#pragma once

#include <cstddef>
#include <cstdint>
#include <string_view>
#include <utility>
#include <vector>

namespace lbt {

// Deterministic PRNG with a fixed algorithm (xoshiro256++) so that seeded
// runs reproduce bit-for-bit across platforms and standard-library versions.
class Rng {
public:
    explicit Rng(std::uint64_t seed);

    std::uint64_t next_u64();

    // Uniform double in [0, 1).
    double uniform();
    // Uniform double in [lo, hi).
    double uniform(double lo, double hi);
    // Uniform integer in [0, n). Requires n > 0.
    std::uint64_t uniform_int(std::uint64_t n);
    // Standard normal via Box-Muller. Two uniforms per draw, no cached spare.
    double normal();
    bool bernoulli(double p);

    template <typename T>
    void shuffle(std::vector<T>& v) {
        for (std::size_t i = v.size(); i > 1; --i) {
            std::size_t j = static_cast<std::size_t>(uniform_int(i));
            std::swap(v[i - 1], v[j]);
        }
    }

private:
    std::uint64_t s_[4];
};

// Derives an independent stream seed from a base seed and a purpose tag.
// Stateless: the same (base, tag, a, b) always yields the same seed, which is
// what makes checkpoint resume and parallel per-item augmentation exact.
std::uint64_t derive_seed(std::uint64_t base, std::string_view tag,
                          std::uint64_t a = 0, std::uint64_t b = 0);

}  // namespace lbt
