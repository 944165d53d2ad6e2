#include "eralab/rng.hpp"

#include <cmath>
#include <numbers>

namespace eralab {

namespace {

constexpr std::uint32_t lo32(std::uint64_t x) { return static_cast<std::uint32_t>(x); }
constexpr std::uint32_t hi32(std::uint64_t x) { return static_cast<std::uint32_t>(x >> 32); }

} // namespace

Rng::Rng(std::uint64_t seed) {
    std::seed_seq seq{lo32(seed), hi32(seed)};
    engine_.seed(seq);
}

Rng::Rng(std::seed_seq& seq) : engine_(seq) {}

Rng Rng::stream(std::uint64_t seed, std::uint64_t index) {
    // The trailing tag keeps stream(s, i) disjoint from Rng(s).
    std::seed_seq seq{lo32(seed), hi32(seed), lo32(index), hi32(index), 0x5eedu};
    return Rng(seq);
}

double Rng::uniform() {
    return static_cast<double>(engine_() >> 11) * 0x1.0p-53;
}

double Rng::normal() {
    if (has_spare_) {
        has_spare_ = false;
        return spare_;
    }
    double u1 = uniform();
    while (u1 <= 0.0) {
        u1 = uniform();
    }
    const double u2 = uniform();
    const double r = std::sqrt(-2.0 * std::log(u1));
    const double angle = 2.0 * std::numbers::pi * u2;
    spare_ = r * std::sin(angle);
    has_spare_ = true;
    return r * std::cos(angle);
}

std::uint64_t Rng::below(std::uint64_t n) {
    // Rejection sampling removes modulo bias.
    const std::uint64_t limit = UINT64_MAX - UINT64_MAX % n;
    std::uint64_t x = engine_();
    while (x >= limit) {
        x = engine_();
    }
    return x % n;
}

} // namespace eralab
