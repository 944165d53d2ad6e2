#pragma once

#include <cstdint>
#include <random>
#include <string_view>

namespace eralab {

/// Deterministic random source used everywhere in the library.
///
/// The engine is std::mt19937_64, whose output sequence is fixed by the
/// standard. Uniforms take the top 53 bits of one draw; normals use the
/// Box-Muller transform with the second variate cached. std::*_distribution
/// is avoided because its output is implementation defined.
class Rng {
public:
    static constexpr std::string_view generator_name = "mt19937_64/box-muller";

    explicit Rng(std::uint64_t seed);

    /// Independent stream for (seed, index), e.g. one per sample or per trial.
    static Rng stream(std::uint64_t seed, std::uint64_t index);

    std::uint64_t next_u64() { return engine_(); }

    /// Uniform on [0, 1).
    double uniform();

    /// Standard normal.
    double normal();

    /// Uniform integer in [0, n). n must be positive.
    std::uint64_t below(std::uint64_t n);

private:
    explicit Rng(std::seed_seq& seq);

    std::mt19937_64 engine_;
    double spare_ = 0.0;
    bool has_spare_ = false;
};

} // namespace eralab
