#pragma once

#include <cstddef>
#include <cstdint>
#include <optional>
#include <span>
#include <string_view>

#include "eralab/diffusion.hpp"

namespace eralab {

enum class ErasureMethod { esd_style, projection_edit };

struct ErasureConfig {
    ErasureMethod method = ErasureMethod::esd_style;
    std::size_t target = 0;
    std::optional<std::size_t> anchor; // null token when empty
    double guidance = 1.0;             // negative-guidance strength eta
    int steps = 400;
    double lr = 1.2e-3;
    std::size_t batch_size = 128;
    std::size_t latent_pool = 256; // x0 samples under the target, noised per step
    std::optional<std::size_t> pool_token; // token the pool is sampled under; target when empty
    int pool_refresh = 0;          // 0: pool drawn once from the frozen original; n: redrawn from the student every n steps
    std::optional<TrainableSet> trainable; // first MLP layer + target row when empty
    double ridge = 0.0;                    // lambda_reg of the projection edit; +inf leaves the row alone
    std::uint64_t seed = 0;
};

/// Coordinate-wise comparison of two checkpoints.
struct ParamDelta {
    double fraction_updated = 0.0; // share of coordinates with |delta| > threshold
    double mean_abs_change = 0.0;
    double relative_frobenius_change = 0.0; // |delta| / mean(|a|, |b|)
    double threshold = 1e-6;

    friend bool operator==(const ParamDelta&, const ParamDelta&) = default;
};

inline constexpr double kUpdateThreshold = 1e-6;

ParamDelta param_delta(std::span<const double> a, std::span<const double> b, double threshold = kUpdateThreshold);
ParamDelta param_delta(const ConditionalDenoiser& a, const ConditionalDenoiser& b, double threshold = kUpdateThreshold);

/// Checkpoint produced by an erasure or probe, with its perturbation record.
struct TuneOutcome {
    ConditionalDenoiser model;
    ParamDelta delta;
    Vector loss_trace;
    std::optional<std::size_t> token; // token to sample with, when it differs from the target
};

using ErasureOutcome = TuneOutcome;

/// Fine-tunes a copy of `model` so that eps'(z, c, t) matches
/// eps(z, anchor, t) - eta * (eps(z, c, t) - eps(z, null, t)) computed on the
/// frozen original. Latents come from noising samples of the original under c
/// (or of the student itself when pool_refresh > 0).
ErasureOutcome erase_esd(const ConditionalDenoiser& model, const ErasureConfig& config);

/// Replaces the target embedding row by the ridge solution
/// argmin |r - anchor|^2 + lambda |r - old|^2 = (anchor + lambda old) / (1 + lambda).
ErasureOutcome erase_projection(const ConditionalDenoiser& model, const ErasureConfig& config);

ErasureOutcome erase(const ConditionalDenoiser& model, const ErasureConfig& config);

const char* to_string(ErasureMethod method);
ErasureMethod parse_erasure_method(std::string_view name);

} // namespace eralab
