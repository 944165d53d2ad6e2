#pragma once

#include <cstddef>
#include <cstdint>
#include <optional>
#include <span>

#include "eralab/diffusion.hpp"
#include "eralab/erasure.hpp"

namespace eralab {

using ProbeOutcome = TuneOutcome;

/// Reverse-guided target eps_g(z, anchor, t) + gamma * (eps_g(z, c, t) - eps_g(z, null, t)).
Vector build_reverse_target(const ConditionalDenoiser& guide, std::span<const double> z, std::size_t concept_token,
                            std::size_t anchor_token, int t, double gamma);

struct GradientProbeConfig {
    std::size_t target = 0;
    std::optional<std::size_t> anchor; // null token when empty
    double gamma = 0.8;
    int steps = 200;
    double lr = 5.5e-5;
    std::size_t batch_size = 128;
    std::size_t latent_pool = 256; // x0 samples drawn once from the erased model under the anchor
    std::optional<TrainableSet> trainable; // full MLP + target row when empty
    std::uint64_t seed = 0;
};

/// Fine-tunes a copy of `erased` so that eps''(z, c, t) matches the reverse-guided
/// target built on `guide`. Neither input is modified. `guide` may be any
/// architecture-compatible checkpoint.
ProbeOutcome probe_gradient_guided(const ConditionalDenoiser& erased, const ConditionalDenoiser& guide,
                                   const GradientProbeConfig& config);

enum class TokenInit { anchor, random };

/// Appends a rare-token row. Anchor init copies the class row and adds
/// N(0, 0.01 I) noise; random init draws N(0, I).
std::size_t bind_rare_token(ConditionalDenoiser& model, TokenInit init, std::size_t class_token, Rng& rng);

struct PersonalizationConfig {
    Matrix reference;              // few samples of the concept to reinstate
    std::size_t class_concept = 0; // class prompt for prior preservation
    double prior_weight = 1.0;     // lambda_prior
    std::size_t prior_size = 64;   // prior set drawn once from the erased model under the class token
    int steps = 500;
    double lr = 1e-4;
    std::size_t instance_batch = 64;
    std::size_t prior_batch = 64;
    TokenInit init = TokenInit::random;
    bool train_mlp = true;
    bool train_token = true; // the new rare-token row
    std::uint64_t seed = 0;
};

/// Binds a rare token to the reference set with the instance loss plus
/// prior_weight times the class loss. The outcome's token is the rare token;
/// its ParamDelta compares against the erased model with the token already bound.
ProbeOutcome probe_instance_personalization(const ConditionalDenoiser& erased, const PersonalizationConfig& config);

} // namespace eralab
