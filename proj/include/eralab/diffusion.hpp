#pragma once

#include <cstddef>
#include <cstdint>
#include <functional>
#include <span>
#include <vector>

#include "eralab/concepts.hpp"
#include "eralab/numerics.hpp"
#include "eralab/rng.hpp"

namespace eralab {

/// Linear beta schedule. Steps are 1-based: beta(1) .. beta(T).
struct NoiseSchedule {
    int steps = 0;
    double beta_start = 0.0;
    double beta_end = 0.0;
    Vector betas;
    Vector alphas;
    Vector alpha_bars;

    double beta(int t) const { return betas.at(static_cast<std::size_t>(t - 1)); }
    double alpha(int t) const { return alphas.at(static_cast<std::size_t>(t - 1)); }
    double alpha_bar(int t) const { return alpha_bars.at(static_cast<std::size_t>(t - 1)); }

    friend bool operator==(const NoiseSchedule&, const NoiseSchedule&) = default;
};

NoiseSchedule make_schedule(int steps, double beta_start, double beta_end);

/// z_t = sqrt(abar_t) x0 + sqrt(1 - abar_t) eps.
Vector forward_noise(const NoiseSchedule& schedule, std::span<const double> x0, int t, std::span<const double> eps);

/// Sinusoidal step embedding: for k = 0 .. dim/2 - 1 the pair
/// (sin(w_k t), cos(w_k t)) with w_k = 2 pi 2^k / T.
Vector time_embedding(int t, int total_steps, std::size_t dim);

struct DenoiserShape {
    std::size_t data_dim = 2;
    std::size_t concept_count = 4;
    std::size_t embedding_dim = 8;
    std::size_t time_dim = 8;
    std::vector<std::size_t> hidden{128, 128};
    int steps = 100;
    double beta_start = 1e-4;
    double beta_end = 0.02;
};

/// One supervised step for a noise predictor: per-row latent, token, step,
/// regression target, and loss weight. The loss is
/// sum_i weight_i * mean_j (prediction_ij - target_ij)^2.
struct TrainingBatch {
    Matrix latents;
    std::vector<std::size_t> tokens;
    std::vector<int> steps;
    Matrix targets;
    Vector weights;
};

struct LossGradient {
    double loss = 0.0;
    Vector grad; // in ConditionalDenoiser parameter order
};

/// Noise predictor eps(z, token, t): an MLP over [z, embedding(token), time_embedding(t)].
///
/// Token layout: rows 0..K-1 are concepts, row K is the learned null token,
/// rows above K are rare tokens appended by personalization.
/// Parameter vector: MLP parameters (layer-major) followed by the embedding
/// table (row-major).
class ConditionalDenoiser {
public:
    ConditionalDenoiser(NoiseSchedule schedule, Mlp mlp, Matrix embeddings, std::size_t concept_count,
                        std::size_t time_dim);

    /// Fresh model: random MLP, embeddings ~ N(0, 1).
    static ConditionalDenoiser create(const DenoiserShape& shape, std::uint64_t seed);

    std::size_t data_dim() const { return mlp_.output_dim(); }
    std::size_t concept_count() const { return concept_count_; }
    std::size_t null_token() const { return concept_count_; }
    std::size_t token_count() const { return embeddings_.rows(); }
    std::size_t embedding_dim() const { return embeddings_.cols(); }
    std::size_t time_dim() const { return time_dim_; }

    const NoiseSchedule& schedule() const { return schedule_; }
    const Mlp& mlp() const { return mlp_; }
    const Matrix& embeddings() const { return embeddings_; }

    void require_token(std::size_t token) const;

    Vector predict(std::span<const double> z, std::size_t token, int t) const;
    Matrix predict_batch(const Matrix& z, std::span<const std::size_t> tokens, std::span<const int> steps) const;

    /// Appends an embedding row and returns its token index.
    std::size_t append_token(std::span<const double> row);
    void set_embedding_row(std::size_t token, std::span<const double> row);

    std::size_t parameter_count() const { return mlp_.parameter_count() + embeddings_.size(); }
    std::size_t embedding_offset() const { return mlp_.parameter_count(); }
    Vector parameters() const;
    void set_parameters(std::span<const double> params);

    LossGradient loss_gradient(const TrainingBatch& batch) const;

    /// True when both models have the same MLP topology, data/embedding/time
    /// dimensions, concept count and schedule.
    bool compatible_with(const ConditionalDenoiser& other) const;

    friend bool operator==(const ConditionalDenoiser&, const ConditionalDenoiser&) = default;

private:
    Matrix assemble_inputs(const Matrix& z, std::span<const std::size_t> tokens, std::span<const int> steps) const;

    NoiseSchedule schedule_;
    Mlp mlp_;
    Matrix embeddings_;
    std::size_t concept_count_ = 0;
    std::size_t time_dim_ = 0;
};

/// Which parameters an optimization run may touch.
struct TrainableSet {
    bool all_mlp = false;
    std::vector<std::size_t> mlp_layers;
    bool all_embeddings = false;
    std::vector<std::size_t> embedding_rows;

    static TrainableSet everything() { return {true, {}, true, {}}; }
    static TrainableSet mlp_and_rows(std::vector<std::size_t> rows) { return {true, {}, false, std::move(rows)}; }

    /// 0/1 flag per parameter. Throws PreconditionError if nothing is selected
    /// or an index is out of range.
    std::vector<char> resolve(const ConditionalDenoiser& model) const;

    friend bool operator==(const TrainableSet&, const TrainableSet&) = default;
};

struct FineTuneOptions {
    int steps = 0;
    AdamHyper adam;
    TrainableSet trainable = TrainableSet::everything();
};

struct FineTuneResult {
    ConditionalDenoiser model;
    Vector loss_trace;
};

/// Produces the batch for the next step; receives the model being optimized.
using BatchSource = std::function<TrainingBatch(Rng&, const ConditionalDenoiser&)>;

/// Adam on the masked loss produced by `source`, one batch per step.
/// Parameters outside the trainable set are never written.
FineTuneResult fine_tune(ConditionalDenoiser model, const FineTuneOptions& options, std::uint64_t seed,
                         const BatchSource& source);

/// Standard noising batch: for each row x0_i draws t ~ U{1..T} and eps ~ N(0, I),
/// sets latent z_t and target eps, with uniform weight `weight_each`.
TrainingBatch noising_batch(const ConditionalDenoiser& model, const Matrix& x0, std::vector<std::size_t> tokens,
                            double weight_each, Rng& rng);

struct TrainConfig {
    int steps = 10000;
    std::size_t batch_size = 128;
    double lr = 1e-3;
    std::uint64_t seed = 0;
    double p_uncond = 0.1;
    TrainableSet trainable = TrainableSet::everything();
};

/// Mean of the last `window` entries of a loss trace.
double running_loss(std::span<const double> trace, std::size_t window = 100);

/// Conditional DDPM objective on fresh draws from `universe`; with
/// probability p_uncond a row's token is replaced by the null token.
FineTuneResult train(const ConditionalDenoiser& model, const ConceptUniverse& universe, const TrainConfig& config);

/// Guided prediction eps(z, anchor, t) + scale * (eps(z, concept, t) - eps(z, null, t))
/// for every row of `z`, evaluated on `model`.
Matrix guided_prediction_batch(const ConditionalDenoiser& model, const Matrix& z, std::span<const int> steps,
                               std::size_t concept_token, std::size_t anchor_token, double scale);

/// Ancestral DDPM sampling under `token`. Sample i uses Rng::stream(seed, i)
/// exclusively, so the output does not depend on batching.
Matrix sample(const ConditionalDenoiser& model, std::size_t token, std::size_t n, std::uint64_t seed);

} // namespace eralab
