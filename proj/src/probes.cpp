#include "eralab/probes.hpp"

#include <string>

#include "eralab/errors.hpp"

namespace eralab {

Vector build_reverse_target(const ConditionalDenoiser& guide, std::span<const double> z, std::size_t concept_token,
                            std::size_t anchor_token, int t, double gamma) {
    guide.require_token(concept_token);
    guide.require_token(anchor_token);
    const Matrix zm(1, z.size(), Vector(z.begin(), z.end()));
    const int steps[] = {t};
    const Matrix out = guided_prediction_batch(guide, zm, steps, concept_token, anchor_token, gamma);
    return {out.values().begin(), out.values().end()};
}

ProbeOutcome probe_gradient_guided(const ConditionalDenoiser& erased, const ConditionalDenoiser& guide,
                                   const GradientProbeConfig& config) {
    if (!erased.compatible_with(guide)) {
        throw ArchitectureError("guiding checkpoint is not architecture-compatible with the erased model");
    }
    if (config.gamma < 0.0) {
        throw PreconditionError("guidance strength gamma must be >= 0");
    }
    const std::size_t anchor = config.anchor.value_or(erased.null_token());
    erased.require_token(config.target);
    erased.require_token(anchor);
    guide.require_token(config.target);
    guide.require_token(anchor);
    if (config.steps == 0) {
        return {erased, param_delta(erased, erased), {}, std::nullopt};
    }
    const TrainableSet trainable = config.trainable.value_or(TrainableSet::mlp_and_rows({config.target}));
    const FineTuneOptions options{config.steps, AdamHyper{.lr = config.lr}, trainable};
    // Latents come from the erased model itself, so no target-concept data is needed.
    const Matrix pool = sample(erased, anchor, config.latent_pool, config.seed);
    const std::size_t n = config.batch_size;
    auto source = [&](Rng& rng, const ConditionalDenoiser&) {
        Matrix x0(n, erased.data_dim());
        for (std::size_t i = 0; i < n; ++i) {
            const auto pick = pool.row(rng.below(pool.rows()));
            std::copy(pick.begin(), pick.end(), x0.row(i).begin());
        }
        TrainingBatch batch =
            noising_batch(erased, x0, std::vector<std::size_t>(n, config.target), 1.0 / static_cast<double>(n), rng);
        batch.targets = guided_prediction_batch(guide, batch.latents, batch.steps, config.target, anchor, config.gamma);
        return batch;
    };
    auto tuned = fine_tune(erased, options, config.seed + 1, source);
    ParamDelta delta = param_delta(erased, tuned.model);
    return {std::move(tuned.model), delta, std::move(tuned.loss_trace), std::nullopt};
}

std::size_t bind_rare_token(ConditionalDenoiser& model, TokenInit init, std::size_t class_token, Rng& rng) {
    Vector row(model.embedding_dim());
    if (init == TokenInit::anchor) {
        model.require_token(class_token);
        const auto base = model.embeddings().row(class_token);
        for (std::size_t k = 0; k < row.size(); ++k) {
            row[k] = base[k] + 0.1 * rng.normal();
        }
    } else {
        for (double& v : row) {
            v = rng.normal();
        }
    }
    return model.append_token(row);
}

ProbeOutcome probe_instance_personalization(const ConditionalDenoiser& erased, const PersonalizationConfig& config) {
    if (config.reference.rows() == 0) {
        throw PreconditionError("personalization needs a non-empty reference set");
    }
    if (config.reference.cols() != erased.data_dim()) {
        throw ShapeError("reference samples have the wrong dimension");
    }
    if (config.prior_weight < 0.0) {
        throw PreconditionError("lambda_prior must be >= 0");
    }
    erased.require_token(config.class_concept);

    ConditionalDenoiser bound = erased;
    Rng init_rng = Rng::stream(config.seed, 0);
    const std::size_t token = bind_rare_token(bound, config.init, config.class_concept, init_rng);
    if (config.steps == 0) {
        return {bound, param_delta(bound, bound), {}, token};
    }

    TrainableSet trainable{config.train_mlp, {}, false, {}};
    if (config.train_token) {
        trainable.embedding_rows.push_back(token);
    }
    const FineTuneOptions options{config.steps, AdamHyper{.lr = config.lr}, trainable};
    const bool use_prior = config.prior_weight > 0.0 && config.prior_size > 0 && config.prior_batch > 0;
    const Matrix prior = use_prior ? sample(erased, config.class_concept, config.prior_size, config.seed + 2) : Matrix();
    const std::size_t ni = config.instance_batch;
    const std::size_t np = use_prior ? config.prior_batch : 0;

    auto source = [&](Rng& rng, const ConditionalDenoiser&) {
        Matrix x0(ni + np, erased.data_dim());
        std::vector<std::size_t> tokens(ni + np, token);
        for (std::size_t i = 0; i < ni; ++i) {
            const auto pick = config.reference.row(rng.below(config.reference.rows()));
            std::copy(pick.begin(), pick.end(), x0.row(i).begin());
        }
        for (std::size_t i = 0; i < np; ++i) {
            const auto pick = prior.row(rng.below(prior.rows()));
            std::copy(pick.begin(), pick.end(), x0.row(ni + i).begin());
            tokens[ni + i] = config.class_concept;
        }
        TrainingBatch batch = noising_batch(bound, x0, std::move(tokens), 1.0 / static_cast<double>(ni), rng);
        for (std::size_t i = 0; i < np; ++i) {
            batch.weights[ni + i] = config.prior_weight / static_cast<double>(np);
        }
        return batch;
    };
    auto tuned = fine_tune(bound, options, config.seed + 1, source);
    ParamDelta delta = param_delta(bound, tuned.model);
    return {std::move(tuned.model), delta, std::move(tuned.loss_trace), token};
}

} // namespace eralab
