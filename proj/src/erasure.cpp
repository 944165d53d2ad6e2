#include "eralab/erasure.hpp"

#include <cmath>
#include <string>

#include "eralab/errors.hpp"

namespace eralab {

ParamDelta param_delta(std::span<const double> a, std::span<const double> b, double threshold) {
    if (a.size() != b.size()) {
        throw ShapeError("parameter vectors differ in length (" + std::to_string(a.size()) + " vs " +
                                std::to_string(b.size()) + ")");
    }
    ParamDelta d;
    d.threshold = threshold;
    if (a.empty()) {
        return d;
    }
    std::size_t updated = 0;
    double abs_sum = 0.0;
    double sq_sum = 0.0;
    for (std::size_t i = 0; i < a.size(); ++i) {
        const double diff = std::abs(b[i] - a[i]);
        updated += diff > threshold ? 1 : 0;
        abs_sum += diff;
        sq_sum += diff * diff;
    }
    const auto n = static_cast<double>(a.size());
    d.fraction_updated = static_cast<double>(updated) / n;
    d.mean_abs_change = abs_sum / n;
    const double scale = 0.5 * (std::sqrt(squared_norm(a)) + std::sqrt(squared_norm(b)));
    d.relative_frobenius_change = scale > 0.0 ? std::sqrt(sq_sum) / scale : 0.0;
    return d;
}

ParamDelta param_delta(const ConditionalDenoiser& a, const ConditionalDenoiser& b, double threshold) {
    if (!a.compatible_with(b) || a.token_count() != b.token_count()) {
        throw ArchitectureError("param_delta: checkpoints have different architectures");
    }
    return param_delta(a.parameters(), b.parameters(), threshold);
}

namespace {

void check_tokens(const ConditionalDenoiser& model, std::size_t target, std::size_t anchor) {
    model.require_token(target);
    model.require_token(anchor);
    if (target == anchor) {
        throw PreconditionError("erasure target and anchor must differ");
    }
    if (target >= model.concept_count()) {
        throw PreconditionError("erasure target must be a concept token");
    }
}

} // namespace

ErasureOutcome erase_esd(const ConditionalDenoiser& model, const ErasureConfig& config) {
    const std::size_t anchor = config.anchor.value_or(model.null_token());
    check_tokens(model, config.target, anchor);
    if (config.guidance < 0.0) {
        throw PreconditionError("negative-guidance strength must be >= 0");
    }
    if (config.pool_refresh < 0) {
        throw PreconditionError("pool_refresh must be >= 0");
    }
    const TrainableSet trainable = config.trainable.value_or(TrainableSet{false, {0}, false, {config.target}});
    const FineTuneOptions options{config.steps, AdamHyper{.lr = config.lr}, trainable};
    if (config.steps == 0) {
        return {model, param_delta(model, model), {}, std::nullopt};
    }
    const std::size_t pool_token = config.pool_token.value_or(config.target);
    model.require_token(pool_token);
    Matrix pool = sample(model, pool_token, config.latent_pool, config.seed);
    int step = 0;
    const std::size_t n = config.batch_size;
    auto source = [&](Rng& rng, const ConditionalDenoiser& current) {
        if (config.pool_refresh > 0 && step > 0 && step % config.pool_refresh == 0) {
            pool = sample(current, pool_token, config.latent_pool, config.seed + 7919 * static_cast<std::uint64_t>(step));
        }
        ++step;
        Matrix x0(n, model.data_dim());
        for (std::size_t i = 0; i < n; ++i) {
            const auto pick = pool.row(rng.below(pool.rows()));
            std::copy(pick.begin(), pick.end(), x0.row(i).begin());
        }
        TrainingBatch batch =
            noising_batch(model, x0, std::vector<std::size_t>(n, config.target), 1.0 / static_cast<double>(n), rng);
        batch.targets = guided_prediction_batch(model, batch.latents, batch.steps, config.target, anchor,
                                                -config.guidance);
        return batch;
    };
    auto tuned = fine_tune(model, options, config.seed + 1, source);
    ParamDelta delta = param_delta(model, tuned.model);
    return {std::move(tuned.model), delta, std::move(tuned.loss_trace), std::nullopt};
}

ErasureOutcome erase_projection(const ConditionalDenoiser& model, const ErasureConfig& config) {
    const std::size_t anchor = config.anchor.value_or(model.null_token());
    check_tokens(model, config.target, anchor);
    if (config.ridge < 0.0 || std::isnan(config.ridge)) {
        throw PreconditionError("ridge weight must be >= 0");
    }
    ConditionalDenoiser edited = model;
    if (!std::isinf(config.ridge)) {
        const auto old_row = model.embeddings().row(config.target);
        const auto anchor_row = model.embeddings().row(anchor);
        Vector row(old_row.size());
        for (std::size_t k = 0; k < row.size(); ++k) {
            row[k] = config.ridge == 0.0 ? anchor_row[k]
                                         : (anchor_row[k] + config.ridge * old_row[k]) / (1.0 + config.ridge);
        }
        edited.set_embedding_row(config.target, row);
    }
    ParamDelta delta = param_delta(model, edited);
    return {std::move(edited), delta, {}, std::nullopt};
}

ErasureOutcome erase(const ConditionalDenoiser& model, const ErasureConfig& config) {
    switch (config.method) {
    case ErasureMethod::esd_style:
        return erase_esd(model, config);
    case ErasureMethod::projection_edit:
        return erase_projection(model, config);
    }
    throw PreconditionError("unknown erasure method");
}

const char* to_string(ErasureMethod method) {
    return method == ErasureMethod::esd_style ? "esd" : "projection";
}

ErasureMethod parse_erasure_method(std::string_view name) {
    if (name == "esd" || name == "esd_style") {
        return ErasureMethod::esd_style;
    }
    if (name == "projection" || name == "projection_edit") {
        return ErasureMethod::projection_edit;
    }
    throw ConfigError("unknown erasure method '" + std::string(name) + "' (expected esd or projection)");
}

} // namespace eralab
