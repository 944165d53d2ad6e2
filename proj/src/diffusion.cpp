#include "eralab/diffusion.hpp"

#include <algorithm>
#include <cmath>
#include <numbers>
#include <string>

#include "eralab/errors.hpp"

namespace eralab {

NoiseSchedule make_schedule(int steps, double beta_start, double beta_end) {
    if (steps < 1) {
        throw PreconditionError("schedule needs at least one step");
    }
    if (!(beta_start > 0.0 && beta_start <= beta_end && beta_end < 1.0)) {
        throw PreconditionError("schedule needs 0 < beta_start <= beta_end < 1");
    }
    NoiseSchedule s;
    s.steps = steps;
    s.beta_start = beta_start;
    s.beta_end = beta_end;
    double running = 1.0;
    for (int i = 0; i < steps; ++i) {
        const double frac = steps == 1 ? 0.0 : static_cast<double>(i) / static_cast<double>(steps - 1);
        const double beta = beta_start + (beta_end - beta_start) * frac;
        running *= 1.0 - beta;
        s.betas.push_back(beta);
        s.alphas.push_back(1.0 - beta);
        s.alpha_bars.push_back(running);
    }
    return s;
}

Vector forward_noise(const NoiseSchedule& schedule, std::span<const double> x0, int t, std::span<const double> eps) {
    if (t < 1 || t > schedule.steps) {
        throw PreconditionError("step " + std::to_string(t) + " outside 1.." + std::to_string(schedule.steps));
    }
    if (x0.size() != eps.size()) {
        throw ShapeError("forward_noise: x0 and eps lengths differ");
    }
    const double abar = schedule.alpha_bar(t);
    const double a = std::sqrt(abar);
    const double s = std::sqrt(1.0 - abar);
    Vector z(x0.size());
    for (std::size_t i = 0; i < z.size(); ++i) {
        z[i] = a * x0[i] + s * eps[i];
    }
    return z;
}

Vector time_embedding(int t, int total_steps, std::size_t dim) {
    Vector out(dim, 0.0);
    for (std::size_t k = 0; 2 * k + 1 < dim; ++k) {
        const double w = 2.0 * std::numbers::pi * std::ldexp(1.0, static_cast<int>(k)) / total_steps;
        out[2 * k] = std::sin(w * t);
        out[2 * k + 1] = std::cos(w * t);
    }
    return out;
}

ConditionalDenoiser::ConditionalDenoiser(NoiseSchedule schedule, Mlp mlp, Matrix embeddings, std::size_t concept_count,
                                         std::size_t time_dim)
    : schedule_(std::move(schedule)),
      mlp_(std::move(mlp)),
      embeddings_(std::move(embeddings)),
      concept_count_(concept_count),
      time_dim_(time_dim) {
    if (embeddings_.rows() < concept_count_ + 1) {
        throw ShapeError("embedding table needs K concept rows plus the null row");
    }
    if (mlp_.output_dim() + embeddings_.cols() + time_dim_ != mlp_.input_dim()) {
        throw ShapeError("mlp input dim " + std::to_string(mlp_.input_dim()) +
                         " != data dim + embedding dim + time dim");
    }
    if (time_dim_ % 2 != 0) {
        throw ShapeError("time embedding dim must be even");
    }
}

ConditionalDenoiser ConditionalDenoiser::create(const DenoiserShape& shape, std::uint64_t seed) {
    Rng rng(seed);
    std::vector<std::size_t> dims{shape.data_dim + shape.embedding_dim + shape.time_dim};
    dims.insert(dims.end(), shape.hidden.begin(), shape.hidden.end());
    dims.push_back(shape.data_dim);
    Mlp mlp = Mlp::random(dims, rng);
    Matrix emb(shape.concept_count + 1, shape.embedding_dim);
    for (double& v : emb.values()) {
        v = rng.normal();
    }
    return {make_schedule(shape.steps, shape.beta_start, shape.beta_end), std::move(mlp), std::move(emb),
            shape.concept_count, shape.time_dim};
}

void ConditionalDenoiser::require_token(std::size_t token) const {
    if (token >= token_count()) {
        throw PreconditionError("unknown token index " + std::to_string(token) + " (table has " +
                                std::to_string(token_count()) + " rows)");
    }
}

Matrix ConditionalDenoiser::assemble_inputs(const Matrix& z, std::span<const std::size_t> tokens,
                                            std::span<const int> steps) const {
    const std::size_t n = z.rows();
    if (tokens.size() != n || steps.size() != n) {
        throw ShapeError("latents, tokens and steps must have one entry per row");
    }
    if (z.cols() != data_dim()) {
        throw ShapeError("latent dimension " + std::to_string(z.cols()) + " != data dim " + std::to_string(data_dim()));
    }
    const std::size_t d = data_dim();
    const std::size_t e = embedding_dim();
    Matrix in(n, mlp_.input_dim());
    for (std::size_t i = 0; i < n; ++i) {
        require_token(tokens[i]);
        if (steps[i] < 1 || steps[i] > schedule_.steps) {
            throw PreconditionError("step " + std::to_string(steps[i]) + " out of range");
        }
        auto row = in.row(i);
        std::copy_n(z.row(i).begin(), d, row.begin());
        std::copy_n(embeddings_.row(tokens[i]).begin(), e, row.begin() + static_cast<std::ptrdiff_t>(d));
        const Vector te = time_embedding(steps[i], schedule_.steps, time_dim_);
        std::copy(te.begin(), te.end(), row.begin() + static_cast<std::ptrdiff_t>(d + e));
    }
    return in;
}

Vector ConditionalDenoiser::predict(std::span<const double> z, std::size_t token, int t) const {
    const Matrix zm(1, z.size(), Vector(z.begin(), z.end()));
    const std::size_t tok[] = {token};
    const int st[] = {t};
    const Matrix out = predict_batch(zm, tok, st);
    return {out.values().begin(), out.values().end()};
}

Matrix ConditionalDenoiser::predict_batch(const Matrix& z, std::span<const std::size_t> tokens,
                                          std::span<const int> steps) const {
    return mlp_.forward_batch(assemble_inputs(z, tokens, steps));
}

std::size_t ConditionalDenoiser::append_token(std::span<const double> row) {
    if (row.size() != embedding_dim()) {
        throw ShapeError("new embedding row has wrong dimension");
    }
    Vector data(embeddings_.values().begin(), embeddings_.values().end());
    data.insert(data.end(), row.begin(), row.end());
    embeddings_ = Matrix(embeddings_.rows() + 1, embeddings_.cols(), std::move(data));
    return embeddings_.rows() - 1;
}

void ConditionalDenoiser::set_embedding_row(std::size_t token, std::span<const double> row) {
    require_token(token);
    if (row.size() != embedding_dim()) {
        throw ShapeError("embedding row has wrong dimension");
    }
    std::copy(row.begin(), row.end(), embeddings_.row(token).begin());
}

Vector ConditionalDenoiser::parameters() const {
    Vector out(parameter_count());
    mlp_.flatten_into(std::span(out).first(mlp_.parameter_count()));
    std::copy(embeddings_.values().begin(), embeddings_.values().end(),
              out.begin() + static_cast<std::ptrdiff_t>(embedding_offset()));
    return out;
}

void ConditionalDenoiser::set_parameters(std::span<const double> params) {
    if (params.size() != parameter_count()) {
        throw ShapeError("parameter vector has length " + std::to_string(params.size()) + ", model has " +
                         std::to_string(parameter_count()));
    }
    mlp_.unflatten(params.first(mlp_.parameter_count()));
    const auto emb = params.subspan(embedding_offset());
    std::copy(emb.begin(), emb.end(), embeddings_.values().begin());
}

LossGradient ConditionalDenoiser::loss_gradient(const TrainingBatch& batch) const {
    const std::size_t n = batch.latents.rows();
    if (batch.targets.rows() != n || batch.targets.cols() != data_dim() || batch.weights.size() != n) {
        throw ShapeError("training batch fields disagree in shape");
    }
    Mlp::Tape tape;
    const Matrix pred = mlp_.forward_batch(assemble_inputs(batch.latents, batch.tokens, batch.steps), tape);
    const std::size_t d = data_dim();
    Matrix out_grad(n, d);
    double loss = 0.0;
    for (std::size_t i = 0; i < n; ++i) {
        const double w = batch.weights[i];
        for (std::size_t j = 0; j < d; ++j) {
            const double r = pred(i, j) - batch.targets(i, j);
            loss += w * r * r / static_cast<double>(d);
            out_grad(i, j) = 2.0 * w * r / static_cast<double>(d);
        }
    }
    if (!std::isfinite(loss)) {
        throw NumericError("non-finite loss");
    }
    const auto grads = mlp_.backward_batch(tape, out_grad);
    LossGradient result{loss, Vector(parameter_count(), 0.0)};
    std::copy(grads.params.begin(), grads.params.end(), result.grad.begin());
    // Gradient w.r.t. the embedding slice of each input row lands on that row's token.
    const std::size_t e = embedding_dim();
    for (std::size_t i = 0; i < n; ++i) {
        const auto in_grad = grads.input.row(i);
        const std::size_t base = embedding_offset() + batch.tokens[i] * e;
        for (std::size_t k = 0; k < e; ++k) {
            result.grad[base + k] += in_grad[d + k];
        }
    }
    return result;
}

bool ConditionalDenoiser::compatible_with(const ConditionalDenoiser& other) const {
    if (mlp_.layers().size() != other.mlp_.layers().size()) {
        return false;
    }
    for (std::size_t i = 0; i < mlp_.layers().size(); ++i) {
        if (mlp_.layers()[i].weight.rows() != other.mlp_.layers()[i].weight.rows() ||
            mlp_.layers()[i].weight.cols() != other.mlp_.layers()[i].weight.cols()) {
            return false;
        }
    }
    return embedding_dim() == other.embedding_dim() && time_dim_ == other.time_dim_ &&
           concept_count_ == other.concept_count_ && schedule_ == other.schedule_;
}

std::vector<char> TrainableSet::resolve(const ConditionalDenoiser& model) const {
    std::vector<char> mask(model.parameter_count(), 0);
    const Mlp& mlp = model.mlp();
    auto mark = [&](std::size_t begin, std::size_t count) {
        std::fill_n(mask.begin() + static_cast<std::ptrdiff_t>(begin), count, char{1});
    };
    if (all_mlp) {
        mark(0, mlp.parameter_count());
    }
    for (std::size_t layer : mlp_layers) {
        if (layer >= mlp.layers().size()) {
            throw PreconditionError("trainable set names mlp layer " + std::to_string(layer) + " which does not exist");
        }
        mark(mlp.layer_offset(layer), mlp.layer_parameter_count(layer));
    }
    if (all_embeddings) {
        mark(model.embedding_offset(), model.embeddings().size());
    }
    for (std::size_t row : embedding_rows) {
        model.require_token(row);
        mark(model.embedding_offset() + row * model.embedding_dim(), model.embedding_dim());
    }
    if (std::find(mask.begin(), mask.end(), char{1}) == mask.end()) {
        throw PreconditionError("trainable set selects no parameters");
    }
    return mask;
}

FineTuneResult fine_tune(ConditionalDenoiser model, const FineTuneOptions& options, std::uint64_t seed,
                         const BatchSource& source) {
    if (options.steps < 0) {
        throw PreconditionError("step count must be non-negative");
    }
    FineTuneResult result{std::move(model), {}};
    if (options.steps == 0) {
        return result;
    }
    const std::vector<char> mask = options.trainable.resolve(result.model);
    Vector params = result.model.parameters();
    AdamState adam(params.size(), options.adam);
    Rng rng(seed);
    result.loss_trace.reserve(static_cast<std::size_t>(options.steps));
    for (int step = 0; step < options.steps; ++step) {
        const TrainingBatch batch = source(rng, result.model);
        LossGradient lg;
        try {
            lg = result.model.loss_gradient(batch);
        } catch (const NumericError& e) {
            throw NumericError(std::string(e.what()) + " at optimization step " + std::to_string(step + 1));
        }
        for (std::size_t i = 0; i < mask.size(); ++i) {
            if (!mask[i]) {
                lg.grad[i] = 0.0;
            }
        }
        adam_step(adam, params, lg.grad);
        result.model.set_parameters(params);
        result.loss_trace.push_back(lg.loss);
    }
    return result;
}

TrainingBatch noising_batch(const ConditionalDenoiser& model, const Matrix& x0, std::vector<std::size_t> tokens,
                            double weight_each, Rng& rng) {
    const std::size_t n = x0.rows();
    const std::size_t d = model.data_dim();
    const auto& schedule = model.schedule();
    TrainingBatch batch{Matrix(n, d), std::move(tokens), std::vector<int>(n), Matrix(n, d), Vector(n, weight_each)};
    Vector eps(d);
    for (std::size_t i = 0; i < n; ++i) {
        const int t = 1 + static_cast<int>(rng.below(static_cast<std::uint64_t>(schedule.steps)));
        for (double& v : eps) {
            v = rng.normal();
        }
        const Vector z = forward_noise(schedule, x0.row(i), t, eps);
        std::copy(z.begin(), z.end(), batch.latents.row(i).begin());
        std::copy(eps.begin(), eps.end(), batch.targets.row(i).begin());
        batch.steps[i] = t;
    }
    return batch;
}

double running_loss(std::span<const double> trace, std::size_t window) {
    if (trace.empty()) {
        return 0.0;
    }
    const std::size_t k = std::min(window, trace.size());
    double total = 0.0;
    for (std::size_t i = trace.size() - k; i < trace.size(); ++i) {
        total += trace[i];
    }
    return total / static_cast<double>(k);
}

FineTuneResult train(const ConditionalDenoiser& model, const ConceptUniverse& universe, const TrainConfig& config) {
    if (universe.size() < 2) {
        throw PreconditionError("training needs at least two concepts");
    }
    if (universe.size() != model.concept_count() || universe.dim() != model.data_dim()) {
        throw ArchitectureError("universe does not match model concept count / data dimension");
    }
    if (config.batch_size == 0) {
        throw PreconditionError("batch size must be positive");
    }
    const FineTuneOptions options{config.steps, AdamHyper{.lr = config.lr}, config.trainable};
    const std::size_t n = config.batch_size;
    auto source = [&](Rng& rng, const ConditionalDenoiser&) {
        Matrix x0(n, universe.dim());
        std::vector<std::size_t> tokens(n);
        for (std::size_t i = 0; i < n; ++i) {
            const std::size_t c = universe.draw_concept(rng);
            universe.draw(c, rng, x0.row(i));
            tokens[i] = rng.uniform() < config.p_uncond ? model.null_token() : c;
        }
        return noising_batch(model, x0, std::move(tokens), 1.0 / static_cast<double>(n), rng);
    };
    return fine_tune(model, options, config.seed, source);
}

Matrix guided_prediction_batch(const ConditionalDenoiser& model, const Matrix& z, std::span<const int> steps,
                               std::size_t concept_token, std::size_t anchor_token, double scale) {
    const std::size_t n = z.rows();
    Matrix anchor = model.predict_batch(z, std::vector<std::size_t>(n, anchor_token), steps);
    if (scale == 0.0) {
        return anchor;
    }
    const Matrix cond = model.predict_batch(z, std::vector<std::size_t>(n, concept_token), steps);
    const Matrix uncond = model.predict_batch(z, std::vector<std::size_t>(n, model.null_token()), steps);
    auto out = anchor.values();
    const auto c = cond.values();
    const auto u = uncond.values();
    for (std::size_t i = 0; i < out.size(); ++i) {
        out[i] += scale * (c[i] - u[i]);
    }
    return anchor;
}

Matrix sample(const ConditionalDenoiser& model, std::size_t token, std::size_t n, std::uint64_t seed) {
    model.require_token(token);
    const std::size_t d = model.data_dim();
    const auto& schedule = model.schedule();
    std::vector<Rng> streams;
    streams.reserve(n);
    Matrix z(n, d);
    for (std::size_t i = 0; i < n; ++i) {
        streams.push_back(Rng::stream(seed, i));
        for (double& v : z.row(i)) {
            v = streams.back().normal();
        }
    }
    const std::vector<std::size_t> tokens(n, token);
    for (int t = schedule.steps; t >= 1; --t) {
        const std::vector<int> steps(n, t);
        const Matrix eps = model.predict_batch(z, tokens, steps);
        const double beta = schedule.beta(t);
        const double inv_sqrt_alpha = 1.0 / std::sqrt(schedule.alpha(t));
        const double eps_coef = beta / std::sqrt(1.0 - schedule.alpha_bar(t));
        const double sigma = std::sqrt(beta);
        for (std::size_t i = 0; i < n; ++i) {
            auto row = z.row(i);
            for (std::size_t j = 0; j < d; ++j) {
                row[j] = inv_sqrt_alpha * (row[j] - eps_coef * eps(i, j));
                if (t > 1) {
                    row[j] += sigma * streams[i].normal();
                }
            }
        }
    }
    require_finite(z.values(), "samples");
    return z;
}

} // namespace eralab
