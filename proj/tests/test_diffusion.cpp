#include <algorithm>
#include <cmath>
#include <numbers>
#include <vector>

#include "doctest.h"

#include "eralab/concepts.hpp"
#include "eralab/diffusion.hpp"
#include "eralab/errors.hpp"
#include "eralab/rng.hpp"
#include "oracles.hpp"

using namespace eralab;

namespace {

DenoiserShape small_shape() {
    DenoiserShape s;
    s.hidden = {16, 16};
    s.steps = 20;
    return s;
}

TrainingBatch random_batch(const ConditionalDenoiser& model, std::size_t n, Rng& rng) {
    TrainingBatch b;
    b.latents = Matrix(n, model.data_dim());
    b.targets = Matrix(n, model.data_dim());
    for (double& v : b.latents.values()) {
        v = rng.normal();
    }
    for (double& v : b.targets.values()) {
        v = rng.normal();
    }
    for (std::size_t i = 0; i < n; ++i) {
        b.tokens.push_back(rng.below(model.token_count()));
        b.steps.push_back(1 + static_cast<int>(rng.below(static_cast<std::uint64_t>(model.schedule().steps))));
        b.weights.push_back(0.1 + rng.uniform());
    }
    return b;
}

} // namespace

TEST_CASE("schedule: single step") {
    const NoiseSchedule s = make_schedule(1, 0.5, 0.5);
    CHECK(s.alpha_bars == Vector{0.5});
}

TEST_CASE("schedule: reference alpha_bar against direct product") {
    const NoiseSchedule s = make_schedule(100, 1e-4, 0.02);
    const double expected = oracle::alpha_bar(100, 1e-4, 0.02, 100);
    CHECK(s.alpha_bar(100) == doctest::Approx(expected).epsilon(1e-12));
    CHECK(std::abs(s.alpha_bar(100) - 0.366) <= 0.01);
    CHECK(s.beta(1) == doctest::Approx(1e-4));
    CHECK(s.beta(100) == doctest::Approx(0.02));
    for (int t = 2; t <= 100; ++t) {
        CHECK(s.alpha_bar(t) < s.alpha_bar(t - 1));
    }
}

TEST_CASE("schedule: invalid inputs") {
    CHECK_THROWS_AS(make_schedule(0, 0.1, 0.2), PreconditionError);
    CHECK_THROWS_AS(make_schedule(10, 0.3, 0.2), PreconditionError);
    CHECK_THROWS_AS(make_schedule(10, 0.0, 0.2), PreconditionError);
}

TEST_CASE("forward_noise: endpoints and arithmetic") {
    NoiseSchedule s;
    s.steps = 2;
    s.betas = {0.0, 1.0};
    s.alphas = {1.0, 0.0};
    s.alpha_bars = {1.0, 0.0};
    const Vector x0{1.5, -2.0};
    const Vector eps{0.3, 0.7};
    CHECK(forward_noise(s, x0, 1, eps) == x0);
    CHECK(forward_noise(s, x0, 2, eps) == eps);

    const NoiseSchedule q = make_schedule(2, 0.5, 0.5); // alpha_bar(2) = 0.25
    const Vector z = forward_noise(q, Vector{1, 0}, 2, Vector{0, 1});
    CHECK(z[0] == doctest::Approx(0.5).epsilon(1e-15));
    CHECK(z[1] == doctest::Approx(0.8660254).epsilon(1e-7));
    CHECK_THROWS_AS(forward_noise(q, x0, 3, eps), PreconditionError);
}

TEST_CASE("forward_noise: second moment by Monte Carlo") {
    const NoiseSchedule s = make_schedule(100, 1e-4, 0.02);
    const Vector x0{2.0, -2.0};
    Rng rng(99);
    for (int t : {1, 30, 100}) {
        double sum = 0.0;
        const int n = 100000;
        for (int i = 0; i < n; ++i) {
            const Vector eps{rng.normal(), rng.normal()};
            sum += squared_norm(forward_noise(s, x0, t, eps));
        }
        const double abar = s.alpha_bar(t);
        const double expected = abar * squared_norm(x0) + (1 - abar) * 2.0;
        CHECK(std::abs(sum / n - expected) <= 0.05 * expected);
    }
}

TEST_CASE("time embedding frequencies") {
    const Vector e = time_embedding(25, 100, 8);
    for (std::size_t k = 0; k < 4; ++k) {
        const double w = 2 * std::numbers::pi * std::pow(2.0, static_cast<double>(k)) / 100.0;
        CHECK(e[2 * k] == doctest::Approx(std::sin(w * 25)));
        CHECK(e[2 * k + 1] == doctest::Approx(std::cos(w * 25)));
    }
}

TEST_CASE("denoiser: stub linear model reproduces the affine map") {
    // one layer, input [z(2), embedding(2), time(2)]
    const std::size_t K = 2;
    Matrix w(2, 6);
    for (std::size_t i = 0; i < 12; ++i) {
        w.values()[i] = 0.1 * static_cast<double>(i + 1);
    }
    Matrix emb(K + 1, 2, Vector{1, 0, 0, 1, -1, -1});
    const Vector bias{0.5, -0.5};
    ConditionalDenoiser m(make_schedule(4, 0.1, 0.2), Mlp({DenseLayer{w, bias}}), emb, K, 2);
    const Vector z{2.0, -1.0};
    const int t = 3;
    const Vector te = time_embedding(t, 4, 2);
    const Vector in{z[0], z[1], 0.0, 1.0, te[0], te[1]};
    const Vector out = m.predict(z, 1, t);
    for (std::size_t i = 0; i < 2; ++i) {
        double y = bias[i];
        for (std::size_t j = 0; j < 6; ++j) {
            y += w(i, j) * in[j];
        }
        CHECK(out[i] == doctest::Approx(y).epsilon(1e-14));
    }
    CHECK(out == m.predict(z, 1, t));
    CHECK(m.predict(z, 1, t) != m.predict(z, m.null_token(), t));
    CHECK_THROWS_AS(m.predict(z, 3, t), PreconditionError);
}

TEST_CASE("denoiser: batch prediction matches single prediction") {
    const ConditionalDenoiser m = ConditionalDenoiser::create(small_shape(), 4);
    Rng rng(2);
    const TrainingBatch b = random_batch(m, 6, rng);
    const Matrix p = m.predict_batch(b.latents, b.tokens, b.steps);
    for (std::size_t r = 0; r < 6; ++r) {
        const Vector single = m.predict(b.latents.row(r), b.tokens[r], b.steps[r]);
        for (std::size_t c = 0; c < 2; ++c) {
            CHECK(std::abs(p(r, c) - single[c]) <= 1e-13);
        }
    }
}

TEST_CASE("denoiser: loss gradient matches finite differences") {
    ConditionalDenoiser m = ConditionalDenoiser::create(small_shape(), 6);
    Rng rng(3);
    const TrainingBatch b = random_batch(m, 8, rng);
    const LossGradient lg = m.loss_gradient(b);
    Vector params = m.parameters();
    const double h = 1e-5;
    double worst = 0.0;
    std::vector<std::size_t> coords;
    for (std::size_t p = 0; p < params.size(); p += 7) {
        coords.push_back(p);
    }
    for (std::size_t p = m.embedding_offset(); p < params.size(); ++p) {
        coords.push_back(p);
    }
    for (std::size_t p : coords) {
        const double saved = params[p];
        params[p] = saved + h;
        m.set_parameters(params);
        const double up = m.loss_gradient(b).loss;
        params[p] = saved - h;
        m.set_parameters(params);
        const double down = m.loss_gradient(b).loss;
        params[p] = saved;
        const double fd = (up - down) / (2 * h);
        worst = std::max(worst, std::abs(fd - lg.grad[p]) / std::max({std::abs(fd), std::abs(lg.grad[p]), 1e-6}));
    }
    CHECK(worst <= 1e-4);
}

TEST_CASE("train: zero steps is the identity and traces are reproducible") {
    const ConditionalDenoiser m = ConditionalDenoiser::create(small_shape(), 1);
    TrainConfig cfg;
    cfg.steps = 0;
    CHECK(train(m, ConceptUniverse::reference(), cfg).model == m);

    cfg.steps = 30;
    cfg.batch_size = 32;
    cfg.seed = 9;
    const FineTuneResult a = train(m, ConceptUniverse::reference(), cfg);
    const FineTuneResult b = train(m, ConceptUniverse::reference(), cfg);
    CHECK(a.loss_trace == b.loss_trace);
    CHECK(a.model == b.model);
    CHECK(a.loss_trace.size() == 30);
}

TEST_CASE("train: parameters outside the mask are untouched") {
    const ConditionalDenoiser m = ConditionalDenoiser::create(small_shape(), 1);
    TrainConfig cfg;
    cfg.steps = 20;
    cfg.batch_size = 32;
    cfg.trainable = TrainableSet{false, {1}, false, {2}};
    const ConditionalDenoiser out = train(m, ConceptUniverse::reference(), cfg).model;
    const Vector a = m.parameters();
    const Vector b = out.parameters();
    const auto mask = cfg.trainable.resolve(m);
    std::size_t changed = 0;
    for (std::size_t p = 0; p < a.size(); ++p) {
        if (!mask[p]) {
            CHECK(a[p] == b[p]);
        } else if (a[p] != b[p]) {
            ++changed;
        }
    }
    CHECK(changed > 0);
    CHECK(out.mlp().layers()[0] == m.mlp().layers()[0]);
}

TEST_CASE("train: universe mismatch is an architecture error") {
    const ConditionalDenoiser m = ConditionalDenoiser::create(small_shape(), 1);
    TrainConfig cfg;
    cfg.steps = 1;
    CHECK_THROWS_AS(train(m, ConceptUniverse::with_absent_concept(), cfg), ArchitectureError);
}

TEST_CASE("sample: deterministic, batch independent, same distribution across seeds") {
    const ConditionalDenoiser m = ConditionalDenoiser::create(DenoiserShape{}, 2);
    const Matrix a = sample(m, 1, 200, 5);
    CHECK(a == sample(m, 1, 200, 5));
    const Matrix head = sample(m, 1, 50, 5);
    for (std::size_t r = 0; r < 50; ++r) {
        CHECK(head(r, 0) == a(r, 0));
        CHECK(head(r, 1) == a(r, 1));
    }
    const Matrix b = sample(m, 1, 200, 6);
    CHECK(a != b);
    // the two sets come from the same model; compare with the spread of
    // independent same-size sets from that model
    double worst = 0.0;
    for (std::uint64_t s = 0; s < 10; ++s) {
        worst = std::max(worst, energy_distance(sample(m, 1, 200, 100 + 2 * s), sample(m, 1, 200, 101 + 2 * s)));
    }
    CHECK(energy_distance(a, b) <= 2.0 * worst);
}

TEST_CASE("sample: untrained model is near chance") {
    const ConceptUniverse u = ConceptUniverse::reference();
    double mean = 0.0;
    for (std::uint64_t seed = 1; seed <= 3; ++seed) {
        const ConditionalDenoiser m = ConditionalDenoiser::create(DenoiserShape{}, seed);
        for (std::size_t c = 0; c < 4; ++c) {
            mean += accuracy(u, sample(m, c, 500, seed), c);
        }
    }
    mean /= 12.0;
    CHECK(std::abs(mean - 0.25) <= 0.10);
}
