#include <cmath>
#include <limits>

#include "doctest.h"

#include "eralab/diffusion.hpp"
#include "eralab/erasure.hpp"
#include "eralab/errors.hpp"
#include "eralab/pipeline.hpp"
#include "eralab/probes.hpp"

using namespace eralab;

namespace {

DenoiserShape small_shape() {
    DenoiserShape s;
    s.hidden = {16, 16};
    s.steps = 20;
    return s;
}

const ConditionalDenoiser& small_model() {
    static const ConditionalDenoiser m = [] {
        TrainConfig cfg;
        cfg.steps = 100;
        cfg.batch_size = 32;
        cfg.seed = 4;
        return train(ConditionalDenoiser::create(small_shape(), 4), ConceptUniverse::reference(), cfg).model;
    }();
    return m;
}

ErasureConfig quick_erasure() {
    ErasureConfig e;
    e.target = 1;
    e.steps = 5;
    e.batch_size = 16;
    e.latent_pool = 16;
    e.seed = 3;
    return e;
}

Matrix random_latents(std::size_t n, std::uint64_t seed) {
    Rng rng(seed);
    Matrix z(n, 2);
    for (double& v : z.values()) {
        v = rng.normal();
    }
    return z;
}

// 1-d stub: output = embedding value, so eps(z, token, t) is the token's row.
ConditionalDenoiser scalar_stub(double concept_value, double anchor_value, double null_value) {
    Matrix w(1, 4);
    w(0, 1) = 1.0;
    Matrix emb(3, 1, Vector{concept_value, anchor_value, null_value});
    return ConditionalDenoiser(make_schedule(4, 0.1, 0.2), Mlp({DenseLayer{w, Vector{0.0}}}), emb, 2, 2);
}

} // namespace

TEST_CASE("param_delta: identities and arithmetic") {
    const Vector a(1000, 0.5);
    const ParamDelta same = param_delta(a, a);
    CHECK(same.fraction_updated == 0.0);
    CHECK(same.mean_abs_change == 0.0);
    CHECK(same.relative_frobenius_change == 0.0);

    Vector b = a;
    b[17] += 1e-3;
    const ParamDelta d = param_delta(a, b, 1e-6);
    CHECK(d.fraction_updated == doctest::Approx(0.001));
    CHECK(d.mean_abs_change == doctest::Approx(1e-6));
    const ParamDelta r = param_delta(b, a, 1e-6);
    CHECK(r.mean_abs_change == d.mean_abs_change);
    CHECK(r.relative_frobenius_change == d.relative_frobenius_change);
    CHECK_THROWS_AS(param_delta(a, Vector(3)), ShapeError);
}

TEST_CASE("esd: zero guidance targets the unconditional prediction") {
    const ConditionalDenoiser& m = small_model();
    const Matrix z = random_latents(8, 1);
    const std::vector<int> steps(8, 7);
    const Matrix target = guided_prediction_batch(m, z, steps, 1, m.null_token(), -0.0);
    const std::vector<std::size_t> nulls(8, m.null_token());
    CHECK(target == m.predict_batch(z, nulls, steps));
}

TEST_CASE("esd: zero steps is the identity") {
    ErasureConfig e = quick_erasure();
    e.steps = 0;
    const ErasureOutcome out = erase_esd(small_model(), e);
    CHECK(out.model == small_model());
    CHECK(out.delta.fraction_updated == 0.0);
}

TEST_CASE("esd: mask respected and deterministic") {
    const ErasureConfig e = quick_erasure();
    const ErasureOutcome a = erase_esd(small_model(), e);
    const ErasureOutcome b = erase_esd(small_model(), e);
    CHECK(a.model == b.model);
    CHECK(a.loss_trace == b.loss_trace);
    const auto mask = TrainableSet{false, {0}, false, {e.target}}.resolve(small_model());
    const Vector before = small_model().parameters();
    const Vector after = a.model.parameters();
    for (std::size_t p = 0; p < before.size(); ++p) {
        if (!mask[p]) {
            CHECK(before[p] == after[p]);
        }
    }
    CHECK(a.delta.fraction_updated > 0.0);

    ErasureConfig full = e;
    full.trainable = TrainableSet::mlp_and_rows({e.target});
    const ErasureOutcome c = erase_esd(small_model(), full);
    CHECK(c.model.embeddings().row(0)[0] == small_model().embeddings().row(0)[0]);
}

TEST_CASE("projection: ridge solution") {
    const ConditionalDenoiser& m = small_model();
    ErasureConfig e = quick_erasure();
    e.method = ErasureMethod::projection_edit;

    e.ridge = 0.0;
    const ErasureOutcome zero = erase(m, e);
    const Matrix z = random_latents(32, 2);
    std::vector<int> steps;
    for (int i = 0; i < 32; ++i) {
        steps.push_back(1 + i % 20);
    }
    const std::vector<std::size_t> target(32, 1);
    const std::vector<std::size_t> anchor(32, m.null_token());
    CHECK(zero.model.predict_batch(z, target, steps) == zero.model.predict_batch(z, anchor, steps));
    CHECK(zero.model.mlp() == m.mlp());

    // exactly one embedding row changes
    std::size_t changed_rows = 0;
    for (std::size_t r = 0; r < m.token_count(); ++r) {
        const auto a = m.embeddings().row(r);
        const auto b = zero.model.embeddings().row(r);
        changed_rows += std::equal(a.begin(), a.end(), b.begin()) ? 0 : 1;
    }
    CHECK(changed_rows == 1);

    e.ridge = 1.0;
    const ErasureOutcome mid = erase(m, e);
    for (std::size_t k = 0; k < m.embedding_dim(); ++k) {
        const double expected = 0.5 * (m.embeddings()(1, k) + m.embeddings()(m.null_token(), k));
        CHECK(mid.model.embeddings()(1, k) == doctest::Approx(expected).epsilon(1e-15));
    }

    e.ridge = std::numeric_limits<double>::infinity();
    CHECK(erase(m, e).model == m);

    e.anchor = 3;
    e.ridge = 0.0;
    const ErasureOutcome to_concept = erase(m, e);
    const auto r1 = to_concept.model.embeddings().row(1);
    const auto r3 = m.embeddings().row(3);
    CHECK(std::equal(r1.begin(), r1.end(), r3.begin()));
}

TEST_CASE("erasure config errors") {
    ErasureConfig e = quick_erasure();
    e.target = 9;
    CHECK_THROWS_AS(erase(small_model(), e), PreconditionError);
    CHECK(parse_erasure_method("esd") == ErasureMethod::esd_style);
    CHECK(parse_erasure_method("projection") == ErasureMethod::projection_edit);
    CHECK_THROWS(parse_erasure_method("mace"));
}

TEST_CASE("reverse target: arithmetic, cancellation and affinity") {
    const ConditionalDenoiser stub = scalar_stub(2.0, 1.0, 0.5);
    const Vector z{0.3};
    CHECK(build_reverse_target(stub, z, 0, 1, 2, 0.8)[0] == doctest::Approx(2.2).epsilon(1e-15));
    CHECK(build_reverse_target(stub, z, 0, 1, 2, 0.0)[0] == 1.0);

    const ConditionalDenoiser flat = scalar_stub(0.5, 1.0, 0.5);
    CHECK(build_reverse_target(flat, z, 0, 1, 2, 3.7)[0] == 1.0);

    const ConditionalDenoiser& m = small_model();
    const Vector zz{0.4, -1.1};
    const Vector t0 = build_reverse_target(m, zz, 2, m.null_token(), 9, 0.0);
    const Vector ta = build_reverse_target(m, zz, 2, m.null_token(), 9, 0.5);
    const Vector tb = build_reverse_target(m, zz, 2, m.null_token(), 9, 0.25);
    const Vector tab = build_reverse_target(m, zz, 2, m.null_token(), 9, 0.75);
    for (std::size_t i = 0; i < 2; ++i) {
        CHECK(ta[i] + tb[i] - t0[i] == doctest::Approx(tab[i]).epsilon(1e-14));
    }
    CHECK(t0 == m.predict(zz, m.null_token(), 9));
}

TEST_CASE("gradient-guided probe: identity, determinism and compatibility") {
    const ConditionalDenoiser& m = small_model();
    const ConditionalDenoiser erased = erase_esd(m, quick_erasure()).model;
    const ConditionalDenoiser erased_copy = erased;
    const ConditionalDenoiser guide_copy = m;

    GradientProbeConfig g;
    g.target = 1;
    g.steps = 0;
    g.latent_pool = 16;
    g.batch_size = 16;
    const ProbeOutcome zero = probe_gradient_guided(erased, m, g);
    CHECK(zero.model == erased);
    CHECK(zero.delta == ParamDelta{});

    g.steps = 5;
    const ProbeOutcome a = probe_gradient_guided(erased, m, g);
    const ProbeOutcome b = probe_gradient_guided(erased, m, g);
    CHECK(a.model == b.model);
    CHECK(a.delta.fraction_updated > 0.0);
    CHECK(erased == erased_copy);
    CHECK(m == guide_copy);

    DenoiserShape other = small_shape();
    other.hidden = {8, 8};
    CHECK_THROWS_AS(probe_gradient_guided(erased, ConditionalDenoiser::create(other, 1), g), ArchitectureError);
}

TEST_CASE("bind_rare_token") {
    ConditionalDenoiser m = small_model();
    const Matrix before = m.embeddings();
    Rng rng(5);
    const std::size_t t1 = bind_rare_token(m, TokenInit::anchor, 2, rng);
    CHECK(m.token_count() == before.rows() + 1);
    for (std::size_t r = 0; r < before.rows(); ++r) {
        const auto a = before.row(r);
        const auto b = m.embeddings().row(r);
        CHECK(std::equal(a.begin(), a.end(), b.begin()));
    }
    for (std::size_t k = 0; k < m.embedding_dim(); ++k) {
        CHECK(std::abs(m.embeddings()(t1, k) - m.embeddings()(2, k)) <= 0.3);
    }
    const std::size_t t2 = bind_rare_token(m, TokenInit::random, 2, rng);
    CHECK(t2 != t1);
    CHECK(m.token_count() == before.rows() + 2);
}

TEST_CASE("instance personalization: identity and determinism") {
    const ConditionalDenoiser& m = small_model();
    const ConditionalDenoiser erased = erase_esd(m, quick_erasure()).model;
    PersonalizationConfig p;
    p.reference = sample_concept(ConceptUniverse::reference(), 1, 16, 3);
    p.class_concept = 2;
    p.prior_weight = 0.0;
    p.steps = 0;
    p.prior_size = 16;
    p.instance_batch = 8;
    p.prior_batch = 8;
    const ProbeOutcome zero = probe_instance_personalization(erased, p);
    REQUIRE(zero.token.has_value());
    CHECK(*zero.token == erased.token_count());
    CHECK(zero.model.mlp() == erased.mlp());
    CHECK(shared_param_delta(erased, zero.model) == ParamDelta{});
    CHECK(zero.delta.fraction_updated == 0.0);

    p.prior_weight = 1.0;
    p.steps = 5;
    const ProbeOutcome a = probe_instance_personalization(erased, p);
    const ProbeOutcome b = probe_instance_personalization(erased, p);
    CHECK(a.model == b.model);
    CHECK(a.loss_trace == b.loss_trace);
    CHECK(a.model.mlp() != erased.mlp());

    p.reference = Matrix();
    CHECK_THROWS_AS(probe_instance_personalization(erased, p), PreconditionError);
}
