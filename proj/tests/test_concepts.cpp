#include <cmath>
#include <numeric>

#include "doctest.h"

#include "eralab/concepts.hpp"
#include "eralab/errors.hpp"

using namespace eralab;

namespace {

Matrix points(std::initializer_list<std::initializer_list<double>> rows) {
    Matrix m(rows.size(), rows.begin()->size());
    std::size_t r = 0;
    for (const auto& row : rows) {
        std::size_t c = 0;
        for (double v : row) {
            m(r, c++) = v;
        }
        ++r;
    }
    return m;
}

} // namespace

TEST_CASE("sample_dataset: structure, determinism and CLT bound") {
    const ConceptUniverse u = ConceptUniverse::reference();
    const Dataset one = sample_dataset(u, 1, 3);
    CHECK(one.points.rows() == 4);
    CHECK(one.labels == std::vector<std::size_t>{0, 1, 2, 3});

    const Dataset a = sample_dataset(u, 4000, 8);
    const Dataset b = sample_dataset(u, 4000, 8);
    CHECK(a.points == b.points);
    for (std::size_t c = 0; c < 4; ++c) {
        double sx = 0.0;
        double sy = 0.0;
        std::size_t n = 0;
        for (std::size_t i = 0; i < a.labels.size(); ++i) {
            if (a.labels[i] == c) {
                sx += a.points(i, 0);
                sy += a.points(i, 1);
                ++n;
            }
        }
        CHECK(n == 4000);
        const double tol = 3.0 * std::sqrt(0.1) / std::sqrt(4000.0);
        CHECK(std::abs(sx / n - u.component(c).mean[0]) <= tol);
        CHECK(std::abs(sy / n - u.component(c).mean[1]) <= tol);
    }
}

TEST_CASE("classify: means, ties and a worked point") {
    const ConceptUniverse u = ConceptUniverse::reference();
    for (std::size_t c = 0; c < 4; ++c) {
        CHECK(classify(u, u.component(c).mean) == c);
    }
    const ConceptUniverse pair({GaussianComponent{{-2, -2}, {0.1, 0.1}, 1.0},
                                GaussianComponent{{2, 2}, {0.1, 0.1}, 1.0}});
    CHECK(classify(pair, Vector{0, 0}) == 0);
    CHECK(classify(pair, Vector{1.9, 2.1}) == 1);
}

TEST_CASE("classify: invariant to a common shift of the log-priors") {
    const ConceptUniverse a({GaussianComponent{{0, 0}, {1, 1}, 0.2}, GaussianComponent{{1.5, 0}, {1, 1}, 0.8}});
    const ConceptUniverse b({GaussianComponent{{0, 0}, {1, 1}, 2.0}, GaussianComponent{{1.5, 0}, {1, 1}, 8.0}});
    for (double x = -2.0; x <= 4.0; x += 0.05) {
        CHECK(classify(a, Vector{x, 0.3}) == classify(b, Vector{x, 0.3}));
    }
}

TEST_CASE("accuracy and confusion rows") {
    const ConceptUniverse u = ConceptUniverse::reference();
    const Vector m0 = u.component(0).mean;
    const Vector m2 = u.component(2).mean;
    const Matrix at_target = points({{m0[0], m0[1]}, {m0[0], m0[1]}});
    CHECK(accuracy(u, at_target, 0) == 1.0);
    const Matrix far = points({{m2[0], m2[1]}, {m2[0], m2[1]}});
    CHECK(accuracy(u, far, 0) == 0.0);
    const Matrix mix = points({{m0[0], m0[1]}, {m0[0], m0[1]}, {m0[0], m0[1]}, {m2[0], m2[1]}});
    CHECK(accuracy(u, mix, 0) == 0.75);
    const Vector row = confusion_row(u, mix);
    CHECK(std::accumulate(row.begin(), row.end(), 0.0) == doctest::Approx(1.0));
    CHECK(row[0] == 0.75);
    CHECK(row[2] == 0.25);
}

TEST_CASE("alignment score calibration") {
    const ConceptUniverse u = ConceptUniverse::reference();
    for (std::size_t c = 0; c < 4; ++c) {
        const AlignmentScore s = alignment_score(u, sample_concept(u, c, 5000, 40 + c), c);
        CHECK(std::abs(s.calibrated - kAlignmentReference) <= 1.0);
    }
    const Vector m0 = u.component(0).mean;
    const Vector m3 = u.component(3).mean;
    const double at_mean = alignment_score(u, points({{m0[0], m0[1]}}), 0).calibrated;
    const double far = alignment_score(u, points({{m3[0], m3[1]}}), 0).calibrated;
    CHECK(far < kAlignmentReference - 50.0);
    // the mean maximizes the likelihood; any other point scores lower
    CHECK(at_mean > alignment_score(u, points({{m0[0] + 0.01, m0[1]}}), 0).calibrated);
    // one unit is one nat: at the mean the gap to the expectation is d/2
    CHECK(at_mean - kAlignmentReference == doctest::Approx(1.0));
}

TEST_CASE("energy distance: identities and worked example") {
    const Matrix a = points({{0, 0}});
    const Matrix b = points({{3, 4}});
    CHECK(energy_distance(a, b) == doctest::Approx(10.0));
    const Matrix s = points({{0, 1}, {2, -1}, {0.5, 0.5}});
    const Matrix t = points({{1, 1}, {-2, 0}});
    CHECK(energy_distance(s, s) == doctest::Approx(0.0).epsilon(1e-15));
    CHECK(energy_distance(s, t) == doctest::Approx(energy_distance(t, s)).epsilon(1e-14));
    CHECK(energy_distance(s, t) >= 0.0);
}

TEST_CASE("same-distribution threshold exceeds typical same-source distances") {
    const ConceptUniverse u = ConceptUniverse::reference();
    const double thr = same_distribution_threshold(u, 1, 200, 7);
    CHECK(thr > 0.0);
    CHECK(energy_distance(sample_concept(u, 1, 200, 900), sample_concept(u, 1, 200, 901)) < thr);
    CHECK(energy_distance(sample_concept(u, 1, 200, 900), sample_concept(u, 2, 200, 901)) > thr);
}

TEST_CASE("universe with absent concept") {
    const ConceptUniverse u = ConceptUniverse::with_absent_concept();
    CHECK(u.size() == 5);
    CHECK(u.component(4).mean == Vector{8, 8});
}
