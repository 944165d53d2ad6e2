#include "eralab/concepts.hpp"

#include <algorithm>
#include <cmath>
#include <numbers>
#include <string>

#include "eralab/errors.hpp"

namespace eralab {

ConceptUniverse::ConceptUniverse(std::vector<GaussianComponent> components) : components_(std::move(components)) {
    if (components_.empty()) {
        throw ConfigError("universe needs at least one component");
    }
    const std::size_t d = components_.front().mean.size();
    double total = 0.0;
    for (std::size_t c = 0; c < components_.size(); ++c) {
        const auto& comp = components_[c];
        const auto where = "component " + std::to_string(c);
        if (comp.mean.size() != d || comp.variance.size() != d || d == 0) {
            throw ShapeError(where + ": mean/variance dimension mismatch");
        }
        if (!(comp.weight > 0.0)) {
            throw ConfigError(where + ": prior weight must be positive");
        }
        for (double v : comp.variance) {
            if (!(v > 0.0)) {
                throw ConfigError(where + ": variance entries must be positive");
            }
        }
        total += comp.weight;
    }
    if (std::abs(total - 1.0) > 1e-12) {
        for (auto& comp : components_) {
            comp.weight /= total;
        }
    }
}

ConceptUniverse ConceptUniverse::reference() {
    std::vector<GaussianComponent> comps;
    for (auto [x, y] : {std::pair{-2.0, -2.0}, {-2.0, 2.0}, {2.0, -2.0}, {2.0, 2.0}}) {
        comps.push_back({{x, y}, {0.1, 0.1}, 0.25});
    }
    return ConceptUniverse(std::move(comps));
}

ConceptUniverse ConceptUniverse::with_absent_concept() {
    std::vector<GaussianComponent> comps = reference().components();
    comps.push_back({{8.0, 8.0}, {0.1, 0.1}, 0.2});
    for (std::size_t c = 0; c < 4; ++c) {
        comps[c].weight = 0.2;
    }
    return ConceptUniverse(std::move(comps));
}

double ConceptUniverse::log_density(std::size_t c, std::span<const double> x) const {
    const auto& comp = component(c);
    if (x.size() != comp.mean.size()) {
        throw ShapeError("point dimension does not match universe");
    }
    double acc = 0.0;
    for (std::size_t i = 0; i < x.size(); ++i) {
        const double diff = x[i] - comp.mean[i];
        acc += diff * diff / comp.variance[i] + std::log(2.0 * std::numbers::pi * comp.variance[i]);
    }
    return -0.5 * acc;
}

void ConceptUniverse::draw(std::size_t c, Rng& rng, std::span<double> out) const {
    const auto& comp = component(c);
    for (std::size_t i = 0; i < out.size(); ++i) {
        out[i] = comp.mean[i] + std::sqrt(comp.variance[i]) * rng.normal();
    }
}

std::size_t ConceptUniverse::draw_concept(Rng& rng) const {
    double u = rng.uniform();
    for (std::size_t c = 0; c + 1 < components_.size(); ++c) {
        u -= components_[c].weight;
        if (u < 0.0) {
            return c;
        }
    }
    return components_.size() - 1;
}

Dataset sample_dataset(const ConceptUniverse& universe, std::size_t n_per_concept, std::uint64_t seed) {
    if (n_per_concept == 0) {
        throw PreconditionError("sample_dataset: n_per_concept must be >= 1");
    }
    Rng rng(seed);
    const std::size_t k = universe.size();
    Dataset data{Matrix(k * n_per_concept, universe.dim()), {}};
    data.labels.reserve(k * n_per_concept);
    for (std::size_t c = 0; c < k; ++c) {
        for (std::size_t i = 0; i < n_per_concept; ++i) {
            universe.draw(c, rng, data.points.row(data.labels.size()));
            data.labels.push_back(c);
        }
    }
    return data;
}

Matrix sample_concept(const ConceptUniverse& universe, std::size_t concept_index, std::size_t n, std::uint64_t seed) {
    Rng rng(seed);
    Matrix out(n, universe.dim());
    for (std::size_t i = 0; i < n; ++i) {
        universe.draw(concept_index, rng, out.row(i));
    }
    return out;
}

std::size_t classify(const ConceptUniverse& universe, std::span<const double> point) {
    std::size_t best = 0;
    double best_score = -INFINITY;
    for (std::size_t c = 0; c < universe.size(); ++c) {
        const double score = std::log(universe.component(c).weight) + universe.log_density(c, point);
        if (score > best_score) {
            best_score = score;
            best = c;
        }
    }
    return best;
}

Vector confusion_row(const ConceptUniverse& universe, const Matrix& samples) {
    if (samples.rows() == 0) {
        throw PreconditionError("confusion_row: empty sample set");
    }
    Vector counts(universe.size(), 0.0);
    for (std::size_t i = 0; i < samples.rows(); ++i) {
        counts[classify(universe, samples.row(i))] += 1.0;
    }
    for (double& v : counts) {
        v /= static_cast<double>(samples.rows());
    }
    return counts;
}

double accuracy(const ConceptUniverse& universe, const Matrix& samples, std::size_t target) {
    if (samples.rows() == 0) {
        throw PreconditionError("accuracy: empty sample set");
    }
    std::size_t hits = 0;
    for (std::size_t i = 0; i < samples.rows(); ++i) {
        hits += classify(universe, samples.row(i)) == target ? 1 : 0;
    }
    return static_cast<double>(hits) / static_cast<double>(samples.rows());
}

double expected_self_log_likelihood(const ConceptUniverse& universe, std::size_t c) {
    const auto& comp = universe.component(c);
    double acc = 0.0;
    for (double v : comp.variance) {
        acc += std::log(2.0 * std::numbers::pi * v) + 1.0;
    }
    return -0.5 * acc;
}

AlignmentScore alignment_score(const ConceptUniverse& universe, const Matrix& samples, std::size_t target) {
    if (samples.rows() == 0) {
        throw PreconditionError("alignment_score: empty sample set");
    }
    double total = 0.0;
    for (std::size_t i = 0; i < samples.rows(); ++i) {
        total += universe.log_density(target, samples.row(i));
    }
    const double mean = total / static_cast<double>(samples.rows());
    return {kAlignmentReference + (mean - expected_self_log_likelihood(universe, target)), mean};
}

namespace {

double mean_pairwise_distance(const Matrix& a, const Matrix& b) {
    double total = 0.0;
    for (std::size_t i = 0; i < a.rows(); ++i) {
        const auto x = a.row(i);
        for (std::size_t j = 0; j < b.rows(); ++j) {
            const auto y = b.row(j);
            double sq = 0.0;
            for (std::size_t k = 0; k < x.size(); ++k) {
                const double diff = x[k] - y[k];
                sq += diff * diff;
            }
            total += std::sqrt(sq);
        }
    }
    return total / (static_cast<double>(a.rows()) * static_cast<double>(b.rows()));
}

} // namespace

double energy_distance(const Matrix& a, const Matrix& b) {
    if (a.rows() == 0 || b.rows() == 0) {
        throw PreconditionError("energy_distance: empty sample set");
    }
    if (a.cols() != b.cols()) {
        throw ShapeError("energy_distance: dimension mismatch");
    }
    const double value = 2.0 * mean_pairwise_distance(a, b) - mean_pairwise_distance(a, a) - mean_pairwise_distance(b, b);
    // The V-statistic is nonnegative; rounding can leave a tiny negative residue.
    return std::max(0.0, value);
}

double same_distribution_threshold(const ConceptUniverse& universe, std::size_t concept_index, std::size_t n,
                                   std::uint64_t seed, std::size_t repeats, double margin) {
    double worst = 0.0;
    for (std::size_t r = 0; r < repeats; ++r) {
        Rng rng = Rng::stream(seed, r);
        Matrix a(n, universe.dim());
        Matrix b(n, universe.dim());
        for (std::size_t i = 0; i < n; ++i) {
            universe.draw(concept_index, rng, a.row(i));
            universe.draw(concept_index, rng, b.row(i));
        }
        worst = std::max(worst, energy_distance(a, b));
    }
    return margin * worst;
}

} // namespace eralab
