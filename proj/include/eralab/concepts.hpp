#pragma once

#include <cstddef>
#include <cstdint>
#include <span>
#include <vector>

#include "eralab/numerics.hpp"
#include "eralab/rng.hpp"

namespace eralab {

/// Axis-aligned Gaussian: one concept of the universe.
struct GaussianComponent {
    Vector mean;
    Vector variance; // diagonal of the covariance
    double weight = 1.0;

    friend bool operator==(const GaussianComponent&, const GaussianComponent&) = default;
};

/// Ground-truth labeled mixture. Concept index == component index.
class ConceptUniverse {
public:
    ConceptUniverse() = default;
    /// Prior weights must be positive; they are normalized to sum to one.
    explicit ConceptUniverse(std::vector<GaussianComponent> components);

    /// K = 4, means at (+-2, +-2), covariance 0.1 I, equal priors.
    static ConceptUniverse reference();

    /// Reference universe plus a fifth component at (8, 8) that no model is
    /// trained on.
    static ConceptUniverse with_absent_concept();

    std::size_t size() const { return components_.size(); }
    std::size_t dim() const { return components_.front().mean.size(); }
    const GaussianComponent& component(std::size_t c) const { return components_.at(c); }
    const std::vector<GaussianComponent>& components() const { return components_; }

    /// log N(x; mu_c, Sigma_c).
    double log_density(std::size_t c, std::span<const double> x) const;

    /// Draw one point of concept c into `out`.
    void draw(std::size_t c, Rng& rng, std::span<double> out) const;

    /// Concept chosen proportionally to the priors.
    std::size_t draw_concept(Rng& rng) const;

    friend bool operator==(const ConceptUniverse&, const ConceptUniverse&) = default;

private:
    std::vector<GaussianComponent> components_;
};

struct Dataset {
    Matrix points;
    std::vector<std::size_t> labels;
};

Dataset sample_dataset(const ConceptUniverse& universe, std::size_t n_per_concept, std::uint64_t seed);

/// Draws n points of one concept.
Matrix sample_concept(const ConceptUniverse& universe, std::size_t concept_index, std::size_t n, std::uint64_t seed);

/// Bayes-oracle label: argmax_c log w_c + log N(x; mu_c, Sigma_c), lowest index on ties.
std::size_t classify(const ConceptUniverse& universe, std::span<const double> point);

/// Fraction of rows classified as `target`.
double accuracy(const ConceptUniverse& universe, const Matrix& samples, std::size_t target);

/// Fraction of rows assigned to each concept; sums to one.
Vector confusion_row(const ConceptUniverse& universe, const Matrix& samples);

struct AlignmentScore {
    double calibrated = 0.0;
    double mean_log_likelihood = 0.0;
};

/// Score at which ground-truth samples of a concept land on average.
inline constexpr double kAlignmentReference = 30.0;

/// Mean log-likelihood under the target component, shifted so that the
/// expected value for ground-truth samples is kAlignmentReference. One unit
/// of score is one nat.
AlignmentScore alignment_score(const ConceptUniverse& universe, const Matrix& samples, std::size_t target);

/// Expected log N(x; mu_c, Sigma_c) for x drawn from component c.
double expected_self_log_likelihood(const ConceptUniverse& universe, std::size_t c);

/// V-statistic energy distance 2E|X-Y| - E|X-X'| - E|Y-Y'|.
double energy_distance(const Matrix& a, const Matrix& b);

/// Largest energy distance seen between independent ground-truth sample sets of
/// size n (over `repeats` pairs), scaled by `margin`. Sets of n model samples
/// from the same distribution should fall below this.
double same_distribution_threshold(const ConceptUniverse& universe, std::size_t concept_index, std::size_t n,
                                   std::uint64_t seed, std::size_t repeats = 20, double margin = 2.0);

} // namespace eralab
