#pragma once

#include <cstddef>
#include <cstdint>
#include <span>
#include <string_view>

#include "eralab/numerics.hpp"

namespace eralab {

enum class DriftSign { ascent, descent };

/// Two SDEs d theta = s * A theta dt + Sigma_i^{1/2} dW_i (s = +1 ascent,
/// -1 descent) started from the same point with independent noise.
struct SdeSpec {
    std::size_t dim = 2;
    Matrix drift;  // symmetric A, dim x dim
    DriftSign sign = DriftSign::descent;
    Vector noise1; // diagonal of Sigma_1
    Vector noise2; // diagonal of Sigma_2
    Vector initial; // zeros when empty
    double horizon = 1.0;
    double dt = 1e-3;
    std::size_t trials = 10000;
    std::uint64_t seed = 0;
    // Brownian increments are drawn on a grid dt / noise_substeps and summed per step,
    // so (dt, 2) and (dt / 2, 1) integrate the same noise path.
    int noise_substeps = 1;
    int save_every = 0; // steps between saved trace points; 0 keeps only t = 0 and t = T

    /// A = curvature * I and Sigma_i = (trace_i / dim) I.
    static SdeSpec isotropic(std::size_t dim, double curvature, DriftSign sign, double trace1, double trace2,
                             double horizon, double dt, std::size_t trials, std::uint64_t seed);

    /// Throws PreconditionError / ShapeError when the invariants do not hold.
    void validate() const;
};

/// Monte Carlo estimate of E|delta(t)|^2 at the saved times.
struct DeviationTrace {
    Vector times;
    Vector mean_sq;
    Vector std_error;
};

DeviationTrace simulate_pair(const SdeSpec& spec);

/// (s1 + s2) / (2L) (e^{2LT} - 1).
double bound_smooth(double lipschitz, double trace1, double trace2, double horizon);
/// (s1 + s2) / (2 mu) (1 - e^{-2 mu T}).
double bound_strongly_convex(double mu, double trace1, double trace2, double horizon);

enum class BoundKind { smooth, strongly_convex };

const char* to_string(BoundKind kind);
BoundKind parse_bound_kind(std::string_view name);
const char* to_string(DriftSign sign);
DriftSign parse_drift_sign(std::string_view name);

struct BoundReport {
    BoundKind kind = BoundKind::smooth;
    double empirical = 0.0;
    double std_error = 0.0;
    double bound = 0.0;
    double margin = 0.0; // bound + 3 SE - empirical
    bool satisfied = false;
    double lipschitz = 0.0; // largest |eigenvalue| of A
    double mu = 0.0;        // smallest eigenvalue of A
    double trace1 = 0.0;
    double trace2 = 0.0;
};

/// Simulates `spec` and compares E|delta(T)|^2 with the selected bound.
/// The strongly convex bound needs descent drift and mu > 0.
BoundReport verify_bound(const SdeSpec& spec, BoundKind kind);
BoundReport verify_bound(const SdeSpec& spec, BoundKind kind, const DeviationTrace& trace);

/// s(e) = -1/2 (e - center)^T H (e - center) with symmetric H.
struct QuadraticScore {
    Matrix curvature;
    Vector center;

    double value(std::span<const double> e) const;
    Vector gradient(std::span<const double> e) const;
};

struct AscentStep {
    double gain = 0.0;
    double lower_bound = 0.0;
    bool pass = false;
};

/// One normalized gradient step of length eta. Needs H positive semidefinite,
/// a non-zero gradient at e0 and 0 < eta < 2 |grad| / L_e.
AscentStep ascent_step_check(const QuadraticScore& score, std::span<const double> e0, double eta);

struct CurvatureAscent {
    Vector gains;           // s(e0 + eta v) - s(e0) per grid point
    Vector normalized_gain; // gain / eta^2
    double expected = 0.0;  // 1/2 v^T (Hessian of s) v
    bool pass = false;
};

/// Second-order ascent at a critical point along direction v with positive curvature.
CurvatureAscent curvature_ascent_check(const QuadraticScore& score, std::span<const double> e0,
                                       std::span<const double> direction, std::span<const double> etas);

} // namespace eralab
