#include "eralab/theory.hpp"

#include <Eigen/Eigenvalues>
#include <algorithm>
#include <cmath>
#include <sstream>
#include <string>

#include "eralab/errors.hpp"
#include "eralab/rng.hpp"

namespace eralab {

SdeSpec SdeSpec::isotropic(std::size_t dim, double curvature, DriftSign sign, double trace1, double trace2,
                           double horizon, double dt, std::size_t trials, std::uint64_t seed) {
    SdeSpec spec;
    spec.dim = dim;
    spec.drift = Matrix(dim, dim);
    for (std::size_t i = 0; i < dim; ++i) {
        spec.drift(i, i) = curvature;
    }
    spec.sign = sign;
    spec.noise1.assign(dim, trace1 / static_cast<double>(dim));
    spec.noise2.assign(dim, trace2 / static_cast<double>(dim));
    spec.horizon = horizon;
    spec.dt = dt;
    spec.trials = trials;
    spec.seed = seed;
    return spec;
}

void SdeSpec::validate() const {
    if (dim == 0) {
        throw PreconditionError("SDE dimension must be >= 1");
    }
    if (drift.rows() != dim || drift.cols() != dim) {
        throw ShapeError("drift matrix must be " + std::to_string(dim) + "x" + std::to_string(dim));
    }
    for (std::size_t i = 0; i < dim; ++i) {
        for (std::size_t j = 0; j < i; ++j) {
            if (std::abs(drift(i, j) - drift(j, i)) > 1e-12 * (1.0 + std::abs(drift(i, j)))) {
                throw PreconditionError("drift matrix must be symmetric");
            }
        }
    }
    require_finite(drift.values(), "drift matrix");
    if (noise1.size() != dim || noise2.size() != dim) {
        throw ShapeError("noise diagonals must have one entry per dimension");
    }
    for (double v : noise1) {
        if (!(v >= 0.0) || !std::isfinite(v)) {
            throw PreconditionError("covariance entries must be finite and >= 0");
        }
    }
    for (double v : noise2) {
        if (!(v >= 0.0) || !std::isfinite(v)) {
            throw PreconditionError("covariance entries must be finite and >= 0");
        }
    }
    if (!initial.empty() && initial.size() != dim) {
        throw ShapeError("initial point has the wrong dimension");
    }
    if (!(dt > 0.0) || !std::isfinite(dt)) {
        throw PreconditionError("dt must be > 0");
    }
    if (!(horizon >= 0.0) || !std::isfinite(horizon)) {
        throw PreconditionError("horizon must be >= 0");
    }
    if (trials < 1) {
        throw PreconditionError("trials must be >= 1");
    }
    if (noise_substeps < 1) {
        throw PreconditionError("noise_substeps must be >= 1");
    }
    if (save_every < 0) {
        throw PreconditionError("save_every must be >= 0");
    }
}

DeviationTrace simulate_pair(const SdeSpec& spec) {
    spec.validate();
    const std::size_t d = spec.dim;
    const long steps = spec.horizon == 0.0 ? 0 : static_cast<long>(std::ceil(spec.horizon / spec.dt - 1e-9));
    const double h = steps == 0 ? 0.0 : spec.horizon / static_cast<double>(steps);
    const double sub_h = h / spec.noise_substeps;
    const double s = spec.sign == DriftSign::ascent ? 1.0 : -1.0;

    std::vector<long> saved{0};
    for (long k = 1; k <= steps; ++k) {
        if ((spec.save_every > 0 && k % spec.save_every == 0) || k == steps) {
            saved.push_back(k);
        }
    }
    Vector sum(saved.size(), 0.0);
    Vector sum_sq(saved.size(), 0.0);

    Vector scale1(d);
    Vector scale2(d);
    for (std::size_t i = 0; i < d; ++i) {
        scale1[i] = std::sqrt(spec.noise1[i] * sub_h);
        scale2[i] = std::sqrt(spec.noise2[i] * sub_h);
    }
    Vector x(d);
    Vector y(d);
    Vector dw1(d);
    Vector dw2(d);
    Vector fx(d);
    Vector fy(d);
    for (std::size_t trial = 0; trial < spec.trials; ++trial) {
        Rng rng = Rng::stream(spec.seed, trial);
        if (spec.initial.empty()) {
            std::fill(x.begin(), x.end(), 0.0);
        } else {
            std::copy(spec.initial.begin(), spec.initial.end(), x.begin());
        }
        y = x;
        std::size_t next = 1;
        for (long k = 1; k <= steps; ++k) {
            std::fill(dw1.begin(), dw1.end(), 0.0);
            std::fill(dw2.begin(), dw2.end(), 0.0);
            for (int m = 0; m < spec.noise_substeps; ++m) {
                for (std::size_t i = 0; i < d; ++i) {
                    dw1[i] += scale1[i] * rng.normal();
                }
                for (std::size_t i = 0; i < d; ++i) {
                    dw2[i] += scale2[i] * rng.normal();
                }
            }
            for (std::size_t i = 0; i < d; ++i) {
                double ax = 0.0;
                double ay = 0.0;
                for (std::size_t j = 0; j < d; ++j) {
                    ax += spec.drift(i, j) * x[j];
                    ay += spec.drift(i, j) * y[j];
                }
                fx[i] = s * ax;
                fy[i] = s * ay;
            }
            for (std::size_t i = 0; i < d; ++i) {
                x[i] += fx[i] * h + dw1[i];
                y[i] += fy[i] * h + dw2[i];
            }
            if (next < saved.size() && saved[next] == k) {
                double dev = 0.0;
                for (std::size_t i = 0; i < d; ++i) {
                    dev += (x[i] - y[i]) * (x[i] - y[i]);
                }
                if (!std::isfinite(dev)) {
                    std::ostringstream msg;
                    msg << "SDE pair diverged at t = " << static_cast<double>(k) * h << " (trial " << trial
                        << ", dt = " << h << "); reduce dt";
                    throw NumericError(msg.str());
                }
                sum[next] += dev;
                sum_sq[next] += dev * dev;
                ++next;
            }
        }
    }

    DeviationTrace trace;
    const auto n = static_cast<double>(spec.trials);
    for (std::size_t k = 0; k < saved.size(); ++k) {
        const double mean = sum[k] / n;
        const double var = spec.trials > 1 ? std::max(0.0, (sum_sq[k] - n * mean * mean) / (n - 1.0)) : 0.0;
        trace.times.push_back(static_cast<double>(saved[k]) * h);
        trace.mean_sq.push_back(mean);
        trace.std_error.push_back(std::sqrt(var / n));
    }
    return trace;
}

double bound_smooth(double lipschitz, double trace1, double trace2, double horizon) {
    if (!(lipschitz > 0.0)) {
        throw PreconditionError("bound_smooth needs L > 0");
    }
    return (trace1 + trace2) / (2.0 * lipschitz) * std::expm1(2.0 * lipschitz * horizon);
}

double bound_strongly_convex(double mu, double trace1, double trace2, double horizon) {
    if (!(mu > 0.0)) {
        throw PreconditionError("bound_strongly_convex needs mu > 0");
    }
    return (trace1 + trace2) / (2.0 * mu) * -std::expm1(-2.0 * mu * horizon);
}

const char* to_string(BoundKind kind) {
    return kind == BoundKind::smooth ? "smooth" : "strongly_convex";
}

BoundKind parse_bound_kind(std::string_view name) {
    if (name == "smooth") {
        return BoundKind::smooth;
    }
    if (name == "strongly_convex") {
        return BoundKind::strongly_convex;
    }
    throw ConfigError("unknown bound '" + std::string(name) + "' (expected smooth or strongly_convex)");
}

const char* to_string(DriftSign sign) {
    return sign == DriftSign::ascent ? "ascent" : "descent";
}

DriftSign parse_drift_sign(std::string_view name) {
    if (name == "ascent") {
        return DriftSign::ascent;
    }
    if (name == "descent") {
        return DriftSign::descent;
    }
    throw ConfigError("unknown drift sign '" + std::string(name) + "' (expected ascent or descent)");
}

namespace {

Eigen::VectorXd eigenvalues(const Matrix& a) {
    Eigen::MatrixXd m(a.rows(), a.cols());
    for (std::size_t i = 0; i < a.rows(); ++i) {
        for (std::size_t j = 0; j < a.cols(); ++j) {
            m(static_cast<Eigen::Index>(i), static_cast<Eigen::Index>(j)) = a(i, j);
        }
    }
    return Eigen::SelfAdjointEigenSolver<Eigen::MatrixXd>(m, Eigen::EigenvaluesOnly).eigenvalues();
}

double sum_of(const Vector& v) {
    double s = 0.0;
    for (double x : v) {
        s += x;
    }
    return s;
}

} // namespace

BoundReport verify_bound(const SdeSpec& spec, BoundKind kind) {
    spec.validate();
    if (kind == BoundKind::strongly_convex && spec.sign != DriftSign::descent) {
        throw PreconditionError("the strongly convex bound is stated for descent drift");
    }
    return verify_bound(spec, kind, simulate_pair(spec));
}

BoundReport verify_bound(const SdeSpec& spec, BoundKind kind, const DeviationTrace& trace) {
    spec.validate();
    if (trace.mean_sq.empty()) {
        throw PreconditionError("empty deviation trace");
    }
    BoundReport r;
    r.kind = kind;
    const Eigen::VectorXd eig = eigenvalues(spec.drift);
    r.mu = eig.minCoeff();
    r.lipschitz = eig.cwiseAbs().maxCoeff();
    r.trace1 = sum_of(spec.noise1);
    r.trace2 = sum_of(spec.noise2);
    r.empirical = trace.mean_sq.back();
    r.std_error = trace.std_error.back();
    if (kind == BoundKind::smooth) {
        // A = 0 is the L -> 0 limit of the smooth bound.
        r.bound = r.lipschitz > 0.0 ? bound_smooth(r.lipschitz, r.trace1, r.trace2, spec.horizon)
                                    : (r.trace1 + r.trace2) * spec.horizon;
    } else {
        if (spec.sign != DriftSign::descent) {
            throw PreconditionError("the strongly convex bound is stated for descent drift");
        }
        if (!(r.mu > 0.0)) {
            throw PreconditionError("the strongly convex bound needs a positive definite drift matrix");
        }
        r.bound = bound_strongly_convex(r.mu, r.trace1, r.trace2, spec.horizon);
    }
    r.margin = r.bound + 3.0 * r.std_error - r.empirical;
    r.satisfied = r.margin >= 0.0;
    return r;
}

double QuadraticScore::value(std::span<const double> e) const {
    if (e.size() != center.size() || curvature.rows() != center.size() || curvature.cols() != center.size()) {
        throw ShapeError("quadratic score dimension mismatch");
    }
    double q = 0.0;
    for (std::size_t i = 0; i < e.size(); ++i) {
        for (std::size_t j = 0; j < e.size(); ++j) {
            q += (e[i] - center[i]) * curvature(i, j) * (e[j] - center[j]);
        }
    }
    return -0.5 * q;
}

Vector QuadraticScore::gradient(std::span<const double> e) const {
    if (e.size() != center.size() || curvature.rows() != center.size() || curvature.cols() != center.size()) {
        throw ShapeError("quadratic score dimension mismatch");
    }
    Vector g(e.size(), 0.0);
    for (std::size_t i = 0; i < e.size(); ++i) {
        for (std::size_t j = 0; j < e.size(); ++j) {
            g[i] -= curvature(i, j) * (e[j] - center[j]);
        }
    }
    return g;
}

AscentStep ascent_step_check(const QuadraticScore& score, std::span<const double> e0, double eta) {
    const Eigen::VectorXd eig = eigenvalues(score.curvature);
    if (eig.minCoeff() < -1e-12) {
        throw PreconditionError("ascent step check needs a positive semidefinite H");
    }
    const double lipschitz = eig.maxCoeff();
    const Vector g = score.gradient(e0);
    const double gnorm = std::sqrt(squared_norm(g));
    if (gnorm == 0.0) {
        throw PreconditionError("score gradient vanishes at e0");
    }
    if (!(eta > 0.0) || (lipschitz > 0.0 && !(eta < 2.0 * gnorm / lipschitz))) {
        throw PreconditionError("step size must lie in (0, 2|grad| / L_e)");
    }
    Vector e1(e0.begin(), e0.end());
    for (std::size_t i = 0; i < e1.size(); ++i) {
        e1[i] += eta * g[i] / gnorm;
    }
    AscentStep r;
    r.gain = score.value(e1) - score.value(e0);
    r.lower_bound = eta * gnorm - 0.5 * lipschitz * eta * eta;
    r.pass = r.gain >= r.lower_bound - 1e-12 && r.gain > 0.0;
    return r;
}

CurvatureAscent curvature_ascent_check(const QuadraticScore& score, std::span<const double> e0,
                                       std::span<const double> direction, std::span<const double> etas) {
    if (direction.size() != e0.size()) {
        throw ShapeError("direction has the wrong dimension");
    }
    const Vector g = score.gradient(e0);
    if (std::sqrt(squared_norm(g)) > 1e-9) {
        throw PreconditionError("curvature ascent check needs a critical point (grad s(e0) = 0)");
    }
    // Hessian of s is -H.
    double vhv = 0.0;
    for (std::size_t i = 0; i < direction.size(); ++i) {
        for (std::size_t j = 0; j < direction.size(); ++j) {
            vhv -= direction[i] * score.curvature(i, j) * direction[j];
        }
    }
    if (!(vhv > 0.0)) {
        throw PreconditionError("direction has no positive curvature");
    }
    if (etas.empty()) {
        throw PreconditionError("empty step grid");
    }
    CurvatureAscent r;
    r.expected = 0.5 * vhv;
    r.pass = true;
    const double base = score.value(e0);
    Vector e(e0.size());
    for (double eta : etas) {
        if (!(eta > 0.0)) {
            throw PreconditionError("grid steps must be > 0");
        }
        for (std::size_t i = 0; i < e.size(); ++i) {
            e[i] = e0[i] + eta * direction[i];
        }
        const double gain = score.value(e) - base;
        r.gains.push_back(gain);
        r.normalized_gain.push_back(gain / (eta * eta));
        r.pass = r.pass && gain > 0.0;
        if (eta <= 1e-2) {
            r.pass = r.pass && std::abs(gain / (eta * eta) - r.expected) <= 0.01 * r.expected;
        }
    }
    return r;
}

} // namespace eralab
