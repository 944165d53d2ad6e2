#pragma once

// Straight-line reference implementations used as independent oracles.
// They deliberately share no code with the library.

#include <cmath>
#include <cstddef>
#include <vector>

namespace oracle {

struct Layer {
    std::vector<std::vector<double>> w; // out x in
    std::vector<double> b;
};

inline std::vector<double> mlp_forward(const std::vector<Layer>& net, std::vector<double> x) {
    for (std::size_t l = 0; l < net.size(); ++l) {
        std::vector<double> y(net[l].b);
        for (std::size_t i = 0; i < y.size(); ++i) {
            for (std::size_t j = 0; j < x.size(); ++j) {
                y[i] += net[l].w[i][j] * x[j];
            }
            if (l + 1 < net.size()) {
                y[i] = std::tanh(y[i]);
            }
        }
        x = y;
    }
    return x;
}

// Product of (1 - beta_t) for a linear schedule, computed directly.
inline double alpha_bar(int steps, double b0, double b1, int t) {
    double prod = 1.0;
    for (int s = 1; s <= t; ++s) {
        const double beta = steps == 1 ? b0 : b0 + (b1 - b0) * (s - 1) / (steps - 1);
        prod *= 1.0 - beta;
    }
    return prod;
}

// E|delta(T)|^2 for the pair d theta = s a theta dt + noise, A = a I, isotropic
// noise with traces t1, t2: the difference is an OU process with variance
// (t1 + t2) (e^{2 s a T} - 1) / (2 s a).
inline double ou_deviation(double a, double sign, double t1, double t2, double horizon) {
    const double k = sign * a;
    if (k == 0.0) {
        return (t1 + t2) * horizon;
    }
    return (t1 + t2) * (std::exp(2.0 * k * horizon) - 1.0) / (2.0 * k);
}

} // namespace oracle
