#pragma once

#include <cstddef>
#include <span>
#include <vector>

#include "eralab/rng.hpp"

namespace eralab {

using Vector = std::vector<double>;

/// Dense row-major matrix of doubles.
class Matrix {
public:
    Matrix() = default;
    Matrix(std::size_t rows, std::size_t cols, double fill = 0.0);
    Matrix(std::size_t rows, std::size_t cols, Vector data);

    std::size_t rows() const { return rows_; }
    std::size_t cols() const { return cols_; }
    std::size_t size() const { return data_.size(); }

    double& operator()(std::size_t r, std::size_t c) { return data_[r * cols_ + c]; }
    double operator()(std::size_t r, std::size_t c) const { return data_[r * cols_ + c]; }

    std::span<double> row(std::size_t r) { return {data_.data() + r * cols_, cols_}; }
    std::span<const double> row(std::size_t r) const { return {data_.data() + r * cols_, cols_}; }

    std::span<double> values() { return data_; }
    std::span<const double> values() const { return data_; }

    friend bool operator==(const Matrix&, const Matrix&) = default;

private:
    std::size_t rows_ = 0;
    std::size_t cols_ = 0;
    Vector data_;
};

/// Throws NumericError naming `what` if any value is NaN or infinite.
void require_finite(std::span<const double> values, const char* what);

double dot(std::span<const double> a, std::span<const double> b);
double squared_norm(std::span<const double> a);

/// Affine layer y = W x + b with W stored out x in.
struct DenseLayer {
    Matrix weight;
    Vector bias;

    std::size_t in_dim() const { return weight.cols(); }
    std::size_t out_dim() const { return weight.rows(); }

    friend bool operator==(const DenseLayer&, const DenseLayer&) = default;
};

struct MlpGradients {
    Vector params; // flattened in Mlp parameter order
    Vector input;
};

struct MlpBatchGradients {
    Vector params; // summed over the batch
    Matrix input;  // one row per batch element
};

/// Feedforward network: tanh between layers, identity on the output layer.
///
/// Parameter vectorization is layer-major; inside a layer the weight matrix
/// comes first (row-major), then the bias.
class Mlp {
public:
    /// Intermediate values kept by forward_batch for backward_batch.
    /// activations[0] is the input, activations[i] the output of layer i-1
    /// (post-tanh for hidden layers).
    struct Tape {
        std::vector<Matrix> activations;
    };

    Mlp() = default;
    explicit Mlp(std::vector<DenseLayer> layers);

    /// Weights drawn from N(0, 1/fan_in), biases zero.
    static Mlp random(std::span<const std::size_t> dims, Rng& rng);

    std::size_t input_dim() const;
    std::size_t output_dim() const;
    std::size_t parameter_count() const;
    const std::vector<DenseLayer>& layers() const { return layers_; }

    /// Offset of layer `index` inside the flattened parameter vector.
    std::size_t layer_offset(std::size_t index) const;
    std::size_t layer_parameter_count(std::size_t index) const;

    Vector forward(std::span<const double> input) const;

    /// Gradient of <output, output_grad> with respect to parameters and input.
    MlpGradients backward(std::span<const double> input, std::span<const double> output_grad) const;

    Matrix forward_batch(const Matrix& inputs) const;
    Matrix forward_batch(const Matrix& inputs, Tape& tape) const;
    MlpBatchGradients backward_batch(const Tape& tape, const Matrix& output_grad) const;

    Vector flatten() const;
    void flatten_into(std::span<double> out) const;
    void unflatten(std::span<const double> params);

    friend bool operator==(const Mlp&, const Mlp&) = default;

private:
    std::vector<DenseLayer> layers_;
};

struct AdamHyper {
    double lr = 1e-3;
    double beta1 = 0.9;
    double beta2 = 0.999;
    double eps = 1e-8;
};

struct AdamState {
    AdamHyper hyper;
    Vector first_moment;
    Vector second_moment;
    long step = 0;

    AdamState(std::size_t parameter_count, AdamHyper hyper);
};

/// One bias-corrected Adam update of `params` in place.
void adam_step(AdamState& state, std::span<double> params, std::span<const double> grad);

} // namespace eralab
