#include "eralab/numerics.hpp"

#include <algorithm>
#include <cmath>
#include <cstring>
#include <string>

#include "eralab/errors.hpp"

namespace eralab {

namespace {

// Batched products are written as row-wise axpy loops: every output element
// is accumulated in a fixed index order, so a row's result depends neither on
// the other rows in the batch nor on buffer alignment. BLAS-style kernels
// (Eigen's included) change the summation order with the block position of a
// row, which breaks bit-reproducibility across batch sizes.

// Eight doubles; element-wise multiply then add, no reassociation.
typedef double Lane __attribute__((vector_size(64)));

inline Lane load_lane(const double* p) {
    Lane v;
    std::memcpy(&v, p, sizeof v);
    return v;
}

inline void store_lane(double* p, Lane v, const double* bias) {
    if (bias) {
        v += load_lane(bias);
    }
    std::memcpy(p, &v, sizeof v);
}

// 4 rows x 16 columns of c = a b (+ bias), summing over k in order. Named
// accumulators keep the compiler from spilling an array every iteration.
void product_block4(const double* a, std::size_t lda, const double* b, std::size_t ldb, std::size_t depth, double* c,
                    std::size_t ldc, const double* bias) {
    Lane c00{}, c01{}, c10{}, c11{}, c20{}, c21{}, c30{}, c31{};
    const double* a0 = a;
    const double* a1 = a + lda;
    const double* a2 = a + 2 * lda;
    const double* a3 = a + 3 * lda;
    for (std::size_t k = 0; k < depth; ++k) {
        const Lane b0 = load_lane(b + k * ldb);
        const Lane b1 = load_lane(b + k * ldb + 8);
        c00 += a0[k] * b0;
        c01 += a0[k] * b1;
        c10 += a1[k] * b0;
        c11 += a1[k] * b1;
        c20 += a2[k] * b0;
        c21 += a2[k] * b1;
        c30 += a3[k] * b0;
        c31 += a3[k] * b1;
    }
    const double* b8 = bias ? bias + 8 : nullptr;
    store_lane(c, c00, bias);
    store_lane(c + 8, c01, b8);
    store_lane(c + ldc, c10, bias);
    store_lane(c + ldc + 8, c11, b8);
    store_lane(c + 2 * ldc, c20, bias);
    store_lane(c + 2 * ldc + 8, c21, b8);
    store_lane(c + 3 * ldc, c30, bias);
    store_lane(c + 3 * ldc + 8, c31, b8);
}

void product_block1(const double* a, const double* b, std::size_t ldb, std::size_t depth, double* c,
                    const double* bias) {
    Lane c0{}, c1{};
    for (std::size_t k = 0; k < depth; ++k) {
        c0 += a[k] * load_lane(b + k * ldb);
        c1 += a[k] * load_lane(b + k * ldb + 8);
    }
    store_lane(c, c0, bias);
    store_lane(c + 8, c1, bias ? bias + 8 : nullptr);
}

// Leftover columns for rows [r0, r0 + R); same summation order as the blocks.
// Several rows at once give independent add chains.
template <std::size_t R>
void product_tail(const double* a, std::size_t lda, const double* b, std::size_t ldb, std::size_t depth,
                  std::size_t width, double* c, std::size_t ldc, const double* bias) {
    for (std::size_t j = 0; j < width; ++j) {
        double acc[R] = {};
        for (std::size_t k = 0; k < depth; ++k) {
            const double bk = b[k * ldb + j];
            for (std::size_t r = 0; r < R; ++r) {
                acc[r] += a[r * lda + k] * bk;
            }
        }
        for (std::size_t r = 0; r < R; ++r) {
            c[r * ldc + j] = bias ? acc[r] + bias[j] : acc[r];
        }
    }
}

// out = a * b (+ bias per column). a: n x depth, b: depth x width.
void product(const Matrix& a, const Matrix& b, const double* bias, Matrix& out) {
    constexpr std::size_t R = 4;
    constexpr std::size_t J = 16;
    const std::size_t n = a.rows();
    const std::size_t depth = a.cols();
    const std::size_t width = b.cols();
    const double* pa = a.values().data();
    const double* pb = b.values().data();
    double* pc = out.values().data();
    const std::size_t full = width / J * J;
    for (std::size_t j0 = 0; j0 < full; j0 += J) {
        const double* bj = bias ? bias + j0 : nullptr;
        std::size_t r = 0;
        for (; r + R <= n; r += R) {
            product_block4(pa + r * depth, depth, pb + j0, width, depth, pc + r * width + j0, width, bj);
        }
        for (; r < n; ++r) {
            product_block1(pa + r * depth, pb + j0, width, depth, pc + r * width + j0, bj);
        }
    }
    if (full < width) {
        const double* bt = bias ? bias + full : nullptr;
        std::size_t r = 0;
        for (; r + 8 <= n; r += 8) {
            product_tail<8>(pa + r * depth, depth, pb + full, width, depth, width - full, pc + r * width + full, width,
                            bt);
        }
        for (; r < n; ++r) {
            product_tail<1>(pa + r * depth, depth, pb + full, width, depth, width - full, pc + r * width + full, width,
                            bt);
        }
    }
}

Matrix transposed(const Matrix& m) {
    constexpr std::size_t tile = 16;
    Matrix t(m.cols(), m.rows());
    for (std::size_t r0 = 0; r0 < m.rows(); r0 += tile) {
        for (std::size_t c0 = 0; c0 < m.cols(); c0 += tile) {
            const std::size_t r1 = std::min(r0 + tile, m.rows());
            const std::size_t c1 = std::min(c0 + tile, m.cols());
            for (std::size_t r = r0; r < r1; ++r) {
                for (std::size_t c = c0; c < c1; ++c) {
                    t(c, r) = m(r, c);
                }
            }
        }
    }
    return t;
}

} // namespace

Matrix::Matrix(std::size_t rows, std::size_t cols, double fill)
    : rows_(rows), cols_(cols), data_(rows * cols, fill) {}

Matrix::Matrix(std::size_t rows, std::size_t cols, Vector data)
    : rows_(rows), cols_(cols), data_(std::move(data)) {
    if (data_.size() != rows * cols) {
        throw ShapeError("matrix data has " + std::to_string(data_.size()) + " elements, shape needs " +
                         std::to_string(rows * cols));
    }
}

void require_finite(std::span<const double> values, const char* what) {
    for (double v : values) {
        if (!std::isfinite(v)) {
            throw NumericError(std::string("non-finite value in ") + what);
        }
    }
}

double dot(std::span<const double> a, std::span<const double> b) {
    if (a.size() != b.size()) {
        throw ShapeError("dot: length mismatch");
    }
    double s = 0.0;
    for (std::size_t i = 0; i < a.size(); ++i) {
        s += a[i] * b[i];
    }
    return s;
}

double squared_norm(std::span<const double> a) { return dot(a, a); }

Mlp::Mlp(std::vector<DenseLayer> layers) : layers_(std::move(layers)) {
    if (layers_.empty()) {
        throw ShapeError("mlp needs at least one layer");
    }
    for (std::size_t i = 0; i < layers_.size(); ++i) {
        const auto& layer = layers_[i];
        if (layer.bias.size() != layer.out_dim()) {
            throw ShapeError("layer " + std::to_string(i) + ": bias length " + std::to_string(layer.bias.size()) +
                             " != out dim " + std::to_string(layer.out_dim()));
        }
        if (i > 0 && layers_[i - 1].out_dim() != layer.in_dim()) {
            throw ShapeError("layer " + std::to_string(i) + ": in dim " + std::to_string(layer.in_dim()) +
                             " does not chain with previous out dim " + std::to_string(layers_[i - 1].out_dim()));
        }
    }
}

Mlp Mlp::random(std::span<const std::size_t> dims, Rng& rng) {
    if (dims.size() < 2) {
        throw ShapeError("mlp needs at least input and output dims");
    }
    std::vector<DenseLayer> layers;
    for (std::size_t i = 0; i + 1 < dims.size(); ++i) {
        const std::size_t in = dims[i];
        const std::size_t out = dims[i + 1];
        const double scale = 1.0 / std::sqrt(static_cast<double>(in));
        Matrix w(out, in);
        for (double& v : w.values()) {
            v = scale * rng.normal();
        }
        layers.push_back({std::move(w), Vector(out, 0.0)});
    }
    return Mlp(std::move(layers));
}

std::size_t Mlp::input_dim() const { return layers_.front().in_dim(); }
std::size_t Mlp::output_dim() const { return layers_.back().out_dim(); }

std::size_t Mlp::layer_parameter_count(std::size_t index) const {
    const auto& layer = layers_.at(index);
    return layer.weight.size() + layer.bias.size();
}

std::size_t Mlp::layer_offset(std::size_t index) const {
    std::size_t offset = 0;
    for (std::size_t i = 0; i < index; ++i) {
        offset += layer_parameter_count(i);
    }
    return offset;
}

std::size_t Mlp::parameter_count() const { return layer_offset(layers_.size()); }

Matrix Mlp::forward_batch(const Matrix& inputs) const {
    Tape tape;
    return forward_batch(inputs, tape);
}

Matrix Mlp::forward_batch(const Matrix& inputs, Tape& tape) const {
    if (inputs.cols() != input_dim()) {
        throw ShapeError("mlp input has " + std::to_string(inputs.cols()) + " columns, expected " +
                         std::to_string(input_dim()));
    }
    tape.activations.clear();
    tape.activations.reserve(layers_.size() + 1);
    tape.activations.push_back(inputs);
    for (std::size_t i = 0; i < layers_.size(); ++i) {
        const auto& layer = layers_[i];
        Matrix out(inputs.rows(), layer.out_dim());
        product(tape.activations.back(), transposed(layer.weight), layer.bias.data(), out);
        if (i + 1 < layers_.size()) {
            for (double& v : out.values()) {
                v = std::tanh(v);
            }
        }
        tape.activations.push_back(std::move(out));
    }
    require_finite(tape.activations.back().values(), "mlp output");
    return tape.activations.back();
}

MlpBatchGradients Mlp::backward_batch(const Tape& tape, const Matrix& output_grad) const {
    if (tape.activations.size() != layers_.size() + 1) {
        throw ShapeError("mlp tape does not match network depth");
    }
    const Matrix& final_out = tape.activations.back();
    if (output_grad.rows() != final_out.rows() || output_grad.cols() != final_out.cols()) {
        throw ShapeError("output gradient shape does not match forward output");
    }
    const std::size_t n = output_grad.rows();
    MlpBatchGradients grads{Vector(parameter_count(), 0.0), Matrix()};
    Matrix delta = output_grad;
    for (std::size_t li = layers_.size(); li-- > 0;) {
        const auto& layer = layers_[li];
        if (li + 1 < layers_.size()) {
            // tanh'(z) = 1 - tanh(z)^2, and the tape stores tanh(z).
            const auto act = tape.activations[li + 1].values();
            auto d = delta.values();
            for (std::size_t k = 0; k < d.size(); ++k) {
                d[k] *= 1.0 - act[k] * act[k];
            }
        }
        const Matrix& input = tape.activations[li];
        const std::size_t out_dim = layer.out_dim();
        const std::size_t in_dim = layer.in_dim();
        // dW = delta^T x, summed over the batch in row order
        Matrix dw(out_dim, in_dim);
        product(transposed(delta), input, nullptr, dw);
        double* dst = grads.params.data() + layer_offset(li);
        std::copy(dw.values().begin(), dw.values().end(), dst);
        double* db = dst + layer.weight.size();
        for (std::size_t r = 0; r < n; ++r) {
            const auto dr = delta.row(r);
            for (std::size_t o = 0; o < out_dim; ++o) {
                db[o] += dr[o];
            }
        }
        Matrix next(n, in_dim);
        product(delta, layer.weight, nullptr, next);
        delta = std::move(next);
    }
    grads.input = std::move(delta);
    return grads;
}

Vector Mlp::forward(std::span<const double> input) const {
    Matrix in(1, input.size(), Vector(input.begin(), input.end()));
    Matrix out = forward_batch(in);
    return {out.values().begin(), out.values().end()};
}

MlpGradients Mlp::backward(std::span<const double> input, std::span<const double> output_grad) const {
    if (output_grad.size() != output_dim()) {
        throw ShapeError("output gradient has length " + std::to_string(output_grad.size()) + ", expected " +
                         std::to_string(output_dim()));
    }
    Tape tape;
    forward_batch(Matrix(1, input.size(), Vector(input.begin(), input.end())), tape);
    auto grads = backward_batch(tape, Matrix(1, output_grad.size(), Vector(output_grad.begin(), output_grad.end())));
    return {std::move(grads.params), Vector(grads.input.values().begin(), grads.input.values().end())};
}

void Mlp::flatten_into(std::span<double> out) const {
    if (out.size() != parameter_count()) {
        throw ShapeError("flatten target has wrong length");
    }
    std::size_t k = 0;
    for (const auto& layer : layers_) {
        for (double v : layer.weight.values()) out[k++] = v;
        for (double v : layer.bias) out[k++] = v;
    }
}

Vector Mlp::flatten() const {
    Vector out(parameter_count());
    flatten_into(out);
    return out;
}

void Mlp::unflatten(std::span<const double> params) {
    if (params.size() != parameter_count()) {
        throw ShapeError("parameter vector has length " + std::to_string(params.size()) + ", network has " +
                         std::to_string(parameter_count()));
    }
    std::size_t k = 0;
    for (auto& layer : layers_) {
        for (double& v : layer.weight.values()) v = params[k++];
        for (double& v : layer.bias) v = params[k++];
    }
}

AdamState::AdamState(std::size_t parameter_count, AdamHyper h)
    : hyper(h), first_moment(parameter_count, 0.0), second_moment(parameter_count, 0.0) {}

void adam_step(AdamState& state, std::span<double> params, std::span<const double> grad) {
    if (params.size() != grad.size() || params.size() != state.first_moment.size()) {
        throw ShapeError("adam: params, grad and state lengths differ");
    }
    require_finite(grad, "adam gradient");
    ++state.step;
    const auto& h = state.hyper;
    const double c1 = 1.0 - std::pow(h.beta1, static_cast<double>(state.step));
    const double c2 = 1.0 - std::pow(h.beta2, static_cast<double>(state.step));
    for (std::size_t i = 0; i < params.size(); ++i) {
        double& m = state.first_moment[i];
        double& v = state.second_moment[i];
        m = h.beta1 * m + (1.0 - h.beta1) * grad[i];
        v = h.beta2 * v + (1.0 - h.beta2) * grad[i] * grad[i];
        const double m_hat = m / c1;
        const double v_hat = v / c2;
        params[i] -= h.lr * m_hat / (std::sqrt(v_hat) + h.eps);
    }
}

} // namespace eralab
