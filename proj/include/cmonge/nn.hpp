#ifndef CMONGE_NN_HPP
#define CMONGE_NN_HPP

#include "error.hpp"
#include "types.hpp"

#include <Eigen/Dense>

#include <cmath>
#include <cstdint>
#include <random>
#include <string>
#include <vector>

/**
 * @file nn.hpp
 *
 * @brief Dense GELU networks with explicit reverse-mode gradients and an AdamW optimizer.
 *
 * Batches are stored with one sample per row.
 */

namespace cmonge {

inline double gelu(double x) {
    return 0.5 * x * std::erfc(-x / std::sqrt(2.0));
}

inline double gelu_derivative(double x) {
    const double cdf = 0.5 * std::erfc(-x / std::sqrt(2.0));
    const double pdf = std::exp(-0.5 * x * x) / std::sqrt(2.0 * M_PI);
    return cdf + x * pdf;
}

inline Matrix gelu(const Matrix& x) {
    return x.unaryExpr([](double v) { return gelu(v); });
}

/**
 * Affine layer mapping `in` features to `out` features: `y = W x + b`.
 */
struct DenseLayer {
    Matrix weight; // out x in
    Vector bias;   // out

    Eigen::Index in_dim() const { return weight.cols(); }
    Eigen::Index out_dim() const { return weight.rows(); }
};

/**
 * @brief Parameters of a multilayer perceptron.
 *
 * Every layer but the last is followed by a GELU; the last layer is linear.
 */
struct MlpParams {
    std::vector<DenseLayer> layers;

    Eigen::Index input_dim() const { return layers.front().in_dim(); }
    Eigen::Index output_dim() const { return layers.back().out_dim(); }

    /** Widths `[in, hidden..., out]`. */
    std::vector<Eigen::Index> sizes() const {
        std::vector<Eigen::Index> out;
        if (layers.empty()) {
            return out;
        }
        out.push_back(input_dim());
        for (const auto& l : layers) {
            out.push_back(l.out_dim());
        }
        return out;
    }

    Eigen::Index parameter_count() const {
        Eigen::Index total = 0;
        for (const auto& l : layers) {
            total += l.weight.size() + l.bias.size();
        }
        return total;
    }

    void validate() const {
        detail::require(!layers.empty(), "MlpParams: no layers");
        for (std::size_t k = 0; k < layers.size(); ++k) {
            const auto& l = layers[k];
            detail::require(l.bias.size() == l.out_dim(), "MlpParams: bias width mismatch in layer " + std::to_string(k));
            if (k > 0) {
                detail::require(layers[k - 1].out_dim() == l.in_dim(), "MlpParams: layer " + std::to_string(k) + " does not chain with its predecessor");
            }
            if (!l.weight.allFinite() || !l.bias.allFinite()) {
                throw NumericalError("MlpParams: non-finite parameter in layer " + std::to_string(k));
            }
        }
    }

    /** Same shapes, all zeros. */
    MlpParams zeros_like() const {
        MlpParams out;
        for (const auto& l : layers) {
            out.layers.push_back({Matrix::Zero(l.weight.rows(), l.weight.cols()), Vector::Zero(l.bias.size())});
        }
        return out;
    }
};

/**
 * Glorot-uniform weights and zero biases. `sizes` lists `[in, hidden..., out]`.
 */
inline MlpParams init_params(const std::vector<Eigen::Index>& sizes, std::uint64_t seed) {
    detail::require(sizes.size() >= 2, "init_params: need at least input and output sizes");
    for (auto s : sizes) {
        detail::require(s >= 1, "init_params: layer sizes must be positive");
    }
    std::mt19937_64 rng(seed);
    MlpParams out;
    for (std::size_t k = 0; k + 1 < sizes.size(); ++k) {
        const auto in = sizes[k], width = sizes[k + 1];
        const double limit = std::sqrt(6.0 / static_cast<double>(in + width));
        std::uniform_real_distribution<double> dist(-limit, limit);
        DenseLayer layer{Matrix(width, in), Vector::Zero(width)};
        for (Eigen::Index j = 0; j < in; ++j) {
            for (Eigen::Index i = 0; i < width; ++i) {
                layer.weight(i, j) = dist(rng);
            }
        }
        out.layers.push_back(std::move(layer));
    }
    return out;
}

/**
 * Intermediate values kept by a forward pass for the backward pass.
 */
struct ForwardTape {
    /** Input to each layer. */
    std::vector<Matrix> inputs;
    /** Pre-activation output of each layer. */
    std::vector<Matrix> preactivations;

    std::size_t depth() const { return inputs.size(); }
};

struct ForwardResult {
    Matrix output;
    ForwardTape tape;
};

namespace detail {

inline void check_input(const MlpParams& params, Eigen::Index width) {
    require(!params.layers.empty(), "mlp_forward: no layers");
    if (width != params.input_dim()) {
        throw ConfigError("mlp_forward: input width " + std::to_string(width) + " does not match network input " + std::to_string(params.input_dim()));
    }
}

inline Matrix affine(const DenseLayer& layer, const Matrix& x) {
    Matrix z = x * layer.weight.transpose();
    z.rowwise() += layer.bias.transpose();
    return z;
}

}

inline ForwardResult mlp_forward(const MlpParams& params, const Matrix& input) {
    detail::check_input(params, input.cols());
    ForwardResult out;
    out.tape.inputs.reserve(params.layers.size());
    out.tape.preactivations.reserve(params.layers.size());
    Matrix current = input;
    for (std::size_t k = 0; k < params.layers.size(); ++k) {
        Matrix z = detail::affine(params.layers[k], current);
        out.tape.inputs.push_back(std::move(current));
        current = (k + 1 < params.layers.size()) ? gelu(z) : z;
        out.tape.preactivations.push_back(std::move(z));
    }
    out.output = std::move(current);
    return out;
}

/**
 * Forward pass without keeping a tape.
 */
inline Matrix mlp_apply(const MlpParams& params, const Matrix& input) {
    detail::check_input(params, input.cols());
    Matrix current = input;
    for (std::size_t k = 0; k < params.layers.size(); ++k) {
        Matrix z = detail::affine(params.layers[k], current);
        current = (k + 1 < params.layers.size()) ? gelu(z) : std::move(z);
    }
    return current;
}

struct BackwardResult {
    MlpParams grad_params;
    Matrix grad_input;
};

/**
 * Reverse-mode pass for the scalar \f$\sum \langle \text{grad\_output}, \text{output} \rangle\f$.
 */
inline BackwardResult mlp_backward(const MlpParams& params, const ForwardTape& tape, const Matrix& grad_output) {
    const auto depth = params.layers.size();
    if (tape.depth() != depth || tape.preactivations.size() != depth) {
        throw ConfigError("mlp_backward: tape depth does not match the network");
    }
    for (std::size_t k = 0; k < depth; ++k) {
        if (tape.inputs[k].cols() != params.layers[k].in_dim() || tape.preactivations[k].cols() != params.layers[k].out_dim()) {
            throw ConfigError("mlp_backward: tape shapes do not match layer " + std::to_string(k));
        }
    }
    if (grad_output.rows() != tape.inputs.front().rows() || grad_output.cols() != params.output_dim()) {
        throw ConfigError("mlp_backward: grad_output shape does not match the forward output");
    }

    BackwardResult out;
    out.grad_params.layers.resize(depth);
    Matrix delta = grad_output;
    for (std::size_t k = depth; k-- > 0;) {
        if (k + 1 < depth) {
            delta.array() *= tape.preactivations[k].unaryExpr([](double v) { return gelu_derivative(v); }).array();
        }
        auto& g = out.grad_params.layers[k];
        g.weight.noalias() = delta.transpose() * tape.inputs[k];
        g.bias = delta.colwise().sum().transpose();
        Matrix next = delta * params.layers[k].weight;
        delta.swap(next);
    }
    out.grad_input = std::move(delta);
    return out;
}

/**
 * Parameters laid out as one vector: for each layer, the row-major weight followed by the bias.
 */
inline Vector flatten(const MlpParams& params) {
    Vector out(params.parameter_count());
    Eigen::Index pos = 0;
    for (const auto& l : params.layers) {
        for (Eigen::Index i = 0; i < l.weight.rows(); ++i) {
            for (Eigen::Index j = 0; j < l.weight.cols(); ++j) {
                out[pos++] = l.weight(i, j);
            }
        }
        out.segment(pos, l.bias.size()) = l.bias;
        pos += l.bias.size();
    }
    return out;
}

/**
 * Inverse of `flatten()`, reading from `flat` starting at `offset`. Returns the next offset.
 */
inline Eigen::Index unflatten(const Vector& flat, Eigen::Index offset, MlpParams& params) {
    detail::require(offset + params.parameter_count() <= flat.size(), "unflatten: vector too short");
    for (auto& l : params.layers) {
        for (Eigen::Index i = 0; i < l.weight.rows(); ++i) {
            for (Eigen::Index j = 0; j < l.weight.cols(); ++j) {
                l.weight(i, j) = flat[offset++];
            }
        }
        l.bias = flat.segment(offset, l.bias.size());
        offset += l.bias.size();
    }
    return offset;
}

struct AdamWOptions {
    double lr = 1e-4;
    double beta1 = 0.9;
    double beta2 = 0.999;
    double eps = 1e-8;
    double weight_decay = 1e-5;
};

/**
 * @brief Optimizer state for AdamW on a flat parameter vector.
 */
struct AdamWState {
    AdamWOptions options;
    std::int64_t step = 0;
    Vector m;
    Vector v;

    AdamWState() = default;
    AdamWState(const AdamWOptions& opt, Eigen::Index size) : options(opt), m(Vector::Zero(size)), v(Vector::Zero(size)) {}
};

/**
 * One AdamW update with bias-corrected moments and decoupled weight decay:
 * `p <- p * (1 - lr * wd) - lr * mhat / (sqrt(vhat) + eps)`.
 */
inline void adamw_step(Vector& params, const Vector& grads, AdamWState& state) {
    if (params.size() != grads.size() || state.m.size() != params.size() || state.v.size() != params.size()) {
        throw ConfigError("adamw_step: parameter, gradient and state sizes differ");
    }
    if (!grads.allFinite()) {
        throw NumericalError("adamw_step: non-finite gradient");
    }
    const auto& o = state.options;
    ++state.step;
    state.m = o.beta1 * state.m + (1 - o.beta1) * grads;
    state.v = o.beta2 * state.v + (1 - o.beta2) * grads.cwiseProduct(grads);
    const double c1 = 1 - std::pow(o.beta1, static_cast<double>(state.step));
    const double c2 = 1 - std::pow(o.beta2, static_cast<double>(state.step));
    const double shrink = 1 - o.lr * o.weight_decay;
    for (Eigen::Index i = 0; i < params.size(); ++i) {
        const double mhat = state.m[i] / c1;
        const double vhat = state.v[i] / c2;
        params[i] = params[i] * shrink - o.lr * mhat / (std::sqrt(vhat) + o.eps);
    }
}

}

#endif
