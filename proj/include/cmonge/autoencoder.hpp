#ifndef CMONGE_AUTOENCODER_HPP
#define CMONGE_AUTOENCODER_HPP

#include "error.hpp"
#include "nn.hpp"

#include <algorithm>
#include <cstdint>
#include <numeric>
#include <random>
#include <vector>

/**
 * @file autoencoder.hpp
 *
 * @brief MLP autoencoder trained on mean-squared reconstruction error.
 */

namespace cmonge {

struct AutoencoderParams {
    MlpParams encoder;
    MlpParams decoder;

    Eigen::Index input_dim() const { return encoder.input_dim(); }
    Eigen::Index latent_dim() const { return encoder.output_dim(); }

    void validate() const {
        encoder.validate();
        decoder.validate();
        detail::require(decoder.input_dim() == encoder.output_dim(), "autoencoder: decoder input must match the latent width");
        detail::require(decoder.output_dim() == encoder.input_dim(), "autoencoder: decoder output must match the data width");
    }
};

struct AutoencoderConfig {
    /** Hidden widths of the encoder; the decoder mirrors them. */
    std::vector<Eigen::Index> hidden{512, 512};
    Eigen::Index latent_dim = 50;
    int epochs = 50;
    Eigen::Index batch_size = 256;
    AdamWOptions adam;
    std::uint64_t seed = 0;
};

struct AutoencoderFit {
    AutoencoderParams params;
    /** Full-data reconstruction MSE after each epoch. */
    std::vector<double> epoch_loss;
};

inline Matrix encode(const AutoencoderParams& ae, const Matrix& x) {
    return mlp_apply(ae.encoder, x);
}

inline Matrix decode(const AutoencoderParams& ae, const Matrix& z) {
    return mlp_apply(ae.decoder, z);
}

/** Mean over all entries of the squared reconstruction error. */
inline double reconstruction_mse(const AutoencoderParams& ae, const Matrix& x) {
    return (decode(ae, encode(ae, x)) - x).squaredNorm() / static_cast<double>(x.size());
}

inline AutoencoderParams init_autoencoder(Eigen::Index input_dim, const AutoencoderConfig& config) {
    std::vector<Eigen::Index> enc{input_dim};
    enc.insert(enc.end(), config.hidden.begin(), config.hidden.end());
    enc.push_back(config.latent_dim);
    std::vector<Eigen::Index> dec(enc.rbegin(), enc.rend());
    return {init_params(enc, config.seed), init_params(dec, config.seed + 1)};
}

/**
 * Trains with AdamW on shuffled minibatches. Encoder and decoder share one optimizer
 * state over their concatenated parameters.
 */
inline AutoencoderFit train_autoencoder(const Matrix& data, const AutoencoderConfig& config) {
    detail::require(data.rows() >= 1, "train_autoencoder: empty dataset");
    detail::require(config.latent_dim >= 1 && config.latent_dim <= data.cols(), "train_autoencoder: latent width must lie in [1, d]");
    detail::require(config.epochs >= 1, "train_autoencoder: epochs must be positive");
    detail::require(config.batch_size >= 1, "train_autoencoder: batch size must be positive");
    if (!data.allFinite()) {
        throw DataError("train_autoencoder: non-finite values in the data");
    }

    AutoencoderFit fit;
    fit.params = init_autoencoder(data.cols(), config);
    auto& ae = fit.params;
    const Eigen::Index n_enc = ae.encoder.parameter_count();

    Vector flat(n_enc + ae.decoder.parameter_count());
    flat << flatten(ae.encoder), flatten(ae.decoder);
    AdamWState state(config.adam, flat.size());
    Vector grads(flat.size());

    std::mt19937_64 rng(config.seed ^ 0x9e3779b97f4a7c15ULL);
    std::vector<Eigen::Index> order(data.rows());
    std::iota(order.begin(), order.end(), Eigen::Index{0});
    const Eigen::Index batch = std::min(config.batch_size, data.rows());

    for (int epoch = 0; epoch < config.epochs; ++epoch) {
        std::shuffle(order.begin(), order.end(), rng);
        for (Eigen::Index start = 0; start < data.rows(); start += batch) {
            const Eigen::Index size = std::min(batch, data.rows() - start);
            Matrix x(size, data.cols());
            for (Eigen::Index i = 0; i < size; ++i) {
                x.row(i) = data.row(order[start + i]);
            }

            auto enc = mlp_forward(ae.encoder, x);
            auto dec = mlp_forward(ae.decoder, enc.output);
            Matrix grad_out = (2.0 / static_cast<double>(x.size())) * (dec.output - x);
            auto back_dec = mlp_backward(ae.decoder, dec.tape, grad_out);
            auto back_enc = mlp_backward(ae.encoder, enc.tape, back_dec.grad_input);

            grads << flatten(back_enc.grad_params), flatten(back_dec.grad_params);
            adamw_step(flat, grads, state);
            unflatten(flat, unflatten(flat, 0, ae.encoder), ae.decoder);
        }
        fit.epoch_loss.push_back(reconstruction_mse(ae, data));
    }
    return fit;
}

}

#endif
