#ifndef CMONGE_TRAINER_HPP
#define CMONGE_TRAINER_HPP

#include "autoencoder.hpp"
#include "conditioning.hpp"
#include "data.hpp"
#include "io.hpp"
#include "monge_gap.hpp"
#include "nn.hpp"

#include <chrono>
#include <cstdint>
#include <random>
#include <string>
#include <vector>

/**
 * @file trainer.hpp
 *
 * @brief Conditional map network in latent space: training against the Sinkhorn divergence
 * plus the Monge gap, and residual prediction through a frozen autoencoder.
 */

namespace cmonge {

/**
 * @brief Map network with its context encoders.
 *
 * The network reads `[z, c]` and outputs a latent displacement, so a prediction is
 * `z + T([z, c])`.
 */
struct MapModel {
    MlpParams net;
    ConditionEncoder encoder;
    double epsilon = 0.1;
    double lambda = 1e-2;
    std::uint64_t seed = 0;
    std::int64_t steps = 0;

    Eigen::Index latent_dim() const { return net.output_dim(); }
    Eigen::Index context_width() const { return encoder.context_width(); }

    void validate() const {
        net.validate();
        detail::require(net.input_dim() == latent_dim() + context_width(), "MapModel: network input must be latent width plus context width");
    }
};

struct MapConfig {
    std::vector<Eigen::Index> hidden{64, 64, 64, 64};
    /** Width of the drug encoding. */
    Eigen::Index drug_width = 50;
    int steps = 1000;
    Eigen::Index batch_size = 256;
    double lambda = 1e-2;
    /** Absolute regularization, used when `epsilon_relative` is not positive. */
    double epsilon = 0.1;
    /**
     * When positive, the regularization is this fraction of the mean squared distance between
     * training sources and targets, fixed once before the first step.
     */
    double epsilon_relative = 0;
    double sinkhorn_tol = 1e-6;
    int sinkhorn_max_iter = 2000;
    AdamWOptions adam;
    std::uint64_t seed = 0;
};

inline MapModel init_map_model(Eigen::Index latent_dim, ConditionEncoder encoder, const MapConfig& config) {
    detail::require(latent_dim >= 1, "init_map_model: latent width must be positive");
    std::vector<Eigen::Index> sizes{latent_dim + encoder.context_width()};
    sizes.insert(sizes.end(), config.hidden.begin(), config.hidden.end());
    sizes.push_back(latent_dim);
    MapModel model;
    model.net = init_params(sizes, derive_seed(config.seed, 21));
    model.encoder = std::move(encoder);
    model.epsilon = config.epsilon;
    model.lambda = config.lambda;
    model.seed = config.seed;
    return model;
}

/** Network input `[z, c]` with the context repeated on every row. */
inline Matrix map_input(const Matrix& z, const Vector& c) {
    Matrix in(z.rows(), z.cols() + c.size());
    in.leftCols(z.cols()) = z;
    if (c.size() > 0) {
        in.rightCols(c.size()) = c.transpose().replicate(z.rows(), 1);
    }
    return in;
}

inline Matrix predict_latent(const MapModel& model, const Matrix& z, const ResolvedCondition& cond) {
    detail::require(z.cols() == model.latent_dim(), "predict: latent width does not match the map");
    const Vector c = encode_condition(cond, model.encoder).c;
    return z + mlp_apply(model.net, map_input(z, c));
}

/**
 * Counterfactual prediction per cell: decode(encode(x) + T([encode(x), c])).
 */
inline Matrix predict(const MapModel& model, const AutoencoderParams& ae, const Matrix& cells, const ResolvedCondition& cond) {
    detail::require(ae.latent_dim() == model.latent_dim(), "predict: autoencoder and map latent widths differ");
    return decode(ae, predict_latent(model, encode(ae, cells), cond));
}

struct TrainingCondition {
    ResolvedCondition condition;
    /** Latent target cells. */
    Matrix targets;
};

struct TrainingSet {
    /** Latent control cells. */
    Matrix sources;
    std::vector<TrainingCondition> conditions;
};

struct TrainRecord {
    std::int64_t step = 0;
    std::string label;
    double fitting = 0;
    double gap = 0;
    double total = 0;
    /** Seconds since training started. */
    double seconds = 0;
};

struct TrainResult {
    MapModel model;
    std::vector<TrainRecord> history;
};

/** Mean squared distance between all source and all target rows, in closed form. */
inline double mean_cross_cost(const TrainingSet& data) {
    const Eigen::RowVectorXd ms = data.sources.colwise().mean();
    const double ss = data.sources.rowwise().squaredNorm().mean();
    Eigen::RowVectorXd mt = Eigen::RowVectorXd::Zero(data.sources.cols());
    double st = 0;
    Eigen::Index n = 0;
    for (const auto& c : data.conditions) {
        mt += c.targets.colwise().sum();
        st += c.targets.rowwise().squaredNorm().sum();
        n += c.targets.rows();
    }
    mt /= static_cast<double>(n);
    st /= static_cast<double>(n);
    return ss + st - 2 * ms.dot(mt);
}

struct StepGradient {
    LossReport report;
    /** Gradient over the network parameters followed by the encoder parameters, in `flat` order. */
    Vector grad;
};

/**
 * Loss of one batch pair and its gradient with respect to every trainable parameter.
 */
inline StepGradient map_step_gradient(const MapModel& model, const Matrix& z, const Matrix& y, const ResolvedCondition& cond, const SinkhornOptions& opt) {
    const Vector c = encode_condition(cond, model.encoder).c;
    auto fwd = mlp_forward(model.net, map_input(z, c));
    Matrix tz = z + fwd.output;
    StepGradient out{conditional_loss_step(z, tz, y, opt, model.lambda), Vector()};

    // d(tz)/d(output) is the identity, so the output gradient is the loss gradient itself.
    auto back = mlp_backward(model.net, fwd.tape, out.report.grad_wrt_outputs);
    const Vector net_grad = flatten(back.grad_params);
    const Eigen::Index w = model.context_width();
    Vector enc_grad;
    if (model.encoder.trainable()) {
        const Vector grad_c = back.grad_input.rightCols(w).colwise().sum().transpose();
        enc_grad = condition_encoder_backward(cond, model.encoder, grad_c);
    }
    out.grad.resize(net_grad.size() + enc_grad.size());
    out.grad << net_grad, enc_grad;
    return out;
}

/**
 * Stochastic training: each step picks one condition uniformly, draws source and target
 * batches with replacement, and takes one AdamW step on the network and, when trainable,
 * the context encoders.
 */
inline TrainResult train_map(MapModel model, const TrainingSet& data, const MapConfig& config) {
    model.validate();
    detail::require(config.steps >= 0, "train_map: steps must be nonnegative");
    detail::require(config.batch_size >= 1, "train_map: batch size must be positive");
    detail::require(!data.conditions.empty(), "train_map: no training conditions");
    if (data.sources.rows() == 0) {
        throw ConfigError("train_map: no source cells");
    }
    detail::require(data.sources.cols() == model.latent_dim(), "train_map: source width does not match the map");
    for (const auto& c : data.conditions) {
        if (c.targets.rows() == 0) {
            throw ConfigError("train_map: condition '" + c.condition.label + "' has no target cells");
        }
        detail::require(c.targets.cols() == model.latent_dim(), "train_map: target width does not match the map");
        encode_condition(c.condition, model.encoder);
    }

    if (config.epsilon_relative > 0) {
        model.epsilon = config.epsilon_relative * mean_cross_cost(data);
        if (!(model.epsilon > 0)) {
            throw NumericalError("train_map: relative regularization gave a non-positive epsilon");
        }
    } else {
        detail::require(config.epsilon > 0, "train_map: epsilon must be positive");
        model.epsilon = config.epsilon;
    }
    model.lambda = config.lambda;
    model.seed = config.seed;

    SinkhornOptions opt;
    opt.epsilon = model.epsilon;
    opt.tol = config.sinkhorn_tol;
    opt.max_iter = config.sinkhorn_max_iter;

    const Eigen::Index n_net = model.net.parameter_count();
    Vector enc_flat = model.encoder.flat();
    Vector flat(n_net + enc_flat.size());
    flat << flatten(model.net), enc_flat;
    AdamWState state(config.adam, flat.size());

    std::mt19937_64 pick_rng(derive_seed(config.seed, 1));
    std::mt19937_64 batch_rng(derive_seed(config.seed, 2));
    std::uniform_int_distribution<std::size_t> pick(0, data.conditions.size() - 1);
    std::vector<Eigen::Index> source_pool(static_cast<std::size_t>(data.sources.rows()));
    std::iota(source_pool.begin(), source_pool.end(), Eigen::Index{0});

    TrainResult result;
    result.history.reserve(static_cast<std::size_t>(config.steps));
    const auto start = std::chrono::steady_clock::now();

    for (int step = 0; step < config.steps; ++step) {
        const auto& tc = data.conditions[pick(pick_rng)];
        Matrix z = sample_batch(data.sources, source_pool, config.batch_size, batch_rng);
        std::vector<Eigen::Index> target_pool(static_cast<std::size_t>(tc.targets.rows()));
        std::iota(target_pool.begin(), target_pool.end(), Eigen::Index{0});
        Matrix y = sample_batch(tc.targets, target_pool, config.batch_size, batch_rng);

        const auto [report, grad] = map_step_gradient(model, z, y, tc.condition, opt);
        adamw_step(flat, grad, state);
        model.encoder.unflat(flat, unflatten(flat, 0, model.net));
        ++model.steps;

        TrainRecord rec;
        rec.step = step;
        rec.label = tc.condition.label;
        rec.fitting = report.fitting_term;
        rec.gap = report.gap_term;
        rec.total = report.total;
        rec.seconds = std::chrono::duration<double>(std::chrono::steady_clock::now() - start).count();
        result.history.push_back(std::move(rec));
    }
    result.model = std::move(model);
    return result;
}

/**
 * Checkpoint holding the network, the encoder layers when trainable, and the loss settings.
 */
inline Bundle map_bundle(const MapModel& model) {
    Bundle b;
    b.meta = {
        {"kind", "map"},
        {"context_mode", to_string(model.encoder.mode)},
        {"epsilon", model.epsilon},
        {"lambda", model.lambda},
        {"seed", model.seed},
        {"steps", model.steps},
        {"latent_dim", model.latent_dim()},
    };
    b.networks.push_back({"monge_net", model.net});
    if (model.encoder.trainable()) {
        b.networks.push_back({"w_drug", as_network(model.encoder.w_drug)});
        b.networks.push_back({"w_dose", as_network(model.encoder.w_dose)});
    }
    return b;
}

inline MapModel map_from_bundle(const Bundle& b) {
    if (b.meta.value("kind", "") != "map") {
        throw DataError("checkpoint is not a map model");
    }
    MapModel m;
    try {
        m.net = b.get("monge_net");
        m.encoder.mode = parse_context_mode(b.meta.at("context_mode").get<std::string>());
        m.epsilon = b.meta.at("epsilon").get<double>();
        m.lambda = b.meta.at("lambda").get<double>();
        m.seed = b.meta.at("seed").get<std::uint64_t>();
        m.steps = b.meta.at("steps").get<std::int64_t>();
    } catch (const nlohmann::json::exception& e) {
        throw DataError(std::string("map checkpoint metadata: ") + e.what());
    } catch (const ConfigError& e) {
        throw DataError(std::string("map checkpoint metadata: ") + e.what());
    }
    if (m.encoder.trainable()) {
        m.encoder.w_drug = b.get("w_drug").layers.at(0);
        m.encoder.w_dose = b.get("w_dose").layers.at(0);
        if (m.encoder.w_dose.in_dim() != m.encoder.embedding_dim() + 1 || m.encoder.w_dose.out_dim() != 1) {
            throw DataError("map checkpoint: encoder layer shapes disagree");
        }
    }
    try {
        m.validate();
    } catch (const ConfigError& e) {
        throw DataError(std::string("map checkpoint: ") + e.what());
    }
    return m;
}

inline Bundle autoencoder_bundle(const AutoencoderParams& ae, const nlohmann::json& extra = nlohmann::json::object()) {
    Bundle b;
    b.meta = extra;
    b.meta["kind"] = "autoencoder";
    b.meta["latent_dim"] = ae.latent_dim();
    b.meta["input_dim"] = ae.input_dim();
    b.networks.push_back({"encoder", ae.encoder});
    b.networks.push_back({"decoder", ae.decoder});
    return b;
}

inline AutoencoderParams autoencoder_from_bundle(const Bundle& b) {
    if (b.meta.value("kind", "") != "autoencoder") {
        throw DataError("checkpoint is not an autoencoder");
    }
    AutoencoderParams ae{b.get("encoder"), b.get("decoder")};
    try {
        ae.validate();
    } catch (const ConfigError& e) {
        throw DataError(std::string("autoencoder checkpoint: ") + e.what());
    }
    return ae;
}

}

#endif
