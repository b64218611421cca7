#ifndef CMONGE_CONDITIONING_HPP
#define CMONGE_CONDITIONING_HPP

#include "error.hpp"
#include "nn.hpp"
#include "ot.hpp"

#include <algorithm>
#include <charconv>
#include <cmath>
#include <cstdint>
#include <fstream>
#include <map>
#include <optional>
#include <random>
#include <sstream>
#include <string>
#include <vector>

/**
 * @file conditioning.hpp
 *
 * @brief Context vectors for the conditional map: dose transform, drug encoders with
 * average pooling over combinations, and data-driven drug embeddings from multidimensional
 * scaling of population distances.
 */

namespace cmonge {

/**
 * A treatment: one or more drugs and an optional dose in nM.
 */
struct RawCondition {
    std::vector<std::string> drugs;
    std::optional<double> dose;
    std::string label;
};

enum class ContextMode { none, dose, drug_dose };

inline std::string to_string(ContextMode mode) {
    switch (mode) {
    case ContextMode::none:
        return "none";
    case ContextMode::dose:
        return "dose";
    default:
        return "drugdose";
    }
}

inline ContextMode parse_context_mode(const std::string& s) {
    if (s == "none") {
        return ContextMode::none;
    }
    if (s == "dose") {
        return ContextMode::dose;
    }
    if (s == "drugdose" || s == "drug_dose") {
        return ContextMode::drug_dose;
    }
    throw ConfigError("unknown context mode '" + s + "' (expected none, dose or drugdose)");
}

/** Natural logarithm of the dose. */
inline double encode_dose(double dose) {
    if (!(dose > 0) || !std::isfinite(dose)) {
        throw DataError("encode_dose: dose must be positive and finite");
    }
    return std::log(dose);
}

/**
 * @brief Drug vectors keyed by identifier.
 *
 * Fingerprint tables are keyed by drug; data-driven tables are keyed by condition label
 * (drug and dose), with the drug alone as fallback.
 */
struct DrugEmbeddingTable {
    std::string source = "fingerprint";
    std::map<std::string, Vector> vectors;

    Eigen::Index dim() const { return vectors.empty() ? 0 : vectors.begin()->second.size(); }

    /** Data-driven embeddings may omit drugs; fingerprints may not. */
    bool skippable() const { return source == "moa"; }

    const Vector* find(const std::string& key) const {
        auto it = vectors.find(key);
        return it == vectors.end() ? nullptr : &it->second;
    }

    void insert(const std::string& key, Vector v) {
        if (!v.allFinite()) {
            throw DataError("embedding for '" + key + "' has non-finite entries");
        }
        if (!vectors.empty() && v.size() != dim()) {
            throw DataError("embedding for '" + key + "' has width " + std::to_string(v.size()) + ", expected " + std::to_string(dim()));
        }
        vectors[key] = std::move(v);
    }
};

/**
 * Writes a table as comma-separated text. The header reads `drug,source=<tag>,dim=<m>`,
 * followed by one row per key: the key, then m numbers.
 */
inline void save_embedding_table(const DrugEmbeddingTable& table, const std::string& path) {
    std::ofstream out(path, std::ios::trunc);
    if (!out) {
        throw DataError("cannot write " + path);
    }
    out << "drug,source=" << table.source << ",dim=" << table.dim() << '\n';
    char buf[32];
    for (const auto& [key, v] : table.vectors) {
        out << key;
        for (Eigen::Index k = 0; k < v.size(); ++k) {
            std::snprintf(buf, sizeof(buf), "%.17g", v[k]);
            out << ',' << buf;
        }
        out << '\n';
    }
}

inline DrugEmbeddingTable load_embedding_table(const std::string& path) {
    std::ifstream in(path);
    if (!in) {
        throw DataError("cannot open embedding file " + path);
    }
    auto where = [&](std::size_t line) { return path + ":" + std::to_string(line) + ": "; };

    std::string line;
    if (!std::getline(in, line)) {
        throw DataError(where(1) + "empty embedding file");
    }
    DrugEmbeddingTable table;
    long dim = -1;
    {
        std::stringstream header(line);
        std::string field;
        std::getline(header, field, ',');
        while (std::getline(header, field, ',')) {
            if (field.rfind("source=", 0) == 0) {
                table.source = field.substr(7);
            } else if (field.rfind("dim=", 0) == 0) {
                dim = std::strtol(field.c_str() + 4, nullptr, 10);
            }
        }
        if (dim < 1) {
            throw DataError(where(1) + "header must declare dim=<m>");
        }
        if (table.source != "fingerprint" && table.source != "moa") {
            throw DataError(where(1) + "unknown embedding source '" + table.source + "'");
        }
    }

    std::size_t lineno = 1;
    while (std::getline(in, line)) {
        ++lineno;
        if (line.empty()) {
            continue;
        }
        std::stringstream row(line);
        std::string key, field;
        std::getline(row, key, ',');
        Vector v(dim);
        long k = 0;
        while (std::getline(row, field, ',')) {
            if (k >= dim) {
                throw DataError(where(lineno) + "more than " + std::to_string(dim) + " values");
            }
            double value = 0;
            auto res = std::from_chars(field.data(), field.data() + field.size(), value);
            if (res.ec != std::errc() || res.ptr != field.data() + field.size() || !std::isfinite(value)) {
                throw DataError(where(lineno) + "column " + std::to_string(k + 2) + " is not a finite number");
            }
            v[k++] = value;
        }
        if (k != dim) {
            throw DataError(where(lineno) + "expected " + std::to_string(dim) + " values, found " + std::to_string(k));
        }
        if (table.find(key)) {
            throw DataError(where(lineno) + "duplicate key '" + key + "'");
        }
        table.insert(key, std::move(v));
    }
    return table;
}

namespace detail {

inline std::string dose_key(const std::string& drug, double dose) {
    char buf[32];
    auto res = std::to_chars(buf, buf + sizeof(buf), dose);
    return drug + "_" + std::string(buf, res.ptr);
}

}

/**
 * Shared affine drug encoder applied to each drug, then averaged.
 * The transformed vectors are summed in sorted order so the result does not depend on the
 * order of `embeddings`, bit for bit.
 */
inline Vector pool_drug_embeddings(const std::vector<Vector>& embeddings, const DenseLayer& w_drug) {
    detail::require(!embeddings.empty(), "pool_drug_embeddings: empty drug list");
    std::vector<Vector> encoded;
    encoded.reserve(embeddings.size());
    for (const auto& h : embeddings) {
        detail::require(h.size() == w_drug.in_dim(), "pool_drug_embeddings: embedding width does not match the encoder");
        encoded.push_back(w_drug.weight * h + w_drug.bias);
    }
    std::sort(encoded.begin(), encoded.end(), [](const Vector& a, const Vector& b) {
        return std::lexicographical_compare(a.begin(), a.end(), b.begin(), b.end());
    });
    Vector sum = Vector::Zero(w_drug.out_dim());
    for (const auto& e : encoded) {
        sum += e;
    }
    return sum / static_cast<double>(encoded.size());
}

/**
 * @brief Trainable encoders producing the context vector.
 *
 * `w_drug` maps a drug vector to the drug encoding; `w_dose` maps the pooled drug vector
 * concatenated with the log-dose to a scalar.
 */
struct ConditionEncoder {
    ContextMode mode = ContextMode::none;
    DenseLayer w_drug;
    DenseLayer w_dose;

    Eigen::Index embedding_dim() const { return w_drug.in_dim(); }
    Eigen::Index drug_width() const { return w_drug.out_dim(); }

    Eigen::Index context_width() const {
        switch (mode) {
        case ContextMode::none:
            return 0;
        case ContextMode::dose:
            return 1;
        default:
            return drug_width() + 1;
        }
    }

    bool trainable() const { return mode == ContextMode::drug_dose; }

    /** Encoder layers as one flat vector, empty unless the mode is trainable. */
    Vector flat() const {
        if (!trainable()) {
            return Vector();
        }
        return flatten(pack());
    }

    Eigen::Index unflat(const Vector& flat, Eigen::Index offset) {
        if (!trainable()) {
            return offset;
        }
        auto p = pack();
        offset = unflatten(flat, offset, p);
        w_drug = p.layers[0];
        w_dose = p.layers[1];
        return offset;
    }

    // Both layers in one container for flattening; they do not chain.
    MlpParams pack() const {
        MlpParams p;
        p.layers = {w_drug, w_dose};
        return p;
    }
};

/**
 * Glorot-uniform affine encoders for drug vectors of width `m`, with drug encodings of width `phi0`.
 */
inline ConditionEncoder init_condition_encoder(ContextMode mode, Eigen::Index m, Eigen::Index phi0, std::uint64_t seed) {
    ConditionEncoder enc;
    enc.mode = mode;
    if (mode == ContextMode::drug_dose) {
        detail::require(m >= 1 && phi0 >= 1, "init_condition_encoder: widths must be positive");
        enc.w_drug = init_params({m, phi0}, seed).layers[0];
        enc.w_dose = init_params({m + 1, 1}, seed + 1).layers[0];
    }
    return enc;
}

/**
 * Condition with its drug vectors looked up, ready for the encoders.
 */
struct ResolvedCondition {
    std::string label;
    std::vector<Vector> drug_vectors;
    double log_dose = 0;
    bool has_dose = false;
};

/**
 * Looks up the drug vectors needed by `mode`. Each drug is tried under its drug-and-dose key
 * first, then under its bare identifier. Unresolved drugs are dropped only for data-driven
 * tables, and only while at least one drug of the combination remains.
 */
inline ResolvedCondition resolve_condition(const RawCondition& cond, ContextMode mode, const DrugEmbeddingTable* table) {
    ResolvedCondition out;
    out.label = cond.label;
    if (cond.dose) {
        out.log_dose = encode_dose(*cond.dose);
        out.has_dose = true;
    }
    if (mode == ContextMode::none) {
        return out;
    }
    if (!out.has_dose) {
        throw DataError("condition '" + cond.label + "' has no dose but the context needs one");
    }
    if (mode == ContextMode::dose) {
        return out;
    }

    detail::require(table != nullptr, "drug-dose context needs a drug embedding table");
    if (cond.drugs.empty()) {
        throw DataError("condition '" + cond.label + "' names no drug");
    }
    std::vector<std::string> missing;
    for (const auto& drug : cond.drugs) {
        const Vector* h = table->find(detail::dose_key(drug, *cond.dose));
        if (!h) {
            h = table->find(drug);
        }
        if (h) {
            out.drug_vectors.push_back(*h);
        } else {
            missing.push_back(drug);
        }
    }
    if (!missing.empty() && (!table->skippable() || out.drug_vectors.empty())) {
        throw DataError("condition '" + cond.label + "': no embedding for drug '" + missing.front() + "'");
    }
    return out;
}

struct ConditionContext {
    Vector z_drug;
    double z_dose = 0;
    /** The context fed to the map network. */
    Vector c;
};

inline ConditionContext encode_condition(const ResolvedCondition& cond, const ConditionEncoder& enc) {
    ConditionContext out;
    if (enc.mode != ContextMode::none && !cond.has_dose) {
        throw DataError("condition '" + cond.label + "' has no dose for a " + to_string(enc.mode) + " context");
    }
    switch (enc.mode) {
    case ContextMode::none:
        out.c = Vector(0);
        break;
    case ContextMode::dose:
        out.z_dose = cond.log_dose;
        out.c = Vector::Constant(1, cond.log_dose);
        break;
    case ContextMode::drug_dose: {
        out.z_drug = pool_drug_embeddings(cond.drug_vectors, enc.w_drug);
        Vector h_bar = Vector::Zero(enc.embedding_dim());
        for (const auto& h : cond.drug_vectors) {
            h_bar += h;
        }
        h_bar /= static_cast<double>(cond.drug_vectors.size());
        out.z_dose = enc.w_dose.weight.row(0).head(h_bar.size()).dot(h_bar) + enc.w_dose.weight(0, h_bar.size()) * cond.log_dose + enc.w_dose.bias[0];
        out.c.resize(enc.drug_width() + 1);
        out.c << out.z_drug, out.z_dose;
        break;
    }
    }
    return out;
}

inline ConditionContext encode_condition(const RawCondition& cond, const DrugEmbeddingTable* table, const ConditionEncoder& enc) {
    return encode_condition(resolve_condition(cond, enc.mode, table), enc);
}

/**
 * Gradients of `<grad_c, c>` with respect to the encoder layers, packed like `ConditionEncoder::pack()`.
 * Empty unless the mode is trainable.
 */
inline Vector condition_encoder_backward(const ResolvedCondition& cond, const ConditionEncoder& enc, const Vector& grad_c) {
    if (!enc.trainable()) {
        return Vector();
    }
    detail::require(grad_c.size() == enc.context_width(), "condition_encoder_backward: gradient width mismatch");
    const double k = static_cast<double>(cond.drug_vectors.size());
    const auto m = enc.embedding_dim();

    Vector h_bar = Vector::Zero(m);
    for (const auto& h : cond.drug_vectors) {
        h_bar += h;
    }
    h_bar /= k;

    // z_drug = W h_bar + b, since the pooled encoder is affine.
    const Vector g_drug = grad_c.head(enc.drug_width());
    const double g_dose = grad_c[enc.drug_width()];
    MlpParams grads = enc.pack().zeros_like();
    grads.layers[0].weight = g_drug * h_bar.transpose();
    grads.layers[0].bias = g_drug;
    grads.layers[1].weight.row(0).head(m) = g_dose * h_bar.transpose();
    grads.layers[1].weight(0, m) = g_dose * cond.log_dose;
    grads.layers[1].bias[0] = g_dose;
    return flatten(grads);
}

/**
 * Stress \f$\sum_{i<j} (\lVert x_i - x_j \rVert - D_{ij})^2\f$ of a configuration.
 */
inline double mds_stress(const Matrix& config, const Matrix& dist) {
    double s = 0;
    for (Eigen::Index i = 0; i < config.rows(); ++i) {
        for (Eigen::Index j = i + 1; j < config.rows(); ++j) {
            const double d = (config.row(i) - config.row(j)).norm();
            s += (d - dist(i, j)) * (d - dist(i, j));
        }
    }
    return s;
}

struct SmacofOptions {
    Eigen::Index out_dim = 10;
    int max_iter = 500;
    /** Stops once the relative stress decrease of an iteration falls below this. */
    double rel_tol = 1e-8;
    std::uint64_t seed = 0;
};

struct SmacofResult {
    Matrix embedding;
    /** Stress of the initial configuration followed by the stress after each iteration. */
    std::vector<double> stress;
};

/**
 * Metric MDS by stress majorization with unit weights, starting from a seeded Gaussian configuration.
 * Each iteration applies the Guttman transform \f$X \leftarrow B(X) X / K\f$.
 */
inline SmacofResult smacof(const Matrix& dist, const SmacofOptions& opt = {}) {
    const Eigen::Index K = dist.rows();
    detail::require(K >= 2 && dist.cols() == K, "smacof: need a square distance matrix over at least two items");
    detail::require(opt.out_dim >= 1 && opt.max_iter >= 1, "smacof: invalid options");
    if (!dist.allFinite() || (dist.array() < 0).any()) {
        throw DataError("smacof: distances must be finite and nonnegative");
    }

    std::mt19937_64 rng(opt.seed);
    std::normal_distribution<double> normal(0.0, 1.0);
    SmacofResult out;
    out.embedding.resize(K, opt.out_dim);
    for (Eigen::Index j = 0; j < opt.out_dim; ++j) {
        for (Eigen::Index i = 0; i < K; ++i) {
            out.embedding(i, j) = normal(rng);
        }
    }
    out.stress.push_back(mds_stress(out.embedding, dist));

    Matrix b(K, K);
    for (int it = 0; it < opt.max_iter; ++it) {
        const auto& x = out.embedding;
        for (Eigen::Index i = 0; i < K; ++i) {
            double diag = 0;
            for (Eigen::Index j = 0; j < K; ++j) {
                if (i == j) {
                    continue;
                }
                const double d = (x.row(i) - x.row(j)).norm();
                b(i, j) = d > 0 ? -dist(i, j) / d : 0.0;
                diag -= b(i, j);
            }
            b(i, i) = diag;
        }
        out.embedding = (b * x) / static_cast<double>(K);
        const double prev = out.stress.back();
        out.stress.push_back(mds_stress(out.embedding, dist));
        if (prev <= 0 || (prev - out.stress.back()) / prev < opt.rel_tol) {
            break;
        }
    }
    return out;
}

struct MoaEmbedding {
    /** Symmetrized distance matrix fed to the embedding. */
    Matrix distances;
    /** Largest `|D_ij - D_ji|` before symmetrization. */
    double asymmetry = 0;
    SmacofResult mds;
};

/**
 * Embeds K populations so that Euclidean distances approximate their pairwise OT distances
 * \f$\sqrt{\Delta_\epsilon}\f$. The divergence is evaluated in both argument orders and averaged.
 */
inline MoaEmbedding moa_embedding(const std::vector<Matrix>& populations, const SinkhornOptions& sinkhorn_opt, const SmacofOptions& smacof_opt = {}) {
    const auto K = static_cast<Eigen::Index>(populations.size());
    detail::require(K >= 2, "moa_embedding: need at least two populations");
    for (const auto& p : populations) {
        detail::require(p.rows() >= 1, "moa_embedding: empty population");
    }

    Matrix raw = Matrix::Zero(K, K);
    for (Eigen::Index i = 0; i < K; ++i) {
        for (Eigen::Index j = 0; j < K; ++j) {
            if (i == j) {
                continue;
            }
            auto terms = divergence_terms(populations[i], populations[j], sinkhorn_opt);
            if (!terms.converged()) {
                throw NumericalError("moa_embedding: Sinkhorn did not converge for pair (" + std::to_string(i) + ", " + std::to_string(j) + ")");
            }
            raw(i, j) = std::sqrt(std::max(0.0, terms.value()));
        }
    }

    MoaEmbedding out;
    out.asymmetry = (raw - raw.transpose()).cwiseAbs().maxCoeff();
    out.distances = 0.5 * (raw + raw.transpose());
    out.mds = smacof(out.distances, smacof_opt);
    return out;
}

}

#endif
