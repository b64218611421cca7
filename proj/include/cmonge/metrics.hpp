#ifndef CMONGE_METRICS_HPP
#define CMONGE_METRICS_HPP

#include "data.hpp"
#include "error.hpp"
#include "ot.hpp"

#include <algorithm>
#include <cmath>
#include <cstdint>
#include <functional>
#include <limits>
#include <map>
#include <numeric>
#include <ostream>
#include <random>
#include <string>
#include <vector>

/**
 * @file metrics.hpp
 *
 * @brief Distribution-level evaluation: R² of feature means, maximum mean discrepancy,
 * transport cost, and the batched protocol that averages them over test batches.
 */

namespace cmonge {

/**
 * Coefficient of determination between the per-feature means of `pred` and `target`,
 * restricted to `features` (all features when empty). NaN when the target means are constant.
 */
inline double r_squared_means(const Matrix& pred, const Matrix& target, const std::vector<Eigen::Index>& features = {}) {
    detail::require(pred.cols() == target.cols(), "r_squared_means: feature counts differ");
    detail::require(pred.rows() >= 1 && target.rows() >= 1, "r_squared_means: empty cloud");
    std::vector<Eigen::Index> subset = features;
    if (subset.empty()) {
        subset.resize(static_cast<std::size_t>(pred.cols()));
        std::iota(subset.begin(), subset.end(), Eigen::Index{0});
    }
    for (auto j : subset) {
        detail::require(j >= 0 && j < pred.cols(), "r_squared_means: feature index out of range");
    }

    const Eigen::RowVectorXd pm = pred.colwise().mean(), tm = target.colwise().mean();
    double grand = 0;
    for (auto j : subset) {
        grand += tm[j];
    }
    grand /= static_cast<double>(subset.size());
    double ss_res = 0, ss_tot = 0;
    for (auto j : subset) {
        ss_res += (tm[j] - pm[j]) * (tm[j] - pm[j]);
        ss_tot += (tm[j] - grand) * (tm[j] - grand);
    }
    if (ss_tot == 0) {
        return std::numeric_limits<double>::quiet_NaN();
    }
    return 1 - ss_res / ss_tot;
}

/**
 * Median pairwise distance over the pooled sample, times 0.5, 1 and 2.
 */
inline std::vector<double> median_bandwidths(const Matrix& a, const Matrix& b) {
    Matrix joined(a.rows() + b.rows(), a.cols());
    joined << a, b;
    Matrix d2 = cost_matrix(joined, joined);
    std::vector<double> dist;
    dist.reserve(static_cast<std::size_t>(joined.rows() * (joined.rows() - 1) / 2));
    for (Eigen::Index j = 0; j < joined.rows(); ++j) {
        for (Eigen::Index i = 0; i < j; ++i) {
            dist.push_back(std::sqrt(d2(i, j)));
        }
    }
    if (dist.empty()) {
        return {1.0, 1.0, 1.0};
    }
    auto mid = dist.begin() + static_cast<long>(dist.size() / 2);
    std::nth_element(dist.begin(), mid, dist.end());
    double med = *mid;
    if (dist.size() % 2 == 0) {
        med = 0.5 * (med + *std::max_element(dist.begin(), mid));
    }
    if (!(med > 0)) {
        med = 1.0;
    }
    return {0.5 * med, med, 2 * med};
}

namespace detail {

// Mean over bandwidths of exp(-d2 / (2 s^2)).
inline Matrix rbf_kernel(const Matrix& d2, const std::vector<double>& bandwidths) {
    Matrix k = Matrix::Zero(d2.rows(), d2.cols());
    for (double s : bandwidths) {
        k.array() += (-d2.array() / (2 * s * s)).exp();
    }
    return k / static_cast<double>(bandwidths.size());
}

}

/**
 * Unbiased estimate of the squared MMD under an RBF kernel averaged over `bandwidths`.
 * May be slightly negative.
 */
inline double mmd_unbiased(const Matrix& a, const Matrix& b, const std::vector<double>& bandwidths) {
    detail::require(a.cols() == b.cols(), "mmd: feature counts differ");
    detail::require(a.rows() >= 2 && b.rows() >= 2, "mmd: need at least two samples per cloud");
    detail::require(!bandwidths.empty(), "mmd: empty bandwidth list");
    for (double s : bandwidths) {
        detail::require(s > 0 && std::isfinite(s), "mmd: bandwidths must be positive");
    }
    const double n = static_cast<double>(a.rows()), m = static_cast<double>(b.rows());
    Matrix kaa = detail::rbf_kernel(cost_matrix(a, a), bandwidths);
    Matrix kbb = detail::rbf_kernel(cost_matrix(b, b), bandwidths);
    Matrix kab = detail::rbf_kernel(cost_matrix(a, b), bandwidths);
    const double saa = kaa.sum() - kaa.trace(), sbb = kbb.sum() - kbb.trace();
    return saa / (n * (n - 1)) + sbb / (m * (m - 1)) - 2 * kab.sum() / (n * m);
}

/** Squared MMD clipped at zero, for reporting. */
inline double mmd(const Matrix& a, const Matrix& b, const std::vector<double>& bandwidths) {
    return std::max(0.0, mmd_unbiased(a, b, bandwidths));
}

/** Squared MMD with median-heuristic bandwidths. */
inline double mmd(const Matrix& a, const Matrix& b) {
    return mmd(a, b, median_bandwidths(a, b));
}

/**
 * Transport cost \f$\langle P, C\rangle\f$ at the entropic coupling.
 */
inline double wasserstein_metric(const Matrix& a, const Matrix& b, const SinkhornOptions& opt = {}) {
    auto sol = sinkhorn(cost_matrix(a, b), opt);
    if (!sol.converged) {
        throw NumericalError("wasserstein_metric: Sinkhorn did not converge (marginal error " + std::to_string(sol.marginal_error) + ")");
    }
    return sol.transport_cost;
}

struct EvalOptions {
    int n_batches = 10;
    Eigen::Index batch_size = 256;
    /** Features used by R²; empty means all. */
    std::vector<Eigen::Index> features;
    SinkhornOptions sinkhorn;
    std::uint64_t seed = 0;
};

struct BatchMetrics {
    double r2 = 0;
    double wasserstein = 0;
    double mmd = 0;
};

struct EvalReport {
    std::string label;
    std::string model;
    double r2 = 0;
    bool r2_defined = true;
    double wasserstein = 0;
    double mmd = 0;
    int n_batches = 0;
    std::vector<BatchMetrics> batches;
};

/** Maps a batch of source cells to predicted target cells, row for row. */
using Predictor = std::function<Matrix(const Matrix&)>;

inline Predictor identity_predictor() {
    return [](const Matrix& x) { return x; };
}

namespace detail {

// Batch of `size` distinct rows, or the whole pool when it is not larger than `size`.
inline Matrix draw_without_replacement(const Matrix& pool, Eigen::Index size, std::mt19937_64& rng) {
    if (pool.rows() <= size) {
        return pool;
    }
    std::vector<Eigen::Index> idx(static_cast<std::size_t>(pool.rows()));
    std::iota(idx.begin(), idx.end(), Eigen::Index{0});
    for (Eigen::Index k = 0; k < size; ++k) {
        std::uniform_int_distribution<Eigen::Index> pick(k, pool.rows() - 1);
        std::swap(idx[static_cast<std::size_t>(k)], idx[static_cast<std::size_t>(pick(rng))]);
    }
    Matrix out(size, pool.cols());
    for (Eigen::Index k = 0; k < size; ++k) {
        out.row(k) = pool.row(idx[static_cast<std::size_t>(k)]);
    }
    return out;
}

}

/**
 * Averages the metrics over `n_batches` test batches drawn without replacement from the source
 * (control) and target pools. When both pools fit in one batch, every batch would be the same,
 * so a single batch is evaluated.
 */
inline EvalReport evaluate_condition(const Predictor& predict, const Matrix& source, const Matrix& target, const std::string& label, const EvalOptions& opt) {
    if (source.rows() < 2 || target.rows() < 2) {
        throw DataError("evaluate_condition: '" + label + "' needs at least two source and two target test cells");
    }
    detail::require(opt.n_batches >= 1 && opt.batch_size >= 2, "evaluate_condition: need at least one batch of two or more cells");
    EvalReport rep;
    rep.label = label;
    const bool fits = source.rows() <= opt.batch_size && target.rows() <= opt.batch_size;
    rep.n_batches = fits ? 1 : opt.n_batches;

    std::mt19937_64 rng(opt.seed);
    int defined = 0;
    double r2_sum = 0;
    for (int k = 0; k < rep.n_batches; ++k) {
        Matrix src = detail::draw_without_replacement(source, opt.batch_size, rng);
        Matrix tgt = detail::draw_without_replacement(target, opt.batch_size, rng);
        Matrix pred = predict(src);
        if (pred.rows() != src.rows() || pred.cols() != target.cols()) {
            throw ConfigError("evaluate_condition: predictor returned the wrong shape");
        }
        BatchMetrics b;
        b.r2 = r_squared_means(pred, tgt, opt.features);
        b.wasserstein = wasserstein_metric(pred, tgt, opt.sinkhorn);
        b.mmd = mmd(pred, tgt);
        if (!std::isnan(b.r2)) {
            r2_sum += b.r2;
            ++defined;
        }
        rep.wasserstein += b.wasserstein;
        rep.mmd += b.mmd;
        rep.batches.push_back(b);
    }
    rep.r2_defined = defined > 0;
    rep.r2 = defined > 0 ? r2_sum / defined : std::numeric_limits<double>::quiet_NaN();
    rep.wasserstein /= rep.n_batches;
    rep.mmd /= rep.n_batches;
    return rep;
}

inline constexpr int report_schema_version = 1;

namespace detail {

inline std::string fmt(double v) {
    if (std::isnan(v)) {
        return "nan";
    }
    char buf[32];
    std::snprintf(buf, sizeof(buf), "%.10g", v);
    return buf;
}

}

/**
 * Tab-separated table: one row per (model, condition, batch), then one summary row per
 * (model, condition) with `batch` set to `mean`.
 */
inline void write_report_table(std::ostream& out, const std::vector<EvalReport>& reports) {
    out << "# schema " << report_schema_version << "\n";
    out << "model\tcondition\tdose\tbatch\tr2\tr2_defined\twasserstein\tmmd\n";
    auto dose_of = [](const std::string& label) {
        auto cond = parse_condition(label);
        return cond.dose ? detail::format_dose(*cond.dose) : std::string("NA");
    };
    for (const auto& r : reports) {
        for (std::size_t k = 0; k < r.batches.size(); ++k) {
            const auto& b = r.batches[k];
            out << r.model << '\t' << r.label << '\t' << dose_of(r.label) << '\t' << k << '\t' << detail::fmt(b.r2) << '\t' << (std::isnan(b.r2) ? 0 : 1) << '\t'
                << detail::fmt(b.wasserstein) << '\t' << detail::fmt(b.mmd) << '\n';
        }
    }
    for (const auto& r : reports) {
        out << r.model << '\t' << r.label << '\t' << dose_of(r.label) << "\tmean\t" << detail::fmt(r.r2) << '\t' << (r.r2_defined ? 1 : 0) << '\t'
            << detail::fmt(r.wasserstein) << '\t' << detail::fmt(r.mmd) << '\n';
    }
}

/**
 * Long format for plotting: model, condition, dose, metric, value (batch means only).
 */
inline void write_report_long(std::ostream& out, const std::vector<EvalReport>& reports) {
    out << "model\tcondition\tdose\tmetric\tvalue\n";
    for (const auto& r : reports) {
        auto cond = parse_condition(r.label);
        const std::string dose = cond.dose ? detail::format_dose(*cond.dose) : "NA";
        out << r.model << '\t' << r.label << '\t' << dose << "\tr2\t" << detail::fmt(r.r2) << '\n';
        out << r.model << '\t' << r.label << '\t' << dose << "\twasserstein\t" << detail::fmt(r.wasserstein) << '\n';
        out << r.model << '\t' << r.label << '\t' << dose << "\tmmd\t" << detail::fmt(r.mmd) << '\n';
    }
}

/**
 * Human-readable summary: per model and dose, the mean and standard deviation of each metric
 * across conditions.
 */
inline void write_report_summary(std::ostream& out, const std::vector<EvalReport>& reports) {
    struct Acc {
        std::vector<double> r2, w, mmd;
    };
    // Doses ordered numerically; conditions without a dose sort first.
    std::map<std::string, std::map<double, Acc>> groups;
    for (const auto& r : reports) {
        auto cond = parse_condition(r.label);
        auto& acc = groups[r.model][cond.dose ? *cond.dose : -1.0];
        if (r.r2_defined) {
            acc.r2.push_back(r.r2);
        }
        acc.w.push_back(r.wasserstein);
        acc.mmd.push_back(r.mmd);
    }
    auto stats = [](const std::vector<double>& v) {
        if (v.empty()) {
            return std::string("nan");
        }
        double mean = std::accumulate(v.begin(), v.end(), 0.0) / static_cast<double>(v.size());
        double var = 0;
        for (double x : v) {
            var += (x - mean) * (x - mean);
        }
        const double sd = v.size() > 1 ? std::sqrt(var / static_cast<double>(v.size() - 1)) : 0.0;
        char buf[64];
        std::snprintf(buf, sizeof(buf), "%.4f +/- %.4f", mean, sd);
        return std::string(buf);
    };
    for (const auto& [model, by_dose] : groups) {
        out << "model " << model << "\n";
        for (const auto& [dose, acc] : by_dose) {
            out << "  dose " << (dose < 0 ? std::string("NA") : detail::format_dose(dose)) << " (" << acc.w.size() << " conditions): R2 " << stats(acc.r2) << ", Wasserstein " << stats(acc.w) << ", MMD " << stats(acc.mmd)
                << "\n";
        }
    }
}

}

#endif
