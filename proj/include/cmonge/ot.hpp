#ifndef CMONGE_OT_HPP
#define CMONGE_OT_HPP

#include "error.hpp"
#include "types.hpp"

#include <Eigen/Dense>

#include <algorithm>
#include <cmath>
#include <limits>
#include <numeric>
#include <string>
#include <vector>

/**
 * @file ot.hpp
 *
 * @brief Entropic optimal transport between uniformly weighted point clouds.
 *
 * All quantities use the squared Euclidean ground cost. The entropic problem solved is
 * \f$ \min_{P \in U(a, b)} \langle P, C \rangle + \epsilon \sum_{ij} P_{ij} \log P_{ij} \f$,
 * i.e. the transport cost minus \f$\epsilon\f$ times the Shannon entropy of the coupling.
 */

namespace cmonge {

/**
 * @brief Empirical measure with uniform weights on the rows of a point matrix.
 *
 * Rows are samples, columns are coordinates.
 */
class DiscreteMeasure {
public:
    DiscreteMeasure() = default;

    explicit DiscreteMeasure(Matrix points) : points_(std::move(points)) {
        detail::require(points_.rows() >= 1 && points_.cols() >= 1, "DiscreteMeasure: need at least one point and one dimension");
        if (!points_.allFinite()) {
            throw DataError("DiscreteMeasure: non-finite coordinate");
        }
    }

    const Matrix& points() const { return points_; }
    Eigen::Index size() const { return points_.rows(); }
    Eigen::Index dim() const { return points_.cols(); }
    double weight() const { return 1.0 / static_cast<double>(points_.rows()); }

private:
    Matrix points_;
};

/**
 * Squared Euclidean cost between every row of `x` and every row of `y`.
 */
inline Matrix cost_matrix(const Eigen::Ref<const Matrix>& x, const Eigen::Ref<const Matrix>& y) {
    if (x.cols() != y.cols()) {
        throw ConfigError("cost_matrix: dimension mismatch (" + std::to_string(x.cols()) + " vs " + std::to_string(y.cols()) + ")");
    }
    Matrix out(x.rows(), y.rows());
    // Direct differences rather than the |x|^2 + |y|^2 - 2xy expansion, so that
    // identical points give exactly zero.
    for (Eigen::Index j = 0; j < y.rows(); ++j) {
        for (Eigen::Index i = 0; i < x.rows(); ++i) {
            double acc = 0;
            for (Eigen::Index k = 0; k < x.cols(); ++k) {
                double diff = x(i, k) - y(j, k);
                acc += diff * diff;
            }
            out(i, j) = acc;
        }
    }
    return out;
}

inline Matrix cost_matrix(const DiscreteMeasure& x, const DiscreteMeasure& y) {
    return cost_matrix(x.points(), y.points());
}

struct SinkhornOptions {
    /** Entropic regularization strength, in squared-distance units. */
    double epsilon = 0.1;
    int max_iter = 2000;
    /** Maximum absolute violation of either marginal. */
    double tol = 1e-6;
    /**
     * Sinkhorn iterations after which an unconverged solve switches to Newton steps on
     * the semi-dual. Negative disables the switch.
     */
    int newton_after = 50;
    /**
     * Ratio between successive regularization levels of the warm start, which solves
     * coarsely at decreasing epsilon from the largest cost down to `epsilon`.
     * Values outside (0, 1) disable the warm start.
     */
    double scaling_factor = 0.5;
    /** Newton steps need a dense m x m solve; larger targets stay on plain iterations. */
    Eigen::Index newton_max_size = 2048;
};

/**
 * @brief Output of a Sinkhorn solve.
 *
 * Potentials are the dual variables of the problem relative to the product measure,
 * so that \f$\log P_{ij} = (f_i + g_j - C_{ij}) / \epsilon + \log a_i + \log b_j\f$.
 */
struct SinkhornSolution {
    Vector f;
    Vector g;
    Matrix log_coupling;
    /** \f$\langle P, C\rangle\f$. */
    double transport_cost = 0;
    /** \f$\langle P, C\rangle + \epsilon \sum P \log P\f$. */
    double entropic_cost = 0;
    int iterations = 0;
    double marginal_error = std::numeric_limits<double>::infinity();
    bool converged = false;

    Matrix coupling() const { return log_coupling.array().exp().matrix(); }
};

namespace detail {

// out_i = -logsumexp_j(v_j - K_ij) + log(m)
inline void softmin_rows(const Matrix& K, const Vector& v, Matrix& buffer, Vector& out) {
    buffer.noalias() = -K;
    buffer.rowwise() += v.transpose();
    Vector rowmax = buffer.rowwise().maxCoeff();
    buffer.colwise() -= rowmax;
    Vector sums = buffer.array().exp().rowwise().sum();
    out = -(rowmax.array() + sums.array().log() - std::log(static_cast<double>(K.cols())));
}

// out_j = -logsumexp_i(u_i - K_ij) + log(n)
inline void softmin_cols(const Matrix& K, const Vector& u, Matrix& buffer, Vector& out) {
    buffer.noalias() = -K;
    buffer.colwise() += u;
    Eigen::RowVectorXd colmax = buffer.colwise().maxCoeff();
    buffer.rowwise() -= colmax;
    Eigen::RowVectorXd sums = buffer.array().exp().colwise().sum();
    out = -(colmax.array() + sums.array().log() - std::log(static_cast<double>(K.rows()))).transpose();
}

inline double row_violation(const Vector& u_current, const Vector& u_next, double weight) {
    double worst = 0;
    for (Eigen::Index i = 0; i < u_current.size(); ++i) {
        worst = std::max(worst, weight * std::abs(std::expm1(u_current[i] - u_next[i])));
    }
    return worst;
}

// Fills `logp` with log(P_ij) - log(a_i b_j) = u_i + v_j - K_ij.
inline void log_kernel(const Matrix& K, const Vector& u, const Vector& v, Matrix& logp) {
    logp.noalias() = -K;
    logp.colwise() += u;
    logp.rowwise() += v.transpose();
}

/*
 * Newton ascent on the semi-dual F(v) = sum_i a_i u_i(v) + sum_j b_j v_j, where u(v) makes
 * every row marginal exact. The negative Hessian is diag(c) - P^T diag(1/a) P with c the
 * column sums; its null space (constant shifts of v) is removed by pinning the last entry.
 * On return (u, v) has exact rows and `error` holds the column violation.
 */
inline int newton_polish(const Matrix& K, Vector& u, Vector& v, double tol, int max_steps, Matrix& buffer, double& error) {
    const Eigen::Index n = K.rows(), m = K.cols();
    const double a = 1.0 / static_cast<double>(n), b = 1.0 / static_cast<double>(m);
    const double log_ab = std::log(a) + std::log(b);

    Matrix p(n, m);
    Vector col(m);
    auto evaluate = [&](const Vector& v_try, Vector& u_out, double& objective, double& err) {
        softmin_rows(K, v_try, buffer, u_out);
        log_kernel(K, u_out, v_try, p);
        p = (p.array() + log_ab).exp().matrix();
        col = p.colwise().sum().transpose();
        objective = a * u_out.sum() + b * v_try.sum();
        err = (col.array() - b).abs().maxCoeff();
    };

    double objective = 0;
    evaluate(v, u, objective, error);
    if (m < 2) {
        return 0;
    }

    // Damped Newton (Levenberg-Marquardt): the damping grows when the quadratic model
    // overpredicts the gain, which keeps steps bounded along near-flat directions of a
    // plan that is close to splitting into disconnected blocks.
    int steps = 0;
    double damping = 1e-6;
    Vector u_try(n), v_try(m);
    Matrix p_before(n, m);
    while (error > tol && steps < max_steps) {
        const Vector grad = Vector::Constant(m, b) - col;
        // Weighted graph Laplacian with w_jk = sum_i P_ij S_ik, S the row-normalized plan.
        // The diagonal is summed from the off-diagonal weights, since c_j - sum_i P_ij S_ij
        // cancels catastrophically when the plan is close to a permutation.
        Matrix hess = -static_cast<double>(n) * (p.transpose() * p);
        hess.diagonal().setZero();
        hess.diagonal() = -hess.rowwise().sum();
        const Matrix reduced_hess = hess.topLeftCorner(m - 1, m - 1);
        const double ridge = 1e-13 * std::max(hess.diagonal().maxCoeff(), 1e-300);
        const double grad_norm = grad.norm();

        bool accepted = false;
        const Vector col_before = col;
        p_before = p;
        while (!accepted && steps < max_steps && damping < 1e12) {
            ++steps;
            Matrix reduced = reduced_hess;
            reduced.diagonal().array() += ridge + damping * grad_norm;
            Eigen::LLT<Matrix> llt(reduced);
            Vector dir = Vector::Zero(m);
            if (llt.info() == Eigen::Success) {
                dir.head(m - 1) = llt.solve(grad.head(m - 1));
            }
            if (llt.info() != Eigen::Success || !dir.allFinite()) {
                damping *= 8;
                continue;
            }
            const double predicted = grad.dot(dir) - 0.5 * dir.head(m - 1).dot(reduced_hess * dir.head(m - 1));
            v_try = v + dir;
            double obj_try = 0, err_try = 0;
            evaluate(v_try, u_try, obj_try, err_try);
            const double ratio = (obj_try - objective) / predicted;
            // Close to the optimum the gain is lost in rounding, so a smaller violation also counts.
            if (std::isfinite(obj_try) && predicted > 0 && (ratio > 1e-4 || err_try < error)) {
                v.swap(v_try);
                u.swap(u_try);
                objective = obj_try;
                error = err_try;
                accepted = true;
                if (ratio > 0.75) {
                    damping = std::max(damping / 4, 1e-12);
                } else if (ratio < 0.25) {
                    damping *= 4;
                }
            } else {
                col = col_before;
                p = p_before;
                damping *= 8;
            }
        }
        if (!accepted) {
            break;
        }
    }
    return steps;
}

inline void finalize(const Matrix& cost, const Vector& u, const Vector& v, double epsilon, SinkhornSolution& out) {
    const double n = static_cast<double>(cost.rows()), m = static_cast<double>(cost.cols());
    const double log_ab = -std::log(n) - std::log(m);
    out.log_coupling = -cost / epsilon;
    out.log_coupling.colwise() += u;
    out.log_coupling.rowwise() += v.transpose();
    out.log_coupling.array() += log_ab;
    out.f = epsilon * u;
    out.g = epsilon * v;

    double transport = 0, neg_entropy = 0;
    for (Eigen::Index j = 0; j < cost.cols(); ++j) {
        for (Eigen::Index i = 0; i < cost.rows(); ++i) {
            double lp = out.log_coupling(i, j);
            double p = std::exp(lp);
            transport += p * cost(i, j);
            neg_entropy += p * lp;
        }
    }
    out.transport_cost = transport;
    out.entropic_cost = transport + epsilon * neg_entropy;
    if (!std::isfinite(out.entropic_cost)) {
        throw NumericalError("sinkhorn: non-finite objective");
    }
}

inline void check_inputs(const Matrix& cost, const SinkhornOptions& opt) {
    detail::require(opt.epsilon > 0, "sinkhorn: epsilon must be positive");
    detail::require(opt.max_iter >= 1, "sinkhorn: max_iter must be positive");
    detail::require(cost.rows() >= 1 && cost.cols() >= 1, "sinkhorn: empty measure");
    if (!cost.allFinite()) {
        throw NumericalError("sinkhorn: non-finite cost entries");
    }
}

}

/**
 * Log-domain Sinkhorn iterations on a precomputed cost matrix, with uniform marginals
 * \f$1/n\f$ and \f$1/m\f$.
 *
 * Alternates column and row potential updates until the row violation (the column
 * marginal being exact after each column update) drops to `opt.tol`.
 * A solve that exhausts `max_iter` is returned with `converged = false`.
 */
inline SinkhornSolution sinkhorn(const Matrix& cost, const SinkhornOptions& opt = {}) {
    detail::check_inputs(cost, opt);
    const Eigen::Index n = cost.rows(), m = cost.cols();
    const double a = 1.0 / static_cast<double>(n);

    Matrix scaled(n, m);
    Matrix buffer(n, m);
    Vector u(n), v = Vector::Zero(m), u_next(n);
    SinkhornSolution out;

    // Alternating updates at the current `scaled`; stops at `stop_tol` or after `budget` steps.
    auto iterate = [&](int budget, double stop_tol) {
        bool done = false;
        for (int it = 0; it < budget; ++it) {
            detail::softmin_cols(scaled, u, buffer, v);
            detail::softmin_rows(scaled, v, buffer, u_next);
            ++out.iterations;
            out.marginal_error = detail::row_violation(u, u_next, a);
            if (!std::isfinite(out.marginal_error)) {
                throw NumericalError("sinkhorn: potentials diverged");
            }
            if (out.marginal_error <= stop_tol) {
                // Keep u paired with v: the columns are exact and the rows miss by the reported error.
                done = true;
                break;
            }
            u.swap(u_next);
        }
        return done;
    };

    // Warm start: potentials carried across levels in cost units.
    double level = opt.epsilon;
    const double top = cost.maxCoeff();
    const bool warm = opt.scaling_factor > 0 && opt.scaling_factor < 1 && top > opt.epsilon;
    if (warm) {
        level = top;
    }
    scaled = cost / level;
    detail::softmin_rows(scaled, v, buffer, u);
    const double stage_tol = std::max(opt.tol, 1e-2 * a);
    while (warm && level > opt.epsilon && out.iterations < opt.max_iter) {
        iterate(std::min(50, opt.max_iter - out.iterations), stage_tol);
        const double next = std::max(opt.epsilon, level * opt.scaling_factor);
        u *= level / next;
        v *= level / next;
        level = next;
        scaled = cost / level;
    }
    if (warm && level > opt.epsilon) {
        // Budget ran out before reaching the target regularization.
        scaled = cost / opt.epsilon;
        u *= level / opt.epsilon;
        detail::softmin_cols(scaled, u, buffer, v);
    }

    const bool use_newton = opt.newton_after >= 0 && m >= 2 && m <= opt.newton_max_size;
    const int remaining = opt.max_iter - out.iterations;
    const int plain_budget = use_newton ? std::min(remaining, std::max(opt.newton_after, 1)) : remaining;
    out.converged = iterate(plain_budget, opt.tol);

    if (!out.converged && use_newton && out.iterations < opt.max_iter) {
        out.iterations += detail::newton_polish(scaled, u, v, opt.tol, opt.max_iter - out.iterations, buffer, out.marginal_error);
        out.converged = out.marginal_error <= opt.tol;
        if (!out.converged && out.iterations < opt.max_iter) {
            out.converged = iterate(opt.max_iter - out.iterations, opt.tol);
        }
    }

    detail::finalize(cost, u, v, opt.epsilon, out);
    return out;
}

inline SinkhornSolution sinkhorn(const DiscreteMeasure& mu, const DiscreteMeasure& nu, const SinkhornOptions& opt = {}) {
    return sinkhorn(cost_matrix(mu, nu), opt);
}

/**
 * Sinkhorn for a measure against itself.
 *
 * Uses the averaged symmetric update \f$u \leftarrow (u + T(u)) / 2\f$, which keeps the
 * coupling symmetric and converges in far fewer iterations than the alternating scheme.
 */
inline SinkhornSolution sinkhorn_symmetric(const Eigen::Ref<const Matrix>& points, const SinkhornOptions& opt = {}) {
    Matrix cost = cost_matrix(points, points);
    detail::check_inputs(cost, opt);
    const Eigen::Index n = cost.rows();
    const double a = 1.0 / static_cast<double>(n);

    Matrix scaled = cost / opt.epsilon;
    Matrix buffer(n, n);
    Vector u = Vector::Zero(n), t(n);

    const int budget = opt.newton_after >= 0 ? std::min(opt.max_iter, std::max(opt.newton_after, 1)) : opt.max_iter;

    SinkhornSolution out;
    for (int it = 1; it <= budget; ++it) {
        detail::softmin_rows(scaled, u, buffer, t);
        out.iterations = it;
        out.marginal_error = detail::row_violation(u, t, a);
        if (!std::isfinite(out.marginal_error)) {
            throw NumericalError("sinkhorn: potentials diverged");
        }
        if (out.marginal_error <= opt.tol) {
            out.converged = true;
            break;
        }
        u = 0.5 * (u + t);
    }

    if (!out.converged) {
        // Fall back to the general solver, which refines with Newton steps.
        if (out.iterations < opt.max_iter) {
            auto rest = opt;
            rest.max_iter = opt.max_iter - out.iterations;
            auto general = sinkhorn(cost, rest);
            general.iterations += out.iterations;
            return general;
        }
    }

    detail::finalize(cost, u, u, opt.epsilon, out);
    return out;
}

inline SinkhornSolution sinkhorn_symmetric(const DiscreteMeasure& mu, const SinkhornOptions& opt = {}) {
    return sinkhorn_symmetric(mu.points(), opt);
}

/**
 * Gradient of \f$\langle P, C(X, Y)\rangle\f$ with respect to the rows of `x`, holding `P` fixed:
 * \f$2 \sum_j P_{ij} (x_i - y_j)\f$.
 *
 * At a converged solution this is the gradient of the entropic cost by the envelope theorem.
 */
inline Matrix transport_gradient_source(const SinkhornSolution& sol, const Eigen::Ref<const Matrix>& x, const Eigen::Ref<const Matrix>& y) {
    Matrix p = sol.coupling();
    Vector mass = p.rowwise().sum();
    Matrix grad = mass.asDiagonal() * x;
    grad.noalias() -= p * y;
    return 2.0 * grad;
}

/**
 * Same as `transport_gradient_source()` but with respect to the rows of `y`.
 */
inline Matrix transport_gradient_target(const SinkhornSolution& sol, const Eigen::Ref<const Matrix>& x, const Eigen::Ref<const Matrix>& y) {
    Matrix p = sol.coupling();
    Vector mass = p.colwise().sum().transpose();
    Matrix grad = mass.asDiagonal() * y;
    grad.noalias() -= p.transpose() * x;
    return 2.0 * grad;
}

/**
 * @brief The three entropic solves making up a Sinkhorn divergence.
 */
struct DivergenceTerms {
    SinkhornSolution cross;
    SinkhornSolution source_self;
    SinkhornSolution target_self;

    /** \f$W_\epsilon(\mu,\nu) - (W_\epsilon(\mu,\mu) + W_\epsilon(\nu,\nu))/2\f$ */
    double value() const {
        return cross.entropic_cost - 0.5 * (source_self.entropic_cost + target_self.entropic_cost);
    }

    bool converged() const {
        return cross.converged && source_self.converged && target_self.converged;
    }
};

inline DivergenceTerms divergence_terms(const Eigen::Ref<const Matrix>& x, const Eigen::Ref<const Matrix>& y, const SinkhornOptions& opt = {}) {
    DivergenceTerms out;
    out.source_self = sinkhorn_symmetric(x, opt);
    if (x.rows() == y.rows() && x.cols() == y.cols() && x == y) {
        // W(mu, mu) has one value; reuse it for all three terms.
        out.cross = out.source_self;
        out.target_self = out.source_self;
        return out;
    }
    out.cross = sinkhorn(cost_matrix(x, y), opt);
    out.target_self = sinkhorn_symmetric(y, opt);
    return out;
}

/**
 * Debiased Sinkhorn divergence \f$\Delta_\epsilon(\mu, \nu)\f$.
 *
 * Unconverged inner solves are not an error here; use `divergence_terms()` to inspect them.
 */
inline double sinkhorn_divergence(const DiscreteMeasure& mu, const DiscreteMeasure& nu, const SinkhornOptions& opt = {}) {
    return divergence_terms(mu.points(), nu.points(), opt).value();
}

/**
 * Gradient of the divergence with respect to the source points, given converged terms.
 * The target self-term does not depend on the source and is ignored.
 */
inline Matrix divergence_gradient(const DivergenceTerms& terms, const Eigen::Ref<const Matrix>& x, const Eigen::Ref<const Matrix>& y) {
    if (!terms.cross.converged || !terms.source_self.converged) {
        throw NumericalError("divergence_gradient: Sinkhorn did not converge");
    }
    // The self term sees x in both slots; its coupling is symmetric, so the two
    // contributions coincide and the 1/2 debiasing factor cancels one of them.
    Matrix grad = transport_gradient_source(terms.cross, x, y);
    grad -= 0.5 * (transport_gradient_source(terms.source_self, x, x) + transport_gradient_target(terms.source_self, x, x));
    return grad;
}

inline Matrix divergence_gradient(const DiscreteMeasure& mu, const DiscreteMeasure& nu, const SinkhornOptions& opt = {}) {
    auto terms = divergence_terms(mu.points(), nu.points(), opt);
    if (!terms.target_self.converged) {
        throw NumericalError("divergence_gradient: Sinkhorn did not converge");
    }
    return divergence_gradient(terms, mu.points(), nu.points());
}

/**
 * Exact unregularized OT cost between two equally sized uniform measures, by enumerating
 * every assignment. Intended as a test oracle; limited to 8 points.
 */
inline double exact_ot_oracle(const DiscreteMeasure& mu, const DiscreteMeasure& nu) {
    if (mu.size() != nu.size()) {
        throw ConfigError("exact_ot_oracle: measures must have equal size");
    }
    if (mu.size() > 8) {
        throw ConfigError("exact_ot_oracle: at most 8 points");
    }
    Matrix cost = cost_matrix(mu, nu);
    std::vector<int> perm(static_cast<std::size_t>(mu.size()));
    std::iota(perm.begin(), perm.end(), 0);
    double best = std::numeric_limits<double>::infinity();
    do {
        double total = 0;
        for (std::size_t i = 0; i < perm.size(); ++i) {
            total += cost(static_cast<Eigen::Index>(i), perm[i]);
        }
        best = std::min(best, total);
    } while (std::next_permutation(perm.begin(), perm.end()));
    return best / static_cast<double>(mu.size());
}

}

#endif
