#ifndef CMONGE_MONGE_GAP_HPP
#define CMONGE_MONGE_GAP_HPP

#include "ot.hpp"

/**
 * @file monge_gap.hpp
 *
 * @brief Monge gap regularizer and the per-condition training objective.
 */

namespace cmonge {

namespace detail {

inline void check_aligned(const Eigen::Ref<const Matrix>& source, const Eigen::Ref<const Matrix>& transported) {
    if (source.rows() != transported.rows()) {
        throw ConfigError("monge_gap: source and transported batches must have the same number of rows");
    }
    if (source.cols() != transported.cols()) {
        throw ConfigError("monge_gap: source and transported batches must have the same dimension");
    }
    require(source.rows() >= 1, "monge_gap: empty batch");
}

inline double mean_displacement(const Eigen::Ref<const Matrix>& source, const Eigen::Ref<const Matrix>& transported) {
    return (transported - source).squaredNorm() / static_cast<double>(source.rows());
}

}

/**
 * @brief Monge gap of a map evaluated on a batch, with the solve used to compute it.
 */
struct MongeGapTerms {
    double displacement = 0;
    SinkhornSolution transport;

    /** Mean displacement cost minus the entropic cost between the batch and its image. */
    double value() const { return displacement - transport.entropic_cost; }
};

/**
 * `transported.row(i)` must be the image of `source.row(i)`.
 */
inline MongeGapTerms monge_gap_terms(const Eigen::Ref<const Matrix>& source, const Eigen::Ref<const Matrix>& transported, const SinkhornOptions& opt = {}) {
    detail::check_aligned(source, transported);
    MongeGapTerms out;
    out.displacement = detail::mean_displacement(source, transported);
    out.transport = sinkhorn(cost_matrix(source, transported), opt);
    return out;
}

inline double monge_gap(const Eigen::Ref<const Matrix>& source, const Eigen::Ref<const Matrix>& transported, const SinkhornOptions& opt = {}) {
    return monge_gap_terms(source, transported, opt).value();
}

/**
 * Gradient of the gap with respect to the transported points.
 */
inline Matrix monge_gap_gradient(const MongeGapTerms& terms, const Eigen::Ref<const Matrix>& source, const Eigen::Ref<const Matrix>& transported) {
    if (!terms.transport.converged) {
        throw NumericalError("monge_gap_gradient: Sinkhorn did not converge");
    }
    Matrix grad = (2.0 / static_cast<double>(source.rows())) * (transported - source);
    grad -= transport_gradient_target(terms.transport, source, transported);
    return grad;
}

inline Matrix monge_gap_gradient(const Eigen::Ref<const Matrix>& source, const Eigen::Ref<const Matrix>& transported, const SinkhornOptions& opt = {}) {
    return monge_gap_gradient(monge_gap_terms(source, transported, opt), source, transported);
}

/**
 * @brief Loss value and output-gradient for one condition's batch.
 */
struct LossReport {
    /** Sinkhorn divergence between the transported and target batches. */
    double fitting_term = 0;
    double gap_term = 0;
    /** `fitting_term + lambda * gap_term`. */
    double total = 0;
    double lambda = 0;
    /** Derivative of `total` with respect to each transported point. */
    Matrix grad_wrt_outputs;
};

/**
 * Evaluates the fitting term plus `lambda` times the Monge gap, and the gradient with
 * respect to `transported`. The same entropic options are used for both terms.
 */
inline LossReport conditional_loss_step(
    const Eigen::Ref<const Matrix>& source,
    const Eigen::Ref<const Matrix>& transported,
    const Eigen::Ref<const Matrix>& target,
    const SinkhornOptions& opt,
    double lambda)
{
    detail::check_aligned(source, transported);
    if (target.cols() != transported.cols()) {
        throw ConfigError("conditional_loss_step: target batch dimension mismatch");
    }
    detail::require(lambda >= 0, "conditional_loss_step: lambda must be non-negative");

    LossReport out;
    out.lambda = lambda;

    auto fit = divergence_terms(transported, target, opt);
    if (!fit.converged()) {
        throw NumericalError("conditional_loss_step: fitting-term Sinkhorn did not converge");
    }
    out.fitting_term = fit.value();
    out.grad_wrt_outputs = divergence_gradient(fit, transported, target);

    if (lambda > 0) {
        auto gap = monge_gap_terms(source, transported, opt);
        out.gap_term = gap.value();
        out.grad_wrt_outputs += lambda * monge_gap_gradient(gap, source, transported);
    } else {
        out.gap_term = monge_gap(source, transported, opt);
    }

    out.total = out.fitting_term + lambda * out.gap_term;
    return out;
}

}

#endif
