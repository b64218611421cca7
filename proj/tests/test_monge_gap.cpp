#include <gtest/gtest.h>

#include "cmonge/monge_gap.hpp"
#include "oracles.hpp"

using namespace cmonge;

namespace {

SinkhornOptions options(double epsilon, double tol = 1e-12) {
    SinkhornOptions opt;
    opt.epsilon = epsilon;
    opt.tol = tol;
    opt.max_iter = 200000;
    return opt;
}

Eigen::RowVectorXd shift5() {
    Eigen::RowVectorXd b(5);
    b << 1.0, -2.0, 0.5, 1.0, 1.5;
    return b;
}

}

TEST(MongeGap, TranslationIsNearlyOptimal) {
    Matrix x = oracle::random_matrix(64, 5, 1);
    Eigen::RowVectorXd b = shift5();
    Matrix tx = x.rowwise() + b;
    const double gap = monge_gap(x, tx, options(0.01, 1e-9));
    EXPECT_LE(gap, 1e-2 * b.squaredNorm());
}

TEST(MongeGap, IdentityMapIsMinusSelfCost) {
    Matrix x = oracle::random_matrix(20, 3, 2);
    const auto opt = options(0.05);
    const double gap = monge_gap(x, x, opt);
    const double self = sinkhorn(cost_matrix(x, x), opt).entropic_cost;
    EXPECT_NEAR(gap, -self, 1e-10);
    // -W(mu, mu) lies between the entropy of the diagonal coupling and that of the product coupling.
    EXPECT_GE(gap, opt.epsilon * std::log(20.0) - 1e-10);
    EXPECT_LE(gap, 2 * opt.epsilon * std::log(20.0));
}

TEST(MongeGap, TwoPointSwap) {
    Matrix x(2, 1), tx(2, 1);
    x << 0, 1;
    tx << 1, 0;
    EXPECT_NEAR(monge_gap(x, tx, options(1e-3)), 1.0, 1e-3);
}

TEST(MongeGap, RejectsMisalignedBatches) {
    EXPECT_THROW(monge_gap(Matrix::Zero(3, 2), Matrix::Zero(4, 2)), ConfigError);
    EXPECT_THROW(monge_gap(Matrix::Zero(3, 2), Matrix::Zero(3, 3)), ConfigError);
}

TEST(MongeGapGradient, TranslationIsStationary) {
    Matrix x = oracle::random_matrix(64, 5, 3);
    Matrix tx = x.rowwise() + shift5();
    const auto opt = options(0.01, 1e-10);
    Matrix grad = monge_gap_gradient(x, tx, opt);
    EXPECT_LE(grad.cwiseAbs().maxCoeff(), 1e-2);

    // Spot-check a few entries against central differences.
    for (Eigen::Index i : {0, 17, 63}) {
        for (Eigen::Index k : {0, 4}) {
            Matrix up = tx, down = tx;
            up(i, k) += 1e-5;
            down(i, k) -= 1e-5;
            const double fd = (monge_gap(x, up, opt) - monge_gap(x, down, opt)) / 2e-5;
            EXPECT_NEAR(grad(i, k), fd, 1e-4);
        }
    }
}

TEST(MongeGapGradient, IdentityMapIsMinusTransportGradient) {
    Matrix x = oracle::random_matrix(8, 2, 4);
    const auto opt = options(0.2);
    Matrix grad = monge_gap_gradient(x, x, opt);
    Matrix fd_w = oracle::finite_difference(
        [&](const Matrix& y) { return sinkhorn(cost_matrix(x, y), opt).entropic_cost; }, x, 1e-5);
    EXPECT_LT(oracle::relative_error(grad, -fd_w), 1e-3);
}

TEST(MongeGapGradient, MatchesFiniteDifferences) {
    Matrix x = oracle::random_matrix(8, 3, 5);
    Matrix tx = oracle::random_matrix(8, 3, 6, 1.2, 0.3);
    const auto opt = options(0.1);
    Matrix grad = monge_gap_gradient(x, tx, opt);
    Matrix fd = oracle::finite_difference([&](const Matrix& t) { return monge_gap(x, t, opt); }, tx, 1e-4);
    EXPECT_LT(oracle::relative_error(grad, fd), 1e-3);
}

TEST(ConditionalLossStep, VanishesAtTranslationOptimum) {
    // Both terms vanish up to the entropic bias of W(mu, mu), between epsilon * log(n) and twice that.
    const double lambda = 1e-2;
    const auto opt = options(0.01, 1e-10);
    for (Eigen::Index n : {2, 64}) {
        Matrix x = oracle::random_matrix(n, 5, 7);
        Matrix tx = x.rowwise() + shift5();
        auto report = conditional_loss_step(x, tx, tx, opt, lambda);
        EXPECT_EQ(report.fitting_term, 0.0);
        EXPECT_GE(report.gap_term, 0.0);
        EXPECT_LE(report.gap_term, 2 * opt.epsilon * std::log(static_cast<double>(n)));
        if (n == 2) {
            EXPECT_LE(report.total, 1e-4);
        }
    }
}

TEST(ConditionalLossStep, ZeroLambdaIsPureFitting) {
    Matrix x = oracle::random_matrix(10, 2, 8);
    Matrix tx = oracle::random_matrix(10, 2, 9, 1.0, 0.5);
    Matrix y = oracle::random_matrix(12, 2, 10, 1.0, 1.0);
    const auto opt = options(0.3);
    auto report = conditional_loss_step(x, tx, y, opt, 0.0);
    EXPECT_EQ(report.total, report.fitting_term);
    Matrix div_grad = divergence_gradient(DiscreteMeasure(tx), DiscreteMeasure(y), opt);
    EXPECT_LT((report.grad_wrt_outputs - div_grad).cwiseAbs().maxCoeff(), 1e-12);
}

TEST(ConditionalLossStep, MatchesCompositionalRecomputation) {
    const double lambda = 1e-2;
    Matrix x = oracle::random_matrix(10, 3, 11);
    Matrix tx = oracle::random_matrix(10, 3, 12, 1.0, 0.4);
    Matrix y = oracle::random_matrix(14, 3, 13, 1.0, 1.0);
    const auto opt = options(0.3);
    auto report = conditional_loss_step(x, tx, y, opt, lambda);

    const double fit = sinkhorn_divergence(DiscreteMeasure(tx), DiscreteMeasure(y), opt);
    const double gap = monge_gap(x, tx, opt);
    EXPECT_NEAR(report.fitting_term, fit, 1e-12);
    EXPECT_NEAR(report.gap_term, gap, 1e-12);
    EXPECT_EQ(report.total, report.fitting_term + lambda * report.gap_term);
    EXPECT_EQ(report.lambda, lambda);

    Matrix expected = divergence_gradient(DiscreteMeasure(tx), DiscreteMeasure(y), opt) + lambda * monge_gap_gradient(x, tx, opt);
    EXPECT_LT((report.grad_wrt_outputs - expected).cwiseAbs().maxCoeff(), 1e-10);
    EXPECT_EQ(report.grad_wrt_outputs.rows(), tx.rows());
    EXPECT_EQ(report.grad_wrt_outputs.cols(), tx.cols());

    Matrix fd = oracle::finite_difference(
        [&](const Matrix& t) { return conditional_loss_step(x, t, y, opt, lambda).total; }, tx, 1e-4);
    EXPECT_LT(oracle::relative_error(report.grad_wrt_outputs, fd), 1e-3);
}

TEST(ConditionalLossStep, AdditivityOverRandomInputs) {
    for (std::uint64_t seed = 0; seed < 10; ++seed) {
        Matrix x = oracle::random_matrix(6, 2, 100 + seed);
        Matrix tx = oracle::random_matrix(6, 2, 200 + seed);
        Matrix y = oracle::random_matrix(5, 2, 300 + seed, 1.0, 0.5);
        const double lambda = 0.1 * static_cast<double>(seed);
        auto report = conditional_loss_step(x, tx, y, options(0.5, 1e-9), lambda);
        EXPECT_EQ(report.total, report.fitting_term + lambda * report.gap_term);
    }
}
