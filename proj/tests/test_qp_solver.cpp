#include "dkmpc/qp_solver.hpp"

#include "oracles.hpp"

#include <gtest/gtest.h>

using namespace dkmpc;

namespace {

QuadraticProgram random_feasible_qp(Rng& rng, int n, int m) {
    QuadraticProgram qp;
    qp.H = oracle::random_spd(rng, n, 0.1, 10.0);
    qp.g = 5.0 * oracle::random_matrix(rng, n, 1);
    qp.A = oracle::random_matrix(rng, m, n);
    const Vector x_feas = oracle::random_matrix(rng, n, 1);
    qp.b = qp.A * x_feas;
    for (int i = 0; i < m; ++i) qp.b(i) -= rng.uniform(0.0, 0.5);
    return qp;
}

}  // namespace

TEST(Qp, UnconstrainedMinimizer) {
    Rng rng(1);
    QuadraticProgram qp;
    qp.H = oracle::random_spd(rng, 5, 0.5, 2.0);
    qp.g = oracle::random_matrix(rng, 5, 1);
    qp.A.resize(0, 5);
    qp.b.resize(0);
    const auto r = solve_qp(qp);
    EXPECT_EQ(r.status, QpStatus::optimal);
    EXPECT_LE((qp.H * r.x + qp.g).norm(), 1e-12);
    EXPECT_TRUE(r.active.empty());
}

TEST(Qp, BoxConstrainedClosedForm) {
    // min 0.5||x - c||^2 over x >= 0 is max(c, 0) componentwise.
    QuadraticProgram qp;
    qp.H = Matrix::Identity(4, 4);
    Vector c(4);
    c << 1.0, -2.0, 0.5, -0.1;
    qp.g = -c;
    qp.A = Matrix::Identity(4, 4);
    qp.b = Vector::Zero(4);
    const auto r = solve_qp(qp);
    EXPECT_EQ(r.status, QpStatus::optimal);
    EXPECT_LE((r.x - c.cwiseMax(0.0)).norm(), 1e-14);
    EXPECT_NEAR(r.lambda(1), 2.0, 1e-14);
    EXPECT_EQ(r.lambda(0), 0.0);
}

TEST(Qp, MatchesExhaustiveActiveSetEnumeration) {
    Rng rng(2);
    for (int trial = 0; trial < 200; ++trial) {
        const int n = 1 + static_cast<int>(rng.below(12));
        const int m = static_cast<int>(rng.below(7));
        const auto qp = random_feasible_qp(rng, n, m);
        const auto r = solve_qp(qp);
        const auto ref = oracle::brute_force_qp(qp.H, qp.g, qp.A, qp.b);
        ASSERT_TRUE(ref.x.has_value());
        ASSERT_EQ(r.status, QpStatus::optimal) << "trial " << trial;
        EXPECT_NEAR(r.objective, ref.objective, 1e-8 * (1.0 + std::abs(ref.objective))) << "trial " << trial;
        EXPECT_LE(kkt_residual(qp, r.x, r.lambda).max(), 1e-8) << "trial " << trial;
    }
}

TEST(Qp, DetectsInfeasibility) {
    QuadraticProgram qp;
    qp.H = Matrix::Identity(1, 1);
    qp.g = Vector::Zero(1);
    qp.A = Matrix(2, 1);
    qp.A << 1, -1;
    qp.b = Vector(2);
    qp.b << 1, 0;  // x >= 1 and x <= 0
    EXPECT_EQ(solve_qp(qp).status, QpStatus::infeasible);
}

TEST(Qp, DuplicateAndRedundantConstraints) {
    QuadraticProgram qp;
    qp.H = Matrix::Identity(2, 2);
    qp.g = Vector::Zero(2);
    qp.A = Matrix(3, 2);
    qp.A << 1, 1, 1, 1, 2, 2;
    qp.b = Vector(3);
    qp.b << 2, 2, 4;
    const auto r = solve_qp(qp);
    EXPECT_EQ(r.status, QpStatus::optimal);
    EXPECT_LE((r.x - Vec2(1, 1)).norm(), 1e-12);
    EXPECT_LE(kkt_residual(qp, r.x, r.lambda).max(), 1e-12);
}

TEST(Qp, IterationLimitIsReported) {
    Rng rng(3);
    QuadraticProgram qp;
    qp.H = Matrix::Identity(4, 4);
    qp.g = -10.0 * Vector::Ones(4);
    qp.A = -Matrix::Identity(4, 4);
    qp.b = -Vector::Ones(4);  // x <= 1, all four become active
    QpOptions opt;
    opt.max_iter = 2;
    EXPECT_EQ(solve_qp(qp, opt).status, QpStatus::iteration_limit);
}

TEST(Qp, RejectsBadShapes) {
    QuadraticProgram qp;
    qp.H = Matrix::Identity(2, 2);
    qp.g = Vector::Zero(3);
    qp.A.resize(0, 2);
    qp.b.resize(0);
    EXPECT_THROW(solve_qp(qp), ValidationError);
    qp.g = Vector::Zero(2);
    qp.H(1, 1) = -1.0;
    EXPECT_THROW(solve_qp(qp), ValidationError);
}

TEST(Qp, KktResidualComponents) {
    QuadraticProgram qp;
    qp.H = Matrix::Identity(1, 1);
    qp.g = Vector::Zero(1);
    qp.A = Matrix::Ones(1, 1);
    qp.b = Vector::Ones(1);
    Vector x(1), lam(1);
    x << 0.5;
    lam << -1.0;
    const auto r = kkt_residual(qp, x, lam);
    EXPECT_DOUBLE_EQ(r.primal, 0.5);
    EXPECT_DOUBLE_EQ(r.dual, 1.0);
    EXPECT_DOUBLE_EQ(r.stationarity, 1.5);
    EXPECT_DOUBLE_EQ(r.complementarity, 0.5);
}
