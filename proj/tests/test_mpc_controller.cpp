#include "dkmpc/mpc_controller.hpp"

#include "oracles.hpp"

#include <gtest/gtest.h>

using namespace dkmpc;

namespace {

MpcProblem base_problem(int H = 6) {
    MpcProblem p;
    p.cfg.horizon = H;
    p.cfg.goal = {5.0, 3.0};
    p.model = discrete_model(0.1);
    p.x0 = Vec4(0.0, 0.5, 0.0, 0.0);
    return p;
}

ActiveConstraint halfspace(const Vec2& n, double offset, int h, double margin = 0.5) {
    ActiveConstraint c;
    c.normal = n.normalized();
    c.offset = offset;
    c.margin = margin;
    c.horizon = h;
    return c;
}

double true_cost(const MpcProblem& p, const Vector& U) {
    Vec4 x = p.x0;
    double cost = 0.0;
    for (int h = 0; h < p.cfg.horizon; ++h) {
        const Vec2 z = p.model.C * x, u = U.segment<2>(2 * h);
        cost += (z - p.cfg.goal).dot(p.cfg.Q * (z - p.cfg.goal)) + u.dot(p.cfg.R * u);
        x = p.model.A * x + p.model.B * u;
    }
    return cost;
}

}  // namespace

TEST(MpcConfig, Validation) {
    MpcConfig c;
    EXPECT_NO_THROW(c.validate());
    c.margin = 0.2;
    EXPECT_THROW(c.validate(), ValidationError);
    c = MpcConfig{};
    c.Q(0, 1) = 0.5;
    EXPECT_THROW(c.validate(), ValidationError);
    c = MpcConfig{};
    c.R = -Mat2::Identity();
    EXPECT_THROW(c.validate(), ValidationError);
    c = MpcConfig{};
    c.horizon = 0;
    EXPECT_THROW(c.validate(), ValidationError);
    EXPECT_DOUBLE_EQ(MpcConfig{}.slack_weight(), 1e6);
}

TEST(MpcCondensed, PredictionMatchesSimulation) {
    Rng rng(1);
    auto p = base_problem(7);
    const auto c = build_qp(p);
    const Vector U = oracle::random_matrix(rng, 14, 1);
    const Vector Z = c.Phi * p.x0 + c.Gamma * U;
    Vec4 x = p.x0;
    for (int h = 0; h < 7; ++h) {
        EXPECT_LE((Z.segment<2>(2 * h) - p.model.C * x).norm(), 1e-13);
        x = p.model.A * x + p.model.B * U.segment<2>(2 * h);
    }
    EXPECT_NEAR(c.qp.objective(U) + c.constant, true_cost(p, U), 1e-9 * true_cost(p, U));
}

TEST(MpcCondensed, UnconstrainedMatchesNormalEquations) {
    auto p = base_problem(5);
    const auto c = build_qp(p);
    const auto sol = solve_mpc(p);
    EXPECT_EQ(sol.status, MpcStatus::optimal);
    // Independent least squares: minimize ||Q^(1/2)(Phi x0 + Gamma U - r)||^2 + ||R^(1/2) U||^2.
    const Matrix G = c.Gamma;
    const Matrix lhs = G.transpose() * G + 0.1 * Matrix::Identity(10, 10);
    const Vector rhs = G.transpose() * (c.target - c.Phi * p.x0);
    const Vector U = lhs.ldlt().solve(rhs);
    for (int h = 0; h < 5; ++h) EXPECT_LE((sol.inputs.row(h).transpose() - U.segment<2>(2 * h)).norm(), 1e-9);
    EXPECT_NEAR(sol.objective, true_cost(p, U), 1e-9);
    // Last input only carries its own penalty.
    EXPECT_LE(sol.inputs.row(4).norm(), 1e-12);
}

TEST(MpcCondensed, HardConstraintIsRespected) {
    auto p = base_problem(8);
    // Keep x <= 0.3 - 0.5 at step 4 via -x >= -0.3 + 0.5 margin: n = (-1, 0), offset -0.8.
    p.constraints.push_back(halfspace({-1.0, 0.0}, -0.8, 4));
    const auto sol = solve_mpc(p);
    EXPECT_EQ(sol.status, MpcStatus::optimal);
    EXPECT_LE(sol.outputs(4, 0), 0.3 + 1e-9);
    EXPECT_FALSE(sol.initial_violation);
    EXPECT_LE(sol.kkt, 1e-6);
    EXPECT_EQ(sol.soft_rows, (std::vector<int>{0}));
}

TEST(MpcCondensed, ConflictingConstraintsUseSlack) {
    auto p = base_problem(4);
    p.constraints.push_back(halfspace({1.0, 0.0}, 2.0, 2));   // x >= 2.5
    p.constraints.push_back(halfspace({-1.0, 0.0}, 0.0, 2));  // x <= -0.5
    const auto sol = solve_mpc(p);
    EXPECT_EQ(sol.status, MpcStatus::soft_feasible);
    EXPECT_GT(sol.max_slack, 1.0);
    EXPECT_TRUE(sol.outputs.allFinite());
}

TEST(MpcCondensed, InitialSlotOnlyFlagsViolation) {
    auto p = base_problem(4);
    p.constraints.push_back(halfspace({1.0, 0.0}, 1.0, 0));  // x0 = 0 violates x >= 1.5
    const auto sol = solve_mpc(p);
    EXPECT_TRUE(sol.initial_violation);
    EXPECT_EQ(sol.slack.size(), 0);
    EXPECT_EQ(sol.status, MpcStatus::optimal);
    auto q = base_problem(4);
    q.constraints.push_back(halfspace({1.0, 0.0}, -2.0, 0));
    EXPECT_FALSE(solve_mpc(q).initial_violation);
}

TEST(MpcCondensed, InputBoxIsRespected) {
    auto p = base_problem(10);
    p.cfg.input_bound = 0.5;
    const auto sol = solve_mpc(p);
    EXPECT_EQ(sol.status, MpcStatus::optimal);
    EXPECT_LE(sol.inputs.cwiseAbs().maxCoeff(), 0.5 + 1e-9);
    EXPECT_NEAR(sol.inputs.cwiseAbs().maxCoeff(), 0.5, 1e-9);
}

TEST(MpcCondensed, ConstraintBeyondHorizonIsRejected) {
    auto p = base_problem(4);
    p.constraints.push_back(halfspace({1.0, 0.0}, 0.0, 4));
    EXPECT_THROW(build_qp(p), ValidationError);
}

TEST(MpcCondensed, MatchesBruteForceOnSmallHorizon) {
    Rng rng(2);
    for (int trial = 0; trial < 20; ++trial) {
        auto p = base_problem(3);
        p.x0 = Vec4(rng.uniform(-1, 1), rng.uniform(-1, 1), rng.uniform(-1, 1), rng.uniform(-1, 1));
        for (int k = 0; k < 2; ++k)
            p.constraints.push_back(halfspace({rng.uniform(-1, 1), rng.uniform(-1, 1)}, rng.uniform(-2, 0), 1 + k));
        const auto c = build_qp(p);
        const auto ref = oracle::brute_force_qp(c.qp.H, c.qp.g, c.qp.A, c.qp.b);
        const auto r = solve_qp(c.qp);
        ASSERT_TRUE(ref.x.has_value());
        EXPECT_NEAR(r.objective, ref.objective, 1e-6 * (1.0 + std::abs(ref.objective)));
    }
}

TEST(GenerateConstraints, OnePerObstacleAndSlot) {
    GaussianComponent g;
    g.mean = {2.0, 2.0};
    g.cov = 0.1 * Mat2::Identity();
    const auto e = confidence_ellipse(g, 0.95);
    std::vector<SlotPolytopes> slots(3);
    for (int h = 0; h < 3; ++h)
        for (int l = 0; l < 2; ++l) slots[static_cast<std::size_t>(h)].push_back(ellipse_polytope(e, 8, 0.5, NormalMode::radial, h, l));
    const std::vector<Vec2> ref{{0, 0}, {0, 2}, {4, 2}};
    const auto cons = generate_constraints(slots, ref);
    ASSERT_EQ(cons.size(), 6u);
    EXPECT_EQ(cons[2].horizon, 1);
    EXPECT_EQ(cons[3].obstacle, 1);
    EXPECT_EQ(cons[4].facet, 0);   // ref (4, 2) is to the right of the obstacle
    EXPECT_EQ(cons[2].facet, 4);   // ref (0, 2) is to the left
    slots[1][0].horizon = 2;
    EXPECT_THROW(generate_constraints(slots, ref), ValidationError);
    EXPECT_THROW(generate_constraints(std::vector<SlotPolytopes>(4), ref), ValidationError);
}

TEST(Controller, ReferenceStraightLineThenShiftedPlan) {
    MpcConfig cfg;
    cfg.horizon = 5;
    cfg.goal = {4.0, 0.0};
    MpcController ctl(cfg, discrete_model(0.1));
    const Vec4 x(0, 0, 0, 0);
    const auto first = ctl.reference(x);
    EXPECT_EQ(first.front(), Vec2(0, 0));
    EXPECT_EQ(first.back(), Vec2(4, 0));
    EXPECT_EQ(first[2], Vec2(2, 0));
    const auto r = ctl.step(x, {});
    EXPECT_FALSE(r.fallback);
    const Vec4 x1(0.1, 0.0, 0.2, 0.0);
    const auto ref = ctl.reference(x1);
    EXPECT_EQ(ref[0], Vec2(0.1, 0.2));
    EXPECT_EQ(ref[1], Vec2(r.solution.outputs.row(2).transpose()));
    EXPECT_EQ(ref[4], Vec2(r.solution.outputs.row(4).transpose()));
    ctl.reset();
    EXPECT_EQ(ctl.reference(x)[2], Vec2(2, 0));
}

TEST(Controller, SolverFailureFallsBackToShiftedPlan) {
    MpcConfig cfg;
    cfg.horizon = 6;
    cfg.goal = {5.0, 5.0};
    cfg.max_iter = 1;
    cfg.input_bound = 0.01;
    MpcController ctl(cfg, discrete_model(0.1));
    const auto r = ctl.step(Vec4::Zero(), {});
    EXPECT_TRUE(r.fallback);
    EXPECT_EQ(r.solution.status, MpcStatus::failed);
    EXPECT_EQ(r.applied, Vec2::Zero());
    EXPECT_TRUE(r.solution.outputs.allFinite());
}

TEST(Controller, DrivesDoubleIntegratorToGoal) {
    MpcConfig cfg;
    cfg.goal = {15.0, 15.0};
    cfg.input_bound = 4.0;
    const auto model = discrete_model(0.1);
    MpcController ctl(cfg, model);
    Vec4 x = Vec4::Zero();
    for (int t = 0; t < 300; ++t) {
        const auto r = ctl.step(x, {});
        x = model.A * x + model.B * r.applied;
    }
    EXPECT_LE((model.C * x - cfg.goal).norm(), 1e-3);
}
