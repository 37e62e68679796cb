#include "dkmpc/dkl_engine.hpp"

#include "oracles.hpp"

#include <gtest/gtest.h>

#include <algorithm>

using namespace dkmpc;

namespace {

struct Instance {
    DataMatrices d;
    std::vector<RowBlock> parts;
    CommGraph g{1, {}};
    Matrix L;
};

Instance make_instance(std::uint64_t seed, int n, int N, int p, Topology topo = Topology::ring) {
    Rng rng(seed);
    Instance in;
    in.d = {oracle::random_matrix(rng, n, N, 0.0, 1.0), oracle::random_matrix(rng, n, N, 0.0, 1.0)};
    in.parts = partition_rows(in.d, p, balanced_sizes(n, p));
    in.g = build_graph(topo, p);
    in.L = laplacian(in.g);
    return in;
}

std::vector<Matrix> blocks(const std::vector<RowBlock>& parts, bool y) {
    std::vector<Matrix> out;
    for (const auto& b : parts) out.push_back(y ? b.Y : b.X);
    return out;
}

Spectrum sorted_real(Spectrum s) {
    std::sort(s.begin(), s.end(), [](auto a, auto b) { return a.real() < b.real(); });
    return s;
}

}  // namespace

TEST(DklInit, ZeroOperatorAndNoDefect) {
    const auto in = make_instance(1, 10, 4, 3);
    const auto agents = init_agents(in.parts);
    EXPECT_EQ(assemble_operator(agents), Matrix::Zero(10, 10));
    EXPECT_EQ(consensus_defect(agents), 0.0);
    EXPECT_DOUBLE_EQ(stacked_output_norm(agents), in.d.Y.norm());
}

TEST(DklStep, MatchesStackedRecursion) {
    const auto in = make_instance(2, 11, 5, 4);
    auto agents = init_agents(in.parts);
    oracle::StackedIteration ref(blocks(in.parts, false), blocks(in.parts, true), in.L);
    const double alpha = 0.02;
    const Eigen::Index N = 5;
    for (int t = 0; t < 25; ++t) {
        step(agents, alpha, in.g);
        ref.advance(alpha);
    }
    EXPECT_LE((assemble_operator(agents) - ref.K).norm(), 1e-12 * std::max(1.0, ref.K.norm()));
    for (std::size_t i = 0; i < agents.size(); ++i)
        EXPECT_LE((agents[i].S - ref.S.middleCols(static_cast<Eigen::Index>(i) * N, N)).norm(), 1e-12);
}

TEST(DklStep, ThreadCountDoesNotChangeResult) {
    const auto in = make_instance(3, 12, 6, 4);
    auto a = init_agents(in.parts);
    auto b = init_agents(in.parts);
    for (int t = 0; t < 10; ++t) {
        step(a, 0.03, in.g, 1);
        step(b, 0.03, in.g, 3);
    }
    EXPECT_EQ(assemble_operator(a), assemble_operator(b));
}

TEST(DklStep, RejectsBadArguments) {
    const auto in = make_instance(4, 6, 3, 2);
    auto agents = init_agents(in.parts);
    EXPECT_THROW(step(agents, 0.0, in.g), ValidationError);
    EXPECT_THROW(step(agents, 0.1, build_graph(Topology::ring, 3)), ValidationError);
}

TEST(DklAccumulated, MatchesLiteralSteps) {
    for (int p : {1, 2, 3, 4}) {
        const auto in = make_instance(5 + p, 13, 6, p);
        auto lit = init_agents(in.parts);
        auto acc = init_agents(in.parts);
        const double alpha = 0.5 * alpha_max(compact_nonzero_eigenvalues(in.parts, in.L));
        for (int t = 0; t < 60; ++t) step(lit, alpha, in.g);
        run_accumulated(acc, alpha, in.g, 60);
        const Matrix K1 = assemble_operator(lit), K2 = assemble_operator(acc);
        EXPECT_LE((K1 - K2).norm(), 1e-11 * std::max(1.0, K1.norm())) << "p=" << p;
        for (std::size_t i = 0; i < lit.size(); ++i) EXPECT_LE((lit[i].S - acc[i].S).norm(), 1e-11);
    }
}

TEST(DklAccumulated, WarmStartMatchesLiteralSteps) {
    const auto in = make_instance(9, 9, 5, 3);
    Rng rng(10);
    const Matrix K0 = oracle::random_matrix(rng, 9, 9);
    auto lit = warm_start_agents(in.parts, K0);
    auto acc = warm_start_agents(in.parts, K0);
    for (int t = 0; t < 30; ++t) step(lit, 0.01, in.g);
    run_accumulated(acc, 0.01, in.g, 30);
    EXPECT_LE((assemble_operator(lit) - assemble_operator(acc)).norm(), 1e-11);
}

TEST(DklSpectrum, CompactRouteMatchesFullConvergenceMatrix) {
    const auto in = make_instance(11, 12, 5, 3);
    const auto cm = build_convergence_matrix(in.parts, in.L, 5);
    EXPECT_EQ(cm.M.rows(), 12 + 15);
    const auto full = sorted_real(nonzero_eigenvalues(cm.M));
    const auto compact = sorted_real(compact_nonzero_eigenvalues(in.parts, in.L));
    ASSERT_EQ(full.size(), compact.size());
    for (std::size_t k = 0; k < full.size(); ++k) {
        EXPECT_NEAR(full[k].real(), compact[k].real(), 1e-9 * std::abs(compact[k]));
        EXPECT_NEAR(full[k].imag(), 0.0, 1e-8);
    }
}

TEST(DklSpectrum, BoundsMatchGramOracle) {
    const auto in = make_instance(12, 10, 4, 3);
    oracle::StackedIteration ref(blocks(in.parts, false), blocks(in.parts, true), in.L);
    const auto spec = compact_nonzero_eigenvalues(in.parts, in.L);
    const double amax = alpha_max(spec);
    Eigen::SelfAdjointEigenSolver<Matrix> es(ref.G, Eigen::EigenvaluesOnly);
    EXPECT_NEAR(amax, 2.0 / es.eigenvalues().maxCoeff(), 1e-12 * amax);
    for (double f : {0.1, 0.5, 0.99, 1.2})
        EXPECT_NEAR(rho_max(spec, f * amax), oracle::contraction_factor(ref.G, f * amax), 1e-10);
    EXPECT_LT(rho_max(spec, 0.99 * amax), 1.0);
    EXPECT_GT(rho_max(spec, 1.01 * amax), 1.0);
}

TEST(DklSpectrum, AlphaMaxFromComplexPairs) {
    const Spectrum s{{-1.0, 1.0}, {-1.0, -1.0}, {-4.0, 0.0}};
    // -2 Re / |lambda|^2: 1 for the pair, 0.5 for -4.
    EXPECT_DOUBLE_EQ(alpha_max(s), 0.5);
    EXPECT_NEAR(rho_max(s, 0.25), std::max(std::sqrt(1 - 0.5 + 0.125), 0.0), 1e-15);
    EXPECT_THROW(alpha_max(Spectrum{}), ValidationError);
}

TEST(DklSpectrum, IterationBudget) {
    EXPECT_EQ(iteration_budget(0.5, 1e-3, 1000), 10);
    EXPECT_EQ(iteration_budget(0.9, 1e-8, 50), 50);
    EXPECT_EQ(iteration_budget(1.0, 1e-8, 77), 77);
    EXPECT_EQ(iteration_budget(0.0, 1e-8, 77), 1);
    EXPECT_THROW(iteration_budget(0.5, 2.0, 10), ValidationError);
}

TEST(DklRun, ConvergesToLeastSquaresAndKeepsInvariant) {
    const auto in = make_instance(13, 10, 6, 3);
    const Matrix K_star = oracle::edmd(in.d.X, in.d.Y);
    const auto spec = compact_nonzero_eigenvalues(in.parts, in.L);
    const double amax = alpha_max(spec), alpha = 0.5 * amax;
    const double rho = rho_max(spec, alpha);
    auto agents = init_agents(in.parts);
    RunOptions ro;
    ro.alpha = alpha;
    ro.t_max = iteration_budget(rho, 1e-8, 100000);
    ro.oracle = &K_star;
    ro.alpha_limit = amax;
    const auto trace = run(agents, in.g, in.d, ro);
    ASSERT_EQ(trace.rows.size(), static_cast<std::size_t>(ro.t_max + 1));
    EXPECT_TRUE(trace.warnings.empty());
    EXPECT_LE(trace.rows.back().gap / trace.rows.front().gap, 1e-6);
    EXPECT_LE(residual_orthogonality(trace.K_d, in.d), 1e-6 * std::max(1.0, in.d.Y.norm()));
    for (const auto& r : trace.rows) EXPECT_LE(r.defect, 1e-10 * (1.0 + in.d.Y.norm()));
    EXPECT_LE(fitted_rate(trace.rows), rho + 0.02);
}

TEST(DklRun, SingleAgentReachesCentralizedOperator) {
    const auto in = make_instance(14, 6, 9, 1);
    const Matrix K_star = oracle::edmd(in.d.X, in.d.Y);
    const auto spec = compact_nonzero_eigenvalues(in.parts, in.L);
    auto agents = init_agents(in.parts);
    const double alpha = 0.5 * alpha_max(spec);
    run_accumulated(agents, alpha, in.g, iteration_budget(rho_max(spec, alpha), 1e-12, 1000000));
    EXPECT_LE((assemble_operator(agents) - K_star).norm(), 1e-8);
}

TEST(DklRun, StepSizeBoundaryBehaviour) {
    const auto in = make_instance(15, 10, 5, 3);
    const Matrix K_star = oracle::edmd(in.d.X, in.d.Y);
    const double amax = alpha_max(compact_nonzero_eigenvalues(in.parts, in.L));
    auto gap_after = [&](double alpha, int t) {
        auto agents = init_agents(in.parts);
        RunOptions ro;
        ro.alpha = alpha;
        ro.t_max = t;
        ro.oracle = &K_star;
        ro.alpha_limit = amax;
        return run(agents, in.g, in.d, ro);
    };
    const auto stable = gap_after(0.99 * amax, 200);
    EXPECT_LT(stable.rows.back().gap, stable.rows.front().gap);
    const auto wild = gap_after(1.5 * amax, 200);
    EXPECT_FALSE(wild.warnings.empty());
    const double g = wild.rows.back().gap;
    EXPECT_TRUE(!std::isfinite(g) || g > wild.rows.front().gap);
}

TEST(DklRun, ArbitraryResumeSkipsDefectCheck) {
    const auto in = make_instance(16, 6, 3, 2);
    Rng rng(17);
    std::vector<Matrix> K{oracle::random_matrix(rng, 6, 3), oracle::random_matrix(rng, 6, 3)};
    std::vector<Matrix> S{oracle::random_matrix(rng, 6, 3), oracle::random_matrix(rng, 6, 3)};
    auto agents = resume_agents(in.parts, K, S);
    RunOptions ro;
    ro.alpha = 0.01;
    ro.t_max = 2;
    const auto trace = run(agents, in.g, in.d, ro);
    EXPECT_FALSE(trace.defect_invariant_applies);
    EXPECT_TRUE(std::isnan(trace.rows.front().gap));
    std::vector<Matrix> wrong{Matrix::Zero(5, 3), Matrix::Zero(6, 3)};
    EXPECT_THROW(resume_agents(in.parts, wrong, S), ValidationError);
}

TEST(DklRun, WarmStartSatisfiesInvariant) {
    const auto in = make_instance(18, 9, 4, 3);
    Rng rng(19);
    auto agents = warm_start_agents(in.parts, oracle::random_matrix(rng, 9, 9));
    EXPECT_LE(consensus_defect(agents), 1e-12);
    for (int t = 0; t < 20; ++t) step(agents, 0.02, in.g);
    EXPECT_LE(consensus_defect(agents), 1e-10 * (1.0 + in.d.Y.norm()));
}

TEST(DklDiagnostics, FittedRateOfGeometricTrace) {
    std::vector<TraceRow> rows;
    for (int t = 0; t <= 30; ++t) rows.push_back({t, 3.0 * std::pow(0.8, t), 0.0, 0.0});
    EXPECT_NEAR(fitted_rate(rows), 0.8, 1e-12);
}

TEST(DklDiagnostics, HausdorffAndDiffMap) {
    const Spectrum a{{0, 0}, {1, 0}}, b{{0, 0}, {1, 0.5}};
    EXPECT_DOUBLE_EQ(hausdorff_distance(a, b), 0.5);
    EXPECT_EQ(hausdorff_distance(a, a), 0.0);
    Matrix A(1, 2), B(1, 2);
    A << 1, -2;
    B << 0.5, 1;
    EXPECT_EQ(operator_diff_map(A, B), (Matrix(1, 2) << 0.5, 3).finished());
}

TEST(DklDiagnostics, SortedEigenvaluesByMagnitude) {
    Matrix K = Matrix::Zero(3, 3);
    K.diagonal() << 0.9, -0.1, 0.5;
    const auto ev = sorted_eigenvalues(K);
    EXPECT_NEAR(ev[0].real(), -0.1, 1e-15);
    EXPECT_NEAR(ev[2].real(), 0.9, 1e-15);
}
