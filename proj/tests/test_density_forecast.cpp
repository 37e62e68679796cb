#include "dkmpc/density_forecast.hpp"

#include "oracles.hpp"

#include <gtest/gtest.h>

using namespace dkmpc;

namespace {

DensitySnapshot ramp(int rows, int cols, int t = 0) {
    auto s = DensitySnapshot::zeros(rows, cols, t);
    for (int k = 0; k < s.size(); ++k) s.values[static_cast<std::size_t>(k)] = (k + 0.5) / s.size();
    return s;
}

}  // namespace

TEST(Forecast, IdentityOperatorRepeatsLastFrame) {
    const auto s = ramp(3, 4, 7);
    const auto f = forecast(Matrix::Identity(12, 12), s, 14);
    ASSERT_EQ(f.horizon(), 14);
    EXPECT_EQ(f.origin, 7);
    for (int h = 0; h < 14; ++h) {
        EXPECT_EQ(f.frames[static_cast<std::size_t>(h)].values, s.values);
        EXPECT_EQ(f.frames[static_cast<std::size_t>(h)].timestamp, 8 + h);
    }
}

TEST(Forecast, PropagateMatchesMatrixPowers) {
    Rng rng(1);
    const Matrix K = 0.3 * oracle::random_matrix(rng, 5, 5);
    const Vector x = oracle::random_matrix(rng, 5, 1);
    const auto seq = propagate(K, x, 6);
    Matrix P = Matrix::Identity(5, 5);
    for (int h = 0; h < 6; ++h) {
        P = K * P;
        EXPECT_LE((seq[static_cast<std::size_t>(h)] - P * x).norm(), 1e-14);
    }
}

TEST(Forecast, PropagateRejectsBadShapes) {
    EXPECT_THROW(propagate(Matrix::Identity(3, 3), Vector::Zero(4), 2), ValidationError);
    EXPECT_THROW(propagate(Matrix::Identity(3, 3), Vector::Zero(3), 0), ValidationError);
    EXPECT_THROW(propagate(Matrix::Zero(3, 2), Vector::Zero(2), 1), ValidationError);
}

TEST(Forecast, ShiftOperatorTranslatesDensity) {
    // K moves every cell one column to the right on a 1 x 5 strip.
    Matrix K = Matrix::Zero(5, 5);
    for (int c = 0; c + 1 < 5; ++c) K(c + 1, c) = 1.0;
    DensitySnapshot s(1, 5, {1.0, 0.0, 0.0, 0.0, 0.0});
    const auto f = forecast(K, s, 3);
    EXPECT_EQ(f.frames[2].values, (std::vector<double>{0, 0, 0, 1, 0}));
}

TEST(Reconstruct, ClampsIntoUnitInterval) {
    Vector v(4);
    v << -0.5, 0.25, 1.5, 1.0;
    const auto s = reconstruct(v, 2, 2, 3);
    EXPECT_EQ(s.values, (std::vector<double>{0.0, 0.25, 1.0, 1.0}));
    EXPECT_EQ(s.timestamp, 3);
    EXPECT_THROW(reconstruct(v, 3, 2), ValidationError);
}

TEST(Threshold, StrictInequalityAndCellCenters) {
    DensitySnapshot s(2, 3, {0.5, 0.6, 0.0, 1.0, 0.2, 0.51});
    GridWorldMap map;
    map.rows = 2;
    map.cols = 3;
    map.cell_size = 2.0;
    map.origin = {1.0, -1.0};
    const auto set = threshold_set(s, 0.5, map, 4);
    ASSERT_EQ(set.size(), 3u);
    EXPECT_EQ(set.horizon, 4);
    EXPECT_EQ(set.points[0], Vec2(4.0, 0.0));   // (r0, c1)
    EXPECT_EQ(set.points[1], Vec2(2.0, 2.0));   // (r1, c0)
    EXPECT_EQ(set.points[2], Vec2(6.0, 2.0));   // (r1, c2)
    EXPECT_EQ(set.intensities[1], 1.0);
}

TEST(Threshold, FullThresholdIsEmpty) {
    const auto s = ramp(4, 4);
    GridWorldMap map;
    map.rows = map.cols = 4;
    EXPECT_EQ(threshold_set(s, 1.0, map).size(), 0u);
    EXPECT_EQ(threshold_set(s, 0.0, map).size(), 16u);
    EXPECT_THROW(threshold_set(s, 1.5, map), ValidationError);
    map.rows = 5;
    EXPECT_THROW(threshold_set(s, 0.5, map), ValidationError);
}

TEST(NormalizedErrors, CentralizedAgainstItselfIsOne) {
    Rng rng(2);
    DataMatrices d{oracle::random_matrix(rng, 4, 12, 0, 1), oracle::random_matrix(rng, 4, 12, 0, 1)};
    d.X.rightCols(11) = d.Y.leftCols(11);  // a single trajectory
    const Matrix K = oracle::edmd(d.X, d.Y);
    const auto e = normalized_errors(K, K, d, 5);
    ASSERT_TRUE(e.one_step && e.multi_step);
    EXPECT_DOUBLE_EQ(*e.one_step, 1.0);
    EXPECT_DOUBLE_EQ(*e.multi_step, 1.0);
    EXPECT_EQ(e.columns_used, 8);
}

TEST(NormalizedErrors, MatchesDirectComputation) {
    Rng rng(3);
    const int n = 3, N = 10;
    Matrix traj = oracle::random_matrix(rng, n, N + 1, 0, 1);
    DataMatrices d{traj.leftCols(N), traj.rightCols(N)};
    const Matrix K_star = oracle::edmd(d.X, d.Y);
    const Matrix K_d = K_star + 0.05 * oracle::random_matrix(rng, n, n);
    const auto e = normalized_errors(K_d, K_star, d, 3);
    const double e1 = (d.Y - K_d * d.X).norm() / (d.Y - K_star * d.X).norm();
    EXPECT_NEAR(*e.one_step, e1, 1e-12);
    const Matrix X3 = traj.leftCols(N - 2), Y3 = traj.rightCols(N - 2);
    const Matrix Kd3 = K_d * K_d * K_d, Ks3 = K_star * K_star * K_star;
    EXPECT_NEAR(*e.multi_step, (Y3 - Kd3 * X3).norm() / (Y3 - Ks3 * X3).norm(), 1e-12);
    EXPECT_GE(*e.one_step, 1.0);
}

TEST(NormalizedErrors, ExactFitHasNoRatio) {
    Rng rng(4);
    DataMatrices d{oracle::random_matrix(rng, 6, 4), oracle::random_matrix(rng, 6, 4)};
    const Matrix K = oracle::edmd(d.X, d.Y);
    const auto e = normalized_errors(K, K, d, 1);
    EXPECT_FALSE(e.one_step.has_value());
    EXPECT_THROW(normalized_errors(K, K, d, 5), ValidationError);
    EXPECT_THROW(normalized_errors(K, K, d, 0), ValidationError);
}

TEST(ForecastErrorMap, AbsoluteDifferencePerCellAndStep) {
    const auto s = ramp(2, 2);
    const auto f = forecast(Matrix::Identity(4, 4), s, 2);
    std::vector<DensitySnapshot> truth{s, DensitySnapshot::zeros(2, 2)};
    const Matrix err = forecast_error_map(f, truth);
    ASSERT_EQ(err.rows(), 4);
    ASSERT_EQ(err.cols(), 2);
    EXPECT_EQ(err.col(0).norm(), 0.0);
    EXPECT_EQ(err.col(1), lift_snapshot(s));
    EXPECT_THROW(forecast_error_map(f, std::vector<DensitySnapshot>{s}), ValidationError);
}
