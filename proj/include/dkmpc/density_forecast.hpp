#pragma once

#include "dkmpc/lifting_data.hpp"

#include <algorithm>
#include <optional>
#include <span>
#include <vector>

namespace dkmpc {

/// Places grid cells in the robot's world frame: column index runs along x,
/// row index along y, and a cell is represented by its center.
struct GridWorldMap {
    Vec2 origin{0.0, 0.0};
    double cell_size = 0.5;
    int rows = 30;
    int cols = 30;

    void validate() const {
        require(cell_size > 0.0, "cell size must be positive");
        require(rows > 0 && cols > 0, "map dimensions must be positive");
    }

    Vec2 cell_center(int r, int c) const {
        return origin + Vec2((c + 0.5) * cell_size, (r + 0.5) * cell_size);
    }

    bool contains(const Vec2& p) const {
        return p.x() >= origin.x() && p.x() <= origin.x() + cols * cell_size &&
               p.y() >= origin.y() && p.y() <= origin.y() + rows * cell_size;
    }
};

/// Predicted lifted states K x, K^2 x, ..., K^H x by repeated multiplication.
inline std::vector<Vector> propagate(const Matrix& K, const Vector& x, int H) {
    require(K.rows() == K.cols(), "propagator must be square");
    require(K.cols() == x.size(), "state length " + std::to_string(x.size()) +
                                      " does not match operator dimension " + std::to_string(K.cols()));
    require(H >= 1, "horizon must be positive");
    std::vector<Vector> out;
    out.reserve(static_cast<std::size_t>(H));
    Vector cur = x;
    for (int h = 0; h < H; ++h) {
        cur = K * cur;
        out.push_back(cur);
    }
    return out;
}

/// Inverse of lift_snapshot; values are clamped into [0, 1] because a linear
/// propagator can overshoot.
inline DensitySnapshot reconstruct(const Vector& v, int rows, int cols, int timestamp = 0) {
    require(rows > 0 && cols > 0, "grid dimensions must be positive");
    require(v.size() == static_cast<Eigen::Index>(rows) * cols,
            "vector length " + std::to_string(v.size()) + " does not match a " + std::to_string(rows) +
                "x" + std::to_string(cols) + " grid");
    DensitySnapshot s(rows, cols, std::vector<double>(static_cast<std::size_t>(v.size())), timestamp);
    for (Eigen::Index k = 0; k < v.size(); ++k) s.values[static_cast<std::size_t>(k)] = std::clamp(v(k), 0.0, 1.0);
    return s;
}

struct ForecastSequence {
    int origin = 0;  // timestamp of the snapshot the forecast starts from
    std::vector<DensitySnapshot> frames;  // frames[h-1] predicts origin + h

    int horizon() const noexcept { return static_cast<int>(frames.size()); }
};

inline ForecastSequence forecast(const Matrix& K, const DensitySnapshot& latest, int H) {
    ForecastSequence out{latest.timestamp, {}};
    int h = 1;
    for (const auto& v : propagate(K, lift_snapshot(latest), H))
        out.frames.push_back(reconstruct(v, latest.rows, latest.cols, latest.timestamp + h++));
    return out;
}

struct OccupancyPointSet {
    std::vector<Vec2> points;
    std::vector<double> intensities;  // density value of each selected cell
    double threshold = 0.0;
    int horizon = 0;

    std::size_t size() const noexcept { return points.size(); }
};

/// Centers of all cells with density strictly above `threshold`.
inline OccupancyPointSet threshold_set(const DensitySnapshot& rho, double threshold, const GridWorldMap& map,
                                       int horizon = 0) {
    require(threshold >= 0.0 && threshold <= 1.0, "threshold must lie in [0,1]");
    require(map.rows == rho.rows && map.cols == rho.cols, "world map does not match the grid shape");
    map.validate();
    OccupancyPointSet out;
    out.threshold = threshold;
    out.horizon = horizon;
    for (int r = 0; r < rho.rows; ++r)
        for (int c = 0; c < rho.cols; ++c)
            if (rho.at(r, c) > threshold) {
                out.points.push_back(map.cell_center(r, c));
                out.intensities.push_back(rho.at(r, c));
            }
    return out;
}

/// Normalized prediction errors of a distributed operator relative to the
/// centralized one. std::nullopt marks an exact centralized fit (denominator
/// below 1e-14 relative to the data scale), where the ratio is meaningless.
struct NormalizedErrors {
    std::optional<double> one_step;
    std::optional<double> multi_step;
    int horizon = 1;
    Eigen::Index columns_used = 0;  // number of h-step pairs available
};

namespace detail {

inline std::optional<double> error_ratio(const Matrix& target, const Matrix& pred_d, const Matrix& pred_c) {
    const double denom = (target - pred_c).norm();
    if (denom < 1e-14 * std::max(1.0, target.norm())) return std::nullopt;
    return (target - pred_d).norm() / denom;
}

}  // namespace detail

/// e_1 uses (X, Y); e_h compares against the h-step-ahead data Y^(h), built
/// from the same single trajectory: column k of X is snapshot k and the
/// trajectory's last snapshot is the final column of Y. Columns without an
/// h-step successor are dropped.
inline NormalizedErrors normalized_errors(const Matrix& K_d, const Matrix& K_star, const DataMatrices& d, int h) {
    require(h >= 1, "horizon must be at least 1");
    require(K_d.rows() == d.lift_dim() && K_d.cols() == d.lift_dim() && K_star.rows() == d.lift_dim() &&
                K_star.cols() == d.lift_dim(),
            "operator/data dimension mismatch");
    const Eigen::Index N = d.pairs();
    require(h <= N, "horizon " + std::to_string(h) + " exceeds the " + std::to_string(N) + " available pairs");
    NormalizedErrors out;
    out.horizon = h;
    out.one_step = detail::error_ratio(d.Y, K_d * d.X, K_star * d.X);

    // Trajectory s_0..s_N as columns.
    Matrix traj(d.lift_dim(), N + 1);
    traj.leftCols(N) = d.X;
    traj.col(N) = d.Y.col(N - 1);
    const Eigen::Index cols = N + 1 - h;
    const Matrix X_h = traj.leftCols(cols);
    const Matrix Y_h = traj.middleCols(h, cols);
    Matrix pd = X_h, pc = X_h;
    for (int k = 0; k < h; ++k) {
        pd = K_d * pd;
        pc = K_star * pc;
    }
    out.multi_step = detail::error_ratio(Y_h, pd, pc);
    out.columns_used = cols;
    return out;
}

/// |predicted - truth| per cell (rows) and horizon step (columns).
inline Matrix forecast_error_map(const ForecastSequence& predicted, std::span<const DensitySnapshot> truth) {
    require(static_cast<int>(truth.size()) >= predicted.horizon(), "not enough ground-truth frames");
    require(predicted.horizon() >= 1, "empty forecast");
    const auto n = static_cast<Eigen::Index>(predicted.frames.front().size());
    Matrix err(n, predicted.horizon());
    for (int h = 0; h < predicted.horizon(); ++h) {
        const auto& p = predicted.frames[static_cast<std::size_t>(h)];
        const auto& t = truth[static_cast<std::size_t>(h)];
        require(static_cast<Eigen::Index>(t.size()) == n, "ground-truth grid shape mismatch");
        err.col(h) = (lift_snapshot(p) - lift_snapshot(t)).cwiseAbs();
    }
    return err;
}

}  // namespace dkmpc
