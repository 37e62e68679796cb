#pragma once

#include "dkmpc/common.hpp"

#include <numeric>
#include <span>
#include <string>
#include <vector>

namespace dkmpc {

/// Occupancy grid at one time step. Values are row-major, each in [0, 1].
struct DensitySnapshot {
    int rows = 0;
    int cols = 0;
    std::vector<double> values;
    int timestamp = 0;

    DensitySnapshot() = default;
    DensitySnapshot(int r, int c, std::vector<double> v, int t = 0)
        : rows(r), cols(c), values(std::move(v)), timestamp(t) {}

    static DensitySnapshot zeros(int r, int c, int t = 0) {
        return DensitySnapshot(r, c, std::vector<double>(static_cast<std::size_t>(r) * c, 0.0), t);
    }

    int size() const noexcept { return rows * cols; }
    double at(int r, int c) const { return values[static_cast<std::size_t>(r) * cols + c]; }
    double& at(int r, int c) { return values[static_cast<std::size_t>(r) * cols + c]; }

    void validate() const {
        require(rows > 0 && cols > 0, "snapshot dimensions must be positive");
        require(values.size() == static_cast<std::size_t>(rows) * cols,
                "snapshot holds " + std::to_string(values.size()) + " values, expected " +
                    std::to_string(rows * cols));
        for (double v : values)
            require(v >= 0.0 && v <= 1.0, "snapshot value " + std::to_string(v) + " outside [0,1]");
    }

    friend bool operator==(const DensitySnapshot&, const DensitySnapshot&) = default;
};

/// Row-major vectorization: cell (r, c) lands at index r*cols + c.
inline Vector lift_snapshot(const DensitySnapshot& s) {
    return Eigen::Map<const Vector>(s.values.data(), static_cast<Eigen::Index>(s.values.size()));
}

/// Snapshot pairs stacked column-wise: Y.col(k) is the successor of X.col(k).
struct DataMatrices {
    Matrix X;
    Matrix Y;

    Eigen::Index pairs() const noexcept { return X.cols(); }
    Eigen::Index lift_dim() const noexcept { return X.rows(); }
};

/// One trajectory of T snapshots gives T-1 transition pairs.
inline DataMatrices assemble_pairs(std::span<const DensitySnapshot> snapshots) {
    require(snapshots.size() >= 2, "need at least two snapshots to form a transition pair");
    const int rows = snapshots.front().rows;
    const int cols = snapshots.front().cols;
    for (const auto& s : snapshots)
        require(s.rows == rows && s.cols == cols, "snapshot sequence has mixed grid shapes");
    const auto n = static_cast<Eigen::Index>(rows) * cols;
    const auto N = static_cast<Eigen::Index>(snapshots.size()) - 1;
    DataMatrices d{Matrix(n, N), Matrix(n, N)};
    for (Eigen::Index k = 0; k < N; ++k) {
        d.X.col(k) = lift_snapshot(snapshots[static_cast<std::size_t>(k)]);
        d.Y.col(k) = lift_snapshot(snapshots[static_cast<std::size_t>(k + 1)]);
    }
    return d;
}

enum class Provenance { centralized, distributed };

struct KoopmanOperator {
    Matrix K;
    Provenance provenance = Provenance::centralized;
};

/// Least-squares operator min ||Y - K X||_F. With ridge == 0 the
/// minimum-Frobenius-norm minimizer Y X^+ is returned, so rank-deficient data
/// still gives a unique answer. With ridge > 0 the regularized normal
/// equations K (X X^T + ridge I) = Y X^T are solved instead.
inline KoopmanOperator centralized_edmd(const DataMatrices& d, double ridge = 0.0) {
    require(d.X.rows() == d.Y.rows() && d.X.cols() == d.Y.cols(), "X and Y shapes differ");
    require(ridge >= 0.0, "ridge must be nonnegative");
    if (ridge > 0.0) {
        Matrix G = d.X * d.X.transpose();
        G.diagonal().array() += ridge;
        const Matrix rhs = d.X * d.Y.transpose();  // G is symmetric: G K^T = X Y^T
        return {Eigen::LLT<Matrix>(G).solve(rhs).transpose(), Provenance::centralized};
    }
    // Row r of K solves X^T k_r = y_r in the min-norm least-squares sense.
    Eigen::CompleteOrthogonalDecomposition<Matrix> cod(d.X.transpose());
    const Matrix Kt = cod.solve(d.Y.transpose());
    return {Kt.transpose(), Provenance::centralized};
}

/// ||(Y - K X) X^T||_F, zero exactly at minimizers of ||Y - K X||_F.
inline double residual_orthogonality(const Matrix& K, const DataMatrices& d) {
    require(K.rows() == d.lift_dim() && K.cols() == d.lift_dim(), "operator/data dimension mismatch");
    return ((d.Y - K * d.X) * d.X.transpose()).norm();
}

/// Contiguous row block owned by one agent.
struct RowBlock {
    Eigen::Index offset = 0;
    Matrix X;
    Matrix Y;

    Eigen::Index rows() const noexcept { return X.rows(); }
};

/// Splits (X, Y) into p contiguous row blocks. Without explicit sizes, the
/// lift dimension has to be divisible by p.
inline std::vector<RowBlock> partition_rows(const DataMatrices& d, int p,
                                            std::span<const int> sizes = {}) {
    require(p >= 1, "partition count must be positive");
    const Eigen::Index n = d.lift_dim();
    std::vector<Eigen::Index> block_rows;
    if (sizes.empty()) {
        require(n % p == 0, "lift dimension " + std::to_string(n) + " is not divisible by " +
                                std::to_string(p) + "; pass explicit block sizes");
        block_rows.assign(static_cast<std::size_t>(p), n / p);
    } else {
        require(static_cast<int>(sizes.size()) == p, "expected one block size per agent");
        for (int s : sizes) {
            require(s >= 1, "block sizes must be positive");
            block_rows.push_back(s);
        }
        require(std::accumulate(block_rows.begin(), block_rows.end(), Eigen::Index{0}) == n,
                "block sizes must sum to the lift dimension");
    }
    std::vector<RowBlock> out;
    Eigen::Index offset = 0;
    for (Eigen::Index r : block_rows) {
        out.push_back({offset, d.X.middleRows(offset, r), d.Y.middleRows(offset, r)});
        offset += r;
    }
    return out;
}

/// Near-even block sizes (first n mod p blocks get one extra row).
inline std::vector<int> balanced_sizes(Eigen::Index n, int p) {
    std::vector<int> sizes(static_cast<std::size_t>(p), static_cast<int>(n / p));
    for (Eigen::Index i = 0; i < n % p; ++i) ++sizes[static_cast<std::size_t>(i)];
    return sizes;
}

}  // namespace dkmpc
