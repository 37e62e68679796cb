#pragma once

// Consensus-based distributed Koopman learning.
//
// Agent i owns the row block (X_i, Y_i) of the lifted data, a block-column
// K_i (n x n_i) of the operator and an auxiliary state S_i (n x N). One
// synchronous round reads every S_j from the pre-round snapshot and applies
//
//     K_i+ = K_i - alpha S_i X_i^T
//     S_i+ = S_i + (K_i+ - K_i) X_i - alpha sum_{j in N(i)} (S_i - S_j).
//
// With K_i(0) = 0 and S_i(0) = -Ybold_i the sum over agents of
// S_i + Ybold_i - K_i X_i stays at zero, and for alpha below the spectral
// bound of the convergence matrix M the concatenation [K_1 ... K_p]
// converges to a least-squares minimizer of ||Y - K X||_F.

#include "dkmpc/comms_graph.hpp"
#include "dkmpc/lifting_data.hpp"

#include <Eigen/Eigenvalues>

#include <algorithm>
#include <cmath>
#include <complex>
#include <limits>
#include <memory>
#include <optional>
#include <span>
#include <string>
#include <thread>
#include <vector>

namespace dkmpc {

struct AgentState {
    int index = 0;
    std::shared_ptr<const RowBlock> data;  // X_i, Y_i and the row offset
    Matrix K;                              // n x n_i
    Matrix S;                              // n x N

    const Matrix& X() const { return data->X; }
    const Matrix& Y() const { return data->Y; }
    Eigen::Index offset() const { return data->offset; }
};

namespace detail {

inline void check_partitions(std::span<const RowBlock> parts) {
    require(!parts.empty(), "need at least one agent partition");
    const Eigen::Index N = parts.front().X.cols();
    Eigen::Index offset = 0;
    for (const auto& b : parts) {
        require(b.X.cols() == N && b.Y.cols() == N, "agents disagree on the sample count N");
        require(b.X.rows() == b.Y.rows(), "agent X_i and Y_i row counts differ");
        require(b.offset == offset, "agent row blocks must be contiguous and ordered");
        offset += b.X.rows();
    }
}

inline Eigen::Index total_rows(std::span<const RowBlock> parts) {
    Eigen::Index n = 0;
    for (const auto& b : parts) n += b.X.rows();
    return n;
}

}  // namespace detail

/// K_i(0) = 0 and S_i(0) = -Ybold_i: zero except rows of block i, which hold -Y_i.
inline std::vector<AgentState> init_agents(std::span<const RowBlock> parts) {
    detail::check_partitions(parts);
    const Eigen::Index n = detail::total_rows(parts);
    const Eigen::Index N = parts.front().X.cols();
    std::vector<AgentState> agents;
    for (std::size_t i = 0; i < parts.size(); ++i) {
        AgentState a;
        a.index = static_cast<int>(i);
        a.data = std::make_shared<const RowBlock>(parts[i]);
        a.K = Matrix::Zero(n, parts[i].rows());
        a.S = Matrix::Zero(n, N);
        a.S.middleRows(parts[i].offset, parts[i].rows()) = -parts[i].Y;
        agents.push_back(std::move(a));
    }
    return agents;
}

/// Warm start from a previous operator estimate on new data. S_i is chosen as
/// K_i X_i - Ybold_i so the conservation invariant holds from the first round.
inline std::vector<AgentState> warm_start_agents(std::span<const RowBlock> parts, const Matrix& K_prev) {
    detail::check_partitions(parts);
    const Eigen::Index n = detail::total_rows(parts);
    require(K_prev.rows() == n && K_prev.cols() == n, "warm-start operator has the wrong shape");
    auto agents = init_agents(parts);
    for (auto& a : agents) {
        a.K = K_prev.middleCols(a.offset(), a.X().rows());
        a.S = a.K * a.X();
        a.S.middleRows(a.offset(), a.X().rows()) -= a.Y();
    }
    return agents;
}

/// Resume from caller-supplied (K_i, S_i). No invariant is imposed.
inline std::vector<AgentState> resume_agents(std::span<const RowBlock> parts,
                                             std::span<const Matrix> K_blocks,
                                             std::span<const Matrix> S_blocks) {
    auto agents = init_agents(parts);
    require(K_blocks.size() == agents.size() && S_blocks.size() == agents.size(),
            "need one (K_i, S_i) pair per agent");
    for (std::size_t i = 0; i < agents.size(); ++i) {
        require(K_blocks[i].rows() == agents[i].K.rows() && K_blocks[i].cols() == agents[i].K.cols(),
                "K_" + std::to_string(i + 1) + " has the wrong shape");
        require(S_blocks[i].rows() == agents[i].S.rows() && S_blocks[i].cols() == agents[i].S.cols(),
                "S_" + std::to_string(i + 1) + " has the wrong shape");
        agents[i].K = K_blocks[i];
        agents[i].S = S_blocks[i];
    }
    return agents;
}

/// K = [K_1 ... K_p].
inline Matrix assemble_operator(std::span<const AgentState> agents) {
    require(!agents.empty(), "no agents");
    const Eigen::Index n = agents.front().K.rows();
    Matrix K(n, n);
    for (const auto& a : agents) K.middleCols(a.offset(), a.K.cols()) = a.K;
    return K;
}

/// ||sum_i (S_i + Ybold_i - K_i X_i)||_F, i.e. ||W (1_p ⊗ I_N)||_F.
inline double consensus_defect(std::span<const AgentState> agents) {
    require(!agents.empty(), "no agents");
    Matrix acc = Matrix::Zero(agents.front().S.rows(), agents.front().S.cols());
    for (const auto& a : agents) {
        acc += a.S;
        acc.middleRows(a.offset(), a.Y().rows()) += a.Y();
        acc.noalias() -= a.K * a.X();
    }
    return acc.norm();
}

/// ||Ybold||_F (equal to ||Y||_F).
inline double stacked_output_norm(std::span<const AgentState> agents) {
    double sq = 0.0;
    for (const auto& a : agents) sq += a.Y().squaredNorm();
    return std::sqrt(sq);
}

/// One synchronous round. Every agent reads neighbor states from the
/// pre-round snapshot, so the result does not depend on `threads`.
inline void step(std::span<AgentState> agents, double alpha, const CommGraph& g, int threads = 1) {
    require(alpha > 0.0, "step size must be positive");
    require(g.node_count() == static_cast<int>(agents.size()),
            "graph has " + std::to_string(g.node_count()) + " nodes but there are " +
                std::to_string(agents.size()) + " agents");
    std::vector<Matrix> snapshot;
    snapshot.reserve(agents.size());
    for (const auto& a : agents) {
        require(a.S.cols() == a.X().cols() && a.K.cols() == a.X().rows() && a.K.rows() == a.S.rows(),
                "agent " + std::to_string(a.index + 1) + " state shape mismatch");
        snapshot.push_back(a.S);
    }

    auto update = [&](std::size_t i) {
        AgentState& a = agents[i];
        const Matrix& S = snapshot[i];
        Matrix K_next = a.K;
        K_next.noalias() -= alpha * (S * a.X().transpose());
        Matrix S_next = S;
        S_next.noalias() += (K_next - a.K) * a.X();
        for (int j : g.neighbors(static_cast<int>(i)))
            S_next -= alpha * (S - snapshot[static_cast<std::size_t>(j)]);
        a.K = std::move(K_next);
        a.S = std::move(S_next);
    };

    const std::size_t p = agents.size();
    const std::size_t workers = std::clamp<std::size_t>(static_cast<std::size_t>(std::max(threads, 1)), 1, p);
    if (workers == 1) {
        for (std::size_t i = 0; i < p; ++i) update(i);
        return;
    }
    std::vector<std::thread> pool;
    for (std::size_t w = 0; w < workers; ++w)
        pool.emplace_back([&, w] {
            for (std::size_t i = w; i < p; i += workers) update(i);
        });
    for (auto& t : pool) t.join();
}

/// t_max rounds of step() with the operator blocks held implicitly. Since
/// K_i(t) = K_i(0) - alpha (sum_{s<t} S_i(s)) X_i^T and
/// (K_i+ - K_i) X_i = -alpha S_i X_i^T X_i, each round only touches n x N
/// matrices; K_i is materialized once at the end.
inline void run_accumulated(std::span<AgentState> agents, double alpha, const CommGraph& g, int t_max) {
    require(alpha > 0.0, "step size must be positive");
    require(t_max >= 0, "iteration count must be nonnegative");
    require(g.node_count() == static_cast<int>(agents.size()), "graph size does not match the agent count");
    const std::size_t p = agents.size();
    std::vector<Matrix> gram, acc, next(p);
    for (const auto& a : agents) {
        require(a.S.cols() == a.X().cols() && a.K.cols() == a.X().rows() && a.K.rows() == a.S.rows(),
                "agent " + std::to_string(a.index + 1) + " state shape mismatch");
        gram.push_back(a.X().transpose() * a.X());
        acc.push_back(Matrix::Zero(a.S.rows(), a.S.cols()));
    }
    for (int t = 0; t < t_max; ++t) {
        for (std::size_t i = 0; i < p; ++i) {
            const Matrix& S = agents[i].S;
            next[i] = S;
            next[i].noalias() -= alpha * (S * gram[i]);
            for (int j : g.neighbors(static_cast<int>(i))) next[i] -= alpha * (S - agents[static_cast<std::size_t>(j)].S);
        }
        for (std::size_t i = 0; i < p; ++i) {
            acc[i] += agents[i].S;
            std::swap(agents[i].S, next[i]);
        }
    }
    for (std::size_t i = 0; i < p; ++i) agents[i].K.noalias() -= alpha * (acc[i] * agents[i].X().transpose());
}

// ---------------------------------------------------------------------------
// Convergence matrix and spectral step-size bounds
// ---------------------------------------------------------------------------

/// M = -[[Xb Xb^T, Xb Lb], [Xb^T, Lb]] with Xb = diag(X_1..X_p) (n x Np),
/// Lb = L ⊗ I_N. Yb = diag(Y_1..Y_p) is kept for the invariant checks.
struct ConvergenceMatrix {
    Matrix Xb;
    Matrix Yb;
    Matrix Lb;
    Matrix M;
};

inline Matrix block_diagonal_columns(std::span<const RowBlock> parts, bool use_y) {
    const Eigen::Index n = detail::total_rows(parts);
    const Eigen::Index N = parts.front().X.cols();
    const auto p = static_cast<Eigen::Index>(parts.size());
    Matrix out = Matrix::Zero(n, N * p);
    for (Eigen::Index i = 0; i < p; ++i) {
        const auto& b = parts[static_cast<std::size_t>(i)];
        out.block(b.offset, i * N, b.rows(), N) = use_y ? b.Y : b.X;
    }
    return out;
}

inline ConvergenceMatrix build_convergence_matrix(std::span<const RowBlock> parts, const Matrix& L, int N) {
    detail::check_partitions(parts);
    require(parts.front().X.cols() == N, "N does not match the partition sample count");
    require(L.rows() == static_cast<Eigen::Index>(parts.size()) && L.cols() == L.rows(),
            "Laplacian size must equal the agent count");
    ConvergenceMatrix cm;
    cm.Xb = block_diagonal_columns(parts, false);
    cm.Yb = block_diagonal_columns(parts, true);
    cm.Lb = lifted_laplacian(L, N);
    const Eigen::Index n = cm.Xb.rows();
    const Eigen::Index m = cm.Xb.cols();
    cm.M.resize(n + m, n + m);
    cm.M.topLeftCorner(n, n).noalias() = -(cm.Xb * cm.Xb.transpose());
    cm.M.topRightCorner(n, m).noalias() = -(cm.Xb * cm.Lb);
    cm.M.bottomLeftCorner(m, n) = -cm.Xb.transpose();
    cm.M.bottomRightCorner(m, m) = -cm.Lb;
    return cm;
}

using Spectrum = std::vector<std::complex<double>>;

/// Eigenvalues with |lambda| above 1e-9 ||M||_F, from a dense nonsymmetric
/// eigensolver (M is not normal).
inline Spectrum nonzero_eigenvalues(const Matrix& M) {
    require(M.rows() == M.cols(), "spectrum needs a square matrix");
    Eigen::EigenSolver<Matrix> es(M, false);
    if (es.info() != Eigen::Success) throw RuntimeFailure("eigenvalue iteration did not converge");
    const double cutoff = 1e-9 * M.norm();
    Spectrum out;
    for (Eigen::Index k = 0; k < es.eigenvalues().size(); ++k)
        if (std::abs(es.eigenvalues()(k)) > cutoff) out.push_back(es.eigenvalues()(k));
    return out;
}

/// -max over lambda of 2 Re(lambda) / |lambda|^2.
inline double alpha_max(std::span<const std::complex<double>> nonzero) {
    require(!nonzero.empty(), "step-size bound undefined: every eigenvalue is zero");
    double worst = -std::numeric_limits<double>::infinity();
    for (auto lam : nonzero) worst = std::max(worst, 2.0 * lam.real() / std::norm(lam));
    return -worst;
}

/// max over lambda of sqrt(1 + 2 alpha Re(lambda) + alpha^2 |lambda|^2).
inline double rho_max(std::span<const std::complex<double>> nonzero, double alpha) {
    require(!nonzero.empty(), "rate bound undefined: every eigenvalue is zero");
    require(alpha > 0.0, "step size must be positive");
    double worst = 0.0;
    for (auto lam : nonzero) {
        const double v = 1.0 + 2.0 * alpha * lam.real() + alpha * alpha * std::norm(lam);
        worst = std::max(worst, std::sqrt(std::max(v, 0.0)));
    }
    return worst;
}

inline double alpha_max(const ConvergenceMatrix& cm) { return alpha_max(nonzero_eigenvalues(cm.M)); }

inline double rho_max(const ConvergenceMatrix& cm, double alpha) {
    return rho_max(nonzero_eigenvalues(cm.M), alpha);
}

/// The nonzero spectrum of M computed through the Np x Np Gram form.
/// M = -[Xb; I][Xb^T, Lb], so its nonzero eigenvalues are those of
/// -(Xb^T Xb + Lb), a symmetric matrix. Used where an (n+Np)-dimensional
/// dense eigensolve per refresh would be too slow; the same 1e-9 ||M||_F
/// cutoff applies.
inline Spectrum compact_nonzero_eigenvalues(std::span<const RowBlock> parts, const Matrix& L) {
    detail::check_partitions(parts);
    const auto N = static_cast<int>(parts.front().X.cols());
    const Matrix Xb = block_diagonal_columns(parts, false);
    const Matrix Lb = lifted_laplacian(L, N);
    const Matrix gram = Xb.transpose() * Xb;
    const double m_norm = std::sqrt(gram.squaredNorm() + 2.0 * (Xb * Lb).squaredNorm() +
                                    Xb.squaredNorm() + Lb.squaredNorm());
    Eigen::SelfAdjointEigenSolver<Matrix> es(gram + Lb, Eigen::EigenvaluesOnly);
    Spectrum out;
    for (Eigen::Index k = 0; k < es.eigenvalues().size(); ++k)
        if (std::abs(es.eigenvalues()(k)) > 1e-9 * m_norm) out.emplace_back(-es.eigenvalues()(k), 0.0);
    return out;
}

/// ceil(log(target)/log(rho)) capped at `cap`.
inline int iteration_budget(double rho, double target_tol, int cap) {
    require(target_tol > 0.0 && target_tol < 1.0, "target tolerance must lie in (0,1)");
    if (!(rho < 1.0)) return cap;
    if (rho <= 0.0) return 1;
    const double t = std::ceil(std::log(target_tol) / std::log(rho));
    return static_cast<int>(std::min<double>(t, cap));
}

// ---------------------------------------------------------------------------
// Algorithm driver and diagnostics
// ---------------------------------------------------------------------------

struct TraceRow {
    int t = 0;
    double gap = 0.0;          // O(t) = ||(K* - K_d(t)) X||_F
    double operator_error = 0.0;  // ||K_d(t) - K*||_F
    double defect = 0.0;       // ||W(t)(1_p ⊗ I_N)||_F
};

struct LearningTrace {
    std::vector<TraceRow> rows;  // t = 0..t_max when recording
    Matrix K_d;
    bool defect_invariant_applies = true;
    std::vector<std::string> warnings;
};

struct RunOptions {
    double alpha = 0.0;
    int t_max = 0;
    const Matrix* oracle = nullptr;  // centralized K*, enables gap/error columns
    double alpha_limit = std::numeric_limits<double>::infinity();
    int threads = 1;
    bool record = true;
};

inline LearningTrace run(std::span<AgentState> agents, const CommGraph& g, const DataMatrices& d,
                         const RunOptions& opt) {
    require(opt.t_max >= 0, "iteration count must be nonnegative");
    require(opt.alpha > 0.0, "step size must be positive");
    LearningTrace trace;
    if (!(opt.alpha < opt.alpha_limit))
        trace.warnings.push_back("step size " + std::to_string(opt.alpha) +
                                 " is not below the stability bound " + std::to_string(opt.alpha_limit) +
                                 "; iterates may diverge");

    const double defect_tol = 1e-10 * (1.0 + stacked_output_norm(agents));
    Matrix oracle_prediction;
    if (opt.oracle) {
        require(opt.oracle->rows() == d.lift_dim() && opt.oracle->cols() == d.lift_dim(),
                "oracle operator has the wrong shape");
        oracle_prediction = (*opt.oracle) * d.X;
    }
    auto record = [&](int t) {
        TraceRow row;
        row.t = t;
        const Matrix K = assemble_operator(agents);
        if (opt.oracle) {
            row.gap = (oracle_prediction - K * d.X).norm();
            row.operator_error = (K - *opt.oracle).norm();
        } else {
            row.gap = std::numeric_limits<double>::quiet_NaN();
            row.operator_error = std::numeric_limits<double>::quiet_NaN();
        }
        row.defect = consensus_defect(agents);
        trace.rows.push_back(row);
    };

    if (consensus_defect(agents) > defect_tol) {
        trace.defect_invariant_applies = false;
        trace.warnings.push_back("initial state does not satisfy the conservation invariant; "
                                 "consensus-defect check skipped");
    }
    if (opt.record) record(0);
    for (int t = 1; t <= opt.t_max; ++t) {
        step(agents, opt.alpha, g, opt.threads);
        if (opt.record) record(t);
    }
    trace.K_d = assemble_operator(agents);
    return trace;
}

/// Entrywise |K_d - K*|.
inline Matrix operator_diff_map(const Matrix& K_d, const Matrix& K_star) {
    require(K_d.rows() == K_star.rows() && K_d.cols() == K_star.cols(), "operator shapes differ");
    return (K_d - K_star).cwiseAbs();
}

/// Eigenvalues ordered by magnitude, then by angle.
inline Spectrum sorted_eigenvalues(const Matrix& K) {
    require(K.rows() == K.cols(), "spectrum needs a square matrix");
    Eigen::EigenSolver<Matrix> es(K, false);
    if (es.info() != Eigen::Success) throw RuntimeFailure("eigenvalue iteration did not converge");
    Spectrum ev(es.eigenvalues().begin(), es.eigenvalues().end());
    std::sort(ev.begin(), ev.end(), [](auto a, auto b) {
        const double ma = std::abs(a), mb = std::abs(b);
        if (ma != mb) return ma < mb;
        return std::arg(a) < std::arg(b);
    });
    return ev;
}

struct SpectrumComparison {
    Spectrum distributed;
    Spectrum centralized;
};

inline SpectrumComparison spectrum_compare(const Matrix& K_d, const Matrix& K_star) {
    return {sorted_eigenvalues(K_d), sorted_eigenvalues(K_star)};
}

/// Symmetric Hausdorff distance between two finite point sets in C.
inline double hausdorff_distance(std::span<const std::complex<double>> a,
                                 std::span<const std::complex<double>> b) {
    if (a.empty() && b.empty()) return 0.0;
    if (a.empty() || b.empty()) return std::numeric_limits<double>::infinity();
    auto directed = [](auto from, auto to) {
        double worst = 0.0;
        for (auto x : from) {
            double best = std::numeric_limits<double>::infinity();
            for (auto y : to) best = std::min(best, std::abs(x - y));
            worst = std::max(worst, best);
        }
        return worst;
    };
    return std::max(directed(a, b), directed(b, a));
}

/// Least-squares slope of log O(t) over the last third of a trace, as a
/// per-iteration contraction factor. Non-positive or non-finite samples are
/// skipped.
inline double fitted_rate(std::span<const TraceRow> rows) {
    require(rows.size() >= 3, "need at least three trace rows to fit a rate");
    const std::size_t start = rows.size() - rows.size() / 3;
    double sx = 0, sy = 0, sxx = 0, sxy = 0;
    int m = 0;
    for (std::size_t k = start; k < rows.size(); ++k) {
        const double o = rows[k].gap;
        if (!(o > 0.0) || !std::isfinite(o)) continue;
        const double x = rows[k].t, y = std::log(o);
        sx += x;
        sy += y;
        sxx += x * x;
        sxy += x * y;
        ++m;
    }
    require(m >= 2, "not enough positive samples to fit a rate");
    const double slope = (m * sxy - sx * sy) / (m * sxx - sx * sx);
    return std::exp(slope);
}

}  // namespace dkmpc
