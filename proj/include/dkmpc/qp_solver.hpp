#pragma once

// Dense strictly convex QP
//
//     minimize  0.5 x^T H x + g^T x   subject to  A x >= b
//
// solved with the Goldfarb-Idnani dual active-set method. The method starts
// from the unconstrained minimizer and adds the most violated constraint one
// at a time, dropping constraints whose multipliers would turn negative. It
// keeps J = L^{-T} Q and an upper-triangular R with L^{-1} N = Q [R; 0]
// (H = L L^T, N the active normals), both updated by Givens rotations.

#include "dkmpc/common.hpp"

#include <algorithm>
#include <cmath>
#include <limits>
#include <vector>

namespace dkmpc {

struct QuadraticProgram {
    Matrix H;
    Vector g;
    Matrix A;  // one inequality per row
    Vector b;

    Eigen::Index variables() const noexcept { return H.rows(); }
    Eigen::Index constraints() const noexcept { return A.rows(); }

    double objective(const Vector& x) const { return 0.5 * x.dot(H * x) + g.dot(x); }
};

enum class QpStatus { optimal, infeasible, iteration_limit };

inline const char* to_string(QpStatus s) {
    switch (s) {
        case QpStatus::optimal: return "optimal";
        case QpStatus::infeasible: return "infeasible";
        case QpStatus::iteration_limit: return "iteration_limit";
    }
    return "unknown";
}

struct QpResult {
    Vector x;
    Vector lambda;  // one multiplier per constraint row, zero when inactive
    double objective = 0.0;
    int iterations = 0;
    QpStatus status = QpStatus::optimal;
    std::vector<int> active;
};

struct KktResidual {
    double stationarity = 0.0;      // ||H x + g - A^T lambda||_inf
    double primal = 0.0;            // max(b - A x, 0)
    double dual = 0.0;              // max(-lambda, 0)
    double complementarity = 0.0;   // max |lambda_i (a_i x - b_i)|

    double max() const { return std::max({stationarity, primal, dual, complementarity}); }
};

inline KktResidual kkt_residual(const QuadraticProgram& qp, const Vector& x, const Vector& lambda) {
    KktResidual r;
    Vector grad = qp.H * x + qp.g;
    if (qp.constraints() > 0) grad -= qp.A.transpose() * lambda;
    r.stationarity = grad.lpNorm<Eigen::Infinity>();
    for (Eigen::Index i = 0; i < qp.constraints(); ++i) {
        const double slack = qp.A.row(i).dot(x) - qp.b(i);
        r.primal = std::max(r.primal, -slack);
        r.dual = std::max(r.dual, -lambda(i));
        r.complementarity = std::max(r.complementarity, std::abs(lambda(i) * slack));
    }
    return r;
}

namespace detail {

// Rotation (c, s) mapping (a, b) to (hypot(a, b), 0).
inline void givens(double a, double b, double& c, double& s, double& h) {
    h = std::hypot(a, b);
    if (h == 0.0) {
        c = 1.0;
        s = 0.0;
    } else {
        c = a / h;
        s = b / h;
    }
}

inline void rotate_columns(Matrix& J, Eigen::Index i, Eigen::Index j, double c, double s) {
    for (Eigen::Index r = 0; r < J.rows(); ++r) {
        const double a = J(r, i), b = J(r, j);
        J(r, i) = c * a + s * b;
        J(r, j) = -s * a + c * b;
    }
}

}  // namespace detail

struct QpOptions {
    double feasibility_tol = 1e-10;  // relative to 1 + |b_i| and the row norm
    int max_iter = 1000;
};

inline QpResult solve_qp(const QuadraticProgram& qp, const QpOptions& opt = {}) {
    const Eigen::Index n = qp.variables();
    const Eigen::Index m = qp.constraints();
    require(n >= 1 && qp.H.cols() == n && qp.g.size() == n, "QP Hessian/gradient shape mismatch");
    require(qp.A.cols() == n || m == 0, "constraint matrix has the wrong column count");
    require(qp.b.size() == m, "constraint bound length mismatch");

    Eigen::LLT<Matrix> llt(0.5 * (qp.H + qp.H.transpose()));
    require(llt.info() == Eigen::Success, "QP Hessian is not positive definite");
    const Matrix Lt = llt.matrixU();
    Matrix J = Lt.triangularView<Eigen::Upper>().solve(Matrix::Identity(n, n));
    Matrix R = Matrix::Zero(n, n);

    QpResult res;
    res.x = -llt.solve(qp.g);
    res.lambda = Vector::Zero(m);
    std::vector<int> act;       // active constraint indices, in R column order
    std::vector<double> u;      // their multipliers
    std::vector<char> is_active(static_cast<std::size_t>(m), 0);
    Vector row_norm(m);
    for (Eigen::Index i = 0; i < m; ++i) row_norm(i) = qp.A.row(i).norm();

    auto violation = [&](Eigen::Index i) { return qp.A.row(i).dot(res.x) - qp.b(i); };
    auto tolerance = [&](Eigen::Index i) {
        return opt.feasibility_tol * (1.0 + std::abs(qp.b(i))) * std::max(1.0, row_norm(i));
    };

    auto drop = [&](std::size_t l) {
        const auto q = static_cast<Eigen::Index>(act.size());
        is_active[static_cast<std::size_t>(act[l])] = 0;
        act.erase(act.begin() + static_cast<std::ptrdiff_t>(l));
        u.erase(u.begin() + static_cast<std::ptrdiff_t>(l));
        for (Eigen::Index j = static_cast<Eigen::Index>(l); j + 1 < q; ++j) R.col(j) = R.col(j + 1);
        R.col(q - 1).setZero();
        for (Eigen::Index j = static_cast<Eigen::Index>(l); j + 1 < q; ++j) {
            double c, s, h;
            detail::givens(R(j, j), R(j + 1, j), c, s, h);
            for (Eigen::Index k = j; k + 1 < q; ++k) {
                const double a = R(j, k), b = R(j + 1, k);
                R(j, k) = c * a + s * b;
                R(j + 1, k) = -s * a + c * b;
            }
            R(j + 1, j) = 0.0;
            detail::rotate_columns(J, j, j + 1, c, s);
        }
    };

    int iter = 0;
    while (true) {
        // Step 1: most violated inactive constraint.
        Eigen::Index p = -1;
        double worst = 0.0;
        for (Eigen::Index i = 0; i < m; ++i) {
            if (is_active[static_cast<std::size_t>(i)]) continue;
            const double s = violation(i);
            if (s < -tolerance(i) && s < worst) {
                worst = s;
                p = i;
            }
        }
        if (p < 0) {
            res.status = QpStatus::optimal;
            break;
        }
        const Vector np = qp.A.row(p).transpose();
        double u_plus = 0.0;

        bool added = false;
        while (!added) {
            if (++iter > opt.max_iter) {
                res.status = QpStatus::iteration_limit;
                break;
            }
            const auto q = static_cast<Eigen::Index>(act.size());
            Vector d = J.transpose() * np;
            const Vector z = J.rightCols(n - q) * d.tail(n - q);
            Vector r(q);
            if (q > 0) r = R.topLeftCorner(q, q).triangularView<Eigen::Upper>().solve(d.head(q));

            double t1 = std::numeric_limits<double>::infinity();
            std::size_t l = 0;
            for (Eigen::Index j = 0; j < q; ++j) {
                if (r(j) > 0.0) {
                    const double ratio = u[static_cast<std::size_t>(j)] / r(j);
                    if (ratio < t1) {
                        t1 = ratio;
                        l = static_cast<std::size_t>(j);
                    }
                }
            }
            const double zn = z.dot(np);
            const double t2 = (z.norm() > 1e-14 * std::max(1.0, np.norm()) && zn > 0.0)
                                  ? -violation(p) / zn
                                  : std::numeric_limits<double>::infinity();
            const double t = std::min(t1, t2);
            if (!std::isfinite(t)) {
                res.status = QpStatus::infeasible;
                break;
            }
            if (!std::isfinite(t2)) {
                // Dual step only: the primal point cannot move toward p.
                for (Eigen::Index j = 0; j < q; ++j) u[static_cast<std::size_t>(j)] -= t * r(j);
                u_plus += t;
                drop(l);
                continue;
            }
            res.x += t * z;
            for (Eigen::Index j = 0; j < q; ++j) u[static_cast<std::size_t>(j)] -= t * r(j);
            u_plus += t;
            if (t2 <= t1) {
                // Full step: p becomes active.
                for (Eigen::Index j = n - 1; j > q; --j) {
                    double c, s, h;
                    detail::givens(d(j - 1), d(j), c, s, h);
                    d(j - 1) = h;
                    d(j) = 0.0;
                    detail::rotate_columns(J, j - 1, j, c, s);
                }
                R.col(q).head(q + 1) = d.head(q + 1);
                act.push_back(static_cast<int>(p));
                u.push_back(u_plus);
                is_active[static_cast<std::size_t>(p)] = 1;
                added = true;
            } else {
                drop(l);
            }
        }
        if (!added) break;
    }

    for (std::size_t j = 0; j < act.size(); ++j) res.lambda(act[j]) = std::max(u[j], 0.0);
    res.active = act;
    res.iterations = iter;
    res.objective = qp.objective(res.x);
    return res;
}

}  // namespace dkmpc
