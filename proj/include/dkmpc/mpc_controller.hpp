#pragma once

// Receding-horizon tracking with forecast obstacle half-spaces.
//
// Decision variables are the stacked inputs U = (u_0, ..., u_{H-1}); the
// states are eliminated through x_h = A^h x_0 + sum_{j<h} A^{h-1-j} B u_j, so
// the stacked outputs are Z = Phi x_0 + Gamma U. The cost is
// sum_{h=0}^{H-1} ||z_h - z*||_Q^2 + ||u_h||_R^2. Every obstacle inequality
// n . z_h >= rho + eps (h >= 1) carries a slack s >= 0 penalized by
// w_s (s^2 + s); z_0 is fixed by the initial state, so h = 0 rows are only
// checked and reported.

#include "dkmpc/obstacle_geometry.hpp"
#include "dkmpc/qp_solver.hpp"
#include "dkmpc/vehicle_model.hpp"

#include <algorithm>
#include <optional>
#include <vector>

namespace dkmpc {

struct MpcConfig {
    int horizon = 14;
    Mat2 Q = Mat2::Identity();
    Mat2 R = 0.1 * Mat2::Identity();
    Vec2 goal{15.0, 15.0};
    double margin = 0.5;        // epsilon
    double robot_radius = 0.3;  // R_r
    double input_bound = 0.0;   // |a_x|, |a_y| <= bound; 0 disables the box
    double tol = 1e-8;
    int max_iter = 2000;

    double slack_weight() const { return 1e6 * detail::sym_eig2(Q).major; }

    void validate() const {
        require(horizon >= 1, "MPC horizon must be at least 1");
        auto spd = [](const Mat2& M) {
            return (M - M.transpose()).cwiseAbs().maxCoeff() <= 1e-12 * (1.0 + M.cwiseAbs().maxCoeff()) &&
                   detail::sym_eig2(M).minor > 0.0;
        };
        require(spd(Q), "Q must be symmetric positive definite");
        require(spd(R), "R must be symmetric positive definite");
        require(margin >= robot_radius, "safety margin must be at least the robot radius");
        require(robot_radius >= 0.0, "robot radius must be nonnegative");
        require(input_bound >= 0.0, "input bound must be nonnegative");
        require(tol > 0.0 && max_iter >= 1, "solver tolerance and iteration cap must be positive");
        require(goal.allFinite(), "goal must be finite");
    }
};

/// Polytopes for one horizon slot, one per obstacle component.
using SlotPolytopes = std::vector<ObstaclePolytope>;

/// One most-active facet per (h, obstacle), evaluated at ref[h].
inline std::vector<ActiveConstraint> generate_constraints(const std::vector<SlotPolytopes>& slots,
                                                          const std::vector<Vec2>& ref) {
    std::vector<ActiveConstraint> out;
    if (slots.empty()) return out;
    require(slots.size() <= ref.size(), "reference trajectory shorter than the polytope horizon");
    for (std::size_t h = 0; h < slots.size(); ++h)
        for (const auto& poly : slots[h]) {
            require(poly.horizon == static_cast<int>(h), "polytope horizon index does not match its slot");
            out.push_back(most_active_facet(poly, ref[h]));
        }
    return out;
}

struct MpcProblem {
    Vec4 x0 = Vec4::Zero();
    DiscreteModel model;
    std::vector<ActiveConstraint> constraints;
    MpcConfig cfg;
};

struct CondensedQp {
    QuadraticProgram qp;
    Matrix Phi;                  // 2H x 4
    Matrix Gamma;                // 2H x 2H
    Vector target;               // stacked goal, 2H
    double constant = 0.0;       // objective offset so qp value + constant is the true cost
    std::vector<int> soft_rows;  // index into problem.constraints for each slack
    int inputs = 0;              // 2H
};

inline CondensedQp build_qp(const MpcProblem& p) {
    p.cfg.validate();
    const int H = p.cfg.horizon;
    const auto& A = p.model.A;
    const auto& B = p.model.B;
    const auto& C = p.model.C;
    CondensedQp c;
    c.inputs = 2 * H;
    c.Phi = Matrix::Zero(2 * H, 4);
    c.Gamma = Matrix::Zero(2 * H, 2 * H);
    c.target.resize(2 * H);
    std::vector<Eigen::Matrix4d> Apow{Eigen::Matrix4d::Identity()};
    for (int h = 1; h < H; ++h) Apow.push_back(A * Apow.back());
    for (int h = 0; h < H; ++h) {
        c.Phi.block(2 * h, 0, 2, 4) = C * Apow[static_cast<std::size_t>(h)];
        for (int j = 0; j < h; ++j)
            c.Gamma.block(2 * h, 2 * j, 2, 2) = C * Apow[static_cast<std::size_t>(h - 1 - j)] * B;
        c.target.segment<2>(2 * h) = p.cfg.goal;
    }
    Matrix Qbar = Matrix::Zero(2 * H, 2 * H), Rbar = Matrix::Zero(2 * H, 2 * H);
    for (int h = 0; h < H; ++h) {
        Qbar.block<2, 2>(2 * h, 2 * h) = p.cfg.Q;
        Rbar.block<2, 2>(2 * h, 2 * h) = p.cfg.R;
    }
    const Vector free = c.Phi * p.x0 - c.target;
    c.constant = free.dot(Qbar * free);

    for (std::size_t k = 0; k < p.constraints.size(); ++k)
        if (p.constraints[k].horizon >= 1) {
            require(p.constraints[k].horizon < H, "constraint horizon index beyond the MPC horizon");
            c.soft_rows.push_back(static_cast<int>(k));
        }
    const int ns = static_cast<int>(c.soft_rows.size());
    const int nv = 2 * H + ns;
    const double ws = p.cfg.slack_weight();

    auto& qp = c.qp;
    qp.H = Matrix::Zero(nv, nv);
    qp.H.topLeftCorner(2 * H, 2 * H) = 2.0 * (c.Gamma.transpose() * Qbar * c.Gamma + Rbar);
    qp.g = Vector::Zero(nv);
    qp.g.head(2 * H) = 2.0 * c.Gamma.transpose() * Qbar * free;
    for (int s = 0; s < ns; ++s) {
        qp.H(2 * H + s, 2 * H + s) = 2.0 * ws;
        qp.g(2 * H + s) = ws;
    }
    const int nbox = p.cfg.input_bound > 0.0 ? 4 * H : 0;
    const int m = 2 * ns + nbox;
    qp.A = Matrix::Zero(m, nv);
    qp.b = Vector::Zero(m);
    for (int s = 0; s < ns; ++s) {
        const auto& con = p.constraints[static_cast<std::size_t>(c.soft_rows[static_cast<std::size_t>(s)])];
        const int h = con.horizon;
        qp.A.row(s).head(2 * H) = con.normal.transpose() * c.Gamma.middleRows(2 * h, 2);
        qp.A(s, 2 * H + s) = 1.0;
        qp.b(s) = con.offset + con.margin - con.normal.dot(c.Phi.middleRows(2 * h, 2) * p.x0);
        qp.A(ns + s, 2 * H + s) = 1.0;  // s >= 0
    }
    for (int k = 0; k < nbox / 2; ++k) {
        qp.A(2 * ns + 2 * k, k) = 1.0;
        qp.b(2 * ns + 2 * k) = -p.cfg.input_bound;
        qp.A(2 * ns + 2 * k + 1, k) = -1.0;
        qp.b(2 * ns + 2 * k + 1) = -p.cfg.input_bound;
    }
    return c;
}

enum class MpcStatus { optimal, soft_feasible, failed };

inline const char* to_string(MpcStatus s) {
    switch (s) {
        case MpcStatus::optimal: return "optimal";
        case MpcStatus::soft_feasible: return "soft-feasible";
        case MpcStatus::failed: return "failed";
    }
    return "unknown";
}

struct MpcSolution {
    Eigen::Matrix<double, Eigen::Dynamic, 2> inputs;   // H x 2
    Eigen::Matrix<double, Eigen::Dynamic, 2> outputs;  // H x 2, row h = z_{t+h|t}
    double objective = 0.0;
    MpcStatus status = MpcStatus::failed;
    Vector slack;  // one entry per soft constraint (h >= 1)
    double max_slack = 0.0;
    int iterations = 0;
    double kkt = 0.0;
    bool initial_violation = false;  // some h = 0 constraint fails at the fixed z_0
    std::vector<int> soft_rows;
};

/// Slacks up to this size count as zero when classifying a solution.
inline constexpr double slack_activation_tol = 1e-6;

inline MpcSolution solve_mpc(const MpcProblem& p) {
    const auto c = build_qp(p);
    const int H = p.cfg.horizon;
    QpOptions qo;
    qo.feasibility_tol = p.cfg.tol;
    qo.max_iter = p.cfg.max_iter;
    const auto r = solve_qp(c.qp, qo);

    MpcSolution sol;
    sol.inputs.resize(H, 2);
    sol.outputs.resize(H, 2);
    const Vector U = r.x.head(2 * H);
    const Vector Z = c.Phi * p.x0 + c.Gamma * U;
    for (int h = 0; h < H; ++h) {
        sol.inputs.row(h) = U.segment<2>(2 * h).transpose();
        sol.outputs.row(h) = Z.segment<2>(2 * h).transpose();
    }
    sol.slack = r.x.tail(static_cast<Eigen::Index>(c.soft_rows.size()));
    sol.max_slack = sol.slack.size() > 0 ? std::max(0.0, sol.slack.maxCoeff()) : 0.0;
    sol.iterations = r.iterations;
    sol.soft_rows = c.soft_rows;
    sol.kkt = kkt_residual(c.qp, r.x, r.lambda).max();
    // True cost of the inputs, without the slack penalty.
    Matrix Qbar = Matrix::Zero(2 * H, 2 * H);
    for (int h = 0; h < H; ++h) Qbar.block<2, 2>(2 * h, 2 * h) = p.cfg.Q;
    double cost = 0.0;
    for (int h = 0; h < H; ++h) {
        const Vec2 e = Z.segment<2>(2 * h) - p.cfg.goal;
        const Vec2 u = U.segment<2>(2 * h);
        cost += e.dot(p.cfg.Q * e) + u.dot(p.cfg.R * u);
    }
    sol.objective = cost;
    for (const auto& con : p.constraints)
        if (con.horizon == 0 && con.activation(sol.outputs.row(0).transpose()) < -p.cfg.tol)
            sol.initial_violation = true;
    if (r.status != QpStatus::optimal)
        sol.status = MpcStatus::failed;
    else
        sol.status = sol.max_slack > slack_activation_tol ? MpcStatus::soft_feasible : MpcStatus::optimal;
    return sol;
}

struct MpcStepResult {
    Vec2 applied = Vec2::Zero();  // (a_x, a_y) actually applied
    MpcSolution solution;
    std::vector<ActiveConstraint> constraints;
    bool fallback = false;  // solver failed, shifted previous plan used
};

/// Stateful receding-horizon wrapper: keeps the previous plan for the
/// most-active-facet reference and for the degraded-mode fallback.
class MpcController {
public:
    MpcController(MpcConfig cfg, DiscreteModel model) : cfg_(std::move(cfg)), model_(model) { cfg_.validate(); }

    const MpcConfig& config() const noexcept { return cfg_; }
    const DiscreteModel& model() const noexcept { return model_; }

    /// Previous predicted outputs advanced one step with the current position
    /// in front; before the first solve, the straight line to the goal.
    std::vector<Vec2> reference(const Vec4& x) const {
        const int H = cfg_.horizon;
        const Vec2 z(x(0), x(2));
        std::vector<Vec2> ref(static_cast<std::size_t>(H));
        if (!prev_) {
            for (int h = 0; h < H; ++h)
                ref[static_cast<std::size_t>(h)] = H == 1 ? z : Vec2(z + (double(h) / (H - 1)) * (cfg_.goal - z));
            return ref;
        }
        ref[0] = z;
        for (int h = 1; h < H; ++h)
            ref[static_cast<std::size_t>(h)] = prev_->outputs.row(std::min(h + 1, H - 1)).transpose();
        return ref;
    }

    MpcStepResult step(const Vec4& x, const std::vector<SlotPolytopes>& slots) {
        MpcStepResult out;
        const auto ref = reference(x);
        out.constraints = generate_constraints(slots, ref);
        MpcProblem p{x, model_, out.constraints, cfg_};
        out.solution = solve_mpc(p);
        if (out.solution.status == MpcStatus::failed) {
            out.fallback = true;
            const int H = cfg_.horizon;
            Eigen::Matrix<double, Eigen::Dynamic, 2> shifted = Eigen::Matrix<double, Eigen::Dynamic, 2>::Zero(H, 2);
            if (prev_)
                for (int h = 0; h + 1 < H; ++h) shifted.row(h) = prev_->inputs.row(h + 1);
            out.solution.inputs = shifted;
            // Outputs of the shifted plan, for the next reference.
            Vec4 s = x;
            for (int h = 0; h < H; ++h) {
                out.solution.outputs.row(h) = (model_.C * s).transpose();
                s = model_.A * s + model_.B * shifted.row(h).transpose();
            }
        }
        out.applied = out.solution.inputs.row(0).transpose();
        prev_ = out.solution;
        return out;
    }

    void reset() { prev_.reset(); }

private:
    MpcConfig cfg_;
    DiscreteModel model_;
    std::optional<MpcSolution> prev_;
};

}  // namespace dkmpc
