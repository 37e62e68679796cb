#pragma once

// Unicycle plant and its feedback-linearized double-integrator surrogate.
//
//     x' = v cos(theta),  y' = v sin(theta),  theta' = omega,  v' = a
//
// In the coordinates eta = (x, x', y, y') the plant is two decoupled double
// integrators driven by (a_x, a_y); the inputs are recovered through the
// inverse of the forward map, which exists while v != 0.

#include "dkmpc/common.hpp"

#include <cmath>

namespace dkmpc {

/// Maps any angle into (-pi, pi].
inline double wrap_angle(double a) {
    double w = std::remainder(a, 2.0 * M_PI);  // [-pi, pi]
    if (w <= -M_PI) w += 2.0 * M_PI;
    return w;
}

struct UnicycleState {
    double x = 0.0;
    double y = 0.0;
    double theta = 0.0;
    double v = 0.0;

    Vec2 position() const { return {x, y}; }
};

/// eta = (x, x-dot, y, y-dot).
inline Vec4 linear_state(const UnicycleState& s) {
    return {s.x, s.v * std::cos(s.theta), s.y, s.v * std::sin(s.theta)};
}

namespace detail {

inline Vec4 unicycle_rhs(const Vec4& s, double omega, double a) {
    return {s(3) * std::cos(s(2)), s(3) * std::sin(s(2)), omega, a};
}

}  // namespace detail

/// Classical fourth-order Runge-Kutta over one interval of length dt.
inline UnicycleState unicycle_step(const UnicycleState& s, double omega, double a, double dt) {
    require(dt > 0.0, "integration step must be positive");
    const Vec4 z(s.x, s.y, s.theta, s.v);
    const Vec4 k1 = detail::unicycle_rhs(z, omega, a);
    const Vec4 k2 = detail::unicycle_rhs(z + 0.5 * dt * k1, omega, a);
    const Vec4 k3 = detail::unicycle_rhs(z + 0.5 * dt * k2, omega, a);
    const Vec4 k4 = detail::unicycle_rhs(z + dt * k3, omega, a);
    const Vec4 n = z + dt / 6.0 * (k1 + 2.0 * k2 + 2.0 * k3 + k4);
    return {n(0), n(1), wrap_angle(n(2)), n(3)};
}

struct UnicycleInputs {
    double omega = 0.0;
    double a = 0.0;
    bool clamped = false;    // |v| was below v_min and got replaced by +-v_min
    double v_used = 0.0;     // speed actually used in the inversion
};

inline constexpr double default_v_min = 0.05;

/// (a_x, a_y) produced by (omega, a) at heading theta and speed v.
inline Vec2 forward_inputs(double omega, double a, double theta, double v) {
    const double c = std::cos(theta), s = std::sin(theta);
    return {a * c - v * omega * s, a * s + v * omega * c};
}

/// Inverts forward_inputs. Speeds with |v| < v_min are replaced by
/// sign(v) v_min (sign(0) = +1) and the result is flagged.
inline UnicycleInputs recover_inputs(double ax, double ay, double theta, double v, double v_min = default_v_min) {
    require(v_min > 0.0, "v_min must be positive");
    UnicycleInputs out;
    out.v_used = v;
    if (std::abs(v) < v_min) {
        out.v_used = v < 0.0 ? -v_min : v_min;
        out.clamped = true;
    }
    const double c = std::cos(theta), s = std::sin(theta);
    out.omega = (-s * ax + c * ay) / out.v_used;
    out.a = c * ax + s * ay;
    return out;
}

struct DiscreteModel {
    Eigen::Matrix4d A = Eigen::Matrix4d::Identity();
    Eigen::Matrix<double, 4, 2> B = Eigen::Matrix<double, 4, 2>::Zero();
    Eigen::Matrix<double, 2, 4> C = Eigen::Matrix<double, 2, 4>::Zero();
    double tau = 0.0;
};

/// Exact zero-order-hold discretization of the two double integrators.
/// tau = 0 is accepted and yields A = I, B = 0.
inline DiscreteModel discrete_model(double tau) {
    require(tau >= 0.0 && std::isfinite(tau), "sampling interval must be nonnegative");
    DiscreteModel m;
    m.tau = tau;
    m.A(0, 1) = tau;
    m.A(2, 3) = tau;
    m.B(0, 0) = 0.5 * tau * tau;
    m.B(1, 0) = tau;
    m.B(2, 1) = 0.5 * tau * tau;
    m.B(3, 1) = tau;
    m.C(0, 0) = 1.0;
    m.C(1, 2) = 1.0;
    return m;
}

}  // namespace dkmpc
