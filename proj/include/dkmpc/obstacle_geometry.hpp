#pragma once

#include "dkmpc/density_forecast.hpp"

#include <Eigen/Eigenvalues>

#include <algorithm>
#include <cmath>
#include <limits>
#include <numeric>
#include <vector>

namespace dkmpc {

struct GaussianComponent {
    Vec2 mean = Vec2::Zero();
    Mat2 cov = Mat2::Identity();
    double weight = 1.0;
};

struct GmmOptions {
    int components = 1;
    std::uint64_t seed = 0;
    int max_iter = 200;
    double tol = 1e-8;         // on the mean log-likelihood per unit weight
    double cov_floor = 0.0;    // minimum covariance eigenvalue, meters^2
    int restarts = 3;          // independent k-means++ initializations, best kept
    int kmeans_iter = 20;
    bool weighted = false;     // weight points by their cell intensity
};

struct GmmFit {
    std::vector<GaussianComponent> components;
    double log_likelihood = 0.0;
    int iterations = 0;
    bool converged = false;
    bool degenerate = false;  // all points coincide; every covariance is the floor
};

namespace detail {

/// Symmetric 2x2 eigendecomposition, eigenvalues descending. The rotation is
/// right-handed, its first column has a nonnegative x component, and an
/// isotropic matrix maps to the identity.
struct SymEig2 {
    double major = 0.0;
    double minor = 0.0;
    Mat2 rotation = Mat2::Identity();
};

inline SymEig2 sym_eig2(const Mat2& S) {
    const double a = S(0, 0), b = 0.5 * (S(0, 1) + S(1, 0)), d = S(1, 1);
    const double mean = 0.5 * (a + d);
    const double radius = std::hypot(0.5 * (a - d), b);
    SymEig2 out;
    out.major = mean + radius;
    out.minor = mean - radius;
    if (radius <= 1e-14 * std::max(std::abs(mean), 1e-300)) return out;
    // Major-axis angle in (-pi/2, pi/2].
    double phi = 0.5 * std::atan2(2.0 * b, a - d);
    if (phi <= -M_PI / 2) phi += M_PI;
    const double c = std::cos(phi), s = std::sin(phi);
    out.rotation << c, -s, s, c;
    return out;
}

inline Mat2 floor_covariance(const Mat2& cov, double floor) {
    const auto e = sym_eig2(cov);
    const double l1 = std::max(e.major, floor), l2 = std::max(e.minor, floor);
    Mat2 out = e.rotation * Vec2(l1, l2).asDiagonal() * e.rotation.transpose();
    return 0.5 * (out + out.transpose());
}

inline double log_gauss(const Vec2& x, const Vec2& mu, const Mat2& inv, double log_det) {
    const Vec2 d = x - mu;
    return -std::log(2.0 * M_PI) - 0.5 * log_det - 0.5 * d.dot(inv * d);
}

struct EmRun {
    std::vector<GaussianComponent> comps;
    double ll = -std::numeric_limits<double>::infinity();
    int iterations = 0;
    bool converged = false;
};

inline std::vector<Vec2> kmeans_pp(const std::vector<Vec2>& pts, int k, Rng& rng) {
    const std::size_t m = pts.size();
    std::vector<Vec2> centers;
    centers.push_back(pts[rng.below(m)]);
    std::vector<double> d2(m, std::numeric_limits<double>::infinity());
    while (static_cast<int>(centers.size()) < k) {
        double total = 0.0;
        for (std::size_t i = 0; i < m; ++i) {
            d2[i] = std::min(d2[i], (pts[i] - centers.back()).squaredNorm());
            total += d2[i];
        }
        if (!(total > 0.0)) {
            centers.push_back(pts[rng.below(m)]);
            continue;
        }
        double u = rng.uniform() * total;
        std::size_t pick = m - 1;
        for (std::size_t i = 0; i < m; ++i) {
            if (u < d2[i]) {
                pick = i;
                break;
            }
            u -= d2[i];
        }
        centers.push_back(pts[pick]);
    }
    return centers;
}

inline std::vector<int> lloyd(const std::vector<Vec2>& pts, const std::vector<double>& w,
                              std::vector<Vec2>& centers, int iters) {
    const std::size_t m = pts.size();
    const std::size_t k = centers.size();
    std::vector<int> label(m, -1);
    for (int it = 0; it < iters; ++it) {
        bool changed = false;
        for (std::size_t i = 0; i < m; ++i) {
            int best = 0;
            double bd = std::numeric_limits<double>::infinity();
            for (std::size_t j = 0; j < k; ++j) {
                const double dd = (pts[i] - centers[j]).squaredNorm();
                if (dd < bd) {
                    bd = dd;
                    best = static_cast<int>(j);
                }
            }
            if (label[i] != best) {
                label[i] = best;
                changed = true;
            }
        }
        std::vector<Vec2> sum(k, Vec2::Zero());
        std::vector<double> mass(k, 0.0);
        for (std::size_t i = 0; i < m; ++i) {
            sum[static_cast<std::size_t>(label[i])] += w[i] * pts[i];
            mass[static_cast<std::size_t>(label[i])] += w[i];
        }
        for (std::size_t j = 0; j < k; ++j)
            if (mass[j] > 0.0) centers[j] = sum[j] / mass[j];
        if (!changed) break;
    }
    return label;
}

inline EmRun em_from(const std::vector<Vec2>& pts, const std::vector<double>& w, double wsum,
                     std::vector<GaussianComponent> comps, const GmmOptions& opt) {
    const std::size_t m = pts.size();
    const std::size_t k = comps.size();
    EmRun run;
    Eigen::MatrixXd resp(static_cast<Eigen::Index>(m), static_cast<Eigen::Index>(k));
    double prev = -std::numeric_limits<double>::infinity();
    for (int it = 1; it <= opt.max_iter; ++it) {
        // E-step
        std::vector<Mat2> inv(k);
        std::vector<double> log_det(k), log_w(k);
        for (std::size_t j = 0; j < k; ++j) {
            inv[j] = comps[j].cov.inverse();
            log_det[j] = std::log(comps[j].cov.determinant());
            log_w[j] = std::log(std::max(comps[j].weight, 1e-300));
        }
        double ll = 0.0;
        for (std::size_t i = 0; i < m; ++i) {
            double mx = -std::numeric_limits<double>::infinity();
            for (std::size_t j = 0; j < k; ++j) {
                const double v = log_w[j] + log_gauss(pts[i], comps[j].mean, inv[j], log_det[j]);
                resp(static_cast<Eigen::Index>(i), static_cast<Eigen::Index>(j)) = v;
                mx = std::max(mx, v);
            }
            double s = 0.0;
            for (std::size_t j = 0; j < k; ++j) s += std::exp(resp(static_cast<Eigen::Index>(i), static_cast<Eigen::Index>(j)) - mx);
            const double lse = mx + std::log(s);
            for (std::size_t j = 0; j < k; ++j) {
                auto& r = resp(static_cast<Eigen::Index>(i), static_cast<Eigen::Index>(j));
                r = std::exp(r - lse);
            }
            ll += w[i] * lse;
        }
        run.ll = ll;
        run.iterations = it;
        const double mean_ll = ll / wsum;
        if (std::abs(mean_ll - prev) < opt.tol) {
            run.converged = true;
            break;
        }
        prev = mean_ll;
        // M-step
        for (std::size_t j = 0; j < k; ++j) {
            double nk = 0.0;
            Vec2 mu = Vec2::Zero();
            for (std::size_t i = 0; i < m; ++i) {
                const double r = w[i] * resp(static_cast<Eigen::Index>(i), static_cast<Eigen::Index>(j));
                nk += r;
                mu += r * pts[i];
            }
            if (nk < 1e-10 * wsum) {
                // Starved component: keep its place, shrink to the floor.
                comps[j].weight = 1e-12;
                comps[j].cov = floor_covariance(Mat2::Zero(), opt.cov_floor);
                continue;
            }
            mu /= nk;
            Mat2 cov = Mat2::Zero();
            for (std::size_t i = 0; i < m; ++i) {
                const Vec2 d = pts[i] - mu;
                cov += w[i] * resp(static_cast<Eigen::Index>(i), static_cast<Eigen::Index>(j)) * d * d.transpose();
            }
            comps[j].mean = mu;
            comps[j].cov = floor_covariance(cov / nk, opt.cov_floor);
            comps[j].weight = nk / wsum;
        }
    }
    run.comps = std::move(comps);
    return run;
}

}  // namespace detail

/// Expectation-maximization fit of a planar Gaussian mixture, seeded by
/// k-means++ followed by Lloyd iterations. Components come back sorted by
/// descending weight, ties broken by lexicographic mean.
inline GmmFit fit_gmm(const OccupancyPointSet& set, const GmmOptions& opt) {
    require(opt.components >= 1, "mixture needs at least one component");
    require(static_cast<int>(set.size()) >= opt.components,
            "cannot fit " + std::to_string(opt.components) + " components to " + std::to_string(set.size()) +
                " points");
    require(opt.cov_floor > 0.0, "covariance floor must be positive");
    require(opt.max_iter >= 1 && opt.restarts >= 1, "iteration and restart counts must be positive");
    const auto& pts = set.points;
    std::vector<double> w(pts.size(), 1.0);
    if (opt.weighted) {
        require(set.intensities.size() == pts.size(), "weighted fit needs one intensity per point");
        w = set.intensities;
    }
    const double wsum = std::accumulate(w.begin(), w.end(), 0.0);
    require(wsum > 0.0, "point weights sum to zero");

    GmmFit fit;
    fit.degenerate = std::all_of(pts.begin(), pts.end(), [&](const Vec2& p) { return p == pts.front(); });

    detail::EmRun best;
    for (int r = 0; r < opt.restarts; ++r) {
        Rng rng(derive_seed(opt.seed, "gmm-init", static_cast<std::uint64_t>(r)));
        auto centers = detail::kmeans_pp(pts, opt.components, rng);
        const auto label = detail::lloyd(pts, w, centers, opt.kmeans_iter);
        std::vector<GaussianComponent> init(static_cast<std::size_t>(opt.components));
        for (std::size_t j = 0; j < init.size(); ++j) {
            double mass = 0.0;
            Mat2 cov = Mat2::Zero();
            for (std::size_t i = 0; i < pts.size(); ++i)
                if (label[i] == static_cast<int>(j)) {
                    const Vec2 d = pts[i] - centers[j];
                    cov += w[i] * d * d.transpose();
                    mass += w[i];
                }
            init[j].mean = centers[j];
            init[j].cov = detail::floor_covariance(mass > 0.0 ? Mat2(cov / mass) : Mat2::Zero(), opt.cov_floor);
            init[j].weight = std::max(mass / wsum, 1e-12);
        }
        auto run = detail::em_from(pts, w, wsum, std::move(init), opt);
        if (run.ll > best.ll || best.comps.empty()) best = std::move(run);
    }
    fit.components = std::move(best.comps);
    fit.log_likelihood = best.ll;
    fit.iterations = best.iterations;
    fit.converged = best.converged;
    std::stable_sort(fit.components.begin(), fit.components.end(), [](const auto& a, const auto& b) {
        if (a.weight != b.weight) return a.weight > b.weight;
        if (a.mean.x() != b.mean.x()) return a.mean.x() < b.mean.x();
        return a.mean.y() < b.mean.y();
    });
    // Renormalize so weights sum to one exactly up to rounding.
    double total = 0.0;
    for (const auto& c : fit.components) total += c.weight;
    for (auto& c : fit.components) c.weight /= total;
    return fit;
}

// ---------------------------------------------------------------------------
// Confidence ellipses and polytopes
// ---------------------------------------------------------------------------

/// Chi-squared quantile for two degrees of freedom: -2 ln(1 - q).
inline double chi2_quantile_2dof(double q) {
    require(q > 0.0 && q < 1.0, "confidence level must lie in (0,1)");
    return -2.0 * std::log1p(-q);
}

struct ConfidenceEllipse {
    Vec2 center = Vec2::Zero();
    Mat2 rotation = Mat2::Identity();  // columns are the covariance eigenvectors
    double semi_major = 0.0;
    double semi_minor = 0.0;
    double eig_major = 0.0;
    double eig_minor = 0.0;
    double level = 0.95;
    double delta_sq = 0.0;
};

inline ConfidenceEllipse confidence_ellipse(const GaussianComponent& c, double q) {
    const auto e = detail::sym_eig2(c.cov);
    require(e.minor > 0.0, "component covariance must be positive definite");
    ConfidenceEllipse out;
    out.center = c.mean;
    out.rotation = e.rotation;
    out.eig_major = e.major;
    out.eig_minor = e.minor;
    out.level = q;
    out.delta_sq = chi2_quantile_2dof(q);
    out.semi_major = std::sqrt(out.delta_sq * e.major);
    out.semi_minor = std::sqrt(out.delta_sq * e.minor);
    return out;
}

/// radial: n = [cos t, sin t] at every parametric angle t.
/// tangent: n is the ellipse's outward normal at the support point, so each
/// facet is a true supporting line.
enum class NormalMode { radial, tangent };

inline NormalMode parse_normal_mode(const std::string& s) {
    if (s == "radial") return NormalMode::radial;
    if (s == "tangent") return NormalMode::tangent;
    throw ValidationError("unknown normal mode '" + s + "'");
}

/// Half-space description {xi : normals.row(k) . xi >= offsets(k) + margin}
/// of the region outside one predicted obstacle.
struct ObstaclePolytope {
    Eigen::Matrix<double, Eigen::Dynamic, 2> normals;
    Vector offsets;
    std::vector<Vec2> support;
    double margin = 0.0;
    int horizon = 0;
    int obstacle = 0;

    int facets() const noexcept { return static_cast<int>(offsets.size()); }
};

inline ObstaclePolytope ellipse_polytope(const ConfidenceEllipse& e, int facets, double margin,
                                         NormalMode mode = NormalMode::radial, int horizon = 0,
                                         int obstacle = 0) {
    require(facets >= 3, "polytope needs at least 3 facets");
    require(margin >= 0.0, "safety margin must be nonnegative");
    ObstaclePolytope p;
    p.normals.resize(facets, 2);
    p.offsets.resize(facets);
    p.margin = margin;
    p.horizon = horizon;
    p.obstacle = obstacle;
    const Mat2 inv_shape = e.rotation *
                           Vec2(1.0 / (e.semi_major * e.semi_major), 1.0 / (e.semi_minor * e.semi_minor)).asDiagonal() *
                           e.rotation.transpose();
    for (int k = 0; k < facets; ++k) {
        const double t = 2.0 * M_PI * k / facets;
        const Vec2 s = e.center + e.rotation * Vec2(e.semi_major * std::cos(t), e.semi_minor * std::sin(t));
        Vec2 n(std::cos(t), std::sin(t));
        if (mode == NormalMode::tangent) n = (inv_shape * (s - e.center)).normalized();
        p.normals.row(k) = n.transpose();
        p.offsets(k) = n.dot(s);
        p.support.push_back(s);
    }
    return p;
}

struct ActiveConstraint {
    Vec2 normal = Vec2::UnitX();
    double offset = 0.0;
    double margin = 0.0;
    int horizon = 0;
    int obstacle = 0;
    int facet = 0;

    /// normal . xi - offset - margin; nonnegative when satisfied.
    double activation(const Vec2& xi) const { return normal.dot(xi) - offset - margin; }
};

/// Facet maximizing normal . xi - offset - margin; near-ties (1e-12 relative)
/// go to the smallest index.
inline ActiveConstraint most_active_facet(const ObstaclePolytope& p, const Vec2& xi) {
    require(p.facets() >= 1, "polytope has no facets");
    int best = 0;
    double best_val = p.normals.row(0).dot(xi) - p.offsets(0) - p.margin;
    for (int k = 1; k < p.facets(); ++k) {
        const double v = p.normals.row(k).dot(xi) - p.offsets(k) - p.margin;
        if (v > best_val + 1e-12 * (1.0 + std::abs(best_val))) {
            best = k;
            best_val = v;
        }
    }
    return {p.normals.row(best).transpose(), p.offsets(best), p.margin, p.horizon, p.obstacle, best};
}

}  // namespace dkmpc
