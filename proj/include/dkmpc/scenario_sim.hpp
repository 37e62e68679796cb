#pragma once

// Synthetic moving-obstacle worlds and the perception -> learning ->
// forecast -> control loop that navigates a unicycle through them.

#include "dkmpc/density_forecast.hpp"
#include "dkmpc/dkl_engine.hpp"
#include "dkmpc/mpc_controller.hpp"

#include <algorithm>
#include <limits>
#include <optional>
#include <thread>
#include <vector>

namespace dkmpc {

// ---------------------------------------------------------------------------
// Obstacle world
// ---------------------------------------------------------------------------

struct Blob {
    Vec2 center = Vec2::Zero();
    Vec2 velocity = Vec2::Zero();  // m/s
    double sigma = 0.5;            // m
    double peak = 1.0;
};

enum class Boundary { bounce, wrap };

inline Boundary parse_boundary(const std::string& s) {
    if (s == "bounce") return Boundary::bounce;
    if (s == "wrap") return Boundary::wrap;
    throw ValidationError("unknown boundary policy '" + s + "'");
}

/// Parameters for blobs drawn from the scenario seed.
struct RandomBlobSpec {
    int count = 0;
    double speed_min = 0.2, speed_max = 0.6;
    double sigma_min = 0.5, sigma_max = 0.8;
    double peak_min = 0.8, peak_max = 1.0;
    double clearance = 2.5;  // minimum initial distance to the keep-clear points
};

struct ScenarioConfig {
    GridWorldMap map;
    std::vector<Blob> blobs;
    RandomBlobSpec random;
    std::vector<Vec2> keep_clear{{0.0, 0.0}, {15.0, 15.0}};
    int frames = 11;
    std::uint64_t seed = 0;
    Boundary boundary = Boundary::bounce;
    double dt = 0.1;

    void validate() const {
        map.validate();
        require(frames >= 1, "frame count must be positive");
        require(dt > 0.0, "time step must be positive");
        for (const auto& b : blobs) {
            require(b.sigma > 0.0, "blob spread must be positive");
            require(b.peak > 0.0 && b.peak <= 1.0, "blob peak must lie in (0,1]");
            require(b.center.allFinite() && b.velocity.allFinite(), "blob state must be finite");
        }
        require(random.count >= 0, "random blob count must be nonnegative");
        if (random.count > 0) {
            require(0.0 <= random.speed_min && random.speed_min <= random.speed_max, "bad random speed range");
            require(0.0 < random.sigma_min && random.sigma_min <= random.sigma_max, "bad random spread range");
            require(0.0 < random.peak_min && random.peak_min <= random.peak_max && random.peak_max <= 1.0,
                    "bad random peak range");
        }
    }
};

/// Explicit blobs followed by `random.count` blobs drawn from the seed.
inline std::vector<Blob> materialize_blobs(const ScenarioConfig& c) {
    c.validate();
    std::vector<Blob> out = c.blobs;
    const double w = c.map.cols * c.map.cell_size, h = c.map.rows * c.map.cell_size;
    for (int k = 0; k < c.random.count; ++k) {
        Rng rng(derive_seed(c.seed, "scenario-blob", static_cast<std::uint64_t>(k)));
        Blob b;
        for (int attempt = 0; attempt < 100; ++attempt) {
            b.center = c.map.origin + Vec2(rng.uniform(0.0, w), rng.uniform(0.0, h));
            const bool clear = std::all_of(c.keep_clear.begin(), c.keep_clear.end(), [&](const Vec2& p) {
                return (p - b.center).norm() >= c.random.clearance;
            });
            if (clear) break;
        }
        const double speed = rng.uniform(c.random.speed_min, c.random.speed_max);
        const double heading = rng.uniform(-M_PI, M_PI);
        b.velocity = speed * Vec2(std::cos(heading), std::sin(heading));
        b.sigma = rng.uniform(c.random.sigma_min, c.random.sigma_max);
        b.peak = rng.uniform(c.random.peak_min, c.random.peak_max);
        out.push_back(b);
    }
    return out;
}

class BlobWorld {
public:
    BlobWorld(std::vector<Blob> blobs, GridWorldMap map, Boundary boundary)
        : blobs_(std::move(blobs)), map_(map), boundary_(boundary) {
        map_.validate();
    }

    explicit BlobWorld(const ScenarioConfig& c) : BlobWorld(materialize_blobs(c), c.map, c.boundary) {}

    const std::vector<Blob>& blobs() const noexcept { return blobs_; }
    const GridWorldMap& map() const noexcept { return map_; }

    void advance(double dt) {
        const Vec2 lo = map_.origin;
        const Vec2 hi = map_.origin + Vec2(map_.cols * map_.cell_size, map_.rows * map_.cell_size);
        for (auto& b : blobs_) {
            b.center += dt * b.velocity;
            for (int k = 0; k < 2; ++k) {
                const double span = hi(k) - lo(k);
                if (boundary_ == Boundary::wrap) {
                    b.center(k) = lo(k) + std::fmod(std::fmod(b.center(k) - lo(k), span) + span, span);
                    continue;
                }
                // Reflect until inside; fast blobs may cross more than once.
                while (b.center(k) < lo(k) || b.center(k) > hi(k)) {
                    if (b.center(k) < lo(k)) b.center(k) = 2.0 * lo(k) - b.center(k);
                    if (b.center(k) > hi(k)) b.center(k) = 2.0 * hi(k) - b.center(k);
                    b.velocity(k) = -b.velocity(k);
                }
            }
        }
    }

    DensitySnapshot render(int timestamp) const {
        auto s = DensitySnapshot::zeros(map_.rows, map_.cols, timestamp);
        for (int r = 0; r < map_.rows; ++r)
            for (int c = 0; c < map_.cols; ++c) {
                const Vec2 xi = map_.cell_center(r, c);
                double v = 0.0;
                for (const auto& b : blobs_)
                    v += b.peak * std::exp(-(xi - b.center).squaredNorm() / (2.0 * b.sigma * b.sigma));
                s.at(r, c) = std::clamp(v, 0.0, 1.0);
            }
        return s;
    }

private:
    std::vector<Blob> blobs_;
    GridWorldMap map_;
    Boundary boundary_;
};

/// Frames 0..T-1; frame k shows the blobs after k steps of length dt.
inline std::vector<DensitySnapshot> generate_scenario(const ScenarioConfig& c) {
    BlobWorld world(c);
    std::vector<DensitySnapshot> out;
    out.reserve(static_cast<std::size_t>(c.frames));
    for (int k = 0; k < c.frames; ++k) {
        if (k > 0) world.advance(c.dt);
        out.push_back(world.render(k));
    }
    return out;
}

// ---------------------------------------------------------------------------
// Learning inside the loop
// ---------------------------------------------------------------------------

struct LearningConfig {
    Topology topology = Topology::ring;
    int agents = 3;
    std::vector<CommGraph::Edge> edges;  // 1-based, custom topology only
    double alpha_fraction = 0.5;
    double target_tol = 1e-8;
    int max_iterations = 2000;
    int window = 10;           // transition pairs N
    int refresh_every = 0;     // control steps between warm-started refreshes; 0 = never
    int refresh_iterations = 100;

    void validate() const {
        require(agents >= 1, "agent count must be positive");
        require(alpha_fraction > 0.0, "step-size fraction must be positive");
        require(target_tol > 0.0 && target_tol < 1.0, "target tolerance must lie in (0,1)");
        require(max_iterations >= 1, "iteration cap must be positive");
        require(window >= 1, "learning window needs at least one pair");
        require(refresh_every >= 0 && refresh_iterations >= 1, "bad refresh schedule");
        graph();
    }

    CommGraph graph() const {
        auto g = build_graph(topology, agents, edges);
        require(is_connected(g), "communication graph is not connected");
        return g;
    }
};

struct LearnedOperator {
    Matrix K;
    double alpha = 0.0;
    double alpha_max = 0.0;
    double rho = 0.0;
    int iterations = 0;
};

/// Distributed learning on one window of consecutive snapshots. The step
/// size comes from the Gram form of the spectrum; a previous operator, when
/// given, seeds a warm start with the refresh iteration count.
inline LearnedOperator learn_operator(std::span<const DensitySnapshot> window, const CommGraph& g,
                                      const LearningConfig& c, const Matrix* warm = nullptr) {
    const auto d = assemble_pairs(window);
    const auto sizes = balanced_sizes(d.lift_dim(), g.node_count());
    const auto parts = partition_rows(d, g.node_count(), sizes);
    const auto spectrum = compact_nonzero_eigenvalues(parts, laplacian(g));
    LearnedOperator out;
    out.alpha_max = alpha_max(spectrum);
    out.alpha = c.alpha_fraction * out.alpha_max;
    out.rho = rho_max(spectrum, out.alpha);
    auto agents = warm ? warm_start_agents(parts, *warm) : init_agents(parts);
    out.iterations = warm ? c.refresh_iterations : iteration_budget(out.rho, c.target_tol, c.max_iterations);
    run_accumulated(agents, out.alpha, g, out.iterations);
    out.K = assemble_operator(agents);
    return out;
}

// ---------------------------------------------------------------------------
// Closed loop
// ---------------------------------------------------------------------------

struct PerceptionConfig {
    double threshold = 0.5;  // c_rho
    int components = 12;     // L_o
    double confidence = 0.95;
    int facets = 8;          // n_sigma
    NormalMode normal_mode = NormalMode::radial;
    bool weighted = false;
    int gmm_max_iter = 100;
    double gmm_tol = 1e-6;
    int gmm_restarts = 2;
    bool forecast = true;  // false: every horizon slot uses the observed frame

    void validate() const {
        require(threshold >= 0.0 && threshold <= 1.0, "threshold must lie in [0,1]");
        require(components >= 1, "component count must be positive");
        require(confidence > 0.0 && confidence < 1.0, "confidence must lie in (0,1)");
        require(facets >= 3, "polytope needs at least 3 facets");
        require(gmm_max_iter >= 1 && gmm_tol > 0.0 && gmm_restarts >= 1, "bad GMM settings");
    }
};

struct RobotConfig {
    Vec2 start{0.0, 0.0};
    double heading = 0.0;
    double speed = default_v_min;
    int max_steps = 600;
    double goal_tolerance = 0.1;

    void validate() const {
        require(start.allFinite() && std::isfinite(heading) && std::isfinite(speed), "robot state must be finite");
        require(max_steps >= 1, "step budget must be positive");
        require(goal_tolerance > 0.0, "goal tolerance must be positive");
    }
};

struct NavigationConfig {
    ScenarioConfig scenario;
    LearningConfig learning;
    PerceptionConfig perception;
    MpcConfig mpc;
    RobotConfig robot;
    std::vector<int> dump_steps;  // control steps whose forecasts/polytopes are kept
    int threads = 1;

    void validate() const {
        scenario.validate();
        learning.validate();
        perception.validate();
        mpc.validate();
        robot.validate();
        require(threads >= 1, "thread count must be positive");
    }
};

struct StepRecord {
    int t = 0;
    UnicycleState state;  // at the start of the step
    Vec2 accel = Vec2::Zero();  // (a_x, a_y)
    double omega = 0.0;
    double a = 0.0;
    double objective = 0.0;
    double max_slack = 0.0;
    int iterations = 0;
    MpcStatus status = MpcStatus::failed;
    double roundtrip_error = 0.0;
    bool clamped = false;
    bool fallback = false;
    bool initial_violation = false;
    int constraints = 0;
    int soft_active = 0;  // constraints with slack above the activation tolerance
    bool refreshed = false;
};

struct StepDump {
    int t = 0;
    std::vector<DensitySnapshot> slots;  // slot h: density used for horizon step h
    std::vector<OccupancyPointSet> points;
    std::vector<SlotPolytopes> polytopes;
};

struct ClosedLoopLog {
    std::vector<StepRecord> steps;
    std::vector<std::vector<double>> distances;  // [time][blob], time 0..steps.size()
    UnicycleState final_state;
    bool reached = false;
    std::vector<StepDump> dumps;
    LearnedOperator initial_operator;
    int history_frames = 0;  // frames observed before the first control step
};

namespace detail {

inline std::vector<double> center_distances(const Vec2& p, const std::vector<Blob>& blobs) {
    std::vector<double> d;
    d.reserve(blobs.size());
    for (const auto& b : blobs) d.push_back((p - b.center).norm());
    return d;
}

struct SlotGeometry {
    OccupancyPointSet points;
    SlotPolytopes polytopes;
};

inline SlotGeometry slot_geometry(const DensitySnapshot& rho, int h, const PerceptionConfig& pc, const MpcConfig& mc,
                                  const GridWorldMap& map, std::uint64_t seed) {
    SlotGeometry g;
    g.points = threshold_set(rho, pc.threshold, map, h);
    if (g.points.size() == 0) return g;
    GmmOptions go;
    go.components = std::min<int>(pc.components, static_cast<int>(g.points.size()));
    go.seed = seed;
    go.max_iter = pc.gmm_max_iter;
    go.tol = pc.gmm_tol;
    go.restarts = pc.gmm_restarts;
    go.weighted = pc.weighted;
    go.cov_floor = std::pow(0.25 * map.cell_size, 2);
    const auto fit = fit_gmm(g.points, go);
    for (std::size_t l = 0; l < fit.components.size(); ++l)
        g.polytopes.push_back(ellipse_polytope(confidence_ellipse(fit.components[l], pc.confidence), pc.facets,
                                               mc.margin, pc.normal_mode, h, static_cast<int>(l)));
    return g;
}

}  // namespace detail

/// Runs the loop until the robot is within the goal tolerance or the step
/// budget is spent. The robot starts once window + 1 frames have been seen.
inline ClosedLoopLog run_closed_loop(const NavigationConfig& cfg) {
    cfg.validate();
    const auto& sc = cfg.scenario;
    const int H = cfg.mpc.horizon;
    BlobWorld world(sc);
    const auto g = cfg.learning.graph();

    ClosedLoopLog log;
    std::vector<DensitySnapshot> history;
    const int W = cfg.learning.window;
    for (int k = 0; k <= W; ++k) {
        if (k > 0) world.advance(sc.dt);
        history.push_back(world.render(k));
    }
    log.history_frames = W + 1;
    auto window_of = [&] {
        return std::span<const DensitySnapshot>(history).subspan(history.size() - static_cast<std::size_t>(W + 1));
    };
    log.initial_operator = learn_operator(window_of(), g, cfg.learning);
    Matrix K = log.initial_operator.K;

    MpcController ctl(cfg.mpc, discrete_model(sc.dt));
    UnicycleState s{cfg.robot.start.x(), cfg.robot.start.y(), wrap_angle(cfg.robot.heading), cfg.robot.speed};
    log.distances.push_back(detail::center_distances(s.position(), world.blobs()));

    for (int t = 0; t < cfg.robot.max_steps; ++t) {
        if ((s.position() - cfg.mpc.goal).norm() <= cfg.robot.goal_tolerance) {
            log.reached = true;
            break;
        }
        StepRecord rec;
        rec.t = t;
        rec.state = s;
        if (cfg.learning.refresh_every > 0 && t > 0 && t % cfg.learning.refresh_every == 0) {
            K = learn_operator(window_of(), g, cfg.learning, &K).K;
            rec.refreshed = true;
        }

        // Slot 0 is the observed frame; slot h >= 1 the h-step forecast.
        const DensitySnapshot& latest = history.back();
        std::vector<DensitySnapshot> slots{latest};
        if (H > 1) {
            if (cfg.perception.forecast) {
                for (auto& f : forecast(K, latest, H - 1).frames) slots.push_back(std::move(f));
            } else {
                for (int h = 1; h < H; ++h) slots.push_back(latest);
            }
        }
        std::vector<detail::SlotGeometry> geo(static_cast<std::size_t>(H));
        auto work = [&](int h) {
            const auto seed = derive_seed(sc.seed, "gmm", static_cast<std::uint64_t>(t) * 1024u + static_cast<std::uint64_t>(h));
            geo[static_cast<std::size_t>(h)] =
                detail::slot_geometry(slots[static_cast<std::size_t>(h)], h, cfg.perception, cfg.mpc, sc.map, seed);
        };
        const int nt = std::min(cfg.threads, H);
        if (nt <= 1) {
            for (int h = 0; h < H; ++h) work(h);
        } else {
            std::vector<std::thread> pool;
            for (int w = 0; w < nt; ++w)
                pool.emplace_back([&, w] {
                    for (int h = w; h < H; h += nt) work(h);
                });
            for (auto& th : pool) th.join();
        }
        std::vector<SlotPolytopes> polys;
        for (auto& sg : geo) polys.push_back(sg.polytopes);

        const auto step = ctl.step(linear_state(s), polys);
        const auto& sol = step.solution;
        rec.accel = step.applied;
        rec.objective = sol.objective;
        rec.max_slack = sol.max_slack;
        rec.iterations = sol.iterations;
        rec.status = sol.status;
        rec.fallback = step.fallback;
        rec.initial_violation = sol.initial_violation;
        rec.constraints = static_cast<int>(step.constraints.size());
        for (Eigen::Index k = 0; k < sol.slack.size(); ++k)
            if (sol.slack(k) > slack_activation_tol) ++rec.soft_active;

        const auto in = recover_inputs(rec.accel.x(), rec.accel.y(), s.theta, s.v);
        rec.omega = in.omega;
        rec.a = in.a;
        rec.clamped = in.clamped;
        rec.roundtrip_error = (forward_inputs(in.omega, in.a, s.theta, in.v_used) - rec.accel).lpNorm<Eigen::Infinity>();

        if (std::find(cfg.dump_steps.begin(), cfg.dump_steps.end(), t) != cfg.dump_steps.end()) {
            StepDump dump;
            dump.t = t;
            dump.slots = slots;
            for (auto& sg : geo) {
                dump.points.push_back(sg.points);
                dump.polytopes.push_back(sg.polytopes);
            }
            log.dumps.push_back(std::move(dump));
        }
        log.steps.push_back(rec);

        s = unicycle_step(s, in.omega, in.a, sc.dt);
        world.advance(sc.dt);
        history.push_back(world.render(static_cast<int>(history.size())));
        if (history.size() > static_cast<std::size_t>(W + 1)) history.erase(history.begin());
        log.distances.push_back(detail::center_distances(s.position(), world.blobs()));
    }
    if (!log.reached && (s.position() - cfg.mpc.goal).norm() <= cfg.robot.goal_tolerance) log.reached = true;
    log.final_state = s;
    return log;
}

// ---------------------------------------------------------------------------
// Metrics
// ---------------------------------------------------------------------------

struct LoopMetrics {
    double min_distance = std::numeric_limits<double>::infinity();
    double mean_distance = 0.0;
    std::optional<double> time_to_goal;  // seconds; empty when the goal was not reached
    double input_energy = 0.0;           // sum over steps of ||(a_x, a_y)||^2
    int soft_activations = 0;            // steps with at least one active slack
    int fallbacks = 0;
    int initial_violations = 0;
    int clamps = 0;
    double max_roundtrip_error = 0.0;
    bool finite = true;
    int steps = 0;
};

inline LoopMetrics metrics(const ClosedLoopLog& log, double dt) {
    require(!log.distances.empty(), "empty closed-loop log");
    LoopMetrics m;
    m.steps = static_cast<int>(log.steps.size());
    double sum = 0.0;
    std::size_t count = 0;
    for (const auto& row : log.distances)
        for (double d : row) {
            m.min_distance = std::min(m.min_distance, d);
            sum += d;
            ++count;
            if (!std::isfinite(d)) m.finite = false;
        }
    m.mean_distance = count > 0 ? sum / static_cast<double>(count) : std::numeric_limits<double>::infinity();
    for (const auto& r : log.steps) {
        m.input_energy += r.accel.squaredNorm();
        m.soft_activations += r.soft_active > 0;
        m.fallbacks += r.fallback;
        m.initial_violations += r.initial_violation;
        m.clamps += r.clamped;
        m.max_roundtrip_error = std::max(m.max_roundtrip_error, r.roundtrip_error);
        for (double v : {r.state.x, r.state.y, r.state.theta, r.state.v, r.accel.x(), r.accel.y(), r.omega, r.a,
                         r.objective, r.max_slack})
            if (!std::isfinite(v)) m.finite = false;
    }
    if (log.reached) m.time_to_goal = dt * static_cast<double>(log.steps.size());
    return m;
}

}  // namespace dkmpc
