// Command-line driver: simgen, learn, forecast, navigate, verify, replay.
//
// Exit codes: 0 success, 1 runtime or solver failure (or a failed check),
// 2 configuration or validation error.

#include "dkmpc/config.hpp"
#include "dkmpc/io.hpp"

#include <CLI11.hpp>
#include <json.hpp>

#include <cstdlib>
#include <filesystem>
#include <fstream>
#include <iostream>
#include <map>
#include <optional>
#include <sstream>
#include <string>
#include <vector>

namespace fs = std::filesystem;
using json = nlohmann::ordered_json;
using namespace dkmpc;

namespace {

constexpr int format_version = 1;

struct Options {
    std::string command;
    std::string config;
    std::string out;
    std::optional<std::uint64_t> seed;
    int threads = 1;
    std::string data;
    std::string op;
    std::optional<int> horizon;
    std::string manifest;
};

std::string default_out(const std::string& command) {
    const char* root = std::getenv("DKMPC_OUT_ROOT");
    return (fs::path(root && *root ? root : "out") / command).string();
}

RunConfig load(const Options& o) {
    RunConfig rc = o.config.empty() ? parse_config("{}") : load_config(o.config);
    if (o.seed) override_seed(rc, *o.seed);
    require(o.threads >= 1, "--threads must be positive");
    rc.nav.threads = o.threads;
    rc.nav.validate();
    return rc;
}

std::string file_hash(const fs::path& p) {
    std::ifstream in(p, std::ios::binary);
    std::stringstream ss;
    ss << in.rdbuf();
    char buf[17];
    std::snprintf(buf, sizeof buf, "%016llx", static_cast<unsigned long long>(fnv1a(ss.str())));
    return buf;
}

/// Writes files through one object so the manifest can list them all.
class Emitter {
public:
    explicit Emitter(fs::path dir) : dir_(std::move(dir)) {
        std::error_code ec;
        fs::create_directories(dir_, ec);
        if (ec) throw RuntimeFailure("cannot create output directory '" + dir_.string() + "': " + ec.message());
    }

    std::ofstream open(const std::string& name) {
        files_.push_back(name);
        return io::open_output((dir_ / name).string());
    }

    const fs::path& dir() const noexcept { return dir_; }

    void manifest(const Options& o, std::uint64_t seed) {
        json m;
        m["command"] = o.command;
        m["config"] = o.config;
        m["seed"] = seed;
        m["threads"] = o.threads;
        m["out"] = dir_.string();
        if (!o.data.empty()) m["data"] = o.data;
        if (!o.op.empty()) m["operator"] = o.op;
        if (o.horizon) m["horizon"] = *o.horizon;
        json files = json::array();
        for (const auto& f : files_)
            files.push_back({{"name", f}, {"format_version", format_version}, {"fnv1a64", file_hash(dir_ / f)}});
        m["files"] = files;
        auto out = io::open_output((dir_ / "manifest.json").string());
        out << m.dump(2) << '\n';
    }

private:
    fs::path dir_;
    std::vector<std::string> files_;
};

json vec(const Vec2& v) { return json::array({v.x(), v.y()}); }

std::vector<DensitySnapshot> load_snapshots(const std::string& path) {
    require(!path.empty(), "--data is required");
    auto in = io::open_input(path);
    return io::read_snapshots(in);
}

GridWorldMap map_for(const RunConfig& rc, const DensitySnapshot& s) {
    GridWorldMap map = rc.nav.scenario.map;
    map.rows = s.rows;
    map.cols = s.cols;
    return map;
}

void write_points(std::ostream& os, const std::vector<OccupancyPointSet>& sets) {
    io::CsvWriter csv(os, {"x", "y", "h"});
    for (const auto& s : sets)
        for (const auto& p : s.points) csv.row({io::cell(p.x()), io::cell(p.y()), io::cell(s.horizon)});
}

void write_polytopes(std::ostream& os, const std::vector<SlotPolytopes>& slots) {
    io::CsvWriter csv(os, {"h", "l", "i", "n_x", "n_y", "rho"});
    for (const auto& slot : slots)
        for (const auto& p : slot)
            for (int k = 0; k < p.facets(); ++k)
                csv.row({io::cell(p.horizon), io::cell(p.obstacle + 1), io::cell(k + 1), io::cell(p.normals(k, 0)),
                         io::cell(p.normals(k, 1)), io::cell(p.offsets(k))});
}

void write_forecast(std::ostream& os, const ForecastSequence& f) {
    io::write_snapshots(os, f.frames,
                        {"origin " + std::to_string(f.origin), "horizon " + std::to_string(f.horizon())});
}

/// Thresholds each forecast frame and fits the per-step polytopes.
void perceive(const RunConfig& rc, const ForecastSequence& f, const GridWorldMap& map,
              std::vector<OccupancyPointSet>& points, std::vector<SlotPolytopes>& polys, json& ellipses) {
    const auto& pc = rc.nav.perception;
    for (int h = 1; h <= f.horizon(); ++h) {
        auto set = threshold_set(f.frames[static_cast<std::size_t>(h - 1)], pc.threshold, map, h);
        SlotPolytopes slot;
        if (set.size() > 0) {
            GmmOptions go;
            go.components = std::min<int>(pc.components, static_cast<int>(set.size()));
            go.seed = derive_seed(rc.seed, "gmm-forecast", static_cast<std::uint64_t>(h));
            go.max_iter = pc.gmm_max_iter;
            go.tol = pc.gmm_tol;
            go.restarts = pc.gmm_restarts;
            go.weighted = pc.weighted;
            go.cov_floor = std::pow(0.25 * map.cell_size, 2);
            const auto fit = fit_gmm(set, go);
            for (std::size_t l = 0; l < fit.components.size(); ++l) {
                const auto e = confidence_ellipse(fit.components[l], pc.confidence);
                slot.push_back(ellipse_polytope(e, pc.facets, rc.nav.mpc.margin, pc.normal_mode, h, static_cast<int>(l)));
                ellipses.push_back({{"h", h},
                                    {"l", l + 1},
                                    {"weight", fit.components[l].weight},
                                    {"center", vec(e.center)},
                                    {"semi_axes", json::array({e.semi_major, e.semi_minor})},
                                    {"angle", std::atan2(e.rotation(1, 0), e.rotation(0, 0))}});
            }
        }
        points.push_back(std::move(set));
        polys.push_back(std::move(slot));
    }
}

// ---------------------------------------------------------------------------

int cmd_simgen(const Options& o) {
    const auto rc = load(o);
    const auto frames = generate_scenario(rc.nav.scenario);
    Emitter em(o.out);
    {
        auto f = em.open("snapshots.txt");
        io::write_snapshots(f, frames, {"seed " + std::to_string(rc.seed)});
    }
    {
        auto f = em.open("blobs.csv");
        io::CsvWriter csv(f, {"frame", "blob", "x", "y", "sigma", "peak"});
        BlobWorld world(rc.nav.scenario);
        for (int k = 0; k < rc.nav.scenario.frames; ++k) {
            if (k > 0) world.advance(rc.nav.scenario.dt);
            int b = 1;
            for (const auto& blob : world.blobs())
                csv.row({io::cell(k), io::cell(b++), io::cell(blob.center.x()), io::cell(blob.center.y()),
                         io::cell(blob.sigma), io::cell(blob.peak)});
        }
    }
    em.manifest(o, rc.seed);
    std::cout << "wrote " << frames.size() << " frames of " << frames.front().rows << "x" << frames.front().cols
              << " to " << em.dir().string() << '\n';
    return 0;
}

struct LearnOutcome {
    DataMatrices d;
    Matrix K_star;
    LearningTrace trace;
    double amax = 0.0, alpha = 0.0, rho = 0.0;
    int t_max = 0;
    Spectrum spectrum;
    CommGraph graph{1, {}};
};

LearnOutcome learn_on(const RunConfig& rc, const std::vector<DensitySnapshot>& frames, double fraction,
                      std::optional<int> iterations = std::nullopt) {
    LearnOutcome r;
    r.graph = rc.nav.learning.graph();
    r.d = assemble_pairs(frames);
    const int p = r.graph.node_count();
    const auto parts = partition_rows(r.d, p, balanced_sizes(r.d.lift_dim(), p));
    const auto cm = build_convergence_matrix(parts, laplacian(r.graph), static_cast<int>(r.d.pairs()));
    r.spectrum = nonzero_eigenvalues(cm.M);
    r.amax = alpha_max(r.spectrum);
    r.alpha = fraction * r.amax;
    r.rho = rho_max(r.spectrum, r.alpha);
    r.t_max = iterations ? *iterations
                         : iteration_budget(r.rho, rc.nav.learning.target_tol, rc.nav.learning.max_iterations);
    r.K_star = centralized_edmd(r.d).K;
    auto agents = init_agents(parts);
    RunOptions ro;
    ro.alpha = r.alpha;
    ro.t_max = r.t_max;
    ro.oracle = &r.K_star;
    ro.alpha_limit = r.amax;
    ro.threads = rc.nav.threads;
    r.trace = run(agents, r.graph, r.d, ro);
    return r;
}

void write_complex_csv(std::ostream& os, const Spectrum& ev) {
    io::CsvWriter csv(os, {"k", "re", "im", "abs"});
    int k = 1;
    for (auto z : ev) csv.row({io::cell(k++), io::cell(z.real()), io::cell(z.imag()), io::cell(std::abs(z))});
}

int cmd_learn(const Options& o) {
    const auto rc = load(o);
    const auto frames = load_snapshots(o.data);
    const auto r = learn_on(rc, frames, rc.nav.learning.alpha_fraction);
    Emitter em(o.out);
    {
        auto f = em.open("operator.txt");
        io::write_matrix(f, r.trace.K_d, {"distributed Koopman operator"});
    }
    {
        auto f = em.open("centralized.txt");
        io::write_matrix(f, r.K_star, {"centralized least-squares operator"});
    }
    {
        auto f = em.open("trace.csv");
        io::CsvWriter csv(f, {"t", "O", "K_err_fro", "consensus_defect"});
        for (const auto& row : r.trace.rows)
            csv.row({io::cell(row.t), io::cell(row.gap), io::cell(row.operator_error), io::cell(row.defect)});
    }
    {
        auto f = em.open("k_delta.txt");
        io::write_matrix(f, operator_diff_map(r.trace.K_d, r.K_star), {"entrywise |K_d - K*|"});
    }
    {
        auto f = em.open("eigenvalues_M.csv");
        write_complex_csv(f, r.spectrum);
    }
    const auto cmp = spectrum_compare(r.trace.K_d, r.K_star);
    {
        auto f = em.open("eigenvalues_K.csv");
        io::CsvWriter csv(f, {"k", "re_distributed", "im_distributed", "re_centralized", "im_centralized"});
        for (std::size_t k = 0; k < cmp.distributed.size(); ++k)
            csv.row({io::cell(k + 1), io::cell(cmp.distributed[k].real()), io::cell(cmp.distributed[k].imag()),
                     io::cell(cmp.centralized[k].real()), io::cell(cmp.centralized[k].imag())});
    }
    {
        const double o0 = r.trace.rows.front().gap, ot = r.trace.rows.back().gap;
        json rep;
        rep["n"] = r.d.lift_dim();
        rep["N"] = r.d.pairs();
        rep["agents"] = r.graph.node_count();
        rep["alpha_max"] = r.amax;
        rep["alpha"] = r.alpha;
        rep["rho_max"] = r.rho;
        rep["t_max"] = r.t_max;
        rep["O_initial"] = o0;
        rep["O_final"] = ot;
        rep["O_ratio"] = o0 > 0.0 ? ot / o0 : 0.0;
        rep["residual_orthogonality"] = residual_orthogonality(r.trace.K_d, r.d);
        rep["spectrum_hausdorff"] = hausdorff_distance(cmp.distributed, cmp.centralized);
        if (r.trace.rows.size() >= 3) rep["fitted_rate"] = fitted_rate(r.trace.rows);
        rep["warnings"] = r.trace.warnings;
        auto f = em.open("spectral_report.json");
        f << rep.dump(2) << '\n';
    }
    em.manifest(o, rc.seed);
    std::cout << "alpha_max " << io::format_double(r.amax) << ", rho_max " << io::format_double(r.rho) << ", "
              << r.t_max << " iterations, O(t)/O(0) "
              << io::format_double(r.trace.rows.back().gap / std::max(r.trace.rows.front().gap, 1e-300)) << '\n';
    for (const auto& w : r.trace.warnings) std::cerr << "warning: " << w << '\n';
    return 0;
}

int cmd_forecast(const Options& o) {
    const auto rc = load(o);
    const auto frames = load_snapshots(o.data);
    require(!o.op.empty(), "--operator is required");
    auto kin = io::open_input(o.op);
    const Matrix K = io::read_matrix(kin);
    const int H = o.horizon.value_or(rc.nav.mpc.horizon);
    const auto f = forecast(K, frames.back(), H);
    std::vector<OccupancyPointSet> points;
    std::vector<SlotPolytopes> polys;
    json ellipses = json::array();
    perceive(rc, f, map_for(rc, frames.back()), points, polys, ellipses);
    Emitter em(o.out);
    {
        auto s = em.open("forecast.txt");
        write_forecast(s, f);
    }
    {
        auto s = em.open("points.csv");
        write_points(s, points);
    }
    {
        auto s = em.open("polytopes.csv");
        write_polytopes(s, polys);
    }
    {
        auto s = em.open("ellipses.json");
        s << ellipses.dump(2) << '\n';
    }
    em.manifest(o, rc.seed);
    std::cout << "forecast " << H << " steps from frame " << f.origin << '\n';
    return 0;
}

int cmd_navigate(const Options& o) {
    const auto rc = load(o);
    const auto log = run_closed_loop(rc.nav);
    const double dt = rc.nav.scenario.dt;
    const auto m = metrics(log, dt);
    Emitter em(o.out);
    {
        auto f = em.open("log.csv");
        io::CsvWriter csv(f, {"t", "x", "y", "theta", "v", "a_x", "a_y", "omega", "a", "objective", "max_slack",
                              "iterations", "status", "roundtrip_error", "v_clamped", "fallback",
                              "initial_violation", "constraints", "soft_active", "refreshed"});
        for (const auto& r : log.steps)
            csv.row({io::cell(r.t), io::cell(r.state.x), io::cell(r.state.y), io::cell(r.state.theta),
                     io::cell(r.state.v), io::cell(r.accel.x()), io::cell(r.accel.y()), io::cell(r.omega),
                     io::cell(r.a), io::cell(r.objective), io::cell(r.max_slack), io::cell(r.iterations),
                     io::cell(to_string(r.status)), io::cell(r.roundtrip_error), io::cell(int(r.clamped)),
                     io::cell(int(r.fallback)), io::cell(int(r.initial_violation)), io::cell(r.constraints),
                     io::cell(r.soft_active), io::cell(int(r.refreshed))});
    }
    {
        auto f = em.open("distances.csv");
        std::vector<std::string> head{"t"};
        const std::size_t nb = log.distances.front().size();
        for (std::size_t b = 0; b < nb; ++b) head.push_back("d" + std::to_string(b + 1));
        io::CsvWriter csv(f, head);
        for (std::size_t t = 0; t < log.distances.size(); ++t) {
            std::vector<std::string> row{io::cell(t)};
            for (double d : log.distances[t]) row.push_back(io::cell(d));
            csv.row(row);
        }
    }
    for (const auto& d : log.dumps) {
        const std::string tag = "_t" + std::to_string(d.t);
        {
            auto f = em.open("slots" + tag + ".txt");
            io::write_snapshots(f, d.slots, {"control step " + std::to_string(d.t), "slot h holds the density for horizon step h"});
        }
        {
            auto f = em.open("points" + tag + ".csv");
            write_points(f, d.points);
        }
        {
            auto f = em.open("polytopes" + tag + ".csv");
            write_polytopes(f, d.polytopes);
        }
    }
    {
        json s;
        s["reached"] = log.reached;
        s["steps"] = m.steps;
        s["time_to_goal"] = m.time_to_goal ? json(*m.time_to_goal) : json("not reached");
        s["final_position"] = vec(log.final_state.position());
        s["final_goal_distance"] = (log.final_state.position() - rc.nav.mpc.goal).norm();
        s["min_obstacle_distance"] = m.min_distance;
        s["mean_obstacle_distance"] = m.mean_distance;
        s["safety_margin"] = rc.nav.mpc.margin;
        s["safe"] = m.min_distance >= rc.nav.mpc.margin;
        s["input_energy"] = m.input_energy;
        s["soft_constraint_steps"] = m.soft_activations;
        s["fallback_steps"] = m.fallbacks;
        s["initial_violation_steps"] = m.initial_violations;
        s["speed_clamp_steps"] = m.clamps;
        s["max_roundtrip_error"] = m.max_roundtrip_error;
        s["finite"] = m.finite;
        s["blobs"] = log.distances.front().size();
        s["initial_operator"] = {{"alpha_max", log.initial_operator.alpha_max},
                                 {"alpha", log.initial_operator.alpha},
                                 {"rho_max", log.initial_operator.rho},
                                 {"iterations", log.initial_operator.iterations}};
        auto f = em.open("summary.json");
        f << s.dump(2) << '\n';
    }
    em.manifest(o, rc.seed);
    std::cout << (log.reached ? "reached goal" : "goal not reached") << " after " << m.steps << " steps; min obstacle distance "
              << io::format_double(m.min_distance) << '\n';
    if (!m.finite) throw RuntimeFailure("non-finite values in the closed-loop log");
    return 0;
}

int cmd_verify(const Options& o) {
    const auto rc = load(o);
    const auto frames = load_snapshots(o.data);
    struct Check {
        std::string name;
        bool pass;
        std::string detail;
    };
    std::vector<Check> checks;
    const auto d = assemble_pairs(frames);
    const double ynorm = std::max(1.0, d.Y.norm());

    const auto K_star = centralized_edmd(d).K;
    const double orth = residual_orthogonality(K_star, d);
    checks.push_back({"centralized orthogonality", orth <= 1e-8 * ynorm, io::format_double(orth)});

    const auto base = learn_on(rc, frames, rc.nav.learning.alpha_fraction);
    double worst_defect = 0.0;
    for (const auto& row : base.trace.rows) worst_defect = std::max(worst_defect, row.defect);
    checks.push_back({"consensus defect", worst_defect <= 1e-10 * (1.0 + d.Y.norm()), io::format_double(worst_defect)});
    const double ratio = base.trace.rows.back().gap / std::max(base.trace.rows.front().gap, 1e-300);
    checks.push_back({"gap contracts", ratio < 1.0, io::format_double(ratio)});
    if (base.trace.rows.size() >= 3) {
        const double rate = fitted_rate(base.trace.rows);
        checks.push_back({"rate within bound", rate <= base.rho + 0.02,
                          io::format_double(rate) + " vs " + io::format_double(base.rho)});
    }

    const int probe = 200;
    const auto stable = learn_on(rc, frames, 0.99, probe);
    const bool decreasing = stable.trace.rows.back().gap < stable.trace.rows.front().gap;
    checks.push_back({"alpha=0.99 alpha_max decreases", decreasing,
                      io::format_double(stable.trace.rows.back().gap / stable.trace.rows.front().gap)});
    const auto wild = learn_on(rc, frames, 1.5, probe);
    const double g200 = wild.trace.rows.back().gap;
    const bool diverged = !std::isfinite(g200) || g200 > wild.trace.rows.front().gap;
    checks.push_back({"alpha=1.5 alpha_max diverges (expected failure observed)", diverged, io::format_double(g200)});

    bool all = true;
    json rep = json::array();
    for (const auto& c : checks) {
        std::cout << (c.pass ? "PASS " : "FAIL ") << c.name << ": " << c.detail << '\n';
        rep.push_back({{"check", c.name}, {"pass", c.pass}, {"value", c.detail}});
        all = all && c.pass;
    }
    Emitter em(o.out);
    {
        auto f = em.open("verify_report.json");
        f << rep.dump(2) << '\n';
    }
    em.manifest(o, rc.seed);
    return all ? 0 : 1;
}

int dispatch(const Options& o);

int cmd_replay(const Options& o) {
    require(!o.manifest.empty(), "--manifest is required");
    auto in = io::open_input(o.manifest);
    json m;
    try {
        m = json::parse(in);
    } catch (const json::exception& e) {
        throw ValidationError(std::string("manifest: ") + e.what());
    }
    Options r;
    try {
        r.command = m.at("command").get<std::string>();
        r.config = m.at("config").get<std::string>();
        r.seed = m.at("seed").get<std::uint64_t>();
        r.threads = m.at("threads").get<int>();
        r.out = o.out.empty() ? m.at("out").get<std::string>() : o.out;
        if (m.contains("data")) r.data = m.at("data").get<std::string>();
        if (m.contains("operator")) r.op = m.at("operator").get<std::string>();
        if (m.contains("horizon")) r.horizon = m.at("horizon").get<int>();
    } catch (const json::exception& e) {
        throw ValidationError(std::string("manifest: ") + e.what());
    }
    require(r.command != "replay", "a replay manifest cannot point at another replay");
    const int code = dispatch(r);
    int mismatches = 0;
    for (const auto& f : m.at("files")) {
        const auto name = f.at("name").get<std::string>();
        const auto want = f.at("fnv1a64").get<std::string>();
        const fs::path p = fs::path(r.out) / name;
        const std::string got = fs::exists(p) ? file_hash(p) : "missing";
        if (got != want) {
            std::cout << "MISMATCH " << name << ": " << got << " != " << want << '\n';
            ++mismatches;
        }
    }
    std::cout << (mismatches == 0 ? "replay identical" : "replay differs") << " (" << m.at("files").size()
              << " files)\n";
    if (code != 0) return code;
    return mismatches == 0 ? 0 : 1;
}

int dispatch(const Options& o) {
    if (o.command == "simgen") return cmd_simgen(o);
    if (o.command == "learn") return cmd_learn(o);
    if (o.command == "forecast") return cmd_forecast(o);
    if (o.command == "navigate") return cmd_navigate(o);
    if (o.command == "verify") return cmd_verify(o);
    if (o.command == "replay") return cmd_replay(o);
    throw ValidationError("unknown command '" + o.command + "'");
}

}  // namespace

int main(int argc, char** argv) {
    CLI::App app{"Distributed Koopman learning and predictive obstacle avoidance"};
    app.require_subcommand(1);
    Options o;
    std::uint64_t seed = 0;

    auto common = [&](CLI::App* sub) {
        sub->add_option("--config", o.config, "JSON configuration file");
        sub->add_option("--out", o.out, "output directory (default $DKMPC_OUT_ROOT/<command> or out/<command>)");
        sub->add_option("--seed", seed, "seed overriding the configuration");
        sub->add_option("--threads", o.threads, "worker threads")->check(CLI::PositiveNumber);
    };
    auto* simgen = app.add_subcommand("simgen", "generate a synthetic snapshot sequence");
    common(simgen);
    auto* learn = app.add_subcommand("learn", "distributed operator learning with diagnostics");
    common(learn);
    learn->add_option("--data", o.data, "snapshot sequence file")->required();
    auto* fc = app.add_subcommand("forecast", "forecast densities and fit obstacle polytopes");
    common(fc);
    fc->add_option("--data", o.data, "snapshot sequence file; the last frame is propagated")->required();
    fc->add_option("--operator", o.op, "operator matrix file")->required();
    fc->add_option("--horizon", o.horizon, "forecast steps (default: mpc.horizon)")->check(CLI::PositiveNumber);
    auto* nav = app.add_subcommand("navigate", "closed-loop navigation");
    common(nav);
    auto* verify = app.add_subcommand("verify", "invariant checks on a dataset");
    common(verify);
    verify->add_option("--data", o.data, "snapshot sequence file")->required();
    auto* replay = app.add_subcommand("replay", "re-run a command from its manifest and compare outputs");
    replay->add_option("--manifest", o.manifest, "manifest.json of an earlier run")->required();
    replay->add_option("--out", o.out, "output directory (default: the one recorded in the manifest)");

    try {
        app.parse(argc, argv);
    } catch (const CLI::Success& e) {
        return app.exit(e);
    } catch (const CLI::ParseError& e) {
        app.exit(e);
        return 2;
    }
    for (auto* sub : app.get_subcommands()) o.command = sub->get_name();
    for (auto* sub : {simgen, learn, fc, nav, verify})
        if (sub->parsed() && sub->count("--seed") > 0) o.seed = seed;
    if (o.out.empty() && o.command != "replay") o.out = default_out(o.command);

    try {
        return dispatch(o);
    } catch (const ValidationError& e) {
        std::cerr << "error: " << e.what() << '\n';
        return 2;
    } catch (const RuntimeFailure& e) {
        std::cerr << "failure: " << e.what() << '\n';
        return 1;
    } catch (const std::exception& e) {
        std::cerr << "failure: " << e.what() << '\n';
        return 1;
    }
}
