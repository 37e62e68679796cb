#pragma once

// JSON run configuration. Every section is optional and falls back to the
// library defaults; unknown keys are rejected so typos do not pass silently.
//
// {
//   "seed": 7,
//   "scenario":   { "rows", "cols", "cell_size", "origin": [x, y], "frames", "dt",
//                   "boundary": "bounce" | "wrap",
//                   "blobs": [ { "center", "velocity", "sigma", "peak" } ],
//                   "random_blobs": { "count", "speed": [lo, hi], "sigma": [lo, hi],
//                                     "peak": [lo, hi], "clearance" },
//                   "keep_clear": [[x, y], ...] },
//   "graph":      { "topology": "ring" | "path" | "complete" | "custom", "nodes",
//                   "edges": ["1 2", "2 3"] },
//   "learning":   { "alpha_fraction", "target_tol", "max_iterations", "window",
//                   "refresh_every", "refresh_iterations" },
//   "perception": { "threshold", "components", "confidence", "facets",
//                   "normal_mode": "radial" | "tangent", "weighted", "gmm_max_iter",
//                   "gmm_tol", "gmm_restarts", "forecast" },
//   "mpc":        { "horizon", "Q": [[..],[..]], "R": [[..],[..]], "goal", "margin",
//                   "robot_radius", "input_bound", "tol", "max_iter" },
//   "robot":      { "start", "heading", "speed", "max_steps", "goal_tolerance" },
//   "output":     { "dump_steps": [..] },
//   "threads": 1
// }

#include "dkmpc/scenario_sim.hpp"

#include <json.hpp>

#include <fstream>
#include <set>
#include <sstream>
#include <string>

namespace dkmpc {

struct RunConfig {
    std::uint64_t seed = 0;
    NavigationConfig nav;
};

namespace detail {

using json = nlohmann::json;

inline void check_keys(const json& j, const std::string& where, std::initializer_list<const char*> allowed) {
    require(j.is_object(), "'" + where + "' must be an object");
    std::set<std::string> ok(allowed.begin(), allowed.end());
    for (auto it = j.begin(); it != j.end(); ++it)
        require(ok.count(it.key()) > 0, "unknown key '" + it.key() + "' in '" + where + "'");
}

template <class T>
void read(const json& j, const char* key, T& out) {
    if (j.contains(key)) out = j.at(key).get<T>();
}

inline Vec2 to_vec2(const json& j, const std::string& what) {
    require(j.is_array() && j.size() == 2, "'" + what + "' must be a 2-element array");
    return {j[0].get<double>(), j[1].get<double>()};
}

inline void read_vec2(const json& j, const char* key, Vec2& out) {
    if (j.contains(key)) out = to_vec2(j.at(key), key);
}

inline void read_range(const json& j, const char* key, double& lo, double& hi) {
    if (!j.contains(key)) return;
    const Vec2 r = to_vec2(j.at(key), key);
    lo = r.x();
    hi = r.y();
}

inline void read_mat2(const json& j, const char* key, Mat2& out) {
    if (!j.contains(key)) return;
    const auto& m = j.at(key);
    if (m.is_number()) {
        out = m.get<double>() * Mat2::Identity();
        return;
    }
    require(m.is_array() && m.size() == 2, std::string("'") + key + "' must be a 2x2 array or a scalar");
    out.row(0) = to_vec2(m[0], key).transpose();
    out.row(1) = to_vec2(m[1], key).transpose();
}

inline CommGraph::Edge parse_edge(const std::string& s) {
    std::istringstream is(s);
    int i = 0, j = 0;
    std::string extra;
    require(static_cast<bool>(is >> i >> j) && !(is >> extra), "edge '" + s + "' is not of the form \"i j\"");
    return {i, j};
}

inline void parse_scenario(const json& j, ScenarioConfig& c) {
    check_keys(j, "scenario", {"rows", "cols", "cell_size", "origin", "frames", "dt", "boundary", "blobs",
                               "random_blobs", "keep_clear"});
    read(j, "rows", c.map.rows);
    read(j, "cols", c.map.cols);
    read(j, "cell_size", c.map.cell_size);
    read_vec2(j, "origin", c.map.origin);
    read(j, "frames", c.frames);
    read(j, "dt", c.dt);
    if (j.contains("boundary")) c.boundary = parse_boundary(j.at("boundary").get<std::string>());
    if (j.contains("blobs")) {
        c.blobs.clear();
        for (const auto& b : j.at("blobs")) {
            check_keys(b, "blobs[]", {"center", "velocity", "sigma", "peak"});
            Blob blob;
            read_vec2(b, "center", blob.center);
            read_vec2(b, "velocity", blob.velocity);
            read(b, "sigma", blob.sigma);
            read(b, "peak", blob.peak);
            c.blobs.push_back(blob);
        }
    }
    if (j.contains("random_blobs")) {
        const auto& r = j.at("random_blobs");
        check_keys(r, "random_blobs", {"count", "speed", "sigma", "peak", "clearance"});
        read(r, "count", c.random.count);
        read_range(r, "speed", c.random.speed_min, c.random.speed_max);
        read_range(r, "sigma", c.random.sigma_min, c.random.sigma_max);
        read_range(r, "peak", c.random.peak_min, c.random.peak_max);
        read(r, "clearance", c.random.clearance);
    }
    if (j.contains("keep_clear")) {
        c.keep_clear.clear();
        for (const auto& p : j.at("keep_clear")) c.keep_clear.push_back(to_vec2(p, "keep_clear"));
    }
}

inline void parse_graph(const json& j, LearningConfig& c) {
    check_keys(j, "graph", {"topology", "nodes", "edges"});
    if (j.contains("topology")) c.topology = parse_topology(j.at("topology").get<std::string>());
    read(j, "nodes", c.agents);
    if (j.contains("edges")) {
        c.edges.clear();
        for (const auto& e : j.at("edges")) c.edges.push_back(parse_edge(e.get<std::string>()));
    }
}

inline void parse_learning(const json& j, LearningConfig& c) {
    check_keys(j, "learning", {"alpha_fraction", "target_tol", "max_iterations", "window", "refresh_every",
                               "refresh_iterations"});
    read(j, "alpha_fraction", c.alpha_fraction);
    read(j, "target_tol", c.target_tol);
    read(j, "max_iterations", c.max_iterations);
    read(j, "window", c.window);
    read(j, "refresh_every", c.refresh_every);
    read(j, "refresh_iterations", c.refresh_iterations);
}

inline void parse_perception(const json& j, PerceptionConfig& c) {
    check_keys(j, "perception", {"threshold", "components", "confidence", "facets", "normal_mode", "weighted",
                                 "gmm_max_iter", "gmm_tol", "gmm_restarts", "forecast"});
    read(j, "threshold", c.threshold);
    read(j, "components", c.components);
    read(j, "confidence", c.confidence);
    read(j, "facets", c.facets);
    if (j.contains("normal_mode")) c.normal_mode = parse_normal_mode(j.at("normal_mode").get<std::string>());
    read(j, "weighted", c.weighted);
    read(j, "gmm_max_iter", c.gmm_max_iter);
    read(j, "gmm_tol", c.gmm_tol);
    read(j, "gmm_restarts", c.gmm_restarts);
    read(j, "forecast", c.forecast);
}

inline void parse_mpc(const json& j, MpcConfig& c) {
    check_keys(j, "mpc", {"horizon", "Q", "R", "goal", "margin", "robot_radius", "input_bound", "tol", "max_iter"});
    read(j, "horizon", c.horizon);
    read_mat2(j, "Q", c.Q);
    read_mat2(j, "R", c.R);
    read_vec2(j, "goal", c.goal);
    read(j, "margin", c.margin);
    read(j, "robot_radius", c.robot_radius);
    read(j, "input_bound", c.input_bound);
    read(j, "tol", c.tol);
    read(j, "max_iter", c.max_iter);
}

inline void parse_robot(const json& j, RobotConfig& c) {
    check_keys(j, "robot", {"start", "heading", "speed", "max_steps", "goal_tolerance"});
    read_vec2(j, "start", c.start);
    read(j, "heading", c.heading);
    read(j, "speed", c.speed);
    read(j, "max_steps", c.max_steps);
    read(j, "goal_tolerance", c.goal_tolerance);
}

}  // namespace detail

/// Parses and validates a configuration document.
inline RunConfig parse_config(const std::string& text) {
    using detail::json;
    RunConfig rc;
    try {
        const json j = json::parse(text, nullptr, true, true);
        detail::check_keys(j, "config", {"seed", "scenario", "graph", "learning", "perception", "mpc", "robot",
                                         "output", "threads"});
        detail::read(j, "seed", rc.seed);
        auto& nav = rc.nav;
        if (j.contains("scenario")) detail::parse_scenario(j.at("scenario"), nav.scenario);
        if (j.contains("graph")) detail::parse_graph(j.at("graph"), nav.learning);
        if (j.contains("learning")) detail::parse_learning(j.at("learning"), nav.learning);
        if (j.contains("perception")) detail::parse_perception(j.at("perception"), nav.perception);
        if (j.contains("mpc")) detail::parse_mpc(j.at("mpc"), nav.mpc);
        if (j.contains("robot")) detail::parse_robot(j.at("robot"), nav.robot);
        if (j.contains("output")) {
            detail::check_keys(j.at("output"), "output", {"dump_steps"});
            detail::read(j.at("output"), "dump_steps", nav.dump_steps);
        }
        detail::read(j, "threads", nav.threads);
    } catch (const json::exception& e) {
        throw ValidationError(std::string("config: ") + e.what());
    }
    rc.nav.scenario.seed = rc.seed;
    rc.nav.validate();
    return rc;
}

inline RunConfig load_config(const std::string& path) {
    std::ifstream in(path);
    if (!in) throw ValidationError("cannot open config '" + path + "'");
    std::stringstream ss;
    ss << in.rdbuf();
    return parse_config(ss.str());
}

/// Replaces the seed everywhere it is used.
inline void override_seed(RunConfig& rc, std::uint64_t seed) {
    rc.seed = seed;
    rc.nav.scenario.seed = seed;
}

}  // namespace dkmpc
