#pragma once

#include "dkmpc/common.hpp"

#include <Eigen/Eigenvalues>

#include <algorithm>
#include <set>
#include <span>
#include <string>
#include <utility>
#include <vector>

namespace dkmpc {

enum class Topology { ring, path, complete, custom };

inline Topology parse_topology(const std::string& name) {
    if (name == "ring") return Topology::ring;
    if (name == "path") return Topology::path;
    if (name == "complete") return Topology::complete;
    if (name == "custom") return Topology::custom;
    throw ValidationError("unknown topology '" + name + "'");
}

/// Undirected, unweighted agent communication graph. Nodes are 0-based here;
/// 1-based indices only appear in config files.
class CommGraph {
public:
    using Edge = std::pair<int, int>;

    CommGraph(int node_count, std::vector<Edge> edges) : node_count_(node_count) {
        require(node_count >= 1, "graph needs at least one node");
        neighbors_.resize(static_cast<std::size_t>(node_count));
        std::set<Edge> seen;
        for (auto [i, j] : edges) {
            require(i >= 0 && i < node_count && j >= 0 && j < node_count,
                    "edge (" + std::to_string(i + 1) + "," + std::to_string(j + 1) +
                        ") references a node outside 1.." + std::to_string(node_count));
            require(i != j, "self-loop at node " + std::to_string(i + 1));
            const Edge key{std::min(i, j), std::max(i, j)};
            require(seen.insert(key).second, "duplicate edge (" + std::to_string(key.first + 1) +
                                                 "," + std::to_string(key.second + 1) + ")");
            edges_.push_back(key);
            neighbors_[static_cast<std::size_t>(i)].push_back(j);
            neighbors_[static_cast<std::size_t>(j)].push_back(i);
        }
        for (auto& nb : neighbors_) std::sort(nb.begin(), nb.end());
    }

    int node_count() const noexcept { return node_count_; }
    /// Normalized (i<j) edge list in insertion order.
    const std::vector<Edge>& edges() const noexcept { return edges_; }
    const std::vector<int>& neighbors(int i) const { return neighbors_.at(static_cast<std::size_t>(i)); }
    int degree(int i) const { return static_cast<int>(neighbors(i).size()); }

private:
    int node_count_;
    std::vector<Edge> edges_;
    std::vector<std::vector<int>> neighbors_;
};

/// Builds a standard topology. `custom_edges` holds 1-based pairs and is
/// only read for Topology::custom.
inline CommGraph build_graph(Topology topology, int p,
                             std::span<const CommGraph::Edge> custom_edges = {}) {
    require(p >= 1, "node count must be positive");
    std::vector<CommGraph::Edge> edges;
    switch (topology) {
        case Topology::path:
            for (int i = 0; i + 1 < p; ++i) edges.emplace_back(i, i + 1);
            break;
        case Topology::ring:
            for (int i = 0; i + 1 < p; ++i) edges.emplace_back(i, i + 1);
            // p = 2 would close the cycle onto the existing edge.
            if (p >= 3) edges.emplace_back(p - 1, 0);
            break;
        case Topology::complete:
            for (int i = 0; i < p; ++i)
                for (int j = i + 1; j < p; ++j) edges.emplace_back(i, j);
            break;
        case Topology::custom:
            for (auto [i, j] : custom_edges) edges.emplace_back(i - 1, j - 1);
            break;
    }
    return CommGraph(p, std::move(edges));
}

/// L_ii = degree, L_ij = -1 on edges.
inline Matrix laplacian(const CommGraph& g) {
    const int p = g.node_count();
    Matrix L = Matrix::Zero(p, p);
    for (auto [i, j] : g.edges()) {
        L(i, j) = -1.0;
        L(j, i) = -1.0;
        L(i, i) += 1.0;
        L(j, j) += 1.0;
    }
    return L;
}

/// Second-smallest Laplacian eigenvalue (0 for a single node).
inline double algebraic_connectivity(const CommGraph& g) {
    if (g.node_count() == 1) return 0.0;
    Eigen::SelfAdjointEigenSolver<Matrix> es(laplacian(g), Eigen::EigenvaluesOnly);
    return es.eigenvalues()(1);
}

/// Connected iff the Laplacian's second eigenvalue is positive.
inline bool is_connected(const CommGraph& g) {
    if (g.node_count() == 1) return true;
    // Laplacian eigenvalues are bounded by 2*max degree <= 2p, so an
    // absolute cutoff is safe at these sizes.
    return algebraic_connectivity(g) > 1e-9;
}

/// L ⊗ I_N.
inline Matrix lifted_laplacian(const Matrix& L, int N) {
    require(N >= 1, "lifted Laplacian needs N >= 1");
    const Eigen::Index p = L.rows();
    Matrix out = Matrix::Zero(p * N, p * N);
    for (Eigen::Index i = 0; i < p; ++i)
        for (Eigen::Index j = 0; j < p; ++j)
            if (L(i, j) != 0.0)
                out.block(i * N, j * N, N, N).diagonal().setConstant(L(i, j));
    return out;
}

}  // namespace dkmpc
