#pragma once

#include <algorithm>
#include <cmath>
#include <fstream>
#include <queue>
#include <set>
#include <sstream>
#include <string>
#include <utility>
#include <vector>

#include <Eigen/Dense>

#include "carmm/error.hpp"

namespace carmm {

using Index = Eigen::Index;

enum class Adjacency { Rook, Queen };

inline Adjacency parse_adjacency(const std::string& s)
{
    if (s == "rook") return Adjacency::Rook;
    if (s == "queen") return Adjacency::Queen;
    throw InvalidArgument("unknown adjacency '" + s + "' (expected rook or queen)");
}

inline std::string to_string(Adjacency a) { return a == Adjacency::Rook ? "rook" : "queen"; }

/// Undirected areal adjacency over n areas.
///
/// Edges are stored once as (i, j) with i < j, sorted. Construction rejects
/// self-loops, duplicates, isolated areas and disconnected graphs, so every
/// instance satisfies the invariants required by the CAR and ICAR priors.
class AdjacencyGraph {
public:
    using Edge = std::pair<Index, Index>;

    AdjacencyGraph(Index n, std::vector<Edge> edges) : n_(n)
    {
        detail::require(n >= 2, "adjacency graph needs at least 2 areas");
        for (auto& [i, j] : edges) {
            if (i < 0 || j < 0 || i >= n || j >= n)
                throw InvalidArgument("edge (" + std::to_string(i) + "," + std::to_string(j) +
                                      ") out of range for n=" + std::to_string(n));
            if (i == j) throw InvalidArgument("self-loop at area " + std::to_string(i));
            if (i > j) std::swap(i, j);
        }
        std::sort(edges.begin(), edges.end());
        if (std::adjacent_find(edges.begin(), edges.end()) != edges.end())
            throw InvalidArgument("duplicate edge in adjacency list");
        edges_ = std::move(edges);

        neighbours_.assign(static_cast<std::size_t>(n), {});
        for (const auto& [i, j] : edges_) {
            neighbours_[static_cast<std::size_t>(i)].push_back(j);
            neighbours_[static_cast<std::size_t>(j)].push_back(i);
        }
        degrees_.resize(n);
        for (Index i = 0; i < n; ++i) {
            auto& nb = neighbours_[static_cast<std::size_t>(i)];
            std::sort(nb.begin(), nb.end());
            degrees_(i) = static_cast<double>(nb.size());
            if (nb.empty()) throw InvalidArgument("area " + std::to_string(i) + " has no neighbours");
        }
        if (!connected()) throw InvalidArgument("adjacency graph is not connected");
    }

    Index size() const { return n_; }
    const std::vector<Edge>& edges() const { return edges_; }
    const Eigen::VectorXd& degrees() const { return degrees_; }
    const std::vector<Index>& neighbours(Index i) const
    {
        check_index(i);
        return neighbours_[static_cast<std::size_t>(i)];
    }

    Eigen::MatrixXd dense_adjacency() const
    {
        Eigen::MatrixXd w = Eigen::MatrixXd::Zero(n_, n_);
        for (const auto& [i, j] : edges_) w(i, j) = w(j, i) = 1.0;
        return w;
    }

    /// sum over ordered pairs (i,j) with w_ij = 1 of x_i y_j
    double bilinear(const Eigen::VectorXd& x, const Eigen::VectorXd& y) const
    {
        double s = 0.0;
        for (const auto& [i, j] : edges_) s += x(i) * y(j) + x(j) * y(i);
        return s;
    }

    /// W x
    Eigen::VectorXd adjacency_times(const Eigen::VectorXd& x) const
    {
        Eigen::VectorXd out = Eigen::VectorXd::Zero(n_);
        for (const auto& [i, j] : edges_) {
            out(i) += x(j);
            out(j) += x(i);
        }
        return out;
    }

    void check_index(Index i) const
    {
        if (i < 0 || i >= n_)
            throw InvalidArgument("area index " + std::to_string(i) + " out of range [0," +
                                  std::to_string(n_) + ")");
    }

private:
    bool connected() const
    {
        std::vector<char> seen(static_cast<std::size_t>(n_), 0);
        std::vector<Index> stack{0};
        seen[0] = 1;
        Index count = 1;
        while (!stack.empty()) {
            Index v = stack.back();
            stack.pop_back();
            for (Index u : neighbours_[static_cast<std::size_t>(v)]) {
                if (!seen[static_cast<std::size_t>(u)]) {
                    seen[static_cast<std::size_t>(u)] = 1;
                    ++count;
                    stack.push_back(u);
                }
            }
        }
        return count == n_;
    }

    Index n_;
    std::vector<Edge> edges_;
    std::vector<std::vector<Index>> neighbours_;
    Eigen::VectorXd degrees_;
};

/// Regular lattice with row-major area numbering (area = r * cols + c).
inline AdjacencyGraph make_grid(Index rows, Index cols, Adjacency adjacency = Adjacency::Rook)
{
    if (rows <= 0 || cols <= 0) throw InvalidArgument("grid dimensions must be positive");
    if (rows * cols < 2) throw InvalidArgument("grid must contain at least 2 areas");
    std::vector<AdjacencyGraph::Edge> edges;
    auto id = [cols](Index r, Index c) { return r * cols + c; };
    for (Index r = 0; r < rows; ++r) {
        for (Index c = 0; c < cols; ++c) {
            if (c + 1 < cols) edges.emplace_back(id(r, c), id(r, c + 1));
            if (r + 1 < rows) edges.emplace_back(id(r, c), id(r + 1, c));
            if (adjacency == Adjacency::Queen && r + 1 < rows) {
                if (c + 1 < cols) edges.emplace_back(id(r, c), id(r + 1, c + 1));
                if (c > 0) edges.emplace_back(id(r, c), id(r + 1, c - 1));
            }
        }
    }
    return AdjacencyGraph(rows * cols, std::move(edges));
}

/// Areas at graph distance exactly two from i.
inline std::vector<Index> second_order_neighbours(const AdjacencyGraph& g, Index i)
{
    g.check_index(i);
    const auto& first = g.neighbours(i);
    std::set<Index> out;
    for (Index j : first)
        for (Index k : g.neighbours(j))
            if (k != i && !std::binary_search(first.begin(), first.end(), k)) out.insert(k);
    return {out.begin(), out.end()};
}

/// Moran's I with binary weights.
inline double morans_i(const AdjacencyGraph& g, const Eigen::VectorXd& x)
{
    if (x.size() != g.size()) throw InvalidArgument("morans_i: vector length does not match graph");
    const Eigen::VectorXd z = x.array() - x.mean();
    const double ss = z.squaredNorm();
    if (!(ss > 0.0) || ss <= 1e-300) throw DegenerateInput("morans_i: input has zero variance");
    const double sum_w = 2.0 * static_cast<double>(g.edges().size());
    const double cross = g.bilinear(z, z);
    return static_cast<double>(g.size()) / sum_w * cross / ss;
}

// ---- adjacency CSV: header "i,j", one undirected 0-based edge per row ----

inline void write_adjacency_csv(const AdjacencyGraph& g, std::ostream& os)
{
    os << "i,j\n";
    for (const auto& [i, j] : g.edges()) os << i << ',' << j << '\n';
}

/// n is taken as max index + 1 unless given explicitly.
inline AdjacencyGraph read_adjacency_csv(std::istream& is, Index n = -1)
{
    std::string line;
    if (!std::getline(is, line)) throw IoError("adjacency csv: empty input");
    if (!line.empty() && line.back() == '\r') line.pop_back();
    if (line != "i,j") throw IoError("adjacency csv: expected header 'i,j', got '" + line + "'");
    std::vector<AdjacencyGraph::Edge> edges;
    Index max_index = -1;
    std::size_t lineno = 1;
    while (std::getline(is, line)) {
        ++lineno;
        if (!line.empty() && line.back() == '\r') line.pop_back();
        if (line.empty()) continue;
        std::istringstream ss(line);
        long long a = 0, b = 0;
        char comma = 0;
        if (!(ss >> a >> comma >> b) || comma != ',')
            throw IoError("adjacency csv: malformed row " + std::to_string(lineno));
        edges.emplace_back(static_cast<Index>(a), static_cast<Index>(b));
        max_index = std::max<Index>(max_index, static_cast<Index>(std::max(a, b)));
    }
    return AdjacencyGraph(n < 0 ? max_index + 1 : n, std::move(edges));
}

} // namespace carmm
