#pragma once

#include <algorithm>
#include <cstdint>
#include <istream>
#include <numeric>
#include <ostream>
#include <random>
#include <sstream>
#include <string>
#include <vector>

#include <Eigen/Dense>

#include "carmm/error.hpp"
#include "carmm/spatial_graph.hpp"

namespace carmm {

inline constexpr double kRowSumTolerance = 1e-12;
inline constexpr double kRankTolerance = 1e-10;

/// Numerical rank: singular values above tol * sigma_max.
inline Index numerical_rank(const Eigen::MatrixXd& a, double tol = kRankTolerance)
{
    if (a.size() == 0) return 0;
    Eigen::JacobiSVD<Eigen::MatrixXd> svd(a);
    const auto& s = svd.singularValues();
    const double cut = tol * s(0);
    return static_cast<Index>((s.array() > cut).count());
}

/// Row-stochastic m x n multiple-membership matrix H.
///
/// Every instance satisfies: rows sum to one with entries in [0,1], full rank
/// min(m,n), and no all-zero column. Violations name the offending row/column.
class MembershipMatrix {
public:
    explicit MembershipMatrix(Eigen::MatrixXd weights) : h_(std::move(weights))
    {
        const Index m = h_.rows(), n = h_.cols();
        if (m < 1 || n < 1) throw InvalidArgument("membership matrix must be non-empty");
        for (Index j = 0; j < m; ++j) {
            for (Index i = 0; i < n; ++i) {
                const double v = h_(j, i);
                if (!(v >= 0.0 && v <= 1.0))
                    throw InvalidArgument("membership matrix entry (" + std::to_string(j) + "," +
                                          std::to_string(i) + ") = " + std::to_string(v) +
                                          " outside [0,1]");
            }
            const double s = h_.row(j).sum();
            if (std::abs(s - 1.0) > kRowSumTolerance) {
                std::ostringstream os;
                os.precision(17);
                os << "membership matrix row " << j << " sums to " << s << ", expected 1";
                throw InvalidArgument(os.str());
            }
        }
        for (Index i = 0; i < n; ++i)
            if (!(h_.col(i).maxCoeff() > 0.0))
                throw InvalidArgument("membership matrix column " + std::to_string(i) +
                                      " is all zero (area " + std::to_string(i) + " is unrepresented)");
        const Index r = numerical_rank(h_);
        if (r != std::min(m, n))
            throw InvalidArgument("membership matrix has rank " + std::to_string(r) + ", expected " +
                                  std::to_string(std::min(m, n)));
    }

    Index memberships() const { return h_.rows(); }
    Index areas() const { return h_.cols(); }
    const Eigen::MatrixXd& weights() const { return h_; }

    /// First m rows; the result is re-validated.
    MembershipMatrix truncated(Index m) const
    {
        if (m < 1 || m > h_.rows()) throw InvalidArgument("truncated: row count out of range");
        return MembershipMatrix(h_.topRows(m));
    }

private:
    Eigen::MatrixXd h_;
};

namespace detail {

/// One membership anchored at `anchor`: 0.5 on the anchor, 0.35 spread over first-order
/// neighbours and 0.15 over second-order neighbours, each group by normalised uniforms.
/// Without second-order neighbours the 0.15 share joins the first-order pool.
template <class Rng>
Eigen::RowVectorXd anchored_membership_row(const AdjacencyGraph& g, Index anchor, Rng& rng)
{
    std::uniform_real_distribution<double> u(0.0, 1.0);
    Eigen::RowVectorXd row = Eigen::RowVectorXd::Zero(g.size());
    row(anchor) = 0.5;
    const auto& first = g.neighbours(anchor);
    const auto second = second_order_neighbours(g, anchor);
    const double first_mass = second.empty() ? 0.5 : 0.35;

    auto spread = [&](const std::vector<Index>& group, double mass) {
        std::vector<double> draws(group.size());
        for (auto& d : draws) d = u(rng);
        const double total = std::accumulate(draws.begin(), draws.end(), 0.0);
        for (std::size_t k = 0; k < group.size(); ++k) row(group[k]) = mass * draws[k] / total;
    };
    spread(first, first_mass);
    if (!second.empty()) spread(second, 0.15);
    return row;
}

inline bool satisfies_m2(const Eigen::MatrixXd& h)
{
    for (Index i = 0; i < h.cols(); ++i)
        if (!(h.col(i).maxCoeff() > 0.0)) return false;
    return numerical_rank(h) == std::min(h.rows(), h.cols());
}

} // namespace detail

/// Simulated membership matrix built from each area's neighbourhood.
///
/// Rows are generated in rounds (one membership per area per round, fresh weights each
/// round) until at least m exist, shuffled, and truncated to m. If `smallest_prefix` is
/// given, every truncation to that many rows must also satisfy M2; the shuffle is
/// repeated up to `max_shuffles` times before giving up.
template <class Rng>
MembershipMatrix simulate_membership_matrix(const AdjacencyGraph& g, Index m, Rng& rng,
                                            Index smallest_prefix = -1, int max_shuffles = 1000)
{
    if (m < 1) throw InvalidArgument("simulate_membership_matrix: m must be positive");
    if (smallest_prefix < 0) smallest_prefix = m;
    if (smallest_prefix < 1 || smallest_prefix > m)
        throw InvalidArgument("simulate_membership_matrix: smallest_prefix out of range");
    const Index n = g.size();
    const Index rounds = (m + n - 1) / n;
    Eigen::MatrixXd pool(rounds * n, n);
    for (Index r = 0; r < rounds; ++r)
        for (Index a = 0; a < n; ++a) pool.row(r * n + a) = detail::anchored_membership_row(g, a, rng);

    std::vector<Index> order(static_cast<std::size_t>(pool.rows()));
    std::iota(order.begin(), order.end(), Index{0});
    for (int attempt = 0; attempt < max_shuffles; ++attempt) {
        std::shuffle(order.begin(), order.end(), rng);
        Eigen::MatrixXd h(m, n);
        for (Index j = 0; j < m; ++j) h.row(j) = pool.row(order[static_cast<std::size_t>(j)]);
        if (detail::satisfies_m2(h.topRows(smallest_prefix)) && detail::satisfies_m2(h))
            return MembershipMatrix(std::move(h));
    }
    throw SimulationFailure("simulate_membership_matrix: no shuffle represented every area after " +
                            std::to_string(max_shuffles) + " attempts");
}

inline MembershipMatrix simulate_membership_matrix(const AdjacencyGraph& g, Index m, std::uint64_t seed,
                                                   Index smallest_prefix = -1)
{
    std::mt19937_64 rng(seed);
    return simulate_membership_matrix(g, m, rng, smallest_prefix);
}

/// Moore-Penrose left inverse (H'H)^{-1} H'. Exists only for m >= n.
inline Eigen::MatrixXd left_inverse(const MembershipMatrix& h)
{
    if (h.memberships() < h.areas())
        throw NotIdentifiable("left_inverse: H is " + std::to_string(h.memberships()) + "x" +
                              std::to_string(h.areas()) + "; a left inverse requires m >= n");
    const auto& w = h.weights();
    Eigen::LDLT<Eigen::MatrixXd> gram(w.transpose() * w);
    return gram.solve(w.transpose());
}

/// Moore-Penrose pseudo-inverse for any shape (right inverse when m < n).
inline Eigen::MatrixXd pseudo_inverse(const MembershipMatrix& h)
{
    Eigen::CompleteOrthogonalDecomposition<Eigen::MatrixXd> cod(h.weights());
    return cod.pseudoInverse();
}

/// G* = L + Z - L H Z H L: another left inverse of H for every n x m matrix Z.
inline Eigen::MatrixXd generalized_inverse_family(const MembershipMatrix& h, const Eigen::MatrixXd& l,
                                                  const Eigen::MatrixXd& z)
{
    const Index m = h.memberships(), n = h.areas();
    if (m <= n) throw InvalidArgument("generalized_inverse_family: only applicable when m > n");
    if (l.rows() != n || l.cols() != m || z.rows() != n || z.cols() != m)
        throw InvalidArgument("generalized_inverse_family: L and Z must be n x m");
    const auto& w = h.weights();
    return l + z - l * w * z * w * l;
}

struct PushforwardCovariance {
    Eigen::MatrixXd sigma;
    Index rank = 0;
    bool positive_definite = false;
};

/// Sigma~ = H Sigma H'. Full rank (and PD) only when m <= n.
inline PushforwardCovariance pushforward_covariance(const MembershipMatrix& h, const Eigen::MatrixXd& sigma)
{
    if (sigma.rows() != h.areas() || sigma.cols() != h.areas())
        throw InvalidArgument("pushforward_covariance: Sigma must be n x n with n = " + std::to_string(h.areas()));
    PushforwardCovariance out;
    out.sigma = h.weights() * sigma * h.weights().transpose();
    out.sigma = 0.5 * (out.sigma + out.sigma.transpose());
    Eigen::SelfAdjointEigenSolver<Eigen::MatrixXd> es(out.sigma, Eigen::EigenvaluesOnly);
    const double lmax = es.eigenvalues().cwiseAbs().maxCoeff();
    out.rank = static_cast<Index>((es.eigenvalues().array() > kRankTolerance * lmax).count());
    out.positive_definite = out.rank == out.sigma.rows();
    return out;
}

/// L Sigma~ L' with L the Moore-Penrose left inverse. Sigma is identified only for m >= n.
inline Eigen::MatrixXd recover_areal_covariance(const MembershipMatrix& h, const Eigen::MatrixXd& sigma_tilde)
{
    if (h.memberships() < h.areas())
        throw NotIdentifiable("recover_areal_covariance: m < n leaves Sigma underdetermined");
    if (sigma_tilde.rows() != h.memberships() || sigma_tilde.cols() != h.memberships())
        throw InvalidArgument("recover_areal_covariance: Sigma~ must be m x m");
    const Eigen::MatrixXd l = left_inverse(h);
    return l * sigma_tilde * l.transpose();
}

/// H (gamma 1 + X beta + phi). The intercept passes through because rows of H sum to one.
inline Eigen::VectorXd mm_log_relative_risk(const MembershipMatrix& h, double gamma, const Eigen::VectorXd& beta,
                                            const Eigen::MatrixXd& x, const Eigen::VectorXd& phi)
{
    const Index n = h.areas();
    if (x.rows() != n || x.cols() != beta.size() || phi.size() != n)
        throw InvalidArgument("mm_log_relative_risk: dimension mismatch");
    Eigen::VectorXd areal = x * beta + phi;
    areal.array() += gamma;
    return h.weights() * areal;
}

// ---- H matrix CSV: m rows x n columns of plain floats, no header ----

inline void write_membership_csv(const MembershipMatrix& h, std::ostream& os)
{
    const auto& w = h.weights();
    os.precision(17);
    for (Index j = 0; j < w.rows(); ++j) {
        for (Index i = 0; i < w.cols(); ++i) os << (i ? "," : "") << w(j, i);
        os << '\n';
    }
}

inline Eigen::MatrixXd read_numeric_csv(std::istream& is, bool header, const std::string& what)
{
    std::string line;
    std::vector<std::vector<double>> rows;
    if (header && !std::getline(is, line)) throw IoError(what + ": empty input");
    std::size_t lineno = header ? 1 : 0;
    while (std::getline(is, line)) {
        ++lineno;
        if (!line.empty() && line.back() == '\r') line.pop_back();
        if (line.empty()) continue;
        std::vector<double> row;
        std::stringstream ss(line);
        std::string cell;
        while (std::getline(ss, cell, ',')) {
            try {
                std::size_t used = 0;
                row.push_back(std::stod(cell, &used));
                if (used != cell.size() && cell.find_first_not_of(" \t", used) != std::string::npos)
                    throw std::invalid_argument(cell);
            } catch (const std::exception&) {
                throw IoError(what + ": non-numeric cell '" + cell + "' on line " + std::to_string(lineno));
            }
        }
        if (!rows.empty() && row.size() != rows.front().size())
            throw IoError(what + ": line " + std::to_string(lineno) + " has " + std::to_string(row.size()) +
                          " columns, expected " + std::to_string(rows.front().size()));
        rows.push_back(std::move(row));
    }
    if (rows.empty()) throw IoError(what + ": no data rows");
    Eigen::MatrixXd out(static_cast<Index>(rows.size()), static_cast<Index>(rows.front().size()));
    for (std::size_t r = 0; r < rows.size(); ++r)
        for (std::size_t c = 0; c < rows[r].size(); ++c)
            out(static_cast<Index>(r), static_cast<Index>(c)) = rows[r][c];
    return out;
}

inline MembershipMatrix read_membership_csv(std::istream& is)
{
    return MembershipMatrix(read_numeric_csv(is, false, "membership csv"));
}

} // namespace carmm
