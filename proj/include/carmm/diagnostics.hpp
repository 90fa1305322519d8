#pragma once

#include <algorithm>
#include <cmath>
#include <numeric>
#include <string>
#include <vector>

#include <Eigen/Dense>
#include <boost/math/distributions/chi_squared.hpp>
#include <boost/math/distributions/normal.hpp>

#include "carmm/error.hpp"
#include "carmm/spatial_graph.hpp"

namespace carmm {

struct SbcRank {
    std::string parameter;
    int rank = 0;
    int draws = 0; // B
};

/// Number of posterior draws strictly below the generating value.
inline int rank_statistic(const Eigen::VectorXd& draws, double truth)
{
    return static_cast<int>((draws.array() < truth).count());
}

namespace detail {

inline void check_chains(const std::vector<Eigen::VectorXd>& chains, const char* what)
{
    if (chains.size() < 2) throw InvalidArgument(std::string(what) + ": need at least 2 chains");
    for (const auto& c : chains) {
        if (c.size() < 4) throw InvalidArgument(std::string(what) + ": need at least 4 draws per chain");
        if (c.size() != chains.front().size()) throw InvalidArgument(std::string(what) + ": chains differ in length");
        if (!c.allFinite()) throw InvalidArgument(std::string(what) + ": non-finite draws");
    }
    const double first = chains.front()(0);
    bool constant = true;
    for (const auto& c : chains) constant = constant && (c.array() == first).all();
    if (constant) throw DegenerateInput(std::string(what) + ": all draws are identical");
}

/// Each chain cut into two halves (the middle draw of odd-length chains is dropped).
inline std::vector<Eigen::VectorXd> split_chains(const std::vector<Eigen::VectorXd>& chains)
{
    std::vector<Eigen::VectorXd> out;
    for (const auto& c : chains) {
        const Index half = c.size() / 2;
        out.emplace_back(c.head(half));
        out.emplace_back(c.tail(half));
    }
    return out;
}

/// Normal scores of pooled average ranks, (r - 3/8) / (S + 1/4).
inline std::vector<Eigen::VectorXd> rank_normalize(const std::vector<Eigen::VectorXd>& chains)
{
    std::vector<std::pair<double, std::size_t>> all;
    for (std::size_t c = 0; c < chains.size(); ++c)
        for (Index i = 0; i < chains[c].size(); ++i) all.emplace_back(chains[c](i), all.size());
    const std::size_t s = all.size();
    std::vector<std::pair<double, std::size_t>> sorted = all;
    std::sort(sorted.begin(), sorted.end());
    std::vector<double> rank(s);
    for (std::size_t i = 0; i < s;) {
        std::size_t j = i;
        while (j + 1 < s && sorted[j + 1].first == sorted[i].first) ++j;
        const double avg = 0.5 * static_cast<double>(i + j) + 1.0;
        for (std::size_t k = i; k <= j; ++k) rank[sorted[k].second] = avg;
        i = j + 1;
    }
    const boost::math::normal_distribution<double> normal;
    std::vector<Eigen::VectorXd> out;
    std::size_t k = 0;
    for (const auto& c : chains) {
        Eigen::VectorXd z(c.size());
        for (Index i = 0; i < c.size(); ++i, ++k)
            z(i) = boost::math::quantile(normal, (rank[k] - 0.375) / (static_cast<double>(s) + 0.25));
        out.push_back(std::move(z));
    }
    return out;
}

inline double classic_rhat(const std::vector<Eigen::VectorXd>& chains)
{
    const auto m = static_cast<double>(chains.size());
    const auto n = static_cast<double>(chains.front().size());
    Eigen::VectorXd means(chains.size());
    double w = 0.0;
    for (std::size_t c = 0; c < chains.size(); ++c) {
        means(static_cast<Index>(c)) = chains[c].mean();
        w += (chains[c].array() - chains[c].mean()).square().sum() / (n - 1.0);
    }
    w /= m;
    const double b_over_n = (means.array() - means.mean()).square().sum() / (m - 1.0);
    if (!(w > 0.0)) return b_over_n > 0.0 ? std::numeric_limits<double>::infinity() : 1.0;
    const double var_plus = (n - 1.0) / n * w + b_over_n;
    return std::sqrt(var_plus / w);
}

inline double median(std::vector<double> v)
{
    const std::size_t k = v.size() / 2;
    std::nth_element(v.begin(), v.begin() + static_cast<std::ptrdiff_t>(k), v.end());
    const double hi = v[k];
    if (v.size() % 2 == 1) return hi;
    const double lo = *std::max_element(v.begin(), v.begin() + static_cast<std::ptrdiff_t>(k));
    return 0.5 * (lo + hi);
}

} // namespace detail

/// Rank-normalised split R-hat: the larger of the bulk and folded-tail statistics,
/// floored at 1.
inline double split_rhat(const std::vector<Eigen::VectorXd>& chains)
{
    detail::check_chains(chains, "split_rhat");
    const auto split = detail::split_chains(chains);
    const double bulk = detail::classic_rhat(detail::rank_normalize(split));

    std::vector<double> pooled;
    for (const auto& c : split) pooled.insert(pooled.end(), c.data(), c.data() + c.size());
    const double med = detail::median(pooled);
    std::vector<Eigen::VectorXd> folded;
    for (const auto& c : split) folded.emplace_back((c.array() - med).abs());
    const double tail = detail::classic_rhat(detail::rank_normalize(folded));
    return std::max({1.0, bulk, tail});
}

/// Multi-chain effective sample size from split chains, with Geyer's initial
/// positive and monotone sequence truncation of the autocorrelation sum.
inline double effective_sample_size(const std::vector<Eigen::VectorXd>& chains)
{
    detail::check_chains(chains, "effective_sample_size");
    const auto split = detail::split_chains(chains);
    const auto m = static_cast<Index>(split.size());
    const Index n = split.front().size();
    std::vector<Eigen::VectorXd> centered;
    Eigen::VectorXd means(m);
    double mean_var = 0.0;
    for (Index c = 0; c < m; ++c) {
        means(c) = split[static_cast<std::size_t>(c)].mean();
        centered.emplace_back(split[static_cast<std::size_t>(c)].array() - means(c));
        mean_var += centered.back().squaredNorm() / static_cast<double>(n - 1);
    }
    mean_var /= static_cast<double>(m);
    const double nd = static_cast<double>(n);
    double var_plus = mean_var * (nd - 1.0) / nd;
    if (m > 1) var_plus += (means.array() - means.mean()).square().sum() / static_cast<double>(m - 1);
    if (!(var_plus > 0.0)) throw DegenerateInput("effective_sample_size: zero variance");

    auto acov_mean = [&](Index lag) {
        double s = 0.0;
        for (const auto& c : centered) s += c.head(n - lag).dot(c.tail(n - lag)) / nd;
        return s / static_cast<double>(m);
    };
    auto rho = [&](Index lag) { return 1.0 - (mean_var - acov_mean(lag)) / var_plus; };

    std::vector<double> rho_hat(static_cast<std::size_t>(n + 1), 0.0);
    rho_hat[0] = 1.0;
    double even = 1.0, odd = rho(1);
    rho_hat[1] = odd;
    Index t = 1;
    while (t < n - 4 && even + odd > 0.0) {
        even = rho(t + 1);
        odd = rho(t + 2);
        if (even + odd >= 0.0) {
            rho_hat[static_cast<std::size_t>(t + 1)] = even;
            rho_hat[static_cast<std::size_t>(t + 2)] = odd;
        }
        t += 2;
    }
    const Index max_t = t;
    if (rho_hat[static_cast<std::size_t>(max_t)] > 0.0)
        rho_hat[static_cast<std::size_t>(max_t + 1)] = rho_hat[static_cast<std::size_t>(max_t)];
    for (Index s = 1; s <= max_t - 3; s += 2) {
        auto& a = rho_hat[static_cast<std::size_t>(s + 1)];
        auto& b = rho_hat[static_cast<std::size_t>(s + 2)];
        const double prev = rho_hat[static_cast<std::size_t>(s - 1)] + rho_hat[static_cast<std::size_t>(s)];
        if (a + b > prev) {
            a = prev / 2.0;
            b = a;
        }
    }
    double tau = -1.0;
    for (Index s = 0; s <= max_t; ++s) tau += 2.0 * rho_hat[static_cast<std::size_t>(s)];
    tau += rho_hat[static_cast<std::size_t>(max_t + 1)];
    const double total = static_cast<double>(m) * nd;
    tau = std::max(tau, 1.0 / std::log10(total));
    return total / tau;
}

/// Number of rank values cut from each tail of {0..B} by a central `level` band.
inline int rank_band_tail(int b, double level)
{
    return static_cast<int>(std::floor(0.5 * (1.0 - level) * (b + 1) + 1e-9));
}

/// Fraction of ranks inside the central `level` band of the uniform distribution on {0..B}.
/// Under calibration each rank lands inside with probability close to `level`.
inline double coverage_interval_check(const std::vector<int>& ranks, int b, double level = 0.95)
{
    if (ranks.empty()) throw InvalidArgument("coverage_interval_check: no ranks");
    if (b < 1) throw InvalidArgument("coverage_interval_check: B must be positive");
    if (!(level > 0.0 && level < 1.0)) throw InvalidArgument("coverage_interval_check: level must lie in (0,1)");
    const int tail = rank_band_tail(b, level);
    int inside = 0;
    for (int r : ranks) {
        if (r < 0 || r > b) throw InvalidArgument("coverage_interval_check: rank outside [0, B]");
        inside += r >= tail && r <= b - tail;
    }
    return static_cast<double>(inside) / static_cast<double>(ranks.size());
}

inline double coverage_interval_check(const std::vector<SbcRank>& ranks, double level = 0.95)
{
    if (ranks.empty()) throw InvalidArgument("coverage_interval_check: no ranks");
    std::vector<int> r;
    for (const auto& s : ranks) {
        if (s.draws != ranks.front().draws) throw InvalidArgument("coverage_interval_check: ranks differ in B");
        r.push_back(s.rank);
    }
    return coverage_interval_check(r, ranks.front().draws, level);
}

struct UniformityTest {
    double statistic = 0.0;
    int dof = 0;
    double p_value = 1.0;
};

/// Pearson chi-square test of ranks on {0..B} against the discrete uniform, using `bins`
/// contiguous groups of rank values.
inline UniformityTest chi_square_uniformity(const std::vector<int>& ranks, int b, int bins = 20)
{
    if (ranks.empty()) throw InvalidArgument("chi_square_uniformity: no ranks");
    bins = std::min(bins, b + 1);
    if (bins < 2) throw InvalidArgument("chi_square_uniformity: need at least two bins");
    auto bin_of = [&](int r) { return static_cast<int>(static_cast<long long>(r) * bins / (b + 1)); };
    std::vector<double> expected(static_cast<std::size_t>(bins), 0.0), observed(expected);
    for (int r = 0; r <= b; ++r) expected[static_cast<std::size_t>(bin_of(r))] += 1.0;
    const auto n = static_cast<double>(ranks.size());
    for (auto& e : expected) e *= n / static_cast<double>(b + 1);
    for (int r : ranks) {
        if (r < 0 || r > b) throw InvalidArgument("chi_square_uniformity: rank outside [0, B]");
        observed[static_cast<std::size_t>(bin_of(r))] += 1.0;
    }
    UniformityTest t;
    for (int k = 0; k < bins; ++k) {
        const double d = observed[static_cast<std::size_t>(k)] - expected[static_cast<std::size_t>(k)];
        t.statistic += d * d / expected[static_cast<std::size_t>(k)];
    }
    t.dof = bins - 1;
    t.p_value = boost::math::cdf(boost::math::complement(boost::math::chi_squared_distribution<double>(t.dof), t.statistic));
    return t;
}

} // namespace carmm
