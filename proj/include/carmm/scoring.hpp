#pragma once

#include <algorithm>
#include <array>
#include <cmath>
#include <cstdint>
#include <limits>
#include <numeric>
#include <random>
#include <vector>

#include <Eigen/Dense>

#include "carmm/error.hpp"
#include "carmm/model.hpp"
#include "carmm/sampler.hpp"

namespace carmm {

/// Mid-p posterior predictive p-value per observation with T = identity.
inline Eigen::VectorXd marginal_ppp(const Eigen::VectorXd& y, const Eigen::MatrixXd& replicates)
{
    if (replicates.rows() < 1) throw InvalidArgument("marginal_ppp: need at least one replicate");
    if (replicates.cols() != y.size()) throw InvalidArgument("marginal_ppp: replicate width must equal m");
    const auto s = static_cast<double>(replicates.rows());
    Eigen::VectorXd p(y.size());
    for (Index j = 0; j < y.size(); ++j) {
        const auto below = static_cast<double>((replicates.col(j).array() < y(j)).count());
        const auto equal = static_cast<double>((replicates.col(j).array() == y(j)).count());
        p(j) = (below + 0.5 * equal) / s;
    }
    return p;
}

struct ConditionalMoments {
    double mean = 0.0;
    double variance = 0.0;
};

/// phi_i | phi_{-i} under CAR(alpha, tau): N(alpha * sum_{j~i} phi_j / d_i, 1 / (tau d_i)).
/// alpha = 1 gives the ICAR conditional.
inline ConditionalMoments car_full_conditional(const AdjacencyGraph& g, double alpha, double tau,
                                               const Eigen::VectorXd& phi, Index i)
{
    g.check_index(i);
    double s = 0.0;
    for (Index j : g.neighbours(i)) s += phi(j);
    const double d = g.degrees()(i);
    return {alpha * s / d, 1.0 / (tau * d)};
}

/// Replicated outcomes, one per stored draw (rows ordered chain by chain).
template <class Rng>
Eigen::MatrixXd posterior_predictive_replicates(const PosteriorModel& model, const PosteriorSamples& samples, Rng& rng)
{
    Eigen::MatrixXd reps(samples.total_draws(), model.spec().memberships());
    Index r = 0;
    for (std::size_t c = 0; c < samples.chains.size(); ++c)
        for (Index d = 0; d < samples.draws_per_chain(); ++d, ++r) {
            const ParamVector t = draw_params(model, samples, c, d);
            reps.row(r) = simulate_counts(model.spec().likelihood, model.log_mean(t), t.psi, rng).transpose();
        }
    return reps;
}

/// Mixed replicates: every areal effect is redrawn from its full conditional given the
/// draw's other effects (one sweep, all sites conditioned on the stored draw), pushed through H,
/// and used to simulate outcomes.
template <class Rng>
Eigen::MatrixXd mixed_replicates(const PosteriorModel& model, const PosteriorSamples& samples, Rng& rng)
{
    const auto& spec = model.spec();
    if (spec.spatial == Spatial::None) throw InvalidArgument("mixed_ppp: model has no spatial random effect");
    const auto& g = spec.car->graph();
    const auto& h = spec.h->weights();
    const Index n = spec.areas();
    std::normal_distribution<double> z;
    Eigen::MatrixXd reps(samples.total_draws(), spec.memberships());
    Index r = 0;
    for (std::size_t c = 0; c < samples.chains.size(); ++c)
        for (Index d = 0; d < samples.draws_per_chain(); ++d, ++r) {
            const ParamVector t = draw_params(model, samples, c, d);
            const DerivedQuantities dq = model.derived(t);
            const double alpha = spec.spatial == Spatial::ICAR ? 1.0 : t.alpha;
            Eigen::VectorXd phi_rep(n);
            for (Index i = 0; i < n; ++i) {
                const auto cm = car_full_conditional(g, alpha, t.tau, dq.phi, i);
                phi_rep(i) = cm.mean + std::sqrt(cm.variance) * z(rng);
            }
            Eigen::VectorXd eta = (model.membership_covariates() * t.beta + h * phi_rep).array() + t.gamma;
            eta += spec.offsets.array().log().matrix();
            reps.row(r) = simulate_counts(spec.likelihood, eta, t.psi, rng).transpose();
        }
    return reps;
}

inline Eigen::VectorXd mixed_ppp(const PosteriorModel& model, const PosteriorSamples& samples, std::uint64_t seed)
{
    std::mt19937_64 rng(seed);
    return marginal_ppp(model.counts(), mixed_replicates(model, samples, rng));
}

/// S x m pointwise log-likelihood of the stored draws.
inline Eigen::MatrixXd pointwise_log_likelihood_matrix(const PosteriorModel& model, const PosteriorSamples& samples)
{
    Eigen::MatrixXd ll(samples.total_draws(), model.spec().memberships());
    Index r = 0;
    for (std::size_t c = 0; c < samples.chains.size(); ++c)
        for (Index d = 0; d < samples.draws_per_chain(); ++d, ++r)
            ll.row(r) = model.pointwise_log_likelihood(draw_params(model, samples, c, d)).transpose();
    return ll;
}

// ---- PSIS-LOO ----

struct GeneralizedPareto {
    double k = 0.0;
    double sigma = 1.0;
};

namespace detail {

inline double log_sum_exp(const Eigen::VectorXd& v)
{
    const double mx = v.maxCoeff();
    if (!std::isfinite(mx)) return mx;
    return mx + std::log((v.array() - mx).exp().sum());
}

/// Zhang & Stephens profile-posterior estimate of the generalized Pareto shape and
/// scale for sorted positive exceedances, with the shape shrunk toward 0.5 by a weakly
/// informative prior worth 10 observations.
inline GeneralizedPareto fit_generalized_pareto(const std::vector<double>& x)
{
    const auto n = static_cast<Index>(x.size());
    const double prior = 3.0;
    const Index grid = 30 + static_cast<Index>(std::floor(std::sqrt(static_cast<double>(n))));
    const double xstar = x[static_cast<std::size_t>(std::floor(static_cast<double>(n) / 4.0 + 0.5)) - 1];
    const double xmax = x.back();
    Eigen::VectorXd theta(grid), logl(grid);
    for (Index j = 0; j < grid; ++j) {
        theta(j) = 1.0 / xmax + (1.0 - std::sqrt(static_cast<double>(grid) / (static_cast<double>(j + 1) - 0.5))) /
                                    prior / xstar;
        double kk = 0.0;
        for (double xi : x) kk += std::log1p(-theta(j) * xi);
        kk /= static_cast<double>(n);
        logl(j) = static_cast<double>(n) * (std::log(-theta(j) / kk) - kk - 1.0);
    }
    const Eigen::VectorXd w = (logl.array() - log_sum_exp(logl)).exp();
    const double theta_hat = theta.dot(w);
    double k = 0.0;
    for (double xi : x) k += std::log1p(-theta_hat * xi);
    k /= static_cast<double>(n);
    GeneralizedPareto out;
    out.sigma = -k / theta_hat;
    const double a = 10.0, nd = static_cast<double>(n);
    out.k = k * nd / (nd + a) + a * 0.5 / (nd + a);
    return out;
}

inline double gpd_quantile(double p, const GeneralizedPareto& g)
{
    if (std::abs(g.k) < 1e-12) return -g.sigma * std::log1p(-p);
    return g.sigma * std::expm1(-g.k * std::log1p(-p)) / g.k;
}

} // namespace detail

struct PsisResult {
    double elpd = 0.0;
    double se = 0.0;
    Eigen::VectorXd pointwise;
    Eigen::VectorXd pareto_k;   // 0 where smoothing fell back
    std::vector<bool> fallback; // tail degenerate or too short: raw ratios used
    int high_k = 0;             // observations with k > 0.7
};

inline constexpr double kParetoKWarning = 0.7;

/// Log importance weights for one observation after Pareto smoothing of the largest 20%.
inline Eigen::VectorXd psis_log_weights(const Eigen::VectorXd& log_lik, double& k_out, bool& fallback)
{
    const Index s = log_lik.size();
    Eigen::VectorXd lw = -log_lik;
    lw.array() -= lw.maxCoeff();
    const auto tail = static_cast<Index>(std::ceil(0.2 * static_cast<double>(s)));
    k_out = 0.0;
    fallback = true;
    if (tail < 5 || tail >= s) return lw;

    std::vector<Index> order(static_cast<std::size_t>(s));
    std::iota(order.begin(), order.end(), Index{0});
    std::stable_sort(order.begin(), order.end(), [&](Index a, Index b) { return lw(a) < lw(b); });
    const double cutoff = lw(order[static_cast<std::size_t>(s - tail - 1)]);
    const double exp_cutoff = std::exp(cutoff);
    std::vector<double> exceed;
    for (Index q = s - tail; q < s; ++q) exceed.push_back(std::exp(lw(order[static_cast<std::size_t>(q)])) - exp_cutoff);
    if (!(exceed.back() > 0.0) || exceed.front() == exceed.back()) return lw;
    // zero exceedances make the profile likelihood degenerate; nudge to the smallest positive
    for (auto& e : exceed) e = std::max(e, std::numeric_limits<double>::min());

    const GeneralizedPareto gp = detail::fit_generalized_pareto(exceed);
    if (!std::isfinite(gp.k) || !std::isfinite(gp.sigma) || !(gp.sigma > 0.0)) return lw;
    for (Index z = 0; z < tail; ++z) {
        const double p = (static_cast<double>(z) + 0.5) / static_cast<double>(tail);
        const double smoothed = std::log(detail::gpd_quantile(p, gp) + exp_cutoff);
        lw(order[static_cast<std::size_t>(s - tail + z)]) = std::min(smoothed, 0.0);
    }
    k_out = gp.k;
    fallback = false;
    return lw;
}

/// PSIS-LOO estimate of elpd from an S x m matrix of pointwise log-likelihoods.
inline PsisResult psis_loo_elpd(const Eigen::MatrixXd& log_lik)
{
    const Index s = log_lik.rows(), m = log_lik.cols();
    if (s < 2 || m < 1) throw InvalidArgument("psis_loo_elpd: need at least 2 draws and 1 observation");
    if (!log_lik.allFinite()) throw InvalidArgument("psis_loo_elpd: non-finite log-likelihood");
    PsisResult out;
    out.pointwise.resize(m);
    out.pareto_k.resize(m);
    out.fallback.assign(static_cast<std::size_t>(m), false);
    for (Index j = 0; j < m; ++j) {
        double k = 0.0;
        bool fb = false;
        const Eigen::VectorXd lw = psis_log_weights(log_lik.col(j), k, fb);
        out.pointwise(j) = detail::log_sum_exp(lw + log_lik.col(j)) - detail::log_sum_exp(lw);
        out.pareto_k(j) = k;
        out.fallback[static_cast<std::size_t>(j)] = fb;
        if (k > kParetoKWarning) ++out.high_k;
    }
    out.elpd = out.pointwise.sum();
    const double mean = out.pointwise.mean();
    const double var = m > 1 ? (out.pointwise.array() - mean).square().sum() / static_cast<double>(m - 1) : 0.0;
    out.se = std::sqrt(static_cast<double>(m) * var);
    return out;
}

struct ElpdDifference {
    double diff = 0.0;
    double se = 0.0;
};

/// elpd_A - elpd_B with the paired standard error sqrt(m Var(a_j - b_j)).
inline ElpdDifference elpd_diff(const Eigen::VectorXd& pointwise_a, const Eigen::VectorXd& pointwise_b)
{
    if (pointwise_a.size() != pointwise_b.size() || pointwise_a.size() == 0)
        throw InvalidArgument("elpd_diff: models were not scored on the same observations");
    const Eigen::VectorXd d = pointwise_a - pointwise_b;
    const Index m = d.size();
    const double mean = d.mean();
    const double var = m > 1 ? (d.array() - mean).square().sum() / static_cast<double>(m - 1) : 0.0;
    return {d.sum(), std::sqrt(static_cast<double>(m) * var)};
}

/// Normalisation of the replicate-pair term of the ranked probability score.
enum class RpsPairNormalization {
    Literal,  ///< 1/B on the B/2-term pair sum, as written
    HalfPairs ///< 1/(B/2), i.e. the mean over pairs
};

inline double rps_mean(const Eigen::VectorXd& y, const Eigen::MatrixXd& replicates,
                       RpsPairNormalization norm = RpsPairNormalization::Literal)
{
    const Index b = replicates.rows();
    if (b < 2 || b % 2 != 0) throw InvalidArgument("rps_mean: replicate count must be even and positive");
    if (replicates.cols() != y.size()) throw InvalidArgument("rps_mean: replicate width must equal m");
    const double pair_scale = norm == RpsPairNormalization::Literal ? 1.0 / static_cast<double>(b)
                                                                    : 2.0 / static_cast<double>(b);
    const Index half = b / 2;
    double total = 0.0;
    for (Index j = 0; j < y.size(); ++j) {
        const auto col = replicates.col(j);
        const double abs_dev = (col.array() - y(j)).abs().sum() / static_cast<double>(b);
        const double pairs = (col.head(half) - col.tail(half)).cwiseAbs().sum() * pair_scale;
        total += abs_dev - pairs;
    }
    return total / static_cast<double>(y.size());
}

/// Dawid-Sebastiani score with the replicate mean and (B-1)-denominator standard deviation.
inline double dss_mean(const Eigen::VectorXd& y, const Eigen::MatrixXd& replicates)
{
    const Index b = replicates.rows();
    if (b < 2) throw InvalidArgument("dss_mean: need at least two replicates");
    if (replicates.cols() != y.size()) throw InvalidArgument("dss_mean: replicate width must equal m");
    double total = 0.0;
    for (Index j = 0; j < y.size(); ++j) {
        const double mean = replicates.col(j).mean();
        const double var = (replicates.col(j).array() - mean).square().sum() / static_cast<double>(b - 1);
        if (!(var > 0.0))
            throw DegenerateInput("dss_mean: replicates of observation " + std::to_string(j) + " have zero variance");
        const double sd = std::sqrt(var);
        total += ((y(j) - mean) / sd) * ((y(j) - mean) / sd) + 2.0 * std::log(sd);
    }
    return total / static_cast<double>(y.size());
}

/// Per-area fraction of draws with rho > 1, from a B x n matrix of relative risks.
inline Eigen::VectorXd exceedance_prob(const Eigen::MatrixXd& rho_samples)
{
    if (rho_samples.rows() < 1) throw InvalidArgument("exceedance_prob: no samples");
    Eigen::VectorXd p(rho_samples.cols());
    for (Index i = 0; i < rho_samples.cols(); ++i)
        p(i) = static_cast<double>((rho_samples.col(i).array() > 1.0).count()) / static_cast<double>(rho_samples.rows());
    return p;
}

struct QuintileSummary {
    Index count = 0;
    double mean = 0.0;
    double lower = 0.0; // 2.5% quantile
    double upper = 0.0; // 97.5% quantile
};

namespace detail {

/// Linear-interpolation quantile of sorted data.
inline double sorted_quantile(const std::vector<double>& v, double q)
{
    const double pos = q * static_cast<double>(v.size() - 1);
    const auto lo = static_cast<std::size_t>(std::floor(pos));
    const std::size_t hi = std::min(lo + 1, v.size() - 1);
    return v[lo] + (pos - static_cast<double>(lo)) * (v[hi] - v[lo]);
}

} // namespace detail

/// Areas sorted by covariate (ties by ascending area index) and cut into five groups of
/// near-equal size; each group summarises its members' posterior mean relative risks.
inline std::array<QuintileSummary, 5> quintile_risk_profile(const Eigen::VectorXd& rho_means, const Eigen::VectorXd& covariate)
{
    const Index n = rho_means.size();
    if (covariate.size() != n) throw InvalidArgument("quintile_risk_profile: length mismatch");
    if (n < 5) throw InvalidArgument("quintile_risk_profile: need at least 5 areas");
    std::vector<Index> order(static_cast<std::size_t>(n));
    std::iota(order.begin(), order.end(), Index{0});
    std::stable_sort(order.begin(), order.end(), [&](Index a, Index b) { return covariate(a) < covariate(b); });
    std::array<QuintileSummary, 5> out;
    for (Index q = 0; q < 5; ++q) {
        const Index begin = q * n / 5, end = (q + 1) * n / 5;
        std::vector<double> vals;
        for (Index k = begin; k < end; ++k) vals.push_back(rho_means(order[static_cast<std::size_t>(k)]));
        std::sort(vals.begin(), vals.end());
        auto& s = out[static_cast<std::size_t>(q)];
        s.count = end - begin;
        s.mean = std::accumulate(vals.begin(), vals.end(), 0.0) / static_cast<double>(vals.size());
        s.lower = detail::sorted_quantile(vals, 0.025);
        s.upper = detail::sorted_quantile(vals, 0.975);
    }
    return out;
}

/// Model-comparison summary of one fitted run.
struct ScoreReport {
    double elpd_loo = 0.0;
    double elpd_se = 0.0;
    Eigen::VectorXd elpd_pointwise;
    Eigen::VectorXd pareto_k;
    double rps_mean = 0.0;
    double dss_mean = 0.0;
    Eigen::VectorXd ppp;
    Eigen::VectorXd mixed_ppp; // empty for spatial-free models
};

} // namespace carmm
