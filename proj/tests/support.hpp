#pragma once

#include <memory>
#include <random>

#include "carmm/carmm.hpp"

namespace carmm::testing {

inline Eigen::MatrixXd gaussian_matrix(Index r, Index c, std::mt19937_64& rng, double sd = 1.0)
{
    std::normal_distribution<double> z(0.0, sd);
    Eigen::MatrixXd a(r, c);
    for (Index i = 0; i < r; ++i)
        for (Index j = 0; j < c; ++j) a(i, j) = z(rng);
    return a;
}

/// A small model on a rows x cols rook grid with m simulated memberships and offsets near 20.
inline ModelSpec small_spec(Likelihood lik, Parameterisation par, Spatial sp, Index rows, Index cols, Index m,
                            std::uint64_t seed, Index p = 2)
{
    std::mt19937_64 rng(seed);
    const auto g = make_grid(rows, cols);
    ModelSpec s;
    s.likelihood = lik;
    s.parameterisation = par;
    s.spatial = sp;
    s.car = std::make_shared<const CarPrior>(g);
    s.h = std::make_shared<const MembershipMatrix>(simulate_membership_matrix(g, m, rng));
    s.x = gaussian_matrix(g.size(), p, rng, 0.5);
    std::uniform_real_distribution<double> u(10.0, 30.0);
    s.offsets.resize(m);
    for (Index j = 0; j < m; ++j) s.offsets(j) = u(rng);
    return s;
}

/// Counts simulated at a moderate parameter point so the likelihood is informative.
inline Eigen::VectorXd simulated_counts(const ModelSpec& s, std::uint64_t seed)
{
    std::mt19937_64 rng(seed);
    Eigen::VectorXd eta = s.offsets.array().log();
    eta += s.h->weights() * (s.x * Eigen::VectorXd::Constant(s.covariates(), 0.3));
    return simulate_counts(s.likelihood, eta, 5.0, rng);
}

} // namespace carmm::testing

namespace carmm::testing {

struct LooComparison {
    PsisResult psis;
    Eigen::VectorXd exact; // log p(y_j | y_-j) from refits
};

/// PSIS-LOO from one fit against brute-force leave-one-out refits of a post-parameterised model.
inline LooComparison psis_vs_refit(const ModelSpec& spec, const Eigen::VectorXd& y, const SamplerConfig& cfg)
{
    const PosteriorModel full(spec, y);
    LooComparison out;
    out.psis = psis_loo_elpd(pointwise_log_likelihood_matrix(full, run_chains(full, cfg)));
    const Index m = spec.memberships();
    out.exact.resize(m);
    for (Index j = 0; j < m; ++j) {
        std::vector<Index> keep;
        for (Index r = 0; r < m; ++r)
            if (r != j) keep.push_back(r);
        ModelSpec s = spec;
        s.h = std::make_shared<const MembershipMatrix>(Eigen::MatrixXd(spec.h->weights()(keep, Eigen::all)));
        s.offsets = spec.offsets(keep);
        const PosteriorModel reduced(s, y(keep));
        const auto samples = run_chains(reduced, cfg);
        Eigen::VectorXd ll(samples.total_draws());
        Index k = 0;
        for (std::size_t c = 0; c < samples.chains.size(); ++c)
            for (Index d = 0; d < samples.draws_per_chain(); ++d, ++k)
                ll(k) = full.pointwise_log_likelihood(draw_params(reduced, samples, c, d))(j);
        out.exact(j) = detail::log_sum_exp(ll) - std::log(static_cast<double>(ll.size()));
    }
    return out;
}

/// Asymptotic Kolmogorov-Smirnov p-value of a sample against Uniform(0,1).
inline double ks_uniform_p_value(std::vector<double> v)
{
    std::sort(v.begin(), v.end());
    const auto n = static_cast<double>(v.size());
    double d = 0.0;
    for (std::size_t i = 0; i < v.size(); ++i) {
        d = std::max(d, static_cast<double>(i + 1) / n - v[i]);
        d = std::max(d, v[i] - static_cast<double>(i) / n);
    }
    const double lambda = (std::sqrt(n) + 0.12 + 0.11 / std::sqrt(n)) * d;
    double p = 0.0;
    for (int k = 1; k <= 100; ++k) p += 2.0 * ((k % 2) ? 1.0 : -1.0) * std::exp(-2.0 * k * k * lambda * lambda);
    return std::clamp(p, 0.0, 1.0);
}

} // namespace carmm::testing
