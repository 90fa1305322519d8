#pragma once

#include <algorithm>
#include <cmath>
#include <concepts>
#include <cstdint>
#include <random>
#include <string>
#include <thread>
#include <vector>

#include <Eigen/Dense>

#include "carmm/error.hpp"
#include "carmm/model.hpp"

namespace carmm {

template <class T>
concept DifferentiableTarget = requires(const T& t, const Eigen::VectorXd& x, Eigen::VectorXd& y) {
    { t.dimension() } -> std::convertible_to<Index>;
    { t.log_density_gradient(x) } -> std::same_as<LogDensityGradient>;
    t.canonicalize(y);
};

struct SamplerConfig {
    int chains = 4;
    int iterations = 2000; // per chain, warmup included
    double warmup_fraction = 0.5;
    int thin = 1;
    int leapfrog_steps = 16;
    double target_accept = 0.8;
    std::uint64_t seed = 1;
    double init_radius = 2.0;
    double step_jitter = 0.1;
    int stall_limit = 500;
    double divergence_threshold = 1000.0;
    unsigned threads = 1;

    int warmup() const { return static_cast<int>(std::lround(warmup_fraction * iterations)); }
    int kept_per_chain() const { return (iterations - warmup()) / thin; }

    void validate() const
    {
        if (chains < 1) throw InvalidArgument("sampler: chains must be positive");
        if (iterations < 1) throw InvalidArgument("sampler: iterations must be positive");
        if (!(warmup_fraction >= 0.0 && warmup_fraction < 1.0) || warmup() >= iterations)
            throw InvalidArgument("sampler: warmup must be shorter than the run");
        if (thin < 1) throw InvalidArgument("sampler: thinning must be >= 1");
        if (leapfrog_steps < 1) throw InvalidArgument("sampler: leapfrog steps must be >= 1");
        if (!(target_accept > 0.0 && target_accept < 1.0))
            throw InvalidArgument("sampler: target acceptance must lie in (0,1)");
        if (kept_per_chain() < 1) throw InvalidArgument("sampler: no draws survive warmup and thinning");
        if (!(step_jitter >= 0.0 && step_jitter < 1.0)) throw InvalidArgument("sampler: step jitter must lie in [0,1)");
    }
};

struct ChainResult {
    Eigen::MatrixXd draws; // kept draws x dimension, unconstrained scale
    Eigen::VectorXd log_density;
    double accept_rate = 0.0; // mean acceptance statistic after warmup
    int divergences = 0;       // post-warmup
    int warmup_divergences = 0;
    double step_size = 0.0;
    Eigen::VectorXd inv_metric;
};

namespace detail {

/// Nesterov dual averaging of log step size toward a target acceptance statistic.
class DualAveraging {
public:
    explicit DualAveraging(double delta) : delta_(delta) {}

    void restart(double step)
    {
        mu_ = std::log(10.0 * step);
        h_bar_ = 0.0;
        log_bar_ = 0.0;
        count_ = 0;
    }

    double update(double accept_stat)
    {
        ++count_;
        const double t = static_cast<double>(count_);
        const double eta = 1.0 / (t + kT0);
        h_bar_ = (1.0 - eta) * h_bar_ + eta * (delta_ - accept_stat);
        const double log_step = mu_ - std::sqrt(t) / kGamma * h_bar_;
        const double w = std::pow(t, -kKappa);
        log_bar_ = w * log_step + (1.0 - w) * log_bar_;
        return std::exp(log_step);
    }

    double final_step() const { return std::exp(log_bar_); }

private:
    static constexpr double kGamma = 0.05;
    static constexpr double kT0 = 10.0;
    static constexpr double kKappa = 0.75;
    double delta_;
    double mu_ = 0.0, h_bar_ = 0.0, log_bar_ = 0.0;
    long count_ = 0;
};

/// Welford running variance for metric estimation.
class VarianceEstimator {
public:
    explicit VarianceEstimator(Index dim) : mean_(Eigen::VectorXd::Zero(dim)), m2_(Eigen::VectorXd::Zero(dim)) {}
    void add(const Eigen::VectorXd& x)
    {
        ++n_;
        const Eigen::VectorXd delta = x - mean_;
        mean_ += delta / static_cast<double>(n_);
        m2_ += delta.cwiseProduct(x - mean_);
    }
    long count() const { return n_; }
    /// Sample variance shrunk toward 1e-3, as in common HMC practice.
    Eigen::VectorXd regularized() const
    {
        const double n = static_cast<double>(n_);
        const Eigen::VectorXd var = m2_ / (n - 1.0);
        return (n / (n + 5.0)) * var.array() + 1e-3 * (5.0 / (n + 5.0));
    }
    void reset()
    {
        n_ = 0;
        mean_.setZero();
        m2_.setZero();
    }

private:
    long n_ = 0;
    Eigen::VectorXd mean_, m2_;
};

/// Metric adaptation windows: fast initial buffer, doubling slow windows, fast terminal buffer.
struct AdaptationSchedule {
    int warmup = 0;
    int init_buffer = 75;
    int term_buffer = 50;
    int base_window = 25;
    bool adapt_metric = true;
    std::vector<int> window_ends; // iteration index (0-based) closing each slow window

    explicit AdaptationSchedule(int w) : warmup(w)
    {
        if (warmup < 20) {
            adapt_metric = false;
            return;
        }
        if (init_buffer + term_buffer + base_window > warmup) {
            init_buffer = static_cast<int>(0.15 * warmup);
            term_buffer = static_cast<int>(0.1 * warmup);
            base_window = warmup - init_buffer - term_buffer;
        }
        const int slow_end = warmup - term_buffer;
        int start = init_buffer, size = base_window;
        while (start < slow_end) {
            int end = start + size;
            if (end + 2 * size > slow_end) end = slow_end;
            window_ends.push_back(end - 1);
            start = end;
            size *= 2;
        }
    }

    bool in_slow_phase(int it) const { return adapt_metric && it >= init_buffer && it < warmup - term_buffer; }
};

} // namespace detail

template <DifferentiableTarget Target>
class HmcChain {
public:
    HmcChain(const Target& target, const SamplerConfig& cfg, std::uint64_t chain_seed)
        : target_(target), cfg_(cfg), rng_(chain_seed), dim_(target.dimension()),
          inv_metric_(Eigen::VectorXd::Ones(target.dimension()))
    {
    }

    ChainResult run()
    {
        initialize();
        const int warmup = cfg_.warmup();
        detail::AdaptationSchedule schedule(warmup);
        detail::DualAveraging da(cfg_.target_accept);
        detail::VarianceEstimator var(dim_);
        step_ = find_reasonable_step(step_ > 0 ? step_ : 1.0);
        da.restart(step_);
        std::size_t next_window = 0;

        ChainResult res;
        res.draws.resize(cfg_.kept_per_chain(), dim_);
        res.log_density.resize(cfg_.kept_per_chain());
        int kept = 0, stall = 0;
        double accept_sum = 0.0;
        std::uniform_real_distribution<double> jitter(1.0 - cfg_.step_jitter, 1.0 + cfg_.step_jitter);

        for (int it = 0; it < cfg_.iterations; ++it) {
            const bool warming = it < warmup;
            const double eps = step_ * (cfg_.step_jitter > 0 ? jitter(rng_) : 1.0);
            const Transition tr = transition(eps);
            if (tr.divergent) (warming ? res.warmup_divergences : res.divergences) += 1;
            stall = tr.accepted ? 0 : stall + 1;
            if (stall >= cfg_.stall_limit)
                throw SamplerFailure("sampler stalled: " + std::to_string(stall) +
                                     " consecutive rejections at iteration " + std::to_string(it));

            if (warming) {
                step_ = da.update(tr.accept_stat);
                if (schedule.in_slow_phase(it)) {
                    var.add(x_);
                    if (next_window < schedule.window_ends.size() && it == schedule.window_ends[next_window]) {
                        inv_metric_ = var.regularized();
                        var.reset();
                        ++next_window;
                        step_ = find_reasonable_step(step_);
                        da.restart(step_);
                    }
                }
                if (it == warmup - 1) step_ = da.final_step();
            } else {
                accept_sum += tr.accept_stat;
                const int post = it - warmup;
                if (post % cfg_.thin == cfg_.thin - 1 && kept < res.draws.rows()) {
                    res.draws.row(kept) = x_.transpose();
                    res.log_density(kept) = logp_;
                    ++kept;
                }
            }
        }
        res.accept_rate = accept_sum / std::max(1, cfg_.iterations - warmup);
        res.step_size = step_;
        res.inv_metric = inv_metric_;
        return res;
    }

private:
    struct Transition {
        bool accepted = false;
        bool divergent = false;
        double accept_stat = 0.0;
    };

    void initialize()
    {
        std::uniform_real_distribution<double> u(-cfg_.init_radius, cfg_.init_radius);
        for (int attempt = 0; attempt < 100; ++attempt) {
            Eigen::VectorXd x(dim_);
            for (Index i = 0; i < dim_; ++i) x(i) = u(rng_);
            target_.canonicalize(x);
            auto ld = target_.log_density_gradient(x);
            if (!ld.rejected) {
                x_ = std::move(x);
                logp_ = ld.value;
                grad_ = std::move(ld.gradient);
                return;
            }
        }
        throw SamplerFailure("sampler: no finite initial point found in 100 attempts");
    }

    Eigen::VectorXd draw_momentum()
    {
        std::normal_distribution<double> z;
        Eigen::VectorXd p(dim_);
        for (Index i = 0; i < dim_; ++i) p(i) = z(rng_) / std::sqrt(inv_metric_(i));
        return p;
    }

    double kinetic(const Eigen::VectorXd& p) const { return 0.5 * (p.array().square() * inv_metric_.array()).sum(); }

    /// L leapfrog steps from the current state; returns the end point's Hamiltonian (inf on failure).
    double integrate(double eps, int steps, Eigen::VectorXd& x, Eigen::VectorXd& p, Eigen::VectorXd& g,
                     double& logp) const
    {
        for (int l = 0; l < steps; ++l) {
            p += 0.5 * eps * g;
            x += eps * inv_metric_.cwiseProduct(p);
            target_.canonicalize(x);
            auto ld = target_.log_density_gradient(x);
            if (ld.rejected) return std::numeric_limits<double>::infinity();
            logp = ld.value;
            g = std::move(ld.gradient);
            p += 0.5 * eps * g;
        }
        return -logp + kinetic(p);
    }

    Transition transition(double eps)
    {
        Eigen::VectorXd p = draw_momentum();
        const double h0 = -logp_ + kinetic(p);
        Eigen::VectorXd x = x_, g = grad_;
        double logp = logp_;
        const double h1 = integrate(eps, cfg_.leapfrog_steps, x, p, g, logp);
        Transition tr;
        const double dh = h1 - h0;
        if (!std::isfinite(h1) || dh > cfg_.divergence_threshold) {
            tr.divergent = true;
            return tr;
        }
        tr.accept_stat = dh <= 0 ? 1.0 : std::exp(-dh);
        std::uniform_real_distribution<double> u(0.0, 1.0);
        if (u(rng_) < tr.accept_stat) {
            x_ = std::move(x);
            grad_ = std::move(g);
            logp_ = logp;
            tr.accepted = true;
        }
        return tr;
    }

    /// Doubling/halving search for a step whose one-step acceptance crosses 0.8.
    double find_reasonable_step(double eps)
    {
        auto one_step_delta = [&](double e) {
            Eigen::VectorXd p = draw_momentum();
            const double h0 = -logp_ + kinetic(p);
            Eigen::VectorXd x = x_, g = grad_;
            double logp = logp_;
            const double h1 = integrate(e, 1, x, p, g, logp);
            return std::isfinite(h1) ? h0 - h1 : -std::numeric_limits<double>::infinity();
        };
        double delta = one_step_delta(eps);
        const int direction = delta > std::log(0.8) ? 1 : -1;
        for (int k = 0; k < 60; ++k) {
            const double next = direction > 0 ? 2.0 * eps : 0.5 * eps;
            delta = one_step_delta(next);
            if (direction > 0 && !(delta > std::log(0.8))) break;
            eps = next;
            if (direction < 0 && delta > std::log(0.8)) break;
        }
        return eps;
    }

    const Target& target_;
    SamplerConfig cfg_;
    std::mt19937_64 rng_;
    Index dim_;
    Eigen::VectorXd inv_metric_;
    Eigen::VectorXd x_, grad_;
    double logp_ = 0.0;
    double step_ = 0.0;
};

/// Per-chain RNG seed derived from the run seed and the chain index.
inline std::uint64_t chain_seed(std::uint64_t seed, int chain)
{
    std::seed_seq seq{static_cast<std::uint32_t>(seed), static_cast<std::uint32_t>(seed >> 32),
                      static_cast<std::uint32_t>(chain), 0x9e3779b9u};
    std::uint32_t out[2];
    seq.generate(out, out + 2);
    return (static_cast<std::uint64_t>(out[0]) << 32) | out[1];
}

/// Independent HMC chains; results are identical whatever the thread count.
template <DifferentiableTarget Target>
std::vector<ChainResult> run_hmc(const Target& target, const SamplerConfig& cfg)
{
    cfg.validate();
    std::vector<ChainResult> out(static_cast<std::size_t>(cfg.chains));
    std::vector<std::exception_ptr> errors(out.size());
    auto work = [&](int c) {
        try {
            HmcChain<Target> chain(target, cfg, chain_seed(cfg.seed, c));
            out[static_cast<std::size_t>(c)] = chain.run();
        } catch (...) {
            errors[static_cast<std::size_t>(c)] = std::current_exception();
        }
    };
    const unsigned threads = std::max(1u, std::min<unsigned>(cfg.threads, static_cast<unsigned>(cfg.chains)));
    if (threads == 1) {
        for (int c = 0; c < cfg.chains; ++c) work(c);
    } else {
        std::vector<std::jthread> pool;
        std::atomic<int> next{0};
        for (unsigned t = 0; t < threads; ++t)
            pool.emplace_back([&] {
                for (int c = next++; c < cfg.chains; c = next++) work(c);
            });
    }
    for (auto& e : errors)
        if (e) std::rethrow_exception(e);
    return out;
}

struct ChainStats {
    double accept_rate = 0.0;
    int divergences = 0;
    int warmup_divergences = 0;
    double step_size = 0.0;
    std::uint64_t seed = 0;
};

/// Posterior draws of a model: per chain, one row per kept draw, one column per named scalar
/// (parameters followed by derived phi, rho and rho~).
struct PosteriorSamples {
    std::vector<std::string> names;
    std::vector<Eigen::MatrixXd> chains;
    std::vector<Eigen::MatrixXd> unconstrained;
    std::vector<ChainStats> stats;

    Index draws_per_chain() const { return chains.empty() ? 0 : chains.front().rows(); }
    Index total_draws() const { return draws_per_chain() * static_cast<Index>(chains.size()); }

    Index column(const std::string& name) const
    {
        auto it = std::find(names.begin(), names.end(), name);
        if (it == names.end()) throw InvalidArgument("no posterior column named '" + name + "'");
        return static_cast<Index>(it - names.begin());
    }

    /// Column c split by chain.
    std::vector<Eigen::VectorXd> by_chain(Index c) const
    {
        std::vector<Eigen::VectorXd> out;
        for (const auto& ch : chains) out.emplace_back(ch.col(c));
        return out;
    }

    Eigen::MatrixXd pooled() const
    {
        Eigen::MatrixXd all(total_draws(), static_cast<Index>(names.size()));
        Index r = 0;
        for (const auto& ch : chains) {
            all.middleRows(r, ch.rows()) = ch;
            r += ch.rows();
        }
        return all;
    }

    int divergences() const
    {
        int d = 0;
        for (const auto& s : stats) d += s.divergences;
        return d;
    }
};

/// Column names in output order: gamma, beta[k], alpha, tau, psi, phi[i], phi_tilde[j], rho[i], rho_tilde[j].
/// Spatial-free models omit alpha, tau and the phi blocks; phi_tilde only appears for inverse models.
inline std::vector<std::string> quantity_names(const PosteriorModel& model)
{
    const auto& s = model.spec();
    std::vector<std::string> names{"gamma"};
    auto idx = [](const std::string& base, Index k) { return base + "[" + std::to_string(k + 1) + "]"; };
    for (Index k = 0; k < s.covariates(); ++k) names.push_back(idx("beta", k));
    if (s.has_alpha()) names.emplace_back("alpha");
    if (s.has_tau()) names.emplace_back("tau");
    if (s.has_psi()) names.emplace_back("psi");
    if (s.spatial != Spatial::None) {
        for (Index i = 0; i < s.areas(); ++i) names.push_back(idx("phi", i));
        if (s.parameterisation == Parameterisation::Inverse)
            for (Index j = 0; j < s.memberships(); ++j) names.push_back(idx("phi_tilde", j));
    }
    for (Index i = 0; i < s.areas(); ++i) names.push_back(idx("rho", i));
    for (Index j = 0; j < s.memberships(); ++j) names.push_back(idx("rho_tilde", j));
    return names;
}

inline Eigen::VectorXd flatten(const PosteriorModel& model, const ParamVector& t)
{
    const auto& s = model.spec();
    const DerivedQuantities d = model.derived(t);
    std::vector<double> v{t.gamma};
    for (Index k = 0; k < t.beta.size(); ++k) v.push_back(t.beta(k));
    if (s.has_alpha()) v.push_back(t.alpha);
    if (s.has_tau()) v.push_back(t.tau);
    if (s.has_psi()) v.push_back(t.psi);
    if (s.spatial != Spatial::None) {
        for (Index i = 0; i < d.phi.size(); ++i) v.push_back(d.phi(i));
        if (s.parameterisation == Parameterisation::Inverse)
            for (Index j = 0; j < d.phi_tilde.size(); ++j) v.push_back(d.phi_tilde(j));
    }
    for (Index i = 0; i < d.log_rho.size(); ++i) v.push_back(std::exp(d.log_rho(i)));
    for (Index j = 0; j < d.log_rho_tilde.size(); ++j) v.push_back(std::exp(d.log_rho_tilde(j)));
    return Eigen::Map<Eigen::VectorXd>(v.data(), static_cast<Index>(v.size()));
}

inline PosteriorSamples run_chains(const PosteriorModel& model, const SamplerConfig& cfg)
{
    ModelTarget target(model);
    auto results = run_hmc(target, cfg);
    PosteriorSamples out;
    out.names = quantity_names(model);
    for (std::size_t c = 0; c < results.size(); ++c) {
        auto& r = results[c];
        Eigen::MatrixXd flat(r.draws.rows(), static_cast<Index>(out.names.size()));
        for (Index d = 0; d < r.draws.rows(); ++d)
            flat.row(d) = flatten(model, model.from_unconstrained(r.draws.row(d).transpose())).transpose();
        out.chains.push_back(std::move(flat));
        out.unconstrained.push_back(std::move(r.draws));
        out.stats.push_back({r.accept_rate, r.divergences, r.warmup_divergences, r.step_size,
                             chain_seed(cfg.seed, static_cast<int>(c))});
    }
    return out;
}

/// Reconstructs the ParamVector of one stored draw.
inline ParamVector draw_params(const PosteriorModel& model, const PosteriorSamples& s, std::size_t chain, Index draw)
{
    return model.from_unconstrained(s.unconstrained.at(chain).row(draw).transpose());
}

} // namespace carmm
