#pragma once

#include <algorithm>
#include <atomic>
#include <cmath>
#include <cstdint>
#include <functional>
#include <initializer_list>
#include <limits>
#include <memory>
#include <mutex>
#include <ostream>
#include <random>
#include <string>
#include <thread>
#include <vector>

#include <Eigen/Dense>

#include "carmm/car_prior.hpp"
#include "carmm/diagnostics.hpp"
#include "carmm/error.hpp"
#include "carmm/membership.hpp"
#include "carmm/model.hpp"
#include "carmm/sampler.hpp"
#include "carmm/spatial_graph.hpp"

namespace carmm {

/// Data-generation and MCMC parameterisations of one SBC scenario.
struct Scenario {
    Parameterisation data = Parameterisation::Post;
    Parameterisation mcmc = Parameterisation::Post;

    std::string label() const { return to_string(data) + "-" + to_string(mcmc); }
    bool involves_inverse() const
    {
        return data == Parameterisation::Inverse || mcmc == Parameterisation::Inverse;
    }
    friend bool operator==(const Scenario&, const Scenario&) = default;
};

inline Scenario parse_scenario(const std::string& s)
{
    const auto dash = s.find('-');
    if (dash == std::string::npos) throw InvalidArgument("scenario must look like 'post-inverse', got '" + s + "'");
    return {parse_parameterisation(s.substr(0, dash)), parse_parameterisation(s.substr(dash + 1))};
}

inline SamplerConfig default_sbc_sampler()
{
    SamplerConfig s;
    s.chains = 4;
    s.iterations = 1000;
    return s;
}

struct SbcStudyConfig {
    Index rows = 4;
    Index cols = 5;
    Adjacency adjacency = Adjacency::Rook;
    std::vector<Index> sizes{14, 20, 26};
    std::vector<Scenario> scenarios{{Parameterisation::Post, Parameterisation::Post}};
    Index covariates = 2;
    Likelihood likelihood = Likelihood::Poisson;
    PriorConfig priors;
    double offset_mean = 20.0;
    int replicates = 200;  // N
    int rank_draws = 200;  // B
    SamplerConfig sampler = default_sbc_sampler();
    double rhat_threshold = 1.01;
    int max_failures = -1; // sampler failures per cell before the study stops; -1 never stops
    unsigned threads = 1;  // replicates run concurrently
    std::uint64_t seed = 1;

    Index areas() const { return rows * cols; }
    Index largest_size() const { return *std::max_element(sizes.begin(), sizes.end()); }
    Index smallest_size() const { return *std::min_element(sizes.begin(), sizes.end()); }

    void validate() const
    {
        if (rows < 1 || cols < 1 || areas() < 2) throw InvalidArgument("sbc: grid must have at least two areas");
        if (sizes.empty() || scenarios.empty()) throw InvalidArgument("sbc: need at least one size and scenario");
        for (Index m : sizes)
            if (m < 1) throw InvalidArgument("sbc: membership sizes must be positive");
        for (const auto& sc : scenarios)
            for (Index m : sizes)
                if (sc.involves_inverse() && m > areas())
                    throw InvalidArgument("sbc: scenario " + sc.label() + " needs m <= n, got m=" + std::to_string(m) +
                                          ", n=" + std::to_string(areas()));
        if (covariates < 0) throw InvalidArgument("sbc: covariate count must be nonnegative");
        if (!(offset_mean > 0.0)) throw InvalidArgument("sbc: offset mean must be positive");
        if (replicates < 1) throw InvalidArgument("sbc: need at least one replicate");
        sampler.validate();
        if (rank_draws < 1 || rank_draws > sampler.chains * sampler.kept_per_chain())
            throw InvalidArgument("sbc: rank draws must lie in [1, stored draws]");
        if (!(rhat_threshold >= 1.0)) throw InvalidArgument("sbc: R-hat threshold must be >= 1");
    }
};

namespace detail {

inline std::uint64_t mix_seed(std::uint64_t seed, std::initializer_list<std::uint32_t> path)
{
    std::vector<std::uint32_t> words{static_cast<std::uint32_t>(seed), static_cast<std::uint32_t>(seed >> 32)};
    words.insert(words.end(), path.begin(), path.end());
    std::seed_seq seq(words.begin(), words.end());
    std::uint32_t out[2];
    seq.generate(out, out + 2);
    return (static_cast<std::uint64_t>(out[0]) << 32) | out[1];
}

inline Eigen::VectorXd min_max_normalize(Eigen::VectorXd v)
{
    const double lo = v.minCoeff(), hi = v.maxCoeff();
    if (!(hi > lo)) throw DegenerateInput("min-max normalisation of a constant column");
    return (v.array() - lo) / (hi - lo);
}

} // namespace detail

/// Quantities shared by every replicate of a study: graph, H at the largest size, covariates, offsets.
struct SbcDesign {
    std::shared_ptr<const CarPrior> car;
    MembershipMatrix h; // largest size; smaller sizes keep the leading rows
    Eigen::MatrixXd x;
    Eigen::VectorXd offsets;

    std::shared_ptr<const MembershipMatrix> membership(Index m) const
    {
        return std::make_shared<const MembershipMatrix>(h.truncated(m));
    }
};

inline SbcDesign make_design(const SbcStudyConfig& cfg)
{
    cfg.validate();
    std::mt19937_64 rng(detail::mix_seed(cfg.seed, {0u}));
    auto car = std::make_shared<const CarPrior>(make_grid(cfg.rows, cfg.cols, cfg.adjacency));
    MembershipMatrix h = simulate_membership_matrix(car->graph(), cfg.largest_size(), rng, cfg.smallest_size());
    std::normal_distribution<double> z;
    Eigen::MatrixXd x(cfg.areas(), cfg.covariates);
    for (Index k = 0; k < cfg.covariates; ++k) {
        Eigen::VectorXd col(cfg.areas());
        for (Index i = 0; i < cfg.areas(); ++i) col(i) = z(rng);
        x.col(k) = detail::min_max_normalize(col);
    }
    std::poisson_distribution<int> pois(cfg.offset_mean);
    Eigen::VectorXd e(cfg.largest_size());
    for (Index j = 0; j < e.size(); ++j) {
        int v = 0;
        while (v == 0) v = pois(rng); // zero expected counts are not admissible offsets
        e(j) = v;
    }
    return {std::move(car), std::move(h), std::move(x), std::move(e)};
}

/// Generating values of one replicate, before specialisation to a membership size.
struct SbcDraw {
    double gamma = 0.0;
    Eigen::VectorXd beta;
    double alpha = 0.5;
    double tau = 1.0;
    double psi = 1.0;
    Eigen::VectorXd phi;           // areal effect from the CAR prior (post generation)
    Eigen::VectorXd counts_post;   // outcomes at the largest size under post generation
    Eigen::VectorXd phi_tilde_inv; // membership effect at min(m_max, n) (inverse generation)
    Eigen::VectorXd counts_inv;
};

/// Truth and data of one replicate at one membership size and generation parameterisation.
struct SbcTruth {
    double gamma = 0.0;
    Eigen::VectorXd beta;
    double alpha = 0.5;
    double tau = 1.0;
    double psi = 1.0;
    Eigen::VectorXd phi;       // n
    Eigen::VectorXd phi_tilde; // m
    Eigen::VectorXd log_rho;   // n
    Eigen::VectorXd log_rho_tilde;
    Eigen::VectorXd y;

    /// Generating value of a named posterior column.
    double value(const std::string& name) const
    {
        auto component = [&](const std::string& base) -> Index {
            return std::stoll(name.substr(base.size() + 1, name.size() - base.size() - 2)) - 1;
        };
        if (name == "gamma") return gamma;
        if (name == "alpha") return alpha;
        if (name == "tau") return tau;
        if (name == "psi") return psi;
        if (name.rfind("beta[", 0) == 0) return beta(component("beta"));
        if (name.rfind("phi_tilde[", 0) == 0) return phi_tilde(component("phi_tilde"));
        if (name.rfind("phi[", 0) == 0) return phi(component("phi"));
        if (name.rfind("rho_tilde[", 0) == 0) return std::exp(log_rho_tilde(component("rho_tilde")));
        if (name.rfind("rho[", 0) == 0) return std::exp(log_rho(component("rho")));
        throw InvalidArgument("no generating value for column '" + name + "'");
    }
};

/// Draws the prior parameters and both data sets of replicate `r`.
inline SbcDraw draw_replicate(const SbcStudyConfig& cfg, const SbcDesign& design, int r)
{
    std::mt19937_64 rng(detail::mix_seed(cfg.seed, {1u, static_cast<std::uint32_t>(r)}));
    std::normal_distribution<double> z;
    std::uniform_real_distribution<double> unif;
    std::gamma_distribution<double> tau_law(cfg.priors.tau_shape, 1.0 / cfg.priors.tau_rate);
    std::gamma_distribution<double> psi_law(cfg.priors.psi_shape, 1.0 / cfg.priors.psi_rate);
    SbcDraw d;
    d.gamma = cfg.priors.coef_sd * z(rng);
    d.beta.resize(cfg.covariates);
    for (Index k = 0; k < cfg.covariates; ++k) d.beta(k) = cfg.priors.coef_sd * z(rng);
    do d.alpha = unif(rng);
    while (d.alpha <= 0.0);
    d.tau = tau_law(rng);
    d.psi = psi_law(rng);
    const CarParams p{d.alpha, d.tau};
    d.phi = sample_prior(*design.car, p, rng);

    const Eigen::MatrixXd& h = design.h.weights();
    const Eigen::VectorXd hx_beta = h * (design.x * d.beta);
    Eigen::VectorXd eta = (hx_beta + h * d.phi).array() + d.gamma;
    d.counts_post = simulate_counts(cfg.likelihood, eta + design.offsets.array().log().matrix(), d.psi, rng);

    const Index ms = std::min(h.rows(), design.car->size());
    const Eigen::MatrixXd hs = h.topRows(ms);
    const Eigen::MatrixXd sigma = build_precision(*design.car, p).inverse();
    Eigen::MatrixXd st = hs * sigma * hs.transpose();
    st = 0.5 * (st + st.transpose());
    Eigen::LLT<Eigen::MatrixXd> llt(st);
    if (llt.info() != Eigen::Success) throw FactorizationError("sbc: membership covariance is not positive definite");
    d.phi_tilde_inv = llt.matrixL() * standard_normal_vector(ms, rng);
    eta = (hx_beta.head(ms) + d.phi_tilde_inv).array() + d.gamma;
    d.counts_inv = simulate_counts(cfg.likelihood, eta + design.offsets.head(ms).array().log().matrix(), d.psi, rng);
    return d;
}

/// Specialises a replicate draw to membership size m under a generation parameterisation.
inline SbcTruth replicate_truth(const SbcDraw& d, const SbcDesign& design, Index m, Parameterisation generation)
{
    const MembershipMatrix hm = design.h.truncated(m);
    SbcTruth t;
    t.gamma = d.gamma;
    t.beta = d.beta;
    t.alpha = d.alpha;
    t.tau = d.tau;
    t.psi = d.psi;
    if (generation == Parameterisation::Post) {
        t.phi = d.phi;
        t.phi_tilde = hm.weights() * d.phi;
        t.y = d.counts_post.head(m);
    } else {
        if (m > d.phi_tilde_inv.size()) throw InvalidArgument("sbc: inverse generation needs m <= n");
        t.phi_tilde = d.phi_tilde_inv.head(m);
        t.phi = pseudo_inverse(hm) * t.phi_tilde;
        t.y = d.counts_inv.head(m);
    }
    t.log_rho = (design.x * t.beta + t.phi).array() + t.gamma;
    t.log_rho_tilde = (hm.weights() * design.x * t.beta + t.phi_tilde).array() + t.gamma;
    return t;
}

struct BiasMetrics {
    double bias = 0.0;
    double abs_bias = 0.0;
    double rmse = 0.0;
};

/// Mean error, mean absolute error and root mean square error of draws about the truth.
inline BiasMetrics bias_metrics(const Eigen::VectorXd& draws, double truth)
{
    if (draws.size() < 1) throw InvalidArgument("bias_metrics: need at least one draw");
    const Eigen::ArrayXd e = draws.array() - truth;
    const auto b = static_cast<double>(draws.size());
    return {e.sum() / b, e.abs().sum() / b, std::sqrt(e.square().sum() / b)};
}

struct SbcReplicateResult {
    int replicate = 0;
    bool failed = false;
    std::string failure;
    double max_rhat = 1.0;
    std::string worst_parameter;
    int divergences = 0;
    std::vector<SbcRank> ranks;     // one per posterior column
    std::vector<BiasMetrics> bias;  // aligned with ranks
};

/// Everything produced by one replicate fit; `samples` is dropped by run_study.
struct SbcReplicate {
    SbcTruth truth;
    PosteriorSamples samples;
    SbcReplicateResult result;
};

inline ModelSpec cell_spec(const SbcStudyConfig& cfg, const SbcDesign& design, Index m, Parameterisation mcmc)
{
    ModelSpec spec;
    spec.likelihood = cfg.likelihood;
    spec.parameterisation = mcmc;
    spec.spatial = Spatial::CAR;
    spec.car = design.car;
    spec.h = design.membership(m);
    spec.x = design.x;
    spec.offsets = design.offsets.head(m);
    spec.priors = cfg.priors;
    spec.validate();
    return spec;
}

/// Indices of B draws spread evenly over S stored draws.
inline std::vector<Index> even_subsample(Index s, int b)
{
    std::vector<Index> idx(static_cast<std::size_t>(b));
    for (int k = 0; k < b; ++k) idx[static_cast<std::size_t>(k)] = static_cast<Index>(k) * s / b;
    return idx;
}

/// Fits one replicate: ranks of every posterior column against its generating value,
/// Bias, absolute bias and RMSE over the same B draws, and the worst split R-hat over all stored draws.
inline SbcReplicate sbc_replicate(const SbcStudyConfig& cfg, const SbcDesign& design, const SbcDraw& draw, int r,
                                  Index m, const Scenario& scenario, std::uint32_t cell)
{
    SbcReplicate out;
    out.result.replicate = r;
    out.truth = replicate_truth(draw, design, m, scenario.data);
    const PosteriorModel model(cell_spec(cfg, design, m, scenario.mcmc), out.truth.y);
    SamplerConfig sc = cfg.sampler;
    sc.seed = detail::mix_seed(cfg.seed, {2u, static_cast<std::uint32_t>(r), cell});
    try {
        out.samples = run_chains(model, sc);
    } catch (const SamplerFailure& e) {
        out.result.failed = true;
        out.result.failure = e.what();
        return out;
    }
    const auto& s = out.samples;
    for (const auto& st : s.stats) out.result.divergences += st.divergences;
    const Eigen::MatrixXd pooled = s.pooled();
    const auto pick = even_subsample(pooled.rows(), cfg.rank_draws);
    for (std::size_t c = 0; c < s.names.size(); ++c) {
        const auto col = static_cast<Index>(c);
        Eigen::VectorXd sub(cfg.rank_draws);
        for (int k = 0; k < cfg.rank_draws; ++k) sub(k) = pooled(pick[static_cast<std::size_t>(k)], col);
        const double truth = out.truth.value(s.names[c]);
        out.result.ranks.push_back({s.names[c], rank_statistic(sub, truth), cfg.rank_draws});
        out.result.bias.push_back(bias_metrics(sub, truth));
        double rh = std::numeric_limits<double>::infinity();
        try {
            rh = split_rhat(s.by_chain(col));
        } catch (const DegenerateInput&) {
            // a column frozen at one value has not mixed
        }
        if (rh > out.result.max_rhat || out.result.worst_parameter.empty()) {
            out.result.max_rhat = std::max(out.result.max_rhat, rh);
            out.result.worst_parameter = s.names[c];
        }
    }
    return out;
}

struct ExclusionReport {
    int total = 0;
    int failed = 0;        // sampler failures
    int excluded_rhat = 0; // R-hat above threshold
    int retained = 0;
};

struct RhatFilterResult {
    std::vector<std::size_t> retained; // indices into the input
    ExclusionReport report;
};

/// Keeps replicates whose worst R-hat is at most `threshold`; failed fits are always excluded.
inline RhatFilterResult rhat_filter(const std::vector<SbcReplicateResult>& results, double threshold = 1.01)
{
    RhatFilterResult out;
    out.report.total = static_cast<int>(results.size());
    for (std::size_t k = 0; k < results.size(); ++k) {
        if (results[k].failed) ++out.report.failed;
        else if (results[k].max_rhat > threshold) ++out.report.excluded_rhat;
        else out.retained.push_back(k);
    }
    out.report.retained = static_cast<int>(out.retained.size());
    return out;
}

/// Vector components are pooled under their base name; scalar coefficients keep their index.
inline std::string parameter_group(const std::string& name)
{
    for (const char* base : {"phi_tilde", "phi", "rho_tilde", "rho"}) {
        const std::string b(base);
        if (name.rfind(b + "[", 0) == 0) return b;
    }
    return name;
}

struct GroupSummary {
    std::string parameter;
    int ranks = 0;
    double coverage = 0.0;
    double uniformity_p = 1.0;
    BiasMetrics mean_bias; // averaged over retained replicates and components
};

struct SbcCellResult {
    Scenario scenario;
    Index m = 0;
    std::vector<SbcReplicateResult> replicates;
    ExclusionReport exclusions;
    std::vector<GroupSummary> groups;

    const GroupSummary& group(const std::string& name) const
    {
        for (const auto& g : groups)
            if (g.parameter == name) return g;
        throw InvalidArgument("no SBC summary for parameter '" + name + "'");
    }

    std::vector<int> ranks_of(const std::string& group_name) const
    {
        std::vector<int> out;
        for (std::size_t k : rhat_filter(replicates, threshold).retained)
            for (const auto& rk : replicates[k].ranks)
                if (parameter_group(rk.parameter) == group_name) out.push_back(rk.rank);
        return out;
    }

    double threshold = 1.01;
    int rank_draws = 0;
};

struct SbcStudyResult {
    std::vector<SbcCellResult> cells;
    bool aborted = false;
    std::string abort_reason;

    const SbcCellResult& cell(const Scenario& sc, Index m) const
    {
        for (const auto& c : cells)
            if (c.scenario == sc && c.m == m) return c;
        throw InvalidArgument("no SBC cell " + sc.label() + " m=" + std::to_string(m));
    }
};

/// Coverage, uniformity and averaged bias per parameter group over the retained replicates.
inline void summarise_cell(SbcCellResult& cell)
{
    const auto kept = rhat_filter(cell.replicates, cell.threshold);
    cell.exclusions = kept.report;
    cell.groups.clear();
    if (kept.retained.empty()) return;
    std::vector<std::string> order;
    for (const auto& rk : cell.replicates[kept.retained.front()].ranks) {
        const auto g = parameter_group(rk.parameter);
        if (std::find(order.begin(), order.end(), g) == order.end()) order.push_back(g);
    }
    for (const auto& g : order) {
        GroupSummary s;
        s.parameter = g;
        std::vector<int> ranks;
        double count = 0.0;
        for (std::size_t k : kept.retained) {
            const auto& rep = cell.replicates[k];
            for (std::size_t c = 0; c < rep.ranks.size(); ++c) {
                if (parameter_group(rep.ranks[c].parameter) != g) continue;
                ranks.push_back(rep.ranks[c].rank);
                s.mean_bias.bias += rep.bias[c].bias;
                s.mean_bias.abs_bias += rep.bias[c].abs_bias;
                s.mean_bias.rmse += rep.bias[c].rmse;
                count += 1.0;
            }
        }
        s.ranks = static_cast<int>(ranks.size());
        s.mean_bias.bias /= count;
        s.mean_bias.abs_bias /= count;
        s.mean_bias.rmse /= count;
        s.coverage = coverage_interval_check(ranks, cell.rank_draws);
        s.uniformity_p = chi_square_uniformity(ranks, cell.rank_draws).p_value;
        cell.groups.push_back(std::move(s));
    }
}

using SbcProgress = std::function<void(const std::string&)>;

/// Runs N replicates for every (scenario, size) cell. Each replicate shares one prior draw
/// across cells, mirroring truncation of a single simulated data set.
inline SbcStudyResult run_study(const SbcStudyConfig& cfg, const SbcProgress& progress = {})
{
    const SbcDesign design = make_design(cfg);
    SbcStudyResult out;
    for (const auto& sc : cfg.scenarios)
        for (Index m : cfg.sizes) {
            SbcCellResult cell;
            cell.scenario = sc;
            cell.m = m;
            cell.threshold = cfg.rhat_threshold;
            cell.rank_draws = cfg.rank_draws;
            cell.replicates.resize(static_cast<std::size_t>(cfg.replicates));
            out.cells.push_back(std::move(cell));
        }
    const std::size_t ncells = out.cells.size();
    std::vector<std::vector<char>> done(ncells, std::vector<char>(static_cast<std::size_t>(cfg.replicates), 0));
    std::vector<std::atomic<int>> failures(ncells);
    std::atomic<bool> abort{false};
    std::atomic<int> next{0};
    std::mutex log_mutex;
    std::string abort_reason;

    auto work = [&] {
        for (int r = next.fetch_add(1); r < cfg.replicates && !abort.load(); r = next.fetch_add(1)) {
            const SbcDraw draw = draw_replicate(cfg, design, r);
            for (std::size_t c = 0; c < ncells && !abort.load(); ++c) {
                auto& cell = out.cells[c];
                auto rep = sbc_replicate(cfg, design, draw, r, cell.m, cell.scenario, static_cast<std::uint32_t>(c));
                if (rep.result.failed && cfg.max_failures >= 0 && failures[c].fetch_add(1) + 1 > cfg.max_failures) {
                    std::lock_guard lock(log_mutex);
                    if (!abort.exchange(true))
                        abort_reason = "persistent sampler failure in " + cell.scenario.label() + " m=" +
                                       std::to_string(cell.m) + ": " + rep.result.failure;
                }
                cell.replicates[static_cast<std::size_t>(r)] = std::move(rep.result);
                done[c][static_cast<std::size_t>(r)] = 1;
            }
            if (progress) {
                std::lock_guard lock(log_mutex);
                progress("replicate " + std::to_string(r + 1) + "/" + std::to_string(cfg.replicates));
            }
        }
    };
    const unsigned threads = std::max(1u, std::min<unsigned>(cfg.threads, static_cast<unsigned>(cfg.replicates)));
    if (threads == 1) {
        work();
    } else {
        std::vector<std::jthread> pool;
        for (unsigned t = 0; t < threads; ++t) pool.emplace_back(work);
    }

    out.aborted = abort.load();
    out.abort_reason = abort_reason;
    for (std::size_t c = 0; c < ncells; ++c) {
        auto& reps = out.cells[c].replicates;
        std::vector<SbcReplicateResult> kept;
        for (std::size_t r = 0; r < reps.size(); ++r)
            if (done[c][r]) kept.push_back(std::move(reps[r]));
        reps = std::move(kept);
        summarise_cell(out.cells[c]);
    }
    return out;
}

// ---- CSV outputs ----

inline void write_ranks_csv(const SbcStudyResult& res, std::ostream& os)
{
    os << "scenario,m,replicate,parameter,rank,draws\n";
    for (const auto& c : res.cells)
        for (const auto& rep : c.replicates)
            for (const auto& rk : rep.ranks)
                os << c.scenario.label() << ',' << c.m << ',' << rep.replicate << ',' << rk.parameter << ',' << rk.rank
                   << ',' << rk.draws << '\n';
}

inline void write_coverage_csv(const SbcStudyResult& res, std::ostream& os)
{
    os.precision(10);
    os << "scenario,m,parameter,ranks,coverage,uniformity_p\n";
    for (const auto& c : res.cells)
        for (const auto& g : c.groups)
            os << c.scenario.label() << ',' << c.m << ',' << g.parameter << ',' << g.ranks << ',' << g.coverage << ','
               << g.uniformity_p << '\n';
}

inline void write_bias_csv(const SbcStudyResult& res, std::ostream& os)
{
    os.precision(10);
    os << "scenario,m,parameter,bias,abs_bias,rmse\n";
    for (const auto& c : res.cells)
        for (const auto& g : c.groups)
            os << c.scenario.label() << ',' << c.m << ',' << g.parameter << ',' << g.mean_bias.bias << ','
               << g.mean_bias.abs_bias << ',' << g.mean_bias.rmse << '\n';
}

inline void write_exclusions_csv(const SbcStudyResult& res, std::ostream& os)
{
    os << "scenario,m,total,sampler_failures,rhat_excluded,retained\n";
    for (const auto& c : res.cells)
        os << c.scenario.label() << ',' << c.m << ',' << c.exclusions.total << ',' << c.exclusions.failed << ','
           << c.exclusions.excluded_rhat << ',' << c.exclusions.retained << '\n';
}

} // namespace carmm
