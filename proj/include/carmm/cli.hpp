#pragma once

#include <array>
#include <cstdint>
#include <filesystem>
#include <fstream>
#include <iomanip>
#include <map>
#include <optional>
#include <set>
#include <sstream>
#include <string>
#include <vector>

#include <Eigen/Dense>
#include <openssl/evp.h>

#include "json.hpp"

#include "carmm/car_prior.hpp"
#include "carmm/diagnostics.hpp"
#include "carmm/error.hpp"
#include "carmm/membership.hpp"
#include "carmm/model.hpp"
#include "carmm/sampler.hpp"
#include "carmm/sbc.hpp"
#include "carmm/scoring.hpp"
#include "carmm/spatial_graph.hpp"

namespace carmm::cli {

namespace fs = std::filesystem;
using json = nlohmann::json;

inline constexpr const char* kToolVersion = "carmm 1.0.0";

// ---- files and digests ----

inline std::string sha256_hex(const std::string& bytes)
{
    std::array<unsigned char, EVP_MAX_MD_SIZE> md{};
    unsigned int len = 0;
    if (EVP_Digest(bytes.data(), bytes.size(), md.data(), &len, EVP_sha256(), nullptr) != 1)
        throw IoError("sha256 digest failed");
    std::ostringstream os;
    for (unsigned int k = 0; k < len; ++k) os << std::hex << std::setw(2) << std::setfill('0') << int(md[k]);
    return os.str();
}

inline std::string read_file(const fs::path& p)
{
    std::ifstream in(p, std::ios::binary);
    if (!in) throw IoError("cannot open '" + p.string() + "'");
    std::ostringstream ss;
    ss << in.rdbuf();
    return ss.str();
}

inline std::string file_digest(const fs::path& p) { return sha256_hex(read_file(p)); }

inline void write_file(const fs::path& p, const std::string& bytes)
{
    if (p.has_parent_path()) fs::create_directories(p.parent_path());
    std::ofstream out(p, std::ios::binary | std::ios::trunc);
    if (!out) throw IoError("cannot write '" + p.string() + "'");
    out << bytes;
    if (!out) throw IoError("write failed for '" + p.string() + "'");
}

inline json read_json(const fs::path& p)
{
    try {
        return json::parse(read_file(p));
    } catch (const json::parse_error& e) {
        throw IoError("invalid JSON in '" + p.string() + "': " + e.what());
    }
}

inline void write_json(const fs::path& p, const json& j) { write_file(p, j.dump(2) + "\n"); }

inline std::string format_double(double v)
{
    std::ostringstream os;
    os << std::setprecision(17) << v;
    return os.str();
}

/// Header row plus one row per matrix row, full precision.
inline std::string matrix_csv(const std::vector<std::string>& header, const Eigen::MatrixXd& a)
{
    std::ostringstream os;
    os << std::setprecision(17);
    for (std::size_t c = 0; c < header.size(); ++c) os << (c ? "," : "") << header[c];
    os << '\n';
    for (Index r = 0; r < a.rows(); ++r) {
        for (Index c = 0; c < a.cols(); ++c) os << (c ? "," : "") << a(r, c);
        os << '\n';
    }
    return os.str();
}

inline Eigen::MatrixXd read_matrix_csv(const fs::path& p, std::vector<std::string>* header = nullptr)
{
    std::istringstream is(read_file(p));
    if (header) {
        std::string line;
        std::getline(is, line);
        std::stringstream ss(line);
        std::string cell;
        header->clear();
        while (std::getline(ss, cell, ',')) header->push_back(cell);
        return read_numeric_csv(is, false, p.string());
    }
    return read_numeric_csv(is, true, p.string());
}

inline std::vector<std::string> indexed_names(const std::string& base, Index n)
{
    std::vector<std::string> out;
    for (Index k = 0; k < n; ++k) out.push_back(base + std::to_string(k + 1));
    return out;
}

// ---- manifest ----

/// Provenance of one command. Digests are recorded before the command body runs, and the
/// manifest is rewritten with the final status whether or not the command succeeds.
struct RunManifest {
    std::string command;
    std::string config_path;
    std::map<std::string, std::string> input_digests;
    std::uint64_t seed = 0;
    std::string output_dir;
    std::string status = "running";
    std::string stage;
    std::string error;

    json to_json() const
    {
        return json{{"command", command},     {"config", config_path}, {"inputs", input_digests},
                    {"seed", seed},           {"output_dir", output_dir}, {"tool_version", kToolVersion},
                    {"status", status},       {"stage", stage},        {"error", error}};
    }

    static RunManifest begin(std::string command, const fs::path& config, const fs::path& out)
    {
        RunManifest m;
        m.command = std::move(command);
        m.config_path = config.generic_string();
        m.output_dir = out.generic_string();
        return m;
    }

    void add_input(const fs::path& p) { input_digests[p.generic_string()] = file_digest(p); }
    void save() const { write_json(fs::path(output_dir) / "manifest.json", to_json()); }
};

/// Runs `body`, keeping the manifest's stage and final status current.
template <class Body>
void run_recorded(RunManifest& manifest, Body&& body)
{
    fs::create_directories(manifest.output_dir);
    manifest.save();
    try {
        body(manifest);
        manifest.status = "ok";
        manifest.stage = "done";
        manifest.save();
    } catch (const std::exception& e) {
        manifest.status = "failed";
        manifest.error = e.what();
        manifest.save();
        throw;
    }
}

// ---- config helpers ----

/// Rejects keys outside `allowed` so that typos fail loudly.
inline void check_keys(const json& j, const std::set<std::string>& allowed, const std::string& what)
{
    if (!j.is_object()) throw InvalidArgument(what + ": expected a JSON object");
    for (const auto& [key, _] : j.items())
        if (!allowed.contains(key)) throw InvalidArgument(what + ": unknown key '" + key + "'");
}

template <class T>
T get_or(const json& j, const char* key, T fallback)
{
    if (!j.contains(key)) return fallback;
    try {
        return j.at(key).get<T>();
    } catch (const json::exception& e) {
        throw InvalidArgument(std::string("config key '") + key + "': " + e.what());
    }
}

inline PriorConfig parse_priors(const json& j)
{
    PriorConfig p;
    if (j.is_null()) return p;
    check_keys(j, {"coef_sd", "tau_shape", "tau_rate", "psi_shape", "psi_rate"}, "priors");
    p.coef_sd = get_or(j, "coef_sd", p.coef_sd);
    p.tau_shape = get_or(j, "tau_shape", p.tau_shape);
    p.tau_rate = get_or(j, "tau_rate", p.tau_rate);
    p.psi_shape = get_or(j, "psi_shape", p.psi_shape);
    p.psi_rate = get_or(j, "psi_rate", p.psi_rate);
    return p;
}

inline SamplerConfig parse_sampler(const json& j, SamplerConfig s = {})
{
    if (j.is_null()) return s;
    check_keys(j, {"chains", "iterations", "warmup_fraction", "thin", "leapfrog_steps", "target_accept", "init_radius",
                   "step_jitter", "threads"},
               "sampler");
    s.chains = get_or(j, "chains", s.chains);
    s.iterations = get_or(j, "iterations", s.iterations);
    s.warmup_fraction = get_or(j, "warmup_fraction", s.warmup_fraction);
    s.thin = get_or(j, "thin", s.thin);
    s.leapfrog_steps = get_or(j, "leapfrog_steps", s.leapfrog_steps);
    s.target_accept = get_or(j, "target_accept", s.target_accept);
    s.init_radius = get_or(j, "init_radius", s.init_radius);
    s.step_jitter = get_or(j, "step_jitter", s.step_jitter);
    s.threads = get_or(j, "threads", s.threads);
    return s;
}

/// Overrides that the command line may apply on top of a config file.
struct CommonOverrides {
    std::optional<std::uint64_t> seed;
    std::optional<int> chains;
    std::optional<int> iterations;
    std::optional<Adjacency> adjacency;
};

// ---- dataset bundle ----

/// adjacency.csv, H.csv, covariates.csv, data.csv (y,E) and truth.json in one directory.
struct Dataset {
    AdjacencyGraph graph;
    MembershipMatrix h;
    Eigen::MatrixXd x;
    Eigen::VectorXd y;
    Eigen::VectorXd offsets;
};

inline const std::vector<std::string>& dataset_files()
{
    static const std::vector<std::string> files{"adjacency.csv", "H.csv", "covariates.csv", "data.csv"};
    return files;
}

inline Dataset load_dataset(const fs::path& dir)
{
    const Eigen::MatrixXd x = read_matrix_csv(dir / "covariates.csv");
    std::istringstream adj(read_file(dir / "adjacency.csv"));
    AdjacencyGraph g = read_adjacency_csv(adj, x.rows());
    std::istringstream hs(read_file(dir / "H.csv"));
    MembershipMatrix h = read_membership_csv(hs);
    std::vector<std::string> header;
    const Eigen::MatrixXd data = read_matrix_csv(dir / "data.csv", &header);
    if (header != std::vector<std::string>{"y", "E"}) throw IoError("data.csv: expected header 'y,E'");
    if (h.areas() != g.size()) throw IoError("H.csv has " + std::to_string(h.areas()) + " columns for " +
                                             std::to_string(g.size()) + " areas");
    if (data.rows() != h.memberships())
        throw IoError("data.csv has " + std::to_string(data.rows()) + " rows for " + std::to_string(h.memberships()) +
                      " memberships");
    Dataset d{std::move(g), std::move(h), x, data.col(0), data.col(1)};
    for (Index j = 0; j < d.y.size(); ++j)
        if (d.y(j) < 0 || d.y(j) != std::floor(d.y(j))) throw IoError("data.csv: y must be nonnegative integers");
    if (!(d.offsets.array() > 0.0).all()) throw IoError("data.csv: E must be positive");
    return d;
}

// ---- simulate ----

struct SimulateConfig {
    Index rows = 4;
    Index cols = 5;
    Adjacency adjacency = Adjacency::Rook;
    Index m = 20;
    Index covariates = 2;
    Likelihood likelihood = Likelihood::Poisson;
    Spatial spatial = Spatial::CAR;
    Parameterisation generation = Parameterisation::Post;
    PriorConfig priors;
    double offset_mean = 20.0;
    std::uint64_t seed = 1;
    json truth = json::object(); // optional fixed values for gamma, beta, alpha, tau, psi

    void validate() const
    {
        if (rows < 1 || cols < 1 || rows * cols < 2) throw InvalidArgument("simulate: grid must have at least two areas");
        if (m < 1) throw InvalidArgument("simulate: m must be positive");
        if (covariates < 0) throw InvalidArgument("simulate: covariates must be nonnegative");
        if (!(offset_mean > 0.0)) throw InvalidArgument("simulate: offset_mean must be positive");
        if (generation == Parameterisation::Inverse && spatial != Spatial::None && m > rows * cols)
            throw InvalidArgument("simulate: inverse generation needs m <= n (got m=" + std::to_string(m) +
                                  ", n=" + std::to_string(rows * cols) + ")");
        if (generation == Parameterisation::Inverse && spatial == Spatial::ICAR && m >= rows * cols)
            throw InvalidArgument("simulate: inverse ICAR generation needs m < n");
        check_keys(truth, {"gamma", "beta", "alpha", "tau", "psi"}, "truth");
    }
};

inline SimulateConfig parse_simulate_config(const json& j, const CommonOverrides& o = {})
{
    check_keys(j, {"rows", "cols", "adjacency", "m", "covariates", "likelihood", "spatial", "generation", "priors",
                   "offset_mean", "seed", "truth"},
               "simulate config");
    SimulateConfig c;
    c.rows = get_or(j, "rows", c.rows);
    c.cols = get_or(j, "cols", c.cols);
    c.adjacency = parse_adjacency(get_or<std::string>(j, "adjacency", to_string(c.adjacency)));
    c.m = get_or(j, "m", c.m);
    c.covariates = get_or(j, "covariates", c.covariates);
    c.likelihood = parse_likelihood(get_or<std::string>(j, "likelihood", to_string(c.likelihood)));
    c.spatial = parse_spatial(get_or<std::string>(j, "spatial", to_string(c.spatial)));
    c.generation = parse_parameterisation(get_or<std::string>(j, "generation", to_string(c.generation)));
    c.priors = parse_priors(j.value("priors", json()));
    c.offset_mean = get_or(j, "offset_mean", c.offset_mean);
    c.seed = get_or(j, "seed", c.seed);
    c.truth = j.value("truth", json::object());
    if (o.seed) c.seed = *o.seed;
    if (o.adjacency) c.adjacency = *o.adjacency;
    c.validate();
    return c;
}

inline json vector_json(const Eigen::VectorXd& v) { return std::vector<double>(v.data(), v.data() + v.size()); }

/// Draws a data set from the priors (or the fixed truth values) and writes the bundle.
inline void simulate_dataset(const SimulateConfig& c, const fs::path& out)
{
    std::mt19937_64 rng(c.seed);
    std::normal_distribution<double> z;
    const AdjacencyGraph g = make_grid(c.rows, c.cols, c.adjacency);
    const Index n = g.size();
    const MembershipMatrix h = simulate_membership_matrix(g, c.m, rng);
    Eigen::MatrixXd x(n, c.covariates);
    for (Index k = 0; k < c.covariates; ++k) {
        Eigen::VectorXd col(n);
        for (Index i = 0; i < n; ++i) col(i) = z(rng);
        x.col(k) = detail::min_max_normalize(col);
    }
    std::poisson_distribution<int> pois(c.offset_mean);
    Eigen::VectorXd e(c.m);
    for (Index j = 0; j < c.m; ++j) {
        int v = 0;
        while (v == 0) v = pois(rng);
        e(j) = v;
    }

    const PriorConfig& p = c.priors;
    std::uniform_real_distribution<double> unif;
    std::gamma_distribution<double> tau_law(p.tau_shape, 1.0 / p.tau_rate), psi_law(p.psi_shape, 1.0 / p.psi_rate);
    const double gamma = c.truth.contains("gamma") ? c.truth["gamma"].get<double>() : p.coef_sd * z(rng);
    Eigen::VectorXd beta(c.covariates);
    if (c.truth.contains("beta")) {
        const auto b = c.truth["beta"].get<std::vector<double>>();
        if (static_cast<Index>(b.size()) != c.covariates) throw InvalidArgument("truth.beta must have one entry per covariate");
        for (Index k = 0; k < c.covariates; ++k) beta(k) = b[static_cast<std::size_t>(k)];
    } else {
        for (Index k = 0; k < c.covariates; ++k) beta(k) = p.coef_sd * z(rng);
    }
    double alpha = c.truth.contains("alpha") ? c.truth["alpha"].get<double>() : unif(rng);
    const double tau = c.truth.contains("tau") ? c.truth["tau"].get<double>() : tau_law(rng);
    const double psi = c.truth.contains("psi") ? c.truth["psi"].get<double>() : psi_law(rng);
    if (c.spatial == Spatial::CAR) CarParams{alpha, tau}.validate();

    Eigen::VectorXd phi = Eigen::VectorXd::Zero(n), phi_tilde = Eigen::VectorXd::Zero(c.m);
    if (c.spatial != Spatial::None) {
        const CarPrior prior(g);
        Eigen::MatrixXd sigma;
        if (c.spatial == Spatial::CAR) {
            if (c.generation == Parameterisation::Post) phi = sample_prior(prior, {alpha, tau}, rng);
            else sigma = build_precision(prior, {alpha, tau}).inverse();
        } else {
            if (c.generation == Parameterisation::Post) phi = sample_icar(g, tau, rng);
            else {
                Eigen::MatrixXd q = icar_structure(g) * tau;
                sigma = Eigen::CompleteOrthogonalDecomposition<Eigen::MatrixXd>(q).pseudoInverse();
            }
        }
        if (c.generation == Parameterisation::Post) {
            phi_tilde = h.weights() * phi;
        } else {
            Eigen::MatrixXd st = h.weights() * sigma * h.weights().transpose();
            st = 0.5 * (st + st.transpose());
            Eigen::LLT<Eigen::MatrixXd> llt(st);
            if (llt.info() != Eigen::Success) throw FactorizationError("simulate: membership covariance is singular");
            phi_tilde = llt.matrixL() * standard_normal_vector(c.m, rng);
            phi = pseudo_inverse(h) * phi_tilde;
        }
    }
    const Eigen::VectorXd log_rho = (x * beta + phi).array() + gamma;
    const Eigen::VectorXd log_rho_tilde = (h.weights() * x * beta + phi_tilde).array() + gamma;
    const Eigen::VectorXd y =
        simulate_counts(c.likelihood, log_rho_tilde + e.array().log().matrix(), psi, rng);

    std::ostringstream adj, hs;
    write_adjacency_csv(g, adj);
    write_membership_csv(h, hs);
    write_file(out / "adjacency.csv", adj.str());
    write_file(out / "H.csv", hs.str());
    write_file(out / "covariates.csv", matrix_csv(indexed_names("x", c.covariates), x));
    Eigen::MatrixXd data(c.m, 2);
    data << y, e;
    write_file(out / "data.csv", matrix_csv({"y", "E"}, data));
    json truth{{"likelihood", to_string(c.likelihood)},
               {"spatial", to_string(c.spatial)},
               {"generation", to_string(c.generation)},
               {"gamma", gamma},
               {"beta", vector_json(beta)},
               {"phi", vector_json(phi)},
               {"phi_tilde", vector_json(phi_tilde)},
               {"rho", vector_json(log_rho.array().exp().matrix())},
               {"rho_tilde", vector_json(log_rho_tilde.array().exp().matrix())}};
    if (c.spatial == Spatial::CAR) truth["alpha"] = alpha;
    if (c.spatial != Spatial::None) truth["tau"] = tau;
    if (c.likelihood == Likelihood::NegBin) truth["psi"] = psi;
    write_json(out / "truth.json", truth);
    load_dataset(out); // everything written must pass the loader
}

inline void cmd_simulate(const fs::path& config, const fs::path& out, const CommonOverrides& o = {})
{
    RunManifest man = RunManifest::begin("simulate", config, out);
    run_recorded(man, [&](RunManifest& m) {
        m.stage = "config";
        m.add_input(config);
        const SimulateConfig c = parse_simulate_config(read_json(config), o);
        m.seed = c.seed;
        m.stage = "simulate";
        m.save();
        simulate_dataset(c, out);
    });
}

// ---- fit ----

struct FitConfig {
    Likelihood likelihood = Likelihood::Poisson;
    Parameterisation parameterisation = Parameterisation::Post;
    Spatial spatial = Spatial::CAR;
    PriorConfig priors;
    SamplerConfig sampler;
    std::uint64_t seed = 1;
};

inline FitConfig parse_fit_config(const json& j, const CommonOverrides& o = {})
{
    check_keys(j, {"likelihood", "parameterisation", "spatial", "priors", "sampler", "seed"}, "fit config");
    FitConfig c;
    c.likelihood = parse_likelihood(get_or<std::string>(j, "likelihood", to_string(c.likelihood)));
    c.parameterisation = parse_parameterisation(get_or<std::string>(j, "parameterisation", to_string(c.parameterisation)));
    c.spatial = parse_spatial(get_or<std::string>(j, "spatial", to_string(c.spatial)));
    c.priors = parse_priors(j.value("priors", json()));
    c.sampler = parse_sampler(j.value("sampler", json()));
    c.seed = get_or(j, "seed", c.seed);
    if (o.seed) c.seed = *o.seed;
    if (o.chains) c.sampler.chains = *o.chains;
    if (o.iterations) c.sampler.iterations = *o.iterations;
    c.sampler.seed = detail::mix_seed(c.seed, {10u});
    c.sampler.validate();
    return c;
}

struct ParameterSummary {
    std::string name;
    double mean = 0.0, sd = 0.0, q025 = 0.0, q50 = 0.0, q975 = 0.0, rhat = 1.0, ess = 0.0;
};

inline std::vector<ParameterSummary> summarise(const PosteriorSamples& s)
{
    std::vector<ParameterSummary> out;
    const Eigen::MatrixXd pooled = s.pooled();
    for (std::size_t c = 0; c < s.names.size(); ++c) {
        const auto col = static_cast<Index>(c);
        ParameterSummary p;
        p.name = s.names[c];
        const Eigen::VectorXd v = pooled.col(col);
        p.mean = v.mean();
        p.sd = v.size() > 1 ? std::sqrt((v.array() - p.mean).square().sum() / static_cast<double>(v.size() - 1)) : 0.0;
        std::vector<double> sorted(v.data(), v.data() + v.size());
        std::sort(sorted.begin(), sorted.end());
        p.q025 = detail::sorted_quantile(sorted, 0.025);
        p.q50 = detail::sorted_quantile(sorted, 0.5);
        p.q975 = detail::sorted_quantile(sorted, 0.975);
        try {
            p.rhat = split_rhat(s.by_chain(col));
            p.ess = effective_sample_size(s.by_chain(col));
        } catch (const DegenerateInput&) {
            // constant column, e.g. a fixed-sum constraint; mixing is not defined
            p.rhat = std::numeric_limits<double>::quiet_NaN();
            p.ess = std::numeric_limits<double>::quiet_NaN();
        }
        out.push_back(p);
    }
    return out;
}

inline json number_or_null(double v) { return std::isfinite(v) ? json(v) : json(nullptr); }

inline ModelSpec spec_for(const FitConfig& c, const Dataset& d)
{
    ModelSpec spec;
    spec.likelihood = c.likelihood;
    spec.parameterisation = c.parameterisation;
    spec.spatial = c.spatial;
    spec.car = std::make_shared<const CarPrior>(d.graph);
    spec.h = std::make_shared<const MembershipMatrix>(d.h);
    spec.x = d.x;
    spec.offsets = d.offsets;
    spec.priors = c.priors;
    spec.validate();
    return spec;
}

/// Fits the data set and writes chains, diagnostics, summary and the matrices used by `score`.
inline void fit_dataset(const FitConfig& c, const fs::path& data_dir, const fs::path& out, RunManifest& man)
{
    man.stage = "load";
    const Dataset d = load_dataset(data_dir);
    const PosteriorModel model(spec_for(c, d), d.y);
    man.stage = "sample";
    man.save();
    const PosteriorSamples s = run_chains(model, c.sampler);

    man.stage = "write";
    for (std::size_t k = 0; k < s.chains.size(); ++k)
        write_file(out / "chains" / ("chain_" + std::to_string(k + 1) + ".csv"), matrix_csv(s.names, s.chains[k]));

    const auto summary = summarise(s);
    std::ostringstream sum;
    sum << std::setprecision(10) << "parameter,mean,sd,q2.5,q50,q97.5,ci_width,rhat,ess\n";
    json per_param = json::object();
    for (const auto& p : summary) {
        sum << p.name << ',' << p.mean << ',' << p.sd << ',' << p.q025 << ',' << p.q50 << ',' << p.q975 << ','
            << p.q975 - p.q025 << ',' << p.rhat << ',' << p.ess << '\n';
        per_param[p.name] = {{"rhat", number_or_null(p.rhat)}, {"ess", number_or_null(p.ess)}};
    }
    write_file(out / "summary.csv", sum.str());

    json chains = json::array();
    int divergences = 0;
    for (const auto& st : s.stats) {
        chains.push_back({{"accept_rate", st.accept_rate}, {"divergences", st.divergences}, {"step_size", st.step_size}});
        divergences += st.divergences;
    }
    double max_rhat = 1.0, min_ess = std::numeric_limits<double>::infinity();
    for (const auto& p : summary) {
        if (std::isfinite(p.rhat)) max_rhat = std::max(max_rhat, p.rhat);
        if (std::isfinite(p.ess)) min_ess = std::min(min_ess, p.ess);
    }
    write_json(out / "diagnostics.json", {{"max_rhat", max_rhat},
                                          {"min_ess", number_or_null(min_ess)},
                                          {"divergences", divergences},
                                          {"chains", chains},
                                          {"parameters", per_param}});

    const Eigen::MatrixXd ll = pointwise_log_likelihood_matrix(model, s);
    write_file(out / "loglik.csv", matrix_csv(indexed_names("y", ll.cols()), ll));
    std::mt19937_64 rng(detail::mix_seed(c.seed, {11u}));
    const Eigen::MatrixXd yrep = posterior_predictive_replicates(model, s, rng);
    write_file(out / "yrep.csv", matrix_csv(indexed_names("y", yrep.cols()), yrep));
    if (c.spatial != Spatial::None) {
        const Eigen::MatrixXd mixed = mixed_replicates(model, s, rng);
        write_file(out / "yrep_mixed.csv", matrix_csv(indexed_names("y", mixed.cols()), mixed));
    }
    write_file(out / "data.csv", read_file(data_dir / "data.csv"));
    write_file(out / "covariates.csv", read_file(data_dir / "covariates.csv"));
    write_json(out / "model.json", {{"likelihood", to_string(c.likelihood)},
                                    {"parameterisation", to_string(c.parameterisation)},
                                    {"spatial", to_string(c.spatial)},
                                    {"areas", model.spec().areas()},
                                    {"memberships", model.spec().memberships()},
                                    {"data_digest", file_digest(data_dir / "data.csv")},
                                    {"draws", s.total_draws()}});
}

inline void cmd_fit(const fs::path& config, const fs::path& data_dir, const fs::path& out, const CommonOverrides& o = {})
{
    RunManifest man = RunManifest::begin("fit", config, out);
    run_recorded(man, [&](RunManifest& m) {
        m.stage = "config";
        m.add_input(config);
        for (const auto& f : dataset_files()) m.add_input(data_dir / f);
        const FitConfig c = parse_fit_config(read_json(config), o);
        m.seed = c.seed;
        m.save();
        fit_dataset(c, data_dir, out, m);
    });
}

// ---- sbc ----

inline SbcStudyConfig parse_sbc_config(const json& j, const CommonOverrides& o = {})
{
    check_keys(j, {"rows", "cols", "adjacency", "sizes", "scenarios", "covariates", "likelihood", "priors",
                   "offset_mean", "replicates", "rank_draws", "sampler", "rhat_threshold", "max_failures", "threads",
                   "seed"},
               "sbc config");
    SbcStudyConfig c;
    c.rows = get_or(j, "rows", c.rows);
    c.cols = get_or(j, "cols", c.cols);
    c.adjacency = parse_adjacency(get_or<std::string>(j, "adjacency", to_string(c.adjacency)));
    c.sizes = get_or(j, "sizes", c.sizes);
    if (j.contains("scenarios")) {
        c.scenarios.clear();
        for (const auto& s : j["scenarios"]) c.scenarios.push_back(parse_scenario(s.get<std::string>()));
    }
    c.covariates = get_or(j, "covariates", c.covariates);
    c.likelihood = parse_likelihood(get_or<std::string>(j, "likelihood", to_string(c.likelihood)));
    c.priors = parse_priors(j.value("priors", json()));
    c.offset_mean = get_or(j, "offset_mean", c.offset_mean);
    c.replicates = get_or(j, "replicates", c.replicates);
    c.rank_draws = get_or(j, "rank_draws", c.rank_draws);
    c.sampler = parse_sampler(j.value("sampler", json()), c.sampler);
    c.rhat_threshold = get_or(j, "rhat_threshold", c.rhat_threshold);
    c.max_failures = get_or(j, "max_failures", c.max_failures);
    c.threads = get_or(j, "threads", c.threads);
    c.seed = get_or(j, "seed", c.seed);
    if (o.seed) c.seed = *o.seed;
    if (o.chains) c.sampler.chains = *o.chains;
    if (o.iterations) c.sampler.iterations = *o.iterations;
    if (o.adjacency) c.adjacency = *o.adjacency;
    c.validate();
    return c;
}

inline void write_study(const SbcStudyResult& r, const fs::path& out)
{
    std::ostringstream ranks, cov, bias, excl;
    write_ranks_csv(r, ranks);
    write_coverage_csv(r, cov);
    write_bias_csv(r, bias);
    write_exclusions_csv(r, excl);
    write_file(out / "ranks.csv", ranks.str());
    write_file(out / "coverage.csv", cov.str());
    write_file(out / "bias.csv", bias.str());
    write_file(out / "exclusions.csv", excl.str());
}

inline void cmd_sbc(const fs::path& config, const fs::path& out, const CommonOverrides& o = {},
                    const SbcProgress& progress = {})
{
    RunManifest man = RunManifest::begin("sbc", config, out);
    run_recorded(man, [&](RunManifest& m) {
        m.stage = "config";
        m.add_input(config);
        const SbcStudyConfig c = parse_sbc_config(read_json(config), o);
        m.seed = c.seed;
        m.stage = "study";
        m.save();
        const SbcStudyResult r = run_study(c, progress);
        m.stage = "write";
        write_study(r, out);
        if (r.aborted) throw SamplerFailure("sbc study aborted: " + r.abort_reason);
    });
}

// ---- score ----

/// Outputs of one fitted run as needed for scoring.
struct FittedRun {
    std::string label;
    json model;
    Eigen::VectorXd y;
    Eigen::MatrixXd x;
    Eigen::MatrixXd loglik;
    Eigen::MatrixXd yrep;
    std::optional<Eigen::MatrixXd> yrep_mixed;
    Eigen::MatrixXd rho; // pooled draws x n
};

inline FittedRun load_run(const fs::path& dir)
{
    FittedRun r;
    r.label = dir.filename().empty() ? dir.parent_path().filename().string() : dir.filename().string();
    r.model = read_json(dir / "model.json");
    const std::string digest = file_digest(dir / "data.csv");
    if (r.model.at("data_digest").get<std::string>() != digest)
        throw IoError("run '" + dir.string() + "': data.csv does not match the digest recorded at fit time");
    std::vector<std::string> header;
    r.y = read_matrix_csv(dir / "data.csv", &header).col(0);
    r.x = read_matrix_csv(dir / "covariates.csv");
    r.loglik = read_matrix_csv(dir / "loglik.csv");
    r.yrep = read_matrix_csv(dir / "yrep.csv");
    if (fs::exists(dir / "yrep_mixed.csv")) r.yrep_mixed = read_matrix_csv(dir / "yrep_mixed.csv");
    std::vector<Eigen::MatrixXd> chains;
    for (int k = 1; fs::exists(dir / "chains" / ("chain_" + std::to_string(k) + ".csv")); ++k)
        chains.push_back(read_matrix_csv(dir / "chains" / ("chain_" + std::to_string(k) + ".csv"), &header));
    if (chains.empty()) throw IoError("run '" + dir.string() + "' has no chain files");
    std::vector<Index> rho_cols;
    for (std::size_t c = 0; c < header.size(); ++c)
        if (header[c].rfind("rho[", 0) == 0) rho_cols.push_back(static_cast<Index>(c));
    Index total = 0;
    for (const auto& ch : chains) total += ch.rows();
    r.rho.resize(total, static_cast<Index>(rho_cols.size()));
    Index row = 0;
    for (const auto& ch : chains)
        for (Index d = 0; d < ch.rows(); ++d, ++row)
            for (std::size_t k = 0; k < rho_cols.size(); ++k) r.rho(row, static_cast<Index>(k)) = ch(d, rho_cols[k]);
    if (r.loglik.cols() != r.y.size() || r.yrep.cols() != r.y.size())
        throw IoError("run '" + dir.string() + "': loglik/yrep width does not match data.csv");
    return r;
}

struct RunScores {
    std::string label;
    ScoreReport report;
    int high_k = 0;
    Eigen::VectorXd exceedance;
    std::array<QuintileSummary, 5> quintiles{};
};

inline RunScores score_run(const FittedRun& run)
{
    RunScores s;
    s.label = run.label;
    const PsisResult loo = psis_loo_elpd(run.loglik);
    s.report.elpd_loo = loo.elpd;
    s.report.elpd_se = loo.se;
    s.report.elpd_pointwise = loo.pointwise;
    s.report.pareto_k = loo.pareto_k;
    s.high_k = loo.high_k;
    const Eigen::MatrixXd even = run.yrep.topRows(run.yrep.rows() - run.yrep.rows() % 2);
    s.report.rps_mean = rps_mean(run.y, even);
    s.report.dss_mean = dss_mean(run.y, run.yrep);
    s.report.ppp = marginal_ppp(run.y, run.yrep);
    if (run.yrep_mixed) s.report.mixed_ppp = marginal_ppp(run.y, *run.yrep_mixed);
    s.exceedance = exceedance_prob(run.rho);
    if (run.rho.cols() >= 5 && run.x.cols() >= 1)
        s.quintiles = quintile_risk_profile(run.rho.colwise().mean().transpose(), run.x.col(0));
    return s;
}

/// Scores every run and compares each against the reference (the first run unless named).
inline void cmd_score(const std::vector<fs::path>& runs, const fs::path& out, const std::string& reference = {})
{
    if (runs.empty()) throw InvalidArgument("score: need at least one fitted run");
    RunManifest man = RunManifest::begin("score", {}, out);
    run_recorded(man, [&](RunManifest& m) {
        m.stage = "load";
        std::vector<FittedRun> fitted;
        for (const auto& dir : runs) {
            for (const char* f : {"model.json", "data.csv", "loglik.csv", "yrep.csv"}) m.add_input(dir / f);
            fitted.push_back(load_run(dir));
        }
        std::size_t ref = 0;
        if (!reference.empty()) {
            auto it = std::find_if(fitted.begin(), fitted.end(), [&](const FittedRun& r) { return r.label == reference; });
            if (it == fitted.end()) throw InvalidArgument("score: no run labelled '" + reference + "'");
            ref = static_cast<std::size_t>(it - fitted.begin());
        }
        const std::string ref_digest = fitted[ref].model.at("data_digest");
        for (const auto& r : fitted)
            if (r.model.at("data_digest").get<std::string>() != ref_digest)
                throw InvalidArgument("score: run '" + r.label + "' was fitted to different data than '" +
                                      fitted[ref].label + "'; elpd differences need the same observations");

        m.stage = "score";
        m.save();
        std::vector<RunScores> scores;
        for (const auto& r : fitted) scores.push_back(score_run(r));

        json report = json::object();
        std::ostringstream cmp;
        cmp << std::setprecision(10) << "model,elpd_loo,elpd_se,elpd_diff,diff_se,rps,dss,high_k\n";
        for (std::size_t k = 0; k < scores.size(); ++k) {
            const auto& s = scores[k];
            const auto d = elpd_diff(s.report.elpd_pointwise, scores[ref].report.elpd_pointwise);
            cmp << s.label << ',' << s.report.elpd_loo << ',' << s.report.elpd_se << ',' << d.diff << ',' << d.se << ','
                << s.report.rps_mean << ',' << s.report.dss_mean << ',' << s.high_k << '\n';
            json j{{"elpd_loo", s.report.elpd_loo},   {"elpd_se", s.report.elpd_se},
                   {"elpd_diff", d.diff},             {"diff_se", d.se},
                   {"reference", scores[ref].label},  {"pareto_k", vector_json(s.report.pareto_k)},
                   {"high_k", s.high_k},              {"rps_mean", s.report.rps_mean},
                   {"dss_mean", s.report.dss_mean},   {"ppp", vector_json(s.report.ppp)}};
            j["mixed_ppp"] = s.report.mixed_ppp.size() ? vector_json(s.report.mixed_ppp) : json(nullptr);
            report[s.label] = j;
        }
        m.stage = "write";
        write_json(out / "scores.json", report);
        write_file(out / "comparison.csv", cmp.str());

        std::ostringstream exc, quint;
        exc << std::setprecision(10) << "area";
        for (const auto& s : scores) exc << ',' << s.label;
        exc << '\n';
        const Index n = scores.front().exceedance.size();
        for (Index i = 0; i < n; ++i) {
            exc << i + 1;
            for (const auto& s : scores) exc << ',' << (i < s.exceedance.size() ? format_double(s.exceedance(i)) : "");
            exc << '\n';
        }
        quint << std::setprecision(10) << "model,quintile,areas,mean,q2.5,q97.5\n";
        for (const auto& s : scores)
            for (std::size_t q = 0; q < 5; ++q)
                quint << s.label << ',' << q + 1 << ',' << s.quintiles[q].count << ',' << s.quintiles[q].mean << ','
                      << s.quintiles[q].lower << ',' << s.quintiles[q].upper << '\n';
        write_file(out / "exceedance.csv", exc.str());
        write_file(out / "quintiles.csv", quint.str());
    });
}

} // namespace carmm::cli
