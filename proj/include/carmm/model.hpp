#pragma once

#include <cmath>
#include <limits>
#include <memory>
#include <numbers>
#include <optional>
#include <random>
#include <string>
#include <vector>

#include <Eigen/Dense>
#include <boost/math/special_functions/digamma.hpp>

#include "carmm/car_prior.hpp"
#include "carmm/error.hpp"
#include "carmm/membership.hpp"
#include "carmm/spatial_graph.hpp"

namespace carmm {

enum class Likelihood { Poisson, NegBin };
enum class Parameterisation { Post, Inverse };
enum class Spatial { CAR, ICAR, None };

inline std::string to_string(Likelihood l) { return l == Likelihood::Poisson ? "poisson" : "negbin"; }
inline std::string to_string(Parameterisation p) { return p == Parameterisation::Post ? "post" : "inverse"; }
inline std::string to_string(Spatial s)
{
    switch (s) {
    case Spatial::CAR: return "car";
    case Spatial::ICAR: return "icar";
    case Spatial::None: return "none";
    }
    return "?";
}

inline Likelihood parse_likelihood(const std::string& s)
{
    if (s == "poisson") return Likelihood::Poisson;
    if (s == "negbin") return Likelihood::NegBin;
    throw InvalidArgument("unknown likelihood '" + s + "'");
}
inline Parameterisation parse_parameterisation(const std::string& s)
{
    if (s == "post") return Parameterisation::Post;
    if (s == "inverse") return Parameterisation::Inverse;
    throw InvalidArgument("unknown parameterisation '" + s + "'");
}
inline Spatial parse_spatial(const std::string& s)
{
    if (s == "car") return Spatial::CAR;
    if (s == "icar") return Spatial::ICAR;
    if (s == "none") return Spatial::None;
    throw InvalidArgument("unknown spatial prior '" + s + "'");
}

/// Hyperparameters: N(0, coef_sd^2) on gamma and each beta, Gamma(shape, rate) on tau and psi,
/// Uniform(0,1) on alpha.
struct PriorConfig {
    double coef_sd = 0.7;
    double tau_shape = 2.0;
    double tau_rate = 0.2;
    double psi_shape = 2.0;
    double psi_rate = 0.2;
};

struct ModelSpec {
    Likelihood likelihood = Likelihood::Poisson;
    Parameterisation parameterisation = Parameterisation::Post;
    Spatial spatial = Spatial::CAR;
    std::shared_ptr<const CarPrior> car;      // graph + cached spectrum
    std::shared_ptr<const MembershipMatrix> h;
    Eigen::MatrixXd x;                        // n x p areal covariates
    Eigen::VectorXd offsets;                  // m expected counts E~
    PriorConfig priors;

    Index areas() const { return h->areas(); }
    Index memberships() const { return h->memberships(); }
    Index covariates() const { return x.cols(); }
    bool has_alpha() const { return spatial == Spatial::CAR; }
    bool has_tau() const { return spatial != Spatial::None; }
    bool has_psi() const { return likelihood == Likelihood::NegBin; }

    /// Length of the free random-effect block.
    Index phi_free_size() const
    {
        if (spatial == Spatial::None) return 0;
        return parameterisation == Parameterisation::Post ? areas() : memberships();
    }

    void validate() const
    {
        if (!car || !h) throw InvalidArgument("ModelSpec: graph and membership matrix are required");
        if (car->size() != h->areas())
            throw InvalidArgument("ModelSpec: graph has " + std::to_string(car->size()) +
                                  " areas but H has " + std::to_string(h->areas()) + " columns");
        if (x.rows() != h->areas()) throw InvalidArgument("ModelSpec: covariates must have n rows");
        if (offsets.size() != h->memberships()) throw InvalidArgument("ModelSpec: offsets must have length m");
        if (!(offsets.array() > 0.0).all()) throw InvalidArgument("ModelSpec: offsets must be positive");
        if (spatial != Spatial::None && parameterisation == Parameterisation::Inverse &&
            h->memberships() > h->areas())
            throw InvalidArgument("ModelSpec: the inverse parameterisation requires m <= n (got m=" +
                                  std::to_string(h->memberships()) + ", n=" + std::to_string(h->areas()) + ")");
        if (!(priors.coef_sd > 0 && priors.tau_shape > 0 && priors.tau_rate > 0 && priors.psi_shape > 0 &&
              priors.psi_rate > 0))
            throw InvalidArgument("ModelSpec: prior hyperparameters must be positive");
    }
};

/// One point in parameter space on the constrained scale.
///
/// phi_free is the areal effect phi (Post) or the membership effect phi~ (Inverse);
/// alpha, tau and psi are only meaningful when the spec carries them.
struct ParamVector {
    double gamma = 0.0;
    Eigen::VectorXd beta;
    Eigen::VectorXd phi_free;
    double alpha = 0.5;
    double tau = 1.0;
    double psi = 1.0;
};

/// Quantities implied by a ParamVector: areal phi, areal and membership log relative risks.
struct DerivedQuantities {
    Eigen::VectorXd phi;          // n
    Eigen::VectorXd phi_tilde;    // m
    Eigen::VectorXd log_rho;      // n
    Eigen::VectorXd log_rho_tilde; // m
};

namespace detail {

inline constexpr double kLog2Pi = 1.8378770664093454835606594728112;

inline double normal_lpdf(double x, double sd) { return -0.5 * kLog2Pi - std::log(sd) - 0.5 * (x / sd) * (x / sd); }

inline double gamma_lpdf(double x, double shape, double rate)
{
    return shape * std::log(rate) - std::lgamma(shape) + (shape - 1.0) * std::log(x) - rate * x;
}

// Overflow yields +-inf instead of an exception; the caller treats it as a rejection.
namespace bmp = boost::math::policies;
using NoThrowPolicy = bmp::policy<bmp::overflow_error<bmp::errno_on_error>, bmp::pole_error<bmp::errno_on_error>,
                                  bmp::domain_error<bmp::errno_on_error>>;

inline double log1p_exp(double a) { return a > 0 ? a + std::log1p(std::exp(-a)) : std::log1p(std::exp(a)); }

inline double logistic(double a) { return a >= 0 ? 1.0 / (1.0 + std::exp(-a)) : std::exp(a) / (1.0 + std::exp(a)); }

inline double poisson_lpmf_log_mean(double y, double log_mu)
{
    return y * log_mu - std::exp(log_mu) - std::lgamma(y + 1.0);
}

/// NegBin(mu, psi) with Var = mu + mu^2/psi, evaluated from log mu.
inline double negbin_lpmf_log_mean(double y, double log_mu, double psi)
{
    const double log_psi = std::log(psi);
    const double log_mu_psi = log_psi + log1p_exp(log_mu - log_psi); // log(mu + psi)
    return std::lgamma(y + psi) - std::lgamma(psi) - std::lgamma(y + 1.0) + psi * (log_psi - log_mu_psi) +
           y * (log_mu - log_mu_psi);
}

} // namespace detail

/// A ModelSpec bound to observed counts, with the fixed matrices precomputed.
class PosteriorModel {
public:
    PosteriorModel(ModelSpec spec, Eigen::VectorXd y) : spec_(std::move(spec)), y_(std::move(y))
    {
        spec_.validate();
        if (y_.size() != spec_.memberships()) throw InvalidArgument("PosteriorModel: y must have length m");
        for (Index j = 0; j < y_.size(); ++j)
            if (!(y_(j) >= 0.0) || y_(j) != std::floor(y_(j)))
                throw InvalidArgument("PosteriorModel: counts must be non-negative integers (row " +
                                      std::to_string(j) + ")");
        const auto& h = spec_.h->weights();
        hx_ = h * spec_.x;
        log_offsets_ = spec_.offsets.array().log();
        if (spec_.parameterisation == Parameterisation::Inverse && spec_.spatial != Spatial::None)
            areal_map_ = pseudo_inverse(*spec_.h);
        if (spec_.parameterisation == Parameterisation::Inverse && spec_.spatial == Spatial::CAR) {
            const auto& g = spec_.car->graph();
            const Eigen::VectorXd inv_sqrt_d = g.degrees().array().rsqrt();
            const Eigen::MatrixXd c = inv_sqrt_d.asDiagonal() * g.dense_adjacency() * inv_sqrt_d.asDiagonal();
            Eigen::SelfAdjointEigenSolver<Eigen::MatrixXd> es(c);
            if (es.info() != Eigen::Success) throw FactorizationError("PosteriorModel: eigensolver failed");
            inverse_car_basis_ = h * inv_sqrt_d.asDiagonal() * es.eigenvectors();
            inverse_car_eigenvalues_ = es.eigenvalues();
        }
        if (spec_.parameterisation == Parameterisation::Inverse && spec_.spatial == Spatial::ICAR) {
            // Sigma~ = H Q+ H' / tau with Q = D - W restricted to sum-to-zero vectors.
            Eigen::SelfAdjointEigenSolver<Eigen::MatrixXd> es(icar_structure(spec_.car->graph()));
            const Index n = spec_.areas();
            Eigen::MatrixXd qplus = Eigen::MatrixXd::Zero(n, n);
            for (Index k = 1; k < n; ++k)
                qplus += es.eigenvectors().col(k) * es.eigenvectors().col(k).transpose() / es.eigenvalues()(k);
            Eigen::MatrixXd s = h * qplus * h.transpose();
            s = 0.5 * (s + s.transpose());
            Eigen::SelfAdjointEigenSolver<Eigen::MatrixXd> ss(s, Eigen::EigenvaluesOnly);
            if (!(ss.eigenvalues().minCoeff() > kRankTolerance * ss.eigenvalues().maxCoeff()))
                throw InvalidArgument("ModelSpec: ICAR covariance pushed through H is singular; "
                                      "the inverse ICAR model needs m < n with 1 outside the row space of H");
            icar_inverse_llt_ = Eigen::LLT<Eigen::MatrixXd>(s);
            icar_inverse_logdet_ = 2.0 * Eigen::MatrixXd(icar_inverse_llt_->matrixL()).diagonal().array().log().sum();
        }
        build_layout();
    }

    const ModelSpec& spec() const { return spec_; }
    const Eigen::VectorXd& counts() const { return y_; }
    const Eigen::MatrixXd& membership_covariates() const { return hx_; }
    /// Maps phi~ to areal phi under the inverse parameterisation (Moore-Penrose).
    const Eigen::MatrixXd& areal_map() const { return areal_map_; }
    /// H D^{-1/2} U, with U the eigenvectors behind the prior's cached spectrum (inverse CAR only).
    const Eigen::MatrixXd& inverse_car_basis() const { return inverse_car_basis_; }
    const Eigen::VectorXd& inverse_car_eigenvalues() const { return inverse_car_eigenvalues_; }

    // ---- unconstrained layout: [gamma | beta | phi_free | logit alpha | log tau | log psi] ----
    Index dimension() const { return dim_; }
    Index beta_offset() const { return 1; }
    Index phi_offset() const { return 1 + spec_.covariates(); }
    std::optional<Index> alpha_index() const { return alpha_idx_; }
    std::optional<Index> tau_index() const { return tau_idx_; }
    std::optional<Index> psi_index() const { return psi_idx_; }

    /// Post-ICAR keeps phi on the sum-to-zero subspace.
    bool centers_phi() const
    {
        return spec_.spatial == Spatial::ICAR && spec_.parameterisation == Parameterisation::Post;
    }

    void canonicalize(Eigen::VectorXd& u) const
    {
        if (centers_phi()) {
            auto block = u.segment(phi_offset(), spec_.phi_free_size());
            block.array() -= block.mean();
        }
    }

    ParamVector from_unconstrained(const Eigen::VectorXd& u) const
    {
        check_dim(u);
        ParamVector t;
        t.gamma = u(0);
        t.beta = u.segment(beta_offset(), spec_.covariates());
        t.phi_free = u.segment(phi_offset(), spec_.phi_free_size());
        if (centers_phi()) t.phi_free.array() -= t.phi_free.mean();
        if (alpha_idx_) t.alpha = detail::logistic(u(*alpha_idx_));
        if (tau_idx_) t.tau = std::exp(u(*tau_idx_));
        if (psi_idx_) t.psi = std::exp(u(*psi_idx_));
        return t;
    }

    Eigen::VectorXd to_unconstrained(const ParamVector& t) const
    {
        check_param(t);
        Eigen::VectorXd u(dim_);
        u(0) = t.gamma;
        u.segment(beta_offset(), spec_.covariates()) = t.beta;
        u.segment(phi_offset(), spec_.phi_free_size()) = t.phi_free;
        if (alpha_idx_) u(*alpha_idx_) = std::log(t.alpha) - std::log1p(-t.alpha);
        if (tau_idx_) u(*tau_idx_) = std::log(t.tau);
        if (psi_idx_) u(*psi_idx_) = std::log(t.psi);
        return u;
    }

    DerivedQuantities derived(const ParamVector& t) const
    {
        check_param(t);
        const Index n = spec_.areas(), m = spec_.memberships();
        DerivedQuantities d;
        if (spec_.spatial == Spatial::None) {
            d.phi = Eigen::VectorXd::Zero(n);
            d.phi_tilde = Eigen::VectorXd::Zero(m);
        } else if (spec_.parameterisation == Parameterisation::Post) {
            d.phi = t.phi_free;
            d.phi_tilde = spec_.h->weights() * t.phi_free;
        } else {
            d.phi_tilde = t.phi_free;
            d.phi = areal_map_ * t.phi_free;
        }
        d.log_rho = (spec_.x * t.beta + d.phi).array() + t.gamma;
        d.log_rho_tilde = (hx_ * t.beta + d.phi_tilde).array() + t.gamma;
        return d;
    }

    /// log(E~ rho~), length m.
    Eigen::VectorXd log_mean(const ParamVector& t) const { return log_offsets_ + derived(t).log_rho_tilde; }

    Eigen::VectorXd pointwise_log_likelihood(const ParamVector& t) const
    {
        const Eigen::VectorXd eta = log_mean(t);
        Eigen::VectorXd out(eta.size());
        for (Index j = 0; j < eta.size(); ++j) {
            if (!std::isfinite(eta(j))) throw NumericDomainError("log likelihood: non-finite linear predictor");
            out(j) = spec_.likelihood == Likelihood::Poisson
                         ? detail::poisson_lpmf_log_mean(y_(j), eta(j))
                         : detail::negbin_lpmf_log_mean(y_(j), eta(j), t.psi);
        }
        return out;
    }

    /// Cholesky and log-determinant of H Q+ H' (inverse-ICAR models only).
    const Eigen::LLT<Eigen::MatrixXd>& icar_inverse_chol() const { return *icar_inverse_llt_; }
    double icar_inverse_logdet() const { return icar_inverse_logdet_; }

    void check_param(const ParamVector& t) const
    {
        if (t.beta.size() != spec_.covariates()) throw InvalidArgument("ParamVector: beta has wrong length");
        if (t.phi_free.size() != spec_.phi_free_size()) throw InvalidArgument("ParamVector: phi has wrong length");
    }

private:
    void check_dim(const Eigen::VectorXd& u) const
    {
        if (u.size() != dim_) throw InvalidArgument("unconstrained vector has wrong dimension");
    }

    void build_layout()
    {
        Index k = 1 + spec_.covariates() + spec_.phi_free_size();
        if (spec_.has_alpha()) alpha_idx_ = k++;
        if (spec_.has_tau()) tau_idx_ = k++;
        if (spec_.has_psi()) psi_idx_ = k++;
        dim_ = k;
    }

    ModelSpec spec_;
    Eigen::VectorXd y_;
    Eigen::MatrixXd hx_;
    Eigen::VectorXd log_offsets_;
    Eigen::MatrixXd areal_map_;
    Eigen::MatrixXd inverse_car_basis_;
    Eigen::VectorXd inverse_car_eigenvalues_;
    std::optional<Eigen::LLT<Eigen::MatrixXd>> icar_inverse_llt_;
    double icar_inverse_logdet_ = 0.0;
    Index dim_ = 0;
    std::optional<Index> alpha_idx_, tau_idx_, psi_idx_;
};

inline double poisson_log_likelihood(const PosteriorModel& model, const ParamVector& theta)
{
    if (model.spec().likelihood != Likelihood::Poisson)
        throw InvalidArgument("poisson_log_likelihood: model likelihood is not Poisson");
    return model.pointwise_log_likelihood(theta).sum();
}

inline double negbin_log_likelihood(const PosteriorModel& model, const ParamVector& theta)
{
    if (model.spec().likelihood != Likelihood::NegBin)
        throw InvalidArgument("negbin_log_likelihood: model likelihood is not negative binomial");
    if (!(theta.psi > 0.0)) throw InvalidArgument("negbin_log_likelihood: psi must be positive");
    return model.pointwise_log_likelihood(theta).sum();
}

inline double log_likelihood(const PosteriorModel& model, const ParamVector& theta)
{
    return model.pointwise_log_likelihood(theta).sum();
}

namespace detail {

/// Gaussian N(0, S / tau) on the membership effect, S = H (D - alpha W)^{-1} H'.
/// Fills the gradient with respect to phi~, alpha and tau when requested.
struct InverseCarTerms {
    double value = 0.0;
    Eigen::VectorXd d_phi;
    double d_alpha = 0.0;
    double d_tau = 0.0;
};

inline InverseCarTerms inverse_car_terms(const PosteriorModel& model, const Eigen::VectorXd& phi_tilde, double alpha,
                                         double tau, bool want_gradient)
{
    // With D^{-1/2} W D^{-1/2} = U diag(lambda) U' and B = H D^{-1/2} U,
    // S = B diag(1 / (1 - alpha lambda)) B' and dS/dalpha = B diag(lambda / (1 - alpha lambda)^2) B'.
    const auto& b = model.inverse_car_basis();
    const Eigen::ArrayXd lam = model.inverse_car_eigenvalues().array();
    const Eigen::ArrayXd w = (1.0 - alpha * lam).inverse();
    if (!(w > 0.0).all()) throw FactorizationError("inverse CAR: D - alpha W is not PD");
    const Index m = b.rows();
    Eigen::MatrixXd s = b * w.matrix().asDiagonal() * b.transpose();
    s = 0.5 * (s + s.transpose());
    Eigen::LLT<Eigen::MatrixXd> sllt(s);
    if (sllt.info() != Eigen::Success) throw FactorizationError("inverse CAR: H Sigma H' is not PD");
    const double logdet_s = 2.0 * sllt.matrixLLT().diagonal().array().log().sum();
    const Eigen::VectorXd v = sllt.solve(phi_tilde);
    const double quad = phi_tilde.dot(v);
    const auto md = static_cast<double>(m);

    InverseCarTerms out;
    out.value = -0.5 * md * kLog2Pi + 0.5 * md * std::log(tau) - 0.5 * logdet_s - 0.5 * tau * quad;
    if (want_gradient) {
        out.d_phi = -tau * v;
        out.d_tau = 0.5 * md / tau - 0.5 * quad;
        const Eigen::ArrayXd dw = lam * w.square();
        const Eigen::MatrixXd k = sllt.matrixL().solve(b); // tr(S^{-1} B diag(dw) B') = sum_k dw_k |K e_k|^2
        const double trace = (k.colwise().squaredNorm().transpose().array() * dw).sum();
        const Eigen::ArrayXd btv = (b.transpose() * v).array();
        out.d_alpha = -0.5 * trace + 0.5 * tau * (dw * btv.square()).sum();
    }
    return out;
}

} // namespace detail

/// Sum of the log prior densities; -inf when a constrained component is out of its domain.
inline double log_prior(const PosteriorModel& model, const ParamVector& t)
{
    const auto& spec = model.spec();
    const auto& pc = spec.priors;
    model.check_param(t);
    constexpr double ninf = -std::numeric_limits<double>::infinity();
    if (spec.has_alpha() && !(t.alpha > 0.0 && t.alpha < 1.0)) return ninf;
    if (spec.has_tau() && !(t.tau > 0.0 && std::isfinite(t.tau))) return ninf;
    if (spec.has_psi() && !(t.psi > 0.0 && std::isfinite(t.psi))) return ninf;

    double lp = detail::normal_lpdf(t.gamma, pc.coef_sd);
    for (Index k = 0; k < t.beta.size(); ++k) lp += detail::normal_lpdf(t.beta(k), pc.coef_sd);
    if (spec.has_tau()) lp += detail::gamma_lpdf(t.tau, pc.tau_shape, pc.tau_rate);
    if (spec.has_psi()) lp += detail::gamma_lpdf(t.psi, pc.psi_shape, pc.psi_rate);

    const bool post = spec.parameterisation == Parameterisation::Post;
    switch (spec.spatial) {
    case Spatial::None: break;
    case Spatial::CAR:
        if (post)
            lp += car_log_density(*spec.car, CarParams{t.alpha, t.tau}, t.phi_free);
        else
            lp += detail::inverse_car_terms(model, t.phi_free, t.alpha, t.tau, false).value;
        break;
    case Spatial::ICAR:
        if (post) {
            lp += icar_log_density_unnormalized(spec.car->graph(), t.tau, t.phi_free) +
                  0.5 * static_cast<double>(spec.areas() - 1) * std::log(t.tau);
        } else {
            const auto& llt = model.icar_inverse_chol();
            const auto md = static_cast<double>(spec.memberships());
            lp += -0.5 * md * detail::kLog2Pi + 0.5 * md * std::log(t.tau) -
                  0.5 * model.icar_inverse_logdet() - 0.5 * t.tau * t.phi_free.dot(llt.solve(t.phi_free));
        }
        break;
    }
    return lp;
}

struct LogDensityGradient {
    double value = -std::numeric_limits<double>::infinity();
    Eigen::VectorXd gradient;
    bool rejected = true;
};

/// Log posterior on the unconstrained scale (including transform Jacobians) and its gradient.
inline LogDensityGradient log_posterior_and_gradient(const PosteriorModel& model, const Eigen::VectorXd& u)
{
    LogDensityGradient out;
    const auto& spec = model.spec();
    const auto& pc = spec.priors;
    const ParamVector t = model.from_unconstrained(u);
    const Index p = spec.covariates(), k = spec.phi_free_size();
    if (spec.has_alpha() && !(t.alpha > 0.0 && t.alpha < 1.0)) return out;
    if (spec.has_tau() && !(t.tau > 0.0 && std::isfinite(t.tau))) return out;
    if (spec.has_psi() && !(t.psi > 0.0 && std::isfinite(t.psi))) return out;

    Eigen::VectorXd grad = Eigen::VectorXd::Zero(model.dimension());
    double d_alpha = 0.0, d_tau = 0.0, d_psi = 0.0; // constrained-scale partials

    // likelihood
    const Eigen::VectorXd eta = model.log_mean(t);
    if (!eta.allFinite()) return out;
    const auto& y = model.counts();
    Eigen::VectorXd g_eta(eta.size());
    double ll = 0.0;
    for (Index j = 0; j < eta.size(); ++j) {
        const double mu = std::exp(eta(j));
        if (spec.likelihood == Likelihood::Poisson) {
            ll += detail::poisson_lpmf_log_mean(y(j), eta(j));
            g_eta(j) = y(j) - mu;
        } else {
            const double psi = t.psi;
            ll += detail::negbin_lpmf_log_mean(y(j), eta(j), psi);
            const double mu_psi = mu + psi;
            g_eta(j) = psi * (y(j) - mu) / mu_psi;
            const detail::NoThrowPolicy pol;
            d_psi += boost::math::digamma(y(j) + psi, pol) - boost::math::digamma(psi, pol) + std::log(psi) -
                     std::log(mu_psi) + (mu - y(j)) / mu_psi;
        }
    }
    if (!std::isfinite(ll)) return out;
    grad(0) = g_eta.sum();
    grad.segment(model.beta_offset(), p) = model.membership_covariates().transpose() * g_eta;
    if (k > 0) {
        if (spec.parameterisation == Parameterisation::Post)
            grad.segment(model.phi_offset(), k) = spec.h->weights().transpose() * g_eta;
        else
            grad.segment(model.phi_offset(), k) = g_eta;
    }

    // priors on gamma, beta, tau, psi
    double lp = detail::normal_lpdf(t.gamma, pc.coef_sd);
    grad(0) -= t.gamma / (pc.coef_sd * pc.coef_sd);
    for (Index b = 0; b < p; ++b) {
        lp += detail::normal_lpdf(t.beta(b), pc.coef_sd);
        grad(model.beta_offset() + b) -= t.beta(b) / (pc.coef_sd * pc.coef_sd);
    }
    if (spec.has_tau()) {
        lp += detail::gamma_lpdf(t.tau, pc.tau_shape, pc.tau_rate);
        d_tau += (pc.tau_shape - 1.0) / t.tau - pc.tau_rate;
    }
    if (spec.has_psi()) {
        lp += detail::gamma_lpdf(t.psi, pc.psi_shape, pc.psi_rate);
        d_psi += (pc.psi_shape - 1.0) / t.psi - pc.psi_rate;
    }

    // random-effect block
    auto phi_grad = grad.segment(model.phi_offset(), k);
    const bool post = spec.parameterisation == Parameterisation::Post;
    if (spec.spatial == Spatial::CAR && post) {
        const auto& car = *spec.car;
        const auto& g = car.graph();
        lp += car_log_density(car, CarParams{t.alpha, t.tau}, t.phi_free);
        const Eigen::VectorXd w_phi = g.adjacency_times(t.phi_free);
        phi_grad -= t.tau * (g.degrees().cwiseProduct(t.phi_free) - t.alpha * w_phi);
        double s = 0.0;
        for (Index i = 0; i < car.eigenvalues().size(); ++i) {
            const double lam = car.eigenvalues()(i);
            s += lam / (1.0 - t.alpha * lam);
        }
        d_alpha += -0.5 * s + 0.5 * t.tau * t.phi_free.dot(w_phi);
        d_tau += 0.5 * static_cast<double>(spec.areas()) / t.tau -
                 0.5 * car_quadratic_form(car, t.alpha, t.phi_free);
    } else if (spec.spatial == Spatial::CAR) {
        const auto terms = detail::inverse_car_terms(model, t.phi_free, t.alpha, t.tau, true);
        lp += terms.value;
        phi_grad += terms.d_phi;
        d_alpha += terms.d_alpha;
        d_tau += terms.d_tau;
    } else if (spec.spatial == Spatial::ICAR && post) {
        const auto& g = spec.car->graph();
        const Eigen::VectorXd lap = g.degrees().cwiseProduct(t.phi_free) - g.adjacency_times(t.phi_free);
        const double pairwise = t.phi_free.dot(lap);
        lp += -0.5 * t.tau * pairwise + 0.5 * static_cast<double>(spec.areas() - 1) * std::log(t.tau);
        phi_grad -= t.tau * lap;
        d_tau += 0.5 * static_cast<double>(spec.areas() - 1) / t.tau - 0.5 * pairwise;
        // the density is flat along the constant vector; keep the gradient in the subspace
        phi_grad.array() -= phi_grad.mean();
    } else if (spec.spatial == Spatial::ICAR) {
        const auto& llt = model.icar_inverse_chol();
        const Eigen::VectorXd v = llt.solve(t.phi_free);
        const double quad = t.phi_free.dot(v);
        const auto md = static_cast<double>(spec.memberships());
        lp += -0.5 * md * detail::kLog2Pi + 0.5 * md * std::log(t.tau) - 0.5 * model.icar_inverse_logdet() -
              0.5 * t.tau * quad;
        phi_grad -= t.tau * v;
        d_tau += 0.5 * md / t.tau - 0.5 * quad;
    }

    // transforms: alpha = logistic(a), tau = exp(.), psi = exp(.)
    double log_jac = 0.0;
    if (auto ia = model.alpha_index()) {
        log_jac += std::log(t.alpha) + std::log1p(-t.alpha);
        grad(*ia) = d_alpha * t.alpha * (1.0 - t.alpha) + (1.0 - 2.0 * t.alpha);
    }
    if (auto it = model.tau_index()) {
        log_jac += u(*it);
        grad(*it) = d_tau * t.tau + 1.0;
    }
    if (auto ip = model.psi_index()) {
        log_jac += u(*ip);
        grad(*ip) = d_psi * t.psi + 1.0;
    }

    out.value = ll + lp + log_jac;
    if (!std::isfinite(out.value) || !grad.allFinite()) return out;
    out.gradient = std::move(grad);
    out.rejected = false;
    return out;
}

/// Counts drawn from the model's likelihood at log means eta (NegBin via its gamma-Poisson mixture).
template <class Rng>
Eigen::VectorXd simulate_counts(Likelihood lik, const Eigen::VectorXd& log_mu, double psi, Rng& rng)
{
    Eigen::VectorXd y(log_mu.size());
    for (Index j = 0; j < log_mu.size(); ++j) {
        double mean = std::exp(log_mu(j));
        if (lik == Likelihood::NegBin) mean = std::gamma_distribution<double>(psi, mean / psi)(rng);
        y(j) = mean > 0.0 ? static_cast<double>(std::poisson_distribution<long long>(mean)(rng)) : 0.0;
    }
    return y;
}

/// Adapter exposing a PosteriorModel to the sampler.
class ModelTarget {
public:
    explicit ModelTarget(const PosteriorModel& model) : model_(&model) {}
    Index dimension() const { return model_->dimension(); }
    LogDensityGradient log_density_gradient(const Eigen::VectorXd& u) const
    {
        try {
            return log_posterior_and_gradient(*model_, u);
        } catch (const NumericDomainError&) {
            return {};
        } catch (const FactorizationError&) {
            return {};
        }
    }
    void canonicalize(Eigen::VectorXd& u) const { model_->canonicalize(u); }

private:
    const PosteriorModel* model_;
};

} // namespace carmm
