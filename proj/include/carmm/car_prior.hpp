#pragma once

#include <cmath>
#include <cstdint>
#include <numbers>
#include <optional>
#include <random>
#include <string>

#include <Eigen/Dense>

#include "carmm/error.hpp"
#include "carmm/spatial_graph.hpp"

namespace carmm {

/// Proper CAR hyperparameters: spatial dependence alpha in [0,1) and precision tau > 0.
struct CarParams {
    double alpha = 0.0;
    double tau = 1.0;

    void validate() const
    {
        if (!(alpha >= 0.0 && alpha < 1.0))
            throw InvalidArgument("CAR alpha must lie in [0,1), got " + std::to_string(alpha));
        if (!(tau > 0.0) || !std::isfinite(tau))
            throw InvalidArgument("CAR tau must be positive, got " + std::to_string(tau));
    }
};

/// CAR(alpha, tau, W) prior on a fixed graph.
///
/// The eigenvalues of D^{-1/2} W D^{-1/2} do not depend on (alpha, tau), so they
/// are computed once here and every log-determinant afterwards is O(n).
class CarPrior {
public:
    explicit CarPrior(AdjacencyGraph graph) : graph_(std::move(graph))
    {
        const Index n = graph_.size();
        const Eigen::VectorXd inv_sqrt_d = graph_.degrees().array().rsqrt();
        Eigen::MatrixXd s = Eigen::MatrixXd::Zero(n, n);
        for (const auto& [i, j] : graph_.edges()) s(i, j) = s(j, i) = inv_sqrt_d(i) * inv_sqrt_d(j);
        Eigen::SelfAdjointEigenSolver<Eigen::MatrixXd> es(s, Eigen::EigenvaluesOnly);
        if (es.info() != Eigen::Success) throw FactorizationError("CarPrior: eigensolver failed");
        eigvals_ = es.eigenvalues(); // ascending
        sum_log_degrees_ = graph_.degrees().array().log().sum();
    }

    const AdjacencyGraph& graph() const { return graph_; }
    Index size() const { return graph_.size(); }
    const Eigen::VectorXd& eigenvalues() const { return eigvals_; }
    double sum_log_degrees() const { return sum_log_degrees_; }

private:
    AdjacencyGraph graph_;
    Eigen::VectorXd eigvals_;
    double sum_log_degrees_ = 0.0;
};

/// Q = tau (D - alpha W), dense.
inline Eigen::MatrixXd build_precision(const CarPrior& prior, const CarParams& p)
{
    p.validate();
    const auto& g = prior.graph();
    Eigen::MatrixXd q = Eigen::MatrixXd::Zero(g.size(), g.size());
    q.diagonal() = p.tau * g.degrees();
    for (const auto& [i, j] : g.edges()) q(i, j) = q(j, i) = -p.tau * p.alpha;
    return q;
}

/// Intrinsic precision D - W (rank n-1 on a connected graph).
inline Eigen::MatrixXd icar_structure(const AdjacencyGraph& g)
{
    Eigen::MatrixXd q = Eigen::MatrixXd::Zero(g.size(), g.size());
    q.diagonal() = g.degrees();
    for (const auto& [i, j] : g.edges()) q(i, j) = q(j, i) = -1.0;
    return q;
}

inline double log_det_precision(const CarPrior& prior, const CarParams& p)
{
    p.validate();
    const auto n = static_cast<double>(prior.size());
    double s = n * std::log(p.tau) + prior.sum_log_degrees();
    for (Index i = 0; i < prior.eigenvalues().size(); ++i) {
        const double f = 1.0 - p.alpha * prior.eigenvalues()(i);
        if (!(f > 0.0)) throw NumericDomainError("log_det_precision: 1 - alpha*lambda <= 0");
        s += std::log(f);
    }
    return s;
}

/// phi' (D - alpha W) phi, assembled from the edge list.
inline double car_quadratic_form(const CarPrior& prior, double alpha, const Eigen::VectorXd& phi)
{
    const auto& g = prior.graph();
    double diag = (g.degrees().array() * phi.array().square()).sum();
    double off = 0.0;
    for (const auto& [i, j] : g.edges()) off += phi(i) * phi(j);
    return diag - 2.0 * alpha * off;
}

inline double car_log_density(const CarPrior& prior, const CarParams& p, const Eigen::VectorXd& phi)
{
    if (phi.size() != prior.size())
        throw InvalidArgument("car_log_density: phi has length " + std::to_string(phi.size()) +
                              ", expected " + std::to_string(prior.size()));
    const auto n = static_cast<double>(prior.size());
    return -0.5 * n * std::log(2.0 * std::numbers::pi) + 0.5 * log_det_precision(prior, p) -
           0.5 * p.tau * car_quadratic_form(prior, p.alpha, phi);
}

inline constexpr double kSumToZeroTolerance = 1e-8;

/// ICAR log density without its normalising constant: -(tau/2) sum_{i~j} (phi_i - phi_j)^2.
/// The caller is responsible for the sum-to-zero constraint; a violation throws.
inline double icar_log_density_unnormalized(const AdjacencyGraph& g, double tau, const Eigen::VectorXd& phi)
{
    if (phi.size() != g.size()) throw InvalidArgument("icar_log_density: dimension mismatch");
    if (!(tau > 0.0)) throw InvalidArgument("icar_log_density: tau must be positive");
    if (std::abs(phi.sum()) > kSumToZeroTolerance)
        throw InvalidArgument("icar_log_density: sum-to-zero constraint violated (sum = " +
                              std::to_string(phi.sum()) + ")");
    double s = 0.0;
    for (const auto& [i, j] : g.edges()) s += (phi(i) - phi(j)) * (phi(i) - phi(j));
    return -0.5 * tau * s;
}

template <class Rng>
Eigen::VectorXd standard_normal_vector(Index n, Rng& rng)
{
    std::normal_distribution<double> z;
    Eigen::VectorXd v(n);
    for (Index i = 0; i < n; ++i) v(i) = z(rng);
    return v;
}

/// Exact draw from N(0, Q^{-1}) using Q = L L'.
template <class Rng>
Eigen::VectorXd sample_prior(const CarPrior& prior, const CarParams& p, Rng& rng)
{
    Eigen::LLT<Eigen::MatrixXd> llt(build_precision(prior, p));
    if (llt.info() != Eigen::Success) throw FactorizationError("sample_prior: precision is not PD");
    Eigen::VectorXd z = standard_normal_vector(prior.size(), rng);
    return llt.matrixU().solve(z);
}

inline Eigen::VectorXd sample_prior(const CarPrior& prior, const CarParams& p, std::uint64_t seed)
{
    std::mt19937_64 rng(seed);
    return sample_prior(prior, p, rng);
}

/// Draw from the ICAR prior restricted to sum-to-zero vectors.
template <class Rng>
Eigen::VectorXd sample_icar(const AdjacencyGraph& g, double tau, Rng& rng)
{
    Eigen::SelfAdjointEigenSolver<Eigen::MatrixXd> es(icar_structure(g));
    const Eigen::VectorXd z = standard_normal_vector(g.size(), rng);
    Eigen::VectorXd phi = Eigen::VectorXd::Zero(g.size());
    // eigenvalue 0 belongs to the constant vector; skip it.
    for (Index k = 1; k < g.size(); ++k)
        phi += es.eigenvectors().col(k) * (z(k) / std::sqrt(tau * es.eigenvalues()(k)));
    phi.array() -= phi.mean();
    return phi;
}

// ---- general (C, M) representation ----

enum class CarCondition { C1, C2, C3, C4 };

inline std::string to_string(CarCondition c)
{
    switch (c) {
    case CarCondition::C1: return "C1 (I - C has positive eigenvalues)";
    case CarCondition::C2: return "C2 (M diagonal with positive entries)";
    case CarCondition::C3: return "C3 (C has zero diagonal)";
    case CarCondition::C4: return "C4 (C_ij / M_ii = C_ji / M_jj)";
    }
    return "?";
}

/// Sigma = (I - C)^{-1} M.
struct CarPair {
    Eigen::MatrixXd c;
    Eigen::MatrixXd m;

    Eigen::MatrixXd covariance() const
    {
        const Index n = c.rows();
        return (Eigen::MatrixXd::Identity(n, n) - c).partialPivLu().solve(m);
    }
};

struct CarPairCheck {
    bool ok = true;
    std::optional<CarCondition> violated;
    explicit operator bool() const { return ok; }
};

inline CarPairCheck validate_car_pair(const CarPair& pair, double tol = 1e-10)
{
    const Index n = pair.c.rows();
    if (pair.c.cols() != n || pair.m.rows() != n || pair.m.cols() != n)
        throw InvalidArgument("validate_car_pair: C and M must be square and of equal size");
    auto fail = [](CarCondition c) { return CarPairCheck{false, c}; };

    Eigen::EigenSolver<Eigen::MatrixXd> es(Eigen::MatrixXd::Identity(n, n) - pair.c, false);
    if (es.info() != Eigen::Success) return fail(CarCondition::C1);
    for (Index i = 0; i < n; ++i) {
        const auto ev = es.eigenvalues()(i);
        if (!(ev.real() > tol) || std::abs(ev.imag()) > tol * std::max(1.0, std::abs(ev.real())))
            return fail(CarCondition::C1);
    }
    for (Index i = 0; i < n; ++i)
        for (Index j = 0; j < n; ++j) {
            if (i == j && !(pair.m(i, i) > 0.0)) return fail(CarCondition::C2);
            if (i != j && std::abs(pair.m(i, j)) > tol) return fail(CarCondition::C2);
        }
    for (Index i = 0; i < n; ++i)
        if (std::abs(pair.c(i, i)) > tol) return fail(CarCondition::C3);
    for (Index i = 0; i < n; ++i)
        for (Index j = i + 1; j < n; ++j) {
            const double a = pair.c(i, j) / pair.m(i, i);
            const double b = pair.c(j, i) / pair.m(j, j);
            if (std::abs(a - b) > tol * std::max(1.0, std::max(std::abs(a), std::abs(b))))
                return fail(CarCondition::C4);
        }
    return {};
}

/// The unique (C, M) with (I - C)^{-1} M = Sigma: M = diag(Q)^{-1}, C = I - M Q for Q = Sigma^{-1}.
/// A singular or indefinite Sigma has no such representation and throws FactorizationError.
inline CarPair extract_car_pair(const Eigen::MatrixXd& sigma)
{
    const Index n = sigma.rows();
    if (sigma.cols() != n) throw InvalidArgument("extract_car_pair: Sigma must be square");
    if (!sigma.isApprox(sigma.transpose(), 1e-10))
        throw InvalidArgument("extract_car_pair: Sigma must be symmetric");
    // rank is certified against 1e-10 * lambda_max, matching the membership rank threshold.
    Eigen::SelfAdjointEigenSolver<Eigen::MatrixXd> es(sigma, Eigen::EigenvaluesOnly);
    const double lmax = es.eigenvalues().maxCoeff();
    if (!(es.eigenvalues().minCoeff() > 1e-10 * lmax))
        throw FactorizationError("extract_car_pair: covariance is not positive definite (rank deficient)");
    Eigen::LLT<Eigen::MatrixXd> llt(sigma);
    if (llt.info() != Eigen::Success) throw FactorizationError("extract_car_pair: Cholesky failed");
    Eigen::MatrixXd q = llt.solve(Eigen::MatrixXd::Identity(n, n));
    q = 0.5 * (q + q.transpose());
    CarPair pair;
    pair.m = Eigen::MatrixXd::Zero(n, n);
    pair.m.diagonal() = q.diagonal().cwiseInverse();
    pair.c = Eigen::MatrixXd::Identity(n, n) - pair.m * q;
    pair.c.diagonal().setZero();
    return pair;
}

} // namespace carmm
