#include <gtest/gtest.h>

#include <cmath>
#include <numbers>

#include "support.hpp"

using namespace carmm;
using carmm::testing::gaussian_matrix;
using carmm::testing::simulated_counts;
using carmm::testing::small_spec;

namespace {

/// One membership spanning a two-area path, no covariates, given offset.
PosteriorModel single_membership(Likelihood lik, double offset, double y)
{
    ModelSpec s;
    s.likelihood = lik;
    s.spatial = Spatial::None;
    s.car = std::make_shared<const CarPrior>(make_grid(1, 2));
    s.h = std::make_shared<const MembershipMatrix>(Eigen::RowVector2d(0.5, 0.5));
    s.x = Eigen::MatrixXd::Zero(2, 0);
    s.offsets = Eigen::VectorXd::Constant(1, offset);
    return PosteriorModel(s, Eigen::VectorXd::Constant(1, y));
}

ParamVector zero_params(const PosteriorModel& model)
{
    ParamVector t;
    t.beta = Eigen::VectorXd::Zero(model.spec().covariates());
    t.phi_free = Eigen::VectorXd::Zero(model.spec().phi_free_size());
    return t;
}

double negbin_pmf_log_direct(double y, double mu, double psi)
{
    return std::lgamma(y + psi) - std::lgamma(psi) - std::lgamma(y + 1.0) + psi * std::log(psi / (mu + psi)) +
           y * std::log(mu / (mu + psi));
}

struct Combo {
    Likelihood lik;
    Parameterisation par;
    Spatial sp;
};

std::vector<Combo> all_combos()
{
    std::vector<Combo> out;
    for (auto lik : {Likelihood::Poisson, Likelihood::NegBin})
        for (auto par : {Parameterisation::Post, Parameterisation::Inverse})
            for (auto sp : {Spatial::CAR, Spatial::ICAR, Spatial::None}) out.push_back({lik, par, sp});
    return out;
}

std::string label(const Combo& c) { return to_string(c.lik) + "/" + to_string(c.par) + "/" + to_string(c.sp); }

} // namespace

TEST(PoissonLikelihood, ZeroCountUnitMean)
{
    const auto model = single_membership(Likelihood::Poisson, 1.0, 0.0);
    EXPECT_NEAR(poisson_log_likelihood(model, zero_params(model)), -1.0, 1e-15);
}

TEST(PoissonLikelihood, CountTwoMeanTwo)
{
    const auto model = single_membership(Likelihood::Poisson, 2.0, 2.0);
    EXPECT_NEAR(poisson_log_likelihood(model, zero_params(model)), std::log(2.0) - 2.0, 1e-14);
    EXPECT_THROW(negbin_log_likelihood(model, zero_params(model)), InvalidArgument);
}

TEST(NegBinLikelihood, MatchesDirectPmf)
{
    for (double y : {0.0, 1.0, 7.0, 30.0})
        for (double psi : {0.5, 2.0, 40.0}) {
            const auto model = single_membership(Likelihood::NegBin, 5.0, y);
            auto t = zero_params(model);
            t.psi = psi;
            EXPECT_NEAR(negbin_log_likelihood(model, t), negbin_pmf_log_direct(y, 5.0, psi), 1e-10);
        }
}

TEST(NegBinLikelihood, ZeroCount)
{
    const auto model = single_membership(Likelihood::NegBin, 3.0, 0.0);
    auto t = zero_params(model);
    t.psi = 2.0;
    EXPECT_NEAR(negbin_log_likelihood(model, t), 2.0 * std::log(2.0 / 5.0), 1e-14);
}

TEST(NegBinLikelihood, PoissonLimit)
{
    for (double y : {0.0, 3.0, 12.0}) {
        const auto nb = single_membership(Likelihood::NegBin, 4.0, y);
        const auto po = single_membership(Likelihood::Poisson, 4.0, y);
        auto t = zero_params(nb);
        t.psi = 1e6;
        EXPECT_NEAR(negbin_log_likelihood(nb, t), poisson_log_likelihood(po, zero_params(po)), 1e-4);
    }
}

TEST(SimulateCounts, NegBinMoments)
{
    std::mt19937_64 rng(2024);
    const int draws = 100000;
    const Eigen::VectorXd y = simulate_counts(Likelihood::NegBin, Eigen::VectorXd::Constant(draws, std::log(5.0)), 2.0, rng);
    const double mean = y.mean();
    const double var = (y.array() - mean).square().sum() / (draws - 1);
    EXPECT_NEAR(mean, 5.0, 0.05);
    EXPECT_NEAR(var, 17.5, 0.05 * 17.5);
}

TEST(SimulateCounts, PoissonMoments)
{
    std::mt19937_64 rng(7);
    const Eigen::VectorXd y = simulate_counts(Likelihood::Poisson, Eigen::VectorXd::Constant(50000, std::log(3.0)), 1.0, rng);
    const double mean = y.mean();
    EXPECT_NEAR(mean, 3.0, 0.05);
    EXPECT_NEAR((y.array() - mean).square().sum() / 49999.0, 3.0, 0.1);
}

TEST(LogPrior, HandValues)
{
    auto s = small_spec(Likelihood::Poisson, Parameterisation::Post, Spatial::None, 2, 2, 4, 1);
    const PosteriorModel glm(s, simulated_counts(s, 1));
    const double normal_mode = -std::log(0.7 * std::sqrt(2.0 * std::numbers::pi));
    EXPECT_NEAR(log_prior(glm, zero_params(glm)), 3.0 * normal_mode, 1e-14);

    s.spatial = Spatial::ICAR;
    const PosteriorModel icar(s, simulated_counts(s, 1));
    auto t = zero_params(icar);
    t.tau = 10.0;
    // ICAR at phi = 0 contributes (n-1)/2 log tau
    const double expect = 3.0 * normal_mode + std::log(0.4) - 2.0 + 1.5 * std::log(10.0);
    EXPECT_NEAR(log_prior(icar, t), expect, 1e-12);
}

TEST(LogPrior, CarBlockMatchesCarDensity)
{
    const auto s = small_spec(Likelihood::NegBin, Parameterisation::Post, Spatial::CAR, 3, 3, 12, 2);
    const PosteriorModel model(s, simulated_counts(s, 2));
    std::mt19937_64 rng(3);
    ParamVector t;
    t.gamma = 0.2;
    t.beta = Eigen::Vector2d(0.1, -0.4);
    t.phi_free = gaussian_matrix(9, 1, rng);
    t.alpha = 0.7;
    t.tau = 3.0;
    t.psi = 4.0;
    double expect = car_log_density(*s.car, {0.7, 3.0}, t.phi_free);
    for (double v : {0.2, 0.1, -0.4}) expect += -0.5 * std::log(2.0 * std::numbers::pi * 0.49) - v * v / 0.98;
    for (double v : {3.0, 4.0}) expect += 2.0 * std::log(0.2) + std::log(v) - 0.2 * v;
    EXPECT_NEAR(log_prior(model, t), expect, 1e-10);
}

TEST(LogPrior, OutOfDomainIsMinusInfinity)
{
    const auto s = small_spec(Likelihood::NegBin, Parameterisation::Post, Spatial::CAR, 2, 2, 4, 3);
    const PosteriorModel model(s, simulated_counts(s, 3));
    auto t = zero_params(model);
    for (double a : {-0.1, 1.0, 1.5}) {
        t.alpha = a;
        EXPECT_EQ(log_prior(model, t), -std::numeric_limits<double>::infinity());
    }
    t.alpha = 0.5;
    t.tau = 0.0;
    EXPECT_EQ(log_prior(model, t), -std::numeric_limits<double>::infinity());
    t.tau = 1.0;
    t.psi = -1.0;
    EXPECT_EQ(log_prior(model, t), -std::numeric_limits<double>::infinity());
}

TEST(LogPosterior, InverseCarPriorMatchesDenseGaussian)
{
    const auto s = small_spec(Likelihood::Poisson, Parameterisation::Inverse, Spatial::CAR, 3, 3, 7, 4);
    const PosteriorModel model(s, simulated_counts(s, 4));
    std::mt19937_64 rng(5);
    auto t = zero_params(model);
    t.phi_free = gaussian_matrix(7, 1, rng);
    t.alpha = 0.6;
    t.tau = 2.0;
    const Eigen::MatrixXd st = pushforward_covariance(*s.h, build_precision(*s.car, {0.6, 2.0}).inverse()).sigma;
    const Eigen::LLT<Eigen::MatrixXd> llt(st);
    const double logdet = 2.0 * Eigen::MatrixXd(llt.matrixL()).diagonal().array().log().sum();
    const double dense = -3.5 * std::log(2.0 * std::numbers::pi) - 0.5 * logdet - 0.5 * t.phi_free.dot(llt.solve(t.phi_free));
    const double others = 3.0 * -std::log(0.7 * std::sqrt(2.0 * std::numbers::pi)) + 2.0 * std::log(0.2) +
                          std::log(2.0) - 0.4;
    EXPECT_NEAR(log_prior(model, t), others + dense, 1e-9);
}

TEST(LogPosterior, GradientMatchesFiniteDifferences)
{
    for (const auto& c : all_combos()) {
        const Index m = c.par == Parameterisation::Inverse ? 7 : 12;
        const auto s = small_spec(c.lik, c.par, c.sp, 3, 3, m, 11);
        const PosteriorModel model(s, simulated_counts(s, 12));
        std::mt19937_64 rng(13);
        for (int point = 0; point < 10; ++point) {
            Eigen::VectorXd u = gaussian_matrix(model.dimension(), 1, rng, 0.5);
            model.canonicalize(u);
            const auto at = log_posterior_and_gradient(model, u);
            ASSERT_FALSE(at.rejected) << label(c);
            for (Index i = 0; i < u.size(); ++i) {
                const double h = 1e-5 * std::max(1.0, std::abs(u(i)));
                Eigen::VectorXd up = u, dn = u;
                up(i) += h;
                dn(i) -= h;
                const double fd = (log_posterior_and_gradient(model, up).value -
                                   log_posterior_and_gradient(model, dn).value) / (2.0 * h);
                const double scale = std::max(1.0, std::abs(fd));
                EXPECT_LE(std::abs(fd - at.gradient(i)) / scale, 1e-5) << label(c) << " coordinate " << i;
            }
        }
    }
}

TEST(LogPosterior, InterceptGradientIsResidualSum)
{
    const auto s = small_spec(Likelihood::Poisson, Parameterisation::Post, Spatial::CAR, 3, 3, 12, 21);
    const PosteriorModel model(s, simulated_counts(s, 21));
    std::mt19937_64 rng(22);
    const Eigen::VectorXd u = gaussian_matrix(model.dimension(), 1, rng, 0.3);
    const auto out = log_posterior_and_gradient(model, u);
    const ParamVector t = model.from_unconstrained(u);
    const double residual = (model.counts().array() - model.log_mean(t).array().exp()).sum();
    EXPECT_NEAR(out.gradient(0) + t.gamma / 0.49, residual, 1e-9);
}

TEST(LogPosterior, NonFiniteParametersAreRejected)
{
    const auto s = small_spec(Likelihood::NegBin, Parameterisation::Post, Spatial::CAR, 2, 2, 4, 5);
    const PosteriorModel model(s, simulated_counts(s, 5));
    Eigen::VectorXd u = Eigen::VectorXd::Zero(model.dimension());
    u(*model.tau_index()) = 800.0; // tau overflows
    const auto out = log_posterior_and_gradient(model, u);
    EXPECT_TRUE(out.rejected);
    EXPECT_EQ(out.gradient.size(), 0);
    u.setZero();
    u(0) = 1e6; // mean overflows
    EXPECT_TRUE(log_posterior_and_gradient(model, u).rejected);
}

TEST(LogPosterior, PostAndInverseAgreeAtSquareH)
{
    // With m = n and H invertible, phi~ = H phi has density p(phi) / |det H|.
    for (auto lik : {Likelihood::Poisson, Likelihood::NegBin}) {
        const auto post_spec = small_spec(lik, Parameterisation::Post, Spatial::CAR, 3, 3, 9, 31);
        auto inv_spec = post_spec;
        inv_spec.parameterisation = Parameterisation::Inverse;
        const Eigen::VectorXd y = simulated_counts(post_spec, 32);
        const PosteriorModel post(post_spec, y), inv(inv_spec, y);
        const double log_abs_det = std::log(std::abs(post_spec.h->weights().determinant()));
        std::mt19937_64 rng(33);
        for (int k = 0; k < 5; ++k) {
            ParamVector tp;
            tp.gamma = 0.1 * k;
            tp.beta = gaussian_matrix(2, 1, rng, 0.3);
            tp.phi_free = gaussian_matrix(9, 1, rng, 0.5);
            tp.alpha = 0.15 * (k + 1);
            tp.tau = 0.5 + k;
            tp.psi = 3.0;
            ParamVector ti = tp;
            ti.phi_free = post_spec.h->weights() * tp.phi_free;
            const double lp_post = log_prior(post, tp) + log_likelihood(post, tp);
            const double lp_inv = log_prior(inv, ti) + log_likelihood(inv, ti);
            EXPECT_NEAR(lp_inv, lp_post - log_abs_det, 1e-8);
            EXPECT_TRUE(inv.derived(ti).phi.isApprox(tp.phi_free, 1e-10));
        }
    }
}

TEST(PosteriorModel, ValidatesInputs)
{
    auto s = small_spec(Likelihood::Poisson, Parameterisation::Inverse, Spatial::CAR, 2, 2, 6, 41);
    EXPECT_THROW(PosteriorModel(s, Eigen::VectorXd::Zero(6)), InvalidArgument); // m > n
    s.parameterisation = Parameterisation::Post;
    EXPECT_THROW(PosteriorModel(s, Eigen::VectorXd::Zero(5)), InvalidArgument);
    Eigen::VectorXd y = Eigen::VectorXd::Zero(6);
    y(0) = 1.5;
    EXPECT_THROW(PosteriorModel(s, y), InvalidArgument);
    s.offsets(0) = 0.0;
    EXPECT_THROW(PosteriorModel(s, Eigen::VectorXd::Zero(6)), InvalidArgument);
}

TEST(PosteriorModel, IcarInverseRejectsSquareH)
{
    const auto s = small_spec(Likelihood::Poisson, Parameterisation::Inverse, Spatial::ICAR, 2, 2, 4, 42);
    EXPECT_THROW(PosteriorModel(s, Eigen::VectorXd::Zero(4)), InvalidArgument);
}

TEST(PosteriorModel, UnconstrainedRoundTripAndCentering)
{
    const auto s = small_spec(Likelihood::NegBin, Parameterisation::Post, Spatial::ICAR, 3, 3, 12, 43);
    const PosteriorModel model(s, simulated_counts(s, 43));
    std::mt19937_64 rng(44);
    Eigen::VectorXd u = gaussian_matrix(model.dimension(), 1, rng);
    const ParamVector t = model.from_unconstrained(u);
    EXPECT_NEAR(t.phi_free.sum(), 0.0, 1e-12);
    model.canonicalize(u);
    EXPECT_TRUE(model.to_unconstrained(t).isApprox(u, 1e-12));
    EXPECT_FALSE(model.alpha_index().has_value());
    EXPECT_TRUE(model.psi_index().has_value());
}
