#include <gtest/gtest.h>

#include <random>

#include "carmm/diagnostics.hpp"

using namespace carmm;

namespace {

std::vector<Eigen::VectorXd> iid_chains(int chains, Index n, std::uint64_t seed, double shift_step = 0.0)
{
    std::mt19937_64 rng(seed);
    std::normal_distribution<double> z;
    std::vector<Eigen::VectorXd> out;
    for (int c = 0; c < chains; ++c) {
        Eigen::VectorXd v(n);
        for (Index i = 0; i < n; ++i) v(i) = z(rng) + shift_step * c;
        out.push_back(v);
    }
    return out;
}

std::vector<Eigen::VectorXd> ar1_chains(int chains, Index n, double phi, std::uint64_t seed)
{
    std::mt19937_64 rng(seed);
    std::normal_distribution<double> z;
    std::vector<Eigen::VectorXd> out;
    const double innov = std::sqrt(1.0 - phi * phi);
    for (int c = 0; c < chains; ++c) {
        Eigen::VectorXd v(n);
        double x = z(rng);
        for (Index i = 0; i < n; ++i) {
            x = phi * x + innov * z(rng);
            v(i) = x;
        }
        out.push_back(v);
    }
    return out;
}

} // namespace

TEST(RankStatistic, Examples)
{
    EXPECT_EQ(rank_statistic(Eigen::Vector4d(1, 2, 3, 4), 0.5), 0);
    EXPECT_EQ(rank_statistic(Eigen::Vector4d(1, 2, 3, 4), 2.5), 2);
    EXPECT_EQ(rank_statistic(Eigen::Vector4d(1, 2, 3, 4), 9.0), 4);
}

TEST(RankStatistic, UniformUnderSelfConsistency)
{
    std::mt19937_64 rng(1);
    std::normal_distribution<double> z;
    const int b = 99;
    std::vector<int> ranks;
    for (int r = 0; r < 2000; ++r) {
        Eigen::VectorXd d(b);
        for (Index i = 0; i < b; ++i) d(i) = z(rng);
        ranks.push_back(rank_statistic(d, z(rng)));
    }
    EXPECT_GT(chi_square_uniformity(ranks, b).p_value, 0.001);
}

TEST(SplitRhat, IidStreamIsConverged)
{
    std::mt19937_64 rng(2);
    std::normal_distribution<double> z;
    std::vector<Eigen::VectorXd> chains(4, Eigen::VectorXd(1000));
    for (Index i = 0; i < 4000; ++i) chains[static_cast<std::size_t>(i % 4)](i / 4) = z(rng);
    EXPECT_LT(split_rhat(chains), 1.01);
}

TEST(SplitRhat, SeparatedChainsAreFlagged)
{
    EXPECT_GT(split_rhat(iid_chains(2, 500, 3, 10.0)), 1.5);
}

TEST(SplitRhat, DetectsDriftWithinChain)
{
    auto chains = iid_chains(4, 1000, 4);
    for (auto& c : chains)
        for (Index i = 0; i < c.size(); ++i) c(i) += 3.0 * static_cast<double>(i) / static_cast<double>(c.size());
    EXPECT_GT(split_rhat(chains), 1.1);
}

TEST(SplitRhat, Errors)
{
    EXPECT_THROW(split_rhat({Eigen::VectorXd::Constant(10, 1.0), Eigen::VectorXd::Constant(10, 1.0)}), DegenerateInput);
    EXPECT_THROW(split_rhat({Eigen::VectorXd::Zero(10)}), InvalidArgument);
    EXPECT_THROW(split_rhat({Eigen::VectorXd::Zero(10), Eigen::VectorXd::Zero(8)}), InvalidArgument);
}

TEST(EffectiveSampleSize, IidNearDrawCount)
{
    const double ess = effective_sample_size(iid_chains(4, 1000, 5));
    EXPECT_NEAR(ess, 4000.0, 0.2 * 4000.0);
}

TEST(EffectiveSampleSize, Ar1MatchesAnalyticValue)
{
    const double expect = 4.0 * 20000.0 * (1.0 - 0.9) / (1.0 + 0.9);
    EXPECT_NEAR(effective_sample_size(ar1_chains(4, 20000, 0.9, 6)), expect, 0.3 * expect);
}

TEST(EffectiveSampleSize, ConstantIsDegenerate)
{
    EXPECT_THROW(effective_sample_size({Eigen::VectorXd::Constant(10, 2.0), Eigen::VectorXd::Constant(10, 2.0)}),
                 DegenerateInput);
}

TEST(CoverageIntervalCheck, BandWidth)
{
    // B = 200: ranks 5..195 form the band, 191 of 201 values
    EXPECT_EQ(rank_band_tail(200, 0.95), 5);
    EXPECT_EQ(rank_band_tail(39, 0.95), 1);
    EXPECT_EQ(rank_band_tail(10, 0.95), 0);
    std::vector<int> all(201);
    for (int r = 0; r <= 200; ++r) all[static_cast<std::size_t>(r)] = r;
    EXPECT_NEAR(coverage_interval_check(all, 200), 191.0 / 201.0, 1e-15);
}

TEST(CoverageIntervalCheck, UniformRanksNear95)
{
    std::mt19937_64 rng(7);
    std::uniform_int_distribution<int> u(0, 200);
    double total = 0.0;
    const int studies = 50;
    for (int s = 0; s < studies; ++s) {
        std::vector<int> ranks(200);
        for (auto& r : ranks) r = u(rng);
        total += coverage_interval_check(ranks, 200);
    }
    EXPECT_NEAR(total / studies, 191.0 / 201.0, 0.01);
}

TEST(CoverageIntervalCheck, Examples)
{
    EXPECT_EQ(coverage_interval_check(std::vector<int>(100, 0), 200), 0.0);
    EXPECT_EQ(coverage_interval_check(std::vector<int>(100, 200), 200), 0.0);
    EXPECT_EQ(coverage_interval_check(std::vector<int>{100}, 200), 1.0);
    EXPECT_THROW(coverage_interval_check(std::vector<int>{201}, 200), InvalidArgument);
    EXPECT_THROW(coverage_interval_check(std::vector<int>{1}, 200, 1.0), InvalidArgument);
    const std::vector<SbcRank> tagged{{"gamma", 3, 10}, {"gamma", 7, 10}};
    EXPECT_EQ(coverage_interval_check(tagged), coverage_interval_check(std::vector<int>{3, 7}, 10));
}

TEST(ChiSquareUniformity, FlagsSkewedRanks)
{
    std::mt19937_64 rng(8);
    std::uniform_int_distribution<int> u(0, 200);
    std::vector<int> flat(400), skewed(400);
    for (auto& r : flat) r = u(rng);
    for (auto& r : skewed) r = std::min(u(rng), u(rng));
    EXPECT_GT(chi_square_uniformity(flat, 200).p_value, 0.001);
    EXPECT_LT(chi_square_uniformity(skewed, 200).p_value, 1e-6);
    const auto t = chi_square_uniformity(flat, 200, 20);
    EXPECT_EQ(t.dof, 19);
}
