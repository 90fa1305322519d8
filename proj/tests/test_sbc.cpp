#include <gtest/gtest.h>

#include <sstream>

#include "carmm/carmm.hpp"

using namespace carmm;

namespace {

SbcStudyConfig tiny_study()
{
    SbcStudyConfig cfg;
    cfg.rows = 3;
    cfg.cols = 3;
    cfg.sizes = {6, 9};
    cfg.scenarios = {{Parameterisation::Post, Parameterisation::Post}, {Parameterisation::Inverse, Parameterisation::Inverse}};
    cfg.replicates = 3;
    cfg.rank_draws = 50;
    cfg.sampler.chains = 2;
    cfg.sampler.iterations = 200;
    cfg.seed = 5;
    return cfg;
}

SbcReplicateResult result_with_rhat(double rhat, bool failed = false)
{
    SbcReplicateResult r;
    r.max_rhat = rhat;
    r.failed = failed;
    return r;
}

} // namespace

TEST(BiasMetrics, Examples)
{
    const auto exact = bias_metrics(Eigen::VectorXd::Constant(10, 2.5), 2.5);
    EXPECT_EQ(exact.bias, 0.0);
    EXPECT_EQ(exact.abs_bias, 0.0);
    EXPECT_EQ(exact.rmse, 0.0);
    const auto shifted = bias_metrics(Eigen::VectorXd::Constant(10, 2.5 - 0.75), 2.5);
    EXPECT_DOUBLE_EQ(shifted.bias, -0.75);
    EXPECT_DOUBLE_EQ(shifted.abs_bias, 0.75);
    EXPECT_DOUBLE_EQ(shifted.rmse, 0.75);
}

TEST(BiasMetrics, MatchesDirectSums)
{
    const Eigen::Vector4d d(1.0, -2.0, 0.5, 3.0);
    const auto b = bias_metrics(d, 0.5);
    EXPECT_DOUBLE_EQ(b.bias, (0.5 - 2.5 + 0.0 + 2.5) / 4.0);
    EXPECT_DOUBLE_EQ(b.abs_bias, (0.5 + 2.5 + 0.0 + 2.5) / 4.0);
    EXPECT_DOUBLE_EQ(b.rmse, std::sqrt((0.25 + 6.25 + 0.0 + 6.25) / 4.0));
}

TEST(RhatFilter, InfiniteThresholdKeepsEverything)
{
    std::vector<SbcReplicateResult> rs{result_with_rhat(1.001), result_with_rhat(1.3), result_with_rhat(50.0)};
    const auto f = rhat_filter(rs, std::numeric_limits<double>::infinity());
    EXPECT_EQ(f.report.retained, 3);
    EXPECT_EQ(f.report.excluded_rhat, 0);
}

TEST(RhatFilter, OneDivergentReplicateExcluded)
{
    std::vector<SbcReplicateResult> rs(10, result_with_rhat(1.002));
    rs[4].max_rhat = 1.2;
    const auto f = rhat_filter(rs, 1.01);
    EXPECT_EQ(f.report.excluded_rhat, 1);
    EXPECT_EQ(f.report.retained, 9);
    EXPECT_EQ(std::find(f.retained.begin(), f.retained.end(), 4u), f.retained.end());
}

TEST(RhatFilter, FailuresAlwaysExcluded)
{
    std::vector<SbcReplicateResult> rs{result_with_rhat(1.0, true), result_with_rhat(1.0)};
    const auto f = rhat_filter(rs, std::numeric_limits<double>::infinity());
    EXPECT_EQ(f.report.failed, 1);
    EXPECT_EQ(f.report.retained, 1);
}

TEST(ParameterGroup, PoolsVectorComponents)
{
    EXPECT_EQ(parameter_group("phi[3]"), "phi");
    EXPECT_EQ(parameter_group("phi_tilde[12]"), "phi_tilde");
    EXPECT_EQ(parameter_group("rho_tilde[1]"), "rho_tilde");
    EXPECT_EQ(parameter_group("rho[20]"), "rho");
    EXPECT_EQ(parameter_group("beta[2]"), "beta[2]");
    EXPECT_EQ(parameter_group("gamma"), "gamma");
}

TEST(Scenario, ParseAndLabel)
{
    const auto sc = parse_scenario("post-inverse");
    EXPECT_EQ(sc.data, Parameterisation::Post);
    EXPECT_EQ(sc.mcmc, Parameterisation::Inverse);
    EXPECT_EQ(sc.label(), "post-inverse");
    EXPECT_TRUE(sc.involves_inverse());
    EXPECT_THROW(parse_scenario("post"), InvalidArgument);
}

TEST(SbcStudyConfig, RejectsInverseAboveAreaCount)
{
    SbcStudyConfig cfg;
    cfg.scenarios = {{Parameterisation::Post, Parameterisation::Inverse}};
    cfg.sizes = {14, 20};
    EXPECT_NO_THROW(cfg.validate());
    cfg.sizes = {14, 26};
    EXPECT_THROW(cfg.validate(), InvalidArgument);
    cfg.scenarios = {{Parameterisation::Post, Parameterisation::Post}};
    EXPECT_NO_THROW(cfg.validate());
    cfg.rank_draws = 5000;
    EXPECT_THROW(cfg.validate(), InvalidArgument);
}

TEST(EvenSubsample, SpreadsOverDraws)
{
    const auto idx = even_subsample(2000, 200);
    ASSERT_EQ(idx.size(), 200u);
    EXPECT_EQ(idx.front(), 0);
    EXPECT_EQ(idx[1], 10);
    EXPECT_EQ(idx.back(), 1990);
    EXPECT_TRUE(std::is_sorted(idx.begin(), idx.end()));
}

TEST(MakeDesign, StructureAndDeterminism)
{
    SbcStudyConfig cfg;
    const auto a = make_design(cfg);
    const auto b = make_design(cfg);
    EXPECT_EQ(a.h.weights(), b.h.weights());
    EXPECT_EQ(a.x, b.x);
    EXPECT_EQ(a.offsets, b.offsets);
    EXPECT_EQ(a.h.memberships(), 26);
    EXPECT_TRUE((a.offsets.array() >= 1.0).all());
    for (Index k = 0; k < a.x.cols(); ++k) {
        EXPECT_EQ(a.x.col(k).minCoeff(), 0.0);
        EXPECT_EQ(a.x.col(k).maxCoeff(), 1.0);
    }
    for (Index m : cfg.sizes) EXPECT_EQ(a.membership(m)->memberships(), m);
    EXPECT_THROW(detail::min_max_normalize(Eigen::VectorXd::Ones(3)), DegenerateInput);
}

TEST(ReplicateTruth, PostGenerationIsConsistent)
{
    SbcStudyConfig cfg;
    const auto design = make_design(cfg);
    const auto draw = draw_replicate(cfg, design, 3);
    const auto t = replicate_truth(draw, design, 20, Parameterisation::Post);
    const Eigen::MatrixXd h = design.h.truncated(20).weights();
    EXPECT_TRUE(t.phi_tilde.isApprox(h * t.phi));
    EXPECT_TRUE(t.log_rho_tilde.isApprox(h * t.log_rho, 1e-12));
    EXPECT_EQ(t.y, draw.counts_post.head(20));
    EXPECT_GT(draw.alpha, 0.0);
    EXPECT_LT(draw.alpha, 1.0);
    EXPECT_DOUBLE_EQ(t.value("rho[4]"), std::exp(t.log_rho(3)));
    EXPECT_DOUBLE_EQ(t.value("beta[2]"), t.beta(1));
    EXPECT_THROW(t.value("sigma"), InvalidArgument);
}

TEST(ReplicateTruth, InverseGenerationMapsBackThroughPseudoInverse)
{
    SbcStudyConfig cfg;
    cfg.sizes = {14, 20};
    const auto design = make_design(cfg);
    const auto draw = draw_replicate(cfg, design, 0);
    const auto t = replicate_truth(draw, design, 14, Parameterisation::Inverse);
    const Eigen::MatrixXd h = design.h.truncated(14).weights();
    EXPECT_LT((h * t.phi - t.phi_tilde).cwiseAbs().maxCoeff(), 1e-10);
    EXPECT_TRUE(t.log_rho_tilde.isApprox(h * t.log_rho, 1e-10));
    EXPECT_EQ(t.y, draw.counts_inv.head(14));
}

TEST(SbcReplicate, BitIdenticalForFixedSeed)
{
    const auto cfg = tiny_study();
    const auto design = make_design(cfg);
    const auto draw = draw_replicate(cfg, design, 1);
    const Scenario sc{Parameterisation::Post, Parameterisation::Post};
    const auto a = sbc_replicate(cfg, design, draw, 1, 9, sc, 0);
    const auto b = sbc_replicate(cfg, design, draw, 1, 9, sc, 0);
    EXPECT_EQ(a.truth.y, b.truth.y);
    ASSERT_EQ(a.samples.chains.size(), b.samples.chains.size());
    for (std::size_t c = 0; c < a.samples.chains.size(); ++c) EXPECT_EQ(a.samples.chains[c], b.samples.chains[c]);
    ASSERT_EQ(a.result.ranks.size(), a.samples.names.size());
    for (std::size_t k = 0; k < a.result.ranks.size(); ++k) {
        EXPECT_EQ(a.result.ranks[k].rank, b.result.ranks[k].rank);
        EXPECT_LE(a.result.ranks[k].rank, cfg.rank_draws);
    }
    EXPECT_EQ(a.result.max_rhat, b.result.max_rhat);
}

TEST(SbcReplicate, SamplerFailureIsFlagged)
{
    auto cfg = tiny_study();
    cfg.sampler.stall_limit = 1;
    const auto design = make_design(cfg);
    const auto draw = draw_replicate(cfg, design, 0);
    const auto rep = sbc_replicate(cfg, design, draw, 0, 9, {Parameterisation::Post, Parameterisation::Post}, 0);
    EXPECT_TRUE(rep.result.failed);
    EXPECT_FALSE(rep.result.failure.empty());
    EXPECT_TRUE(rep.result.ranks.empty());
}

TEST(RunStudy, OneReplicatePerCell)
{
    auto cfg = tiny_study();
    cfg.replicates = 1;
    cfg.rhat_threshold = std::numeric_limits<double>::infinity();
    const auto res = run_study(cfg);
    ASSERT_EQ(res.cells.size(), 4u);
    for (const auto& c : res.cells) {
        EXPECT_EQ(c.replicates.size(), 1u);
        EXPECT_EQ(c.exclusions.total, 1);
        EXPECT_EQ(c.exclusions.retained, 1);
        EXPECT_EQ(c.group("phi").ranks, 9);
        EXPECT_EQ(c.group("rho_tilde").ranks, c.m);
    }
    const auto& inv = res.cell({Parameterisation::Inverse, Parameterisation::Inverse}, 6);
    EXPECT_EQ(inv.group("phi_tilde").ranks, 6);
}

TEST(RunStudy, DeterministicAcrossThreadCounts)
{
    auto cfg = tiny_study();
    const auto a = run_study(cfg);
    cfg.threads = 3;
    const auto b = run_study(cfg);
    std::ostringstream ra, rb, ca, cb;
    write_ranks_csv(a, ra);
    write_ranks_csv(b, rb);
    write_coverage_csv(a, ca);
    write_coverage_csv(b, cb);
    EXPECT_EQ(ra.str(), rb.str());
    EXPECT_EQ(ca.str(), cb.str());
    for (std::size_t c = 0; c < a.cells.size(); ++c)
        for (std::size_t r = 0; r < a.cells[c].replicates.size(); ++r)
            EXPECT_EQ(a.cells[c].replicates[r].max_rhat, b.cells[c].replicates[r].max_rhat);
}

TEST(RunStudy, PersistentFailureAborts)
{
    auto cfg = tiny_study();
    cfg.sampler.stall_limit = 1;
    cfg.max_failures = 0;
    const auto res = run_study(cfg);
    EXPECT_TRUE(res.aborted);
    EXPECT_NE(res.abort_reason.find("sampler failure"), std::string::npos);

    cfg.max_failures = -1;
    const auto all = run_study(cfg);
    EXPECT_FALSE(all.aborted);
    for (const auto& c : all.cells) {
        EXPECT_EQ(c.exclusions.failed, 3);
        EXPECT_EQ(c.exclusions.retained, 0);
    }
}

TEST(StudyCsv, Shapes)
{
    auto cfg = tiny_study();
    cfg.replicates = 2;
    const auto res = run_study(cfg);
    std::ostringstream ranks, cov, bias, excl;
    write_ranks_csv(res, ranks);
    write_coverage_csv(res, cov);
    write_bias_csv(res, bias);
    write_exclusions_csv(res, excl);
    auto lines = [](const std::string& s) { return std::count(s.begin(), s.end(), '\n'); };
    std::size_t expected_ranks = 0;
    for (const auto& c : res.cells)
        for (const auto& r : c.replicates) expected_ranks += r.ranks.size();
    EXPECT_EQ(lines(ranks.str()), static_cast<long>(expected_ranks) + 1);
    EXPECT_EQ(lines(excl.str()), 5);
    EXPECT_EQ(ranks.str().substr(0, ranks.str().find('\n')), "scenario,m,replicate,parameter,rank,draws");
    EXPECT_EQ(excl.str().substr(0, excl.str().find('\n')), "scenario,m,total,sampler_failures,rhat_excluded,retained");
}
