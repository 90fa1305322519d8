#include <cstdint>
#include <iostream>
#include <optional>
#include <string>
#include <vector>

#include "CLI11.hpp"

#include "carmm/cli.hpp"

namespace {

struct CommonFlags {
    std::string config;
    std::string out;
    std::optional<std::uint64_t> seed;
    std::optional<int> chains;
    std::optional<int> iterations;
    std::optional<std::string> adjacency;

    void attach(CLI::App* app, bool needs_config)
    {
        auto* c = app->add_option("--config", config, "JSON configuration file");
        if (needs_config) c->required()->check(CLI::ExistingFile);
        app->add_option("--out", out, "output directory")->required();
        app->add_option("--seed", seed, "random seed (overrides the config)");
        app->add_option("--chains", chains, "number of chains")->check(CLI::PositiveNumber);
        app->add_option("--iters", iterations, "iterations per chain, warmup included")->check(CLI::PositiveNumber);
        app->add_option("--adjacency", adjacency, "grid adjacency")->check(CLI::IsMember({"rook", "queen"}));
    }

    carmm::cli::CommonOverrides overrides() const
    {
        carmm::cli::CommonOverrides o;
        o.seed = seed;
        o.chains = chains;
        o.iterations = iterations;
        if (adjacency) o.adjacency = carmm::parse_adjacency(*adjacency);
        return o;
    }
};

} // namespace

int main(int argc, char** argv)
{
    CLI::App app{"Bayesian disease mapping with CAR priors under multiple-membership transforms"};
    app.require_subcommand(1);

    CommonFlags sim_flags, fit_flags, sbc_flags, score_flags;
    auto* sim = app.add_subcommand("simulate", "simulate a data set bundle");
    sim_flags.attach(sim, true);

    auto* fit = app.add_subcommand("fit", "fit a model to a data set bundle");
    fit_flags.attach(fit, true);
    std::string data_dir;
    fit->add_option("--data", data_dir, "data set directory written by simulate")->required()->check(CLI::ExistingDirectory);

    auto* sbc = app.add_subcommand("sbc", "run a simulation-based calibration study");
    sbc_flags.attach(sbc, true);
    bool quiet = false;
    sbc->add_flag("--quiet", quiet, "suppress progress output");

    auto* score = app.add_subcommand("score", "score and compare fitted runs");
    score_flags.attach(score, false);
    std::vector<std::string> runs;
    std::string reference;
    score->add_option("runs", runs, "fitted run directories")->required()->check(CLI::ExistingDirectory);
    score->add_option("--reference", reference, "label (directory name) of the reference run");

    CLI11_PARSE(app, argc, argv);

    try {
        if (*sim) {
            carmm::cli::cmd_simulate(sim_flags.config, sim_flags.out, sim_flags.overrides());
        } else if (*fit) {
            carmm::cli::cmd_fit(fit_flags.config, data_dir, fit_flags.out, fit_flags.overrides());
        } else if (*sbc) {
            carmm::SbcProgress progress;
            if (!quiet) progress = [](const std::string& msg) { std::cerr << msg << '\n'; };
            carmm::cli::cmd_sbc(sbc_flags.config, sbc_flags.out, sbc_flags.overrides(), progress);
        } else if (*score) {
            std::vector<std::filesystem::path> dirs(runs.begin(), runs.end());
            carmm::cli::cmd_score(dirs, score_flags.out, reference);
            std::cout << carmm::cli::read_file(std::filesystem::path(score_flags.out) / "comparison.csv");
        }
    } catch (const std::exception& e) {
        std::cerr << "error: " << e.what() << '\n';
        return 1;
    }
    return 0;
}
