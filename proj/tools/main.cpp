// Command line front end: analyze a trial CSV, run the sensitivity grid,
// run simulation studies, or dump a simulated dataset.
#include <iostream>
#include <optional>

#include <CLI11.hpp>

#include "crtmle/commands.hpp"

int main(int argc, char** argv) {
    CLI::App app{"Two-stage targeted estimation for cluster randomized trials"};
    app.require_subcommand(1);

    std::optional<std::uint64_t> seed;

    crtmle::AnalyzeOptions analyze;
    auto* cmd_analyze = app.add_subcommand("analyze", "Estimate the intervention effect from a CSV");
    cmd_analyze->add_option("--data", analyze.data_path, "input CSV")->required();
    cmd_analyze->add_option("--config", analyze.config_path, "INI analysis configuration");
    cmd_analyze->add_option("--out", analyze.out_path, "JSON report path");
    cmd_analyze->add_option("--threads", analyze.threads, "worker threads, 0 = auto");
    cmd_analyze->add_option("--seed", seed, "override the configured seed");

    crtmle::SensitivityOptions sensitivity;
    auto* cmd_sensitivity =
        app.add_subcommand("sensitivity", "Run the five pre-specified analysis variants");
    cmd_sensitivity->add_option("--data", sensitivity.data_path, "input CSV")->required();
    cmd_sensitivity->add_option("--config", sensitivity.config_path, "INI analysis configuration");
    cmd_sensitivity->add_option("--out", sensitivity.out_path, "JSON report path");
    cmd_sensitivity->add_option("--threads", sensitivity.threads, "worker threads, 0 = auto");
    cmd_sensitivity->add_option("--seed", seed, "override the configured seed");

    crtmle::SimulateOptions simulate;
    auto* cmd_simulate = app.add_subcommand("simulate", "Replicate study over a simulated process");
    cmd_simulate->add_option("--dgp-config", simulate.dgp_config_path,
                             "INI file with a [simulation] section; omit for the built-in example");
    cmd_simulate->add_option("--analysis-config", simulate.analysis_config_paths,
                             "analysis INI file(s), one operating row each");
    cmd_simulate->add_option("--reps", simulate.n_reps, "number of replicates");
    cmd_simulate->add_option("--out", simulate.out_path, "operating characteristics CSV path");
    cmd_simulate->add_option("--threads", simulate.threads, "worker threads, 0 = auto");
    cmd_simulate->add_option("--truth-draws", simulate.truth_cluster_draws,
                             "cluster draws for the Monte Carlo truth");
    cmd_simulate->add_option("--seed", seed, "override the process seed");

    crtmle::GenerateOptions generate;
    auto* cmd_generate = app.add_subcommand("generate", "Write one simulated dataset as CSV");
    cmd_generate->add_option("--config", generate.config_path,
                             "INI file with a [simulation] section; omit for the built-in example");
    cmd_generate->add_option("--out", generate.out_path, "output CSV path")->required();
    cmd_generate->add_flag("--force-measurement", generate.force_measurement,
                           "disable sampling and missingness in the output");

    CLI11_PARSE(app, argc, argv);

    if (cmd_analyze->parsed()) {
        analyze.seed_override = seed;
        return crtmle::cmd_analyze(analyze, std::cout, std::cerr);
    }
    if (cmd_sensitivity->parsed()) {
        sensitivity.seed_override = seed;
        return crtmle::cmd_sensitivity(sensitivity, std::cout, std::cerr);
    }
    if (cmd_simulate->parsed()) {
        simulate.seed_override = seed;
        return crtmle::cmd_simulate(simulate, std::cout, std::cerr);
    }
    return crtmle::cmd_generate(generate, std::cout, std::cerr);
}
