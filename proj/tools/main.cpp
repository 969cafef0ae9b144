// SPDX-License-Identifier: Apache-2.0
//
// routelab <stage> [--config file] [--out dir] [--seed n] [--quiet]
//
// Stages: gen-data, train, profile, attack, eval, defend, report.
// Exit codes: 0 success, 1 validation failure, 2 runtime failure.
#include <exception>
#include <iostream>
#include <string>
#include <vector>

#include <CLI11.hpp>

#include "routelab/errors.hpp"
#include "routelab/pipeline.hpp"
#include "routelab/run_config.hpp"

int main(int argc, char** argv) {
    CLI::App app{"desk-scale MoE routing attack pipeline"};
    app.require_subcommand(1);

    std::string config_path;
    std::string out_dir = "out";
    uint64_t seed_override = 0;
    bool seed_given = false;
    bool quiet = false;
    std::vector<std::string> report_inputs;

    const std::vector<std::string> stages = {"gen-data", "train",  "profile", "attack",
                                             "eval",     "defend", "report"};
    for (const std::string& stage : stages) {
        CLI::App* sub = app.add_subcommand(stage);
        sub->add_option("--config", config_path, "run configuration JSON");
        sub->add_option("--out", out_dir, "artifact directory");
        sub->add_option("--seed", seed_override, "override the config seed")
            ->each([&](const std::string&) { seed_given = true; });
        sub->add_flag("--quiet", quiet, "suppress progress output");
        if (stage == "report") {
            sub->add_option("inputs", report_inputs, "report JSON files to merge");
        }
    }

    try {
        app.parse(argc, argv);
    } catch (const CLI::ParseError& e) {
        if (e.get_exit_code() == 0) return app.exit(e);  // --help
        std::cerr << e.what() << '\n' << app.help() << '\n';
        return 1;
    }

    routelab::RunConfig config = routelab::default_run_config();
    if (!config_path.empty()) {
        try {
            auto [parsed, issues] = routelab::validate_config(config_path);
            if (!issues.empty()) {
                for (const routelab::ConfigDiagnostic& issue : issues) {
                    std::cerr << "config error: " << issue.field << ": " << issue.message
                              << '\n';
                }
                return 1;
            }
            config = parsed;
        } catch (const routelab::IoError& e) {
            std::cerr << "config error: " << e.what() << '\n';
            return 1;
        }
    }
    if (seed_given) config.seed = seed_override;

    const std::string stage = app.get_subcommands().front()->get_name();
    try {
        routelab::run_stage(stage, config, out_dir, report_inputs, quiet, std::cout);
    } catch (const std::exception& e) {
        std::cerr << "error: " << e.what() << '\n';
        return 2;
    }
    return 0;
}
