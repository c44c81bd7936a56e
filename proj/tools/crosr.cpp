#include <iostream>
#include <optional>
#include <string>
#include <vector>

#include "CLI11.hpp"
#include "crosr/cli.hpp"

int main(int argc, char** argv) {
    CLI::App app{"Open-set recognition with reconstruction-augmented classifiers"};
    app.require_subcommand(1);
    app.set_help_all_flag("--help-all", "Show help for every subcommand");

    std::string config_path, out_dir;
    std::optional<std::uint64_t> seed;
    std::vector<std::string> models;

    auto common = [&](CLI::App* sub) {
        sub->add_option("--config", config_path, "INI run configuration")->required();
        sub->add_option("--seed", seed, "Seed for network initialisation and training");
        sub->add_option("--out", out_dir, "Output directory")->required();
    };
    auto* train = app.add_subcommand("train", "Train a network on the known classes");
    common(train);
    auto* fit = app.add_subcommand("fit", "Fit per-class Weibull profiles to a trained network");
    common(fit);
    fit->add_option("--model", models, "Trained network file")->required()->expected(1);
    auto* eval = app.add_subcommand("eval", "Score the mixed test sets and report macro-F1");
    common(eval);
    eval->add_option("--model", models, "Open-set model file (repeatable)")->required();
    auto* sweep = app.add_subcommand("sweep", "Macro-F1 over a grid of thresholds");
    common(sweep);
    sweep->add_option("--model", models, "Open-set model file (repeatable)")->required();

    try {
        app.parse(argc, argv);
    } catch (const CLI::ParseError& e) {
        const int code = app.exit(e);
        return code == 0 ? 0 : crosr::exit_code(crosr::ErrorCategory::kConfig);
    }

    try {
        const auto rc = crosr::cli::load_run_config(config_path, seed);
        if (train->parsed()) crosr::cli::cmd_train(rc, out_dir, std::cout);
        if (fit->parsed()) crosr::cli::cmd_fit(rc, models.front(), out_dir, std::cout);
        if (eval->parsed()) crosr::cli::cmd_eval(rc, models, out_dir, std::cout);
        if (sweep->parsed()) crosr::cli::cmd_sweep(rc, models, out_dir, std::cout);
    } catch (const crosr::Error& e) {
        std::cerr << "error[" << crosr::category_name(e.category()) << "]: " << e.what() << std::endl;
        return crosr::exit_code(e.category());
    }
    return 0;
}
