#include "pipeline.hpp"

#include <CLI11.hpp>

#include <iostream>

using namespace cmonge;

namespace {

enum ExitCode { ok = 0, other_failure = 1, config_failure = 2, data_failure = 3, numerical_failure = 4 };

struct Overrides {
    std::string config;
    std::optional<std::uint64_t> seed;
    std::optional<std::string> out;
    std::optional<std::string> scenario;
    std::optional<std::string> context_mode;
    std::optional<std::string> embedding;
    bool identity_baseline = false;
    bool force = false;
};

// Flags win over the config file, which wins over built-in defaults.
pipeline::ExperimentConfig resolve(const Overrides& o) {
    auto c = o.config.empty() ? pipeline::config_from_json(nlohmann::json::object()) : pipeline::load_config(o.config);
    if (o.seed) {
        c.seed = *o.seed;
    }
    if (o.out) {
        c.output_dir = *o.out;
    }
    if (o.scenario) {
        c.scenario = parse_scenario(*o.scenario);
    }
    if (o.context_mode) {
        c.context_mode = parse_context_mode(*o.context_mode);
    }
    if (o.embedding) {
        c.embedding = *o.embedding;
    }
    c.identity_baseline = c.identity_baseline || o.identity_baseline;
    c.validate();
    return c;
}

}

int main(int argc, char** argv) {
    CLI::App app{"Conditional Monge gap maps for perturbation responses"};
    app.require_subcommand(1);
    Overrides o;

    auto add_common = [&](CLI::App* cmd) {
        cmd->add_option("--config", o.config, "JSON config file, or a manifest from an earlier run")->check(CLI::ExistingFile);
        cmd->add_option("--seed", o.seed, "Experiment seed");
        cmd->add_option("--out", o.out, "Output directory");
        cmd->add_flag("--force", o.force, "Overwrite earlier results");
        cmd->add_option("--scenario", o.scenario, "Split scenario")->check(CLI::IsMember({"id", "dose_ood", "drug_ood", "k_fold_drug_ood"}));
        cmd->add_option("--context-mode", o.context_mode, "Map context")->check(CLI::IsMember({"none", "dose", "drugdose"}));
        cmd->add_option("--embedding", o.embedding, "Drug embedding source")->check(CLI::IsMember({"fingerprint", "moa"}));
    };

    using Command = pipeline::CommandResult (*)(const pipeline::ExperimentConfig&, bool);
    const std::vector<std::tuple<std::string, std::string, Command>> commands{
        {"gen-synth", "Generate a synthetic perturbation dataset", pipeline::cmd_gen_synth},
        {"train-ae", "Train the autoencoder on the training split", pipeline::cmd_train_ae},
        {"embed-moa", "Compute mode-of-action drug embeddings", pipeline::cmd_embed_moa},
        {"train-map", "Train the conditional map", pipeline::cmd_train_map},
        {"evaluate", "Evaluate a trained map on the test split", pipeline::cmd_evaluate},
    };
    std::map<std::string, Command> by_name;
    for (const auto& [name, help, fn] : commands) {
        auto* cmd = app.add_subcommand(name, help);
        add_common(cmd);
        if (name == "evaluate") {
            cmd->add_flag("--identity-baseline", o.identity_baseline, "Also report the identity baseline");
        }
        by_name[name] = fn;
    }

    try {
        app.parse(argc, argv);
    } catch (const CLI::CallForHelp& e) {
        return app.exit(e);
    } catch (const CLI::ParseError& e) {
        app.exit(e);
        return config_failure;
    }

    try {
        const auto config = resolve(o);
        for (const auto* sub : app.get_subcommands()) {
            auto res = by_name.at(sub->get_name())(config, o.force);
            std::cout << "results in " << res.directory << "\n";
        }
        return ok;
    } catch (const ConfigError& e) {
        std::cerr << "config error: " << e.what() << "\n";
        return config_failure;
    } catch (const DataError& e) {
        std::cerr << "data error: " << e.what() << "\n";
        return data_failure;
    } catch (const NumericalError& e) {
        std::cerr << "numerical failure: " << e.what() << "\n";
        return numerical_failure;
    } catch (const std::exception& e) {
        std::cerr << "error: " << e.what() << "\n";
        return other_failure;
    }
}
