#ifndef CMONGE_TOOLS_PIPELINE_HPP
#define CMONGE_TOOLS_PIPELINE_HPP

#include "cmonge/cmonge.hpp"

#include <json.hpp>

#include <cstdint>
#include <optional>
#include <string>
#include <vector>

namespace cmonge::pipeline {

/**
 * @brief Everything one experiment needs, read from a JSON file and then from command-line overrides.
 */
struct ExperimentConfig {
    std::uint64_t seed = 0;
    std::string output_dir = "runs/default";

    // Data: a dataset file, or the synthetic generator whose output lands in `<out>/data`.
    std::string dataset_path;
    SynthSpec synthetic;
    bool synthetic_seed_set = false;
    std::string fingerprints_path;
    Eigen::Index fingerprint_width = 16;
    double fingerprint_noise = 0.1;

    Scenario scenario = Scenario::id;
    SplitParams split;
    /** Strict hygiene keeps held-out conditions out of the autoencoder and the MoA embedding. */
    bool strict_hygiene = true;

    AutoencoderConfig autoencoder;

    double moa_epsilon_relative = 0.05;
    Eigen::Index moa_dim = 10;
    Eigen::Index moa_max_cells = 200;
    int moa_max_iter = 500;

    std::string model_name;
    ContextMode context_mode = ContextMode::dose;
    std::string embedding = "fingerprint";
    /** `global` trains one model on every condition, `per_drug` one model per drug. */
    std::string scope = "global";
    MapConfig map;

    EvalOptions eval;
    bool identity_baseline = false;
    /** Also evaluate in-distribution conditions when the scenario holds some out. */
    bool include_id = false;

    /** Name of the map model, derived from the context when not set. */
    std::string resolved_model_name() const;
    void validate() const;
};

ExperimentConfig config_from_json(const nlohmann::json& j);
nlohmann::json config_to_json(const ExperimentConfig& c);
/** Reads a config file, or the config recorded in a manifest. */
ExperimentConfig load_config(const std::string& path);

std::string sha256_hex(const std::string& bytes);
std::string sha256_file(const std::string& path);

/** Paths of one experiment's artifacts. */
struct Layout {
    std::string root;

    std::string data_dir() const { return root + "/data"; }
    std::string ae_dir() const { return root + "/ae"; }
    std::string moa_dir() const { return root + "/moa"; }
    std::string map_dir(const std::string& name) const { return root + "/map/" + name; }
    std::string eval_dir(const std::string& name) const { return root + "/eval/" + name; }
};

struct CommandResult {
    std::string directory;
    /** Artifact file names relative to `directory`, with their checksums. */
    std::vector<std::pair<std::string, std::string>> artifacts;
};

CommandResult cmd_gen_synth(const ExperimentConfig& c, bool force);
CommandResult cmd_train_ae(const ExperimentConfig& c, bool force);
CommandResult cmd_embed_moa(const ExperimentConfig& c, bool force);
CommandResult cmd_train_map(const ExperimentConfig& c, bool force);
CommandResult cmd_evaluate(const ExperimentConfig& c, bool force);

/** Evaluation rows of a report table, keyed by model then condition. */
struct ReportRow {
    std::string model;
    std::string condition;
    double r2 = 0;
    double wasserstein = 0;
    double mmd = 0;
};
std::vector<ReportRow> read_report_means(const std::string& path);

}

#endif
