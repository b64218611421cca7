#include "pipeline.hpp"

#include <openssl/evp.h>

#include <filesystem>
#include <fstream>
#include <functional>
#include <iomanip>
#include <iostream>
#include <map>
#include <set>
#include <sstream>

namespace fs = std::filesystem;
using nlohmann::json;

namespace cmonge::pipeline {

namespace {

constexpr int manifest_version = 1;

// Reads one JSON object, remembering which keys were consumed so leftovers can be rejected.
class Section {
public:
    Section(const json& j, std::string path) : j_(j), path_(std::move(path)) {
        if (!j_.is_object()) {
            throw ConfigError("config: '" + path_ + "' must be an object");
        }
    }

    bool has(const std::string& key) const { return j_.contains(key); }

    template <typename T>
    void get(const std::string& key, T& out) {
        if (!j_.contains(key)) {
            return;
        }
        used_.insert(key);
        try {
            out = j_.at(key).get<T>();
        } catch (const json::exception&) {
            throw ConfigError("config: '" + where(key) + "' has the wrong type");
        }
    }

    Section child(const std::string& key) {
        used_.insert(key);
        return Section(j_.at(key), where(key));
    }

    void finish() const {
        for (const auto& [key, value] : j_.items()) {
            if (!used_.count(key)) {
                throw ConfigError("config: unknown key '" + where(key) + "'");
            }
        }
    }

private:
    std::string where(const std::string& key) const { return path_.empty() ? key : path_ + "." + key; }

    const json& j_;
    std::string path_;
    std::set<std::string> used_;
};

template <typename Int>
void get_index_list(Section& s, const std::string& key, std::vector<Int>& out) {
    std::vector<long long> raw;
    if (!s.has(key)) {
        return;
    }
    s.get(key, raw);
    out.assign(raw.begin(), raw.end());
}

void read_synthetic(Section s, SynthSpec& spec, bool& seed_set) {
    s.get("n_drugs", spec.n_drugs);
    s.get("doses", spec.doses);
    s.get("cells_per_condition", spec.cells_per_condition);
    s.get("control_cells", spec.control_cells);
    s.get("dim", spec.dim);
    s.get("intrinsic_dim", spec.intrinsic_dim);
    s.get("clusters", spec.clusters);
    s.get("cluster_spread", spec.cluster_spread);
    s.get("shift_norm", spec.shift_norm);
    s.get("shift_correlation", spec.shift_correlation);
    s.get("sigma_min", spec.sigma_min);
    s.get("sigma_max", spec.sigma_max);
    s.get("noise", spec.noise);
    s.get("baseline_spread", spec.baseline_spread);
    s.get("reference_dose", spec.reference_dose);
    s.get("combinations", spec.combinations);
    if (s.has("seed")) {
        s.get("seed", spec.seed);
        seed_set = true;
    }
    s.finish();
}

json synthetic_to_json(const SynthSpec& spec) {
    return {
        {"n_drugs", spec.n_drugs},
        {"doses", spec.doses},
        {"cells_per_condition", spec.cells_per_condition},
        {"control_cells", spec.control_cells},
        {"dim", spec.dim},
        {"intrinsic_dim", spec.intrinsic_dim},
        {"clusters", spec.clusters},
        {"cluster_spread", spec.cluster_spread},
        {"shift_norm", spec.shift_norm},
        {"shift_correlation", spec.shift_correlation},
        {"sigma_min", spec.sigma_min},
        {"sigma_max", spec.sigma_max},
        {"noise", spec.noise},
        {"baseline_spread", spec.baseline_spread},
        {"reference_dose", spec.reference_dose},
        {"combinations", spec.combinations},
        {"seed", spec.seed},
    };
}

// Component seeds, all derived from the experiment seed.
enum Stream : std::uint64_t { split_stream = 200, ae_stream = 300, map_stream = 400, eval_stream = 500, moa_stream = 600 };

std::uint64_t seed_for(const ExperimentConfig& c, Stream s) {
    return derive_seed(c.seed, s);
}

std::string format_number(double v) {
    char buf[32];
    std::snprintf(buf, sizeof(buf), "%.10g", v);
    return buf;
}

// Refuses to overwrite a finished command unless forced.
void claim_directory(const std::string& dir, bool force) {
    if (fs::exists(dir + "/manifest.json") && !force) {
        throw ConfigError(dir + " already holds results; pass --force to overwrite");
    }
}

// Writes the artifacts first and the manifest last, so a manifest implies complete outputs.
CommandResult finish_command(const std::string& command, const ExperimentConfig& c, const std::string& dir, const std::vector<std::pair<std::string, std::string>>& files,
                             const std::vector<std::string>& inputs) {
    fs::create_directories(dir);
    CommandResult res;
    res.directory = dir;
    json artifacts = json::object();
    for (const auto& [name, bytes] : files) {
        write_file(dir + "/" + name, bytes);
        const auto digest = sha256_hex(bytes);
        artifacts[name] = digest;
        res.artifacts.emplace_back(name, digest);
    }
    json in = json::object();
    for (const auto& path : inputs) {
        in[path] = sha256_file(path);
    }
    const json config = config_to_json(c);
    json manifest = {
        {"manifest_version", manifest_version},
        {"command", command},
        {"config", config},
        {"config_sha256", sha256_hex(config.dump())},
        {"inputs", in},
        {"artifacts", artifacts},
    };
    write_file(dir + "/manifest.json", manifest.dump(2) + "\n");
    return res;
}

std::string dataset_path(const ExperimentConfig& c) {
    return c.dataset_path.empty() ? Layout{c.output_dir}.data_dir() + "/dataset.csv" : c.dataset_path;
}

CellDataset load_input_dataset(const ExperimentConfig& c) {
    const auto path = dataset_path(c);
    if (!fs::exists(path)) {
        throw ConfigError("dataset " + path + " does not exist" + (c.dataset_path.empty() ? "; run gen-synth first" : ""));
    }
    auto ds = load_dataset(path);
    ds.validate();
    return ds;
}

SplitPlan plan_split(const ExperimentConfig& c, const CellDataset& ds) {
    return make_split(ds, c.scenario, c.split, seed_for(c, split_stream));
}

// Rows the autoencoder may see: the training split, or every row under lax hygiene.
std::vector<Eigen::Index> autoencoder_rows(const ExperimentConfig& c, const CellDataset& ds, const SplitPlan& plan) {
    if (c.strict_hygiene) {
        return plan.training_rows();
    }
    std::vector<Eigen::Index> all(static_cast<std::size_t>(ds.n_cells()));
    std::iota(all.begin(), all.end(), Eigen::Index{0});
    return all;
}

std::string ae_path(const ExperimentConfig& c) {
    return Layout{c.output_dir}.ae_dir() + "/autoencoder.bin";
}

AutoencoderParams load_autoencoder(const ExperimentConfig& c, Eigen::Index features) {
    const auto path = ae_path(c);
    if (!fs::exists(path)) {
        throw ConfigError("autoencoder " + path + " does not exist; run train-ae first");
    }
    auto ae = autoencoder_from_bundle(read_bundle(path));
    if (ae.input_dim() != features) {
        throw ConfigError("autoencoder expects " + std::to_string(ae.input_dim()) + " features, dataset has " + std::to_string(features));
    }
    if (ae.latent_dim() != c.autoencoder.latent_dim) {
        throw ConfigError("autoencoder latent width " + std::to_string(ae.latent_dim()) + " differs from the configured " + std::to_string(c.autoencoder.latent_dim));
    }
    return ae;
}

std::string fingerprints_path(const ExperimentConfig& c) {
    return c.fingerprints_path.empty() ? Layout{c.output_dir}.data_dir() + "/fingerprints.csv" : c.fingerprints_path;
}

std::string moa_path(const ExperimentConfig& c) {
    return Layout{c.output_dir}.moa_dir() + "/embedding.csv";
}

// Drug table for the configured embedding; null when the context ignores drugs.
std::optional<DrugEmbeddingTable> load_table(const ExperimentConfig& c, bool force, std::vector<std::string>& inputs) {
    if (c.context_mode != ContextMode::drug_dose) {
        return std::nullopt;
    }
    std::string path = c.embedding == "moa" ? moa_path(c) : fingerprints_path(c);
    if (c.embedding == "moa" && !fs::exists(path)) {
        cmd_embed_moa(c, force);
    }
    if (!fs::exists(path)) {
        throw ConfigError("drug embedding file " + path + " does not exist");
    }
    inputs.push_back(path);
    return load_embedding_table(path);
}

std::string bytes_of(const std::function<void(std::ostream&)>& write) {
    std::ostringstream out;
    write(out);
    return out.str();
}

std::string file_bytes(const std::function<void(const std::string&)>& save, const std::string& scratch) {
    save(scratch);
    auto bytes = read_file(scratch);
    fs::remove(scratch);
    return bytes;
}

// Model files of a map directory: one global model, or one per drug.
struct TrainedMaps {
    std::map<std::string, MapModel> models;

    const MapModel& for_condition(const std::string& scope, const RawCondition& cond) const {
        if (scope == "global") {
            return models.at("global");
        }
        if (cond.drugs.size() != 1) {
            throw ConfigError("per-drug models cannot predict the combination '" + cond.label + "'");
        }
        auto it = models.find(cond.drugs[0]);
        if (it == models.end()) {
            throw ConfigError("no per-drug model for '" + cond.drugs[0] + "'");
        }
        return it->second;
    }
};

std::string model_file(const std::string& key) {
    return key == "global" ? "model.bin" : "model_" + key + ".bin";
}

}

std::string ExperimentConfig::resolved_model_name() const {
    if (!model_name.empty()) {
        return model_name;
    }
    switch (context_mode) {
    case ContextMode::none:
        return "monge";
    case ContextMode::dose:
        return "cmonge-dose";
    case ContextMode::drug_dose:
        return "cmonge-drugdose-" + embedding;
    }
    return "model";
}

void ExperimentConfig::validate() const {
    detail::require(!output_dir.empty(), "config: output_dir must not be empty");
    if (dataset_path.empty()) {
        synthetic.validate();
    }
    detail::require(fingerprint_width >= 1 && fingerprint_noise >= 0, "config: fingerprint width must be positive and noise nonnegative");
    detail::require(split.train_fraction > 0 && split.train_fraction < 1, "config: split.train_fraction must lie in (0, 1)");
    detail::require(split.reference_fraction >= 0 && split.reference_fraction < 1, "config: split.reference_fraction must lie in [0, 1)");
    detail::require(split.fold_size >= 1 && split.fold_index >= 0, "config: split fold settings must be nonnegative");
    if (scenario == Scenario::dose_ood) {
        detail::require(!split.ood_doses.empty(), "config: dose_ood needs split.ood_doses");
    }
    if (scenario == Scenario::drug_ood) {
        detail::require(!split.ood_drugs.empty(), "config: drug_ood needs split.ood_drugs");
    }
    detail::require(autoencoder.latent_dim >= 1 && autoencoder.epochs >= 1 && autoencoder.batch_size >= 1, "config: autoencoder sizes must be positive");
    for (auto h : autoencoder.hidden) {
        detail::require(h >= 1, "config: autoencoder hidden widths must be positive");
    }
    detail::require(autoencoder.adam.lr > 0 && autoencoder.adam.weight_decay >= 0, "config: autoencoder lr must be positive");
    detail::require(moa_epsilon_relative > 0 && moa_dim >= 1 && moa_max_cells >= 2 && moa_max_iter >= 1, "config: moa settings must be positive");
    detail::require(embedding == "fingerprint" || embedding == "moa", "config: map.embedding must be 'fingerprint' or 'moa'");
    detail::require(scope == "global" || scope == "per_drug", "config: map.scope must be 'global' or 'per_drug'");
    const auto name = resolved_model_name();
    detail::require(!name.empty() && name.find_first_of("/\\ \t") == std::string::npos && name != "identity", "config: map.name must be a plain word other than 'identity'");
    detail::require(map.steps >= 0 && map.batch_size >= 1 && map.drug_width >= 1, "config: map sizes must be positive");
    for (auto h : map.hidden) {
        detail::require(h >= 1, "config: map hidden widths must be positive");
    }
    detail::require(map.lambda >= 0, "config: map.lambda must be nonnegative");
    detail::require(map.epsilon_relative > 0 || map.epsilon > 0, "config: map needs a positive epsilon or epsilon_relative");
    detail::require(map.sinkhorn_tol > 0 && map.sinkhorn_max_iter >= 1, "config: map Sinkhorn settings must be positive");
    detail::require(map.adam.lr > 0 && map.adam.weight_decay >= 0, "config: map lr must be positive");
    detail::require(eval.n_batches >= 1 && eval.batch_size >= 2, "config: eval needs at least one batch of two cells");
    detail::require(eval.sinkhorn.epsilon > 0 && eval.sinkhorn.tol > 0 && eval.sinkhorn.max_iter >= 1, "config: eval epsilon must be positive");
    for (auto f : eval.features) {
        detail::require(f >= 0, "config: eval.features must be nonnegative indices");
    }
}

ExperimentConfig config_from_json(const json& j) {
    ExperimentConfig c;
    c.autoencoder.hidden = {512, 512};
    c.autoencoder.latent_dim = 50;
    Section root(j, "");
    root.get("seed", c.seed);
    root.get("output_dir", c.output_dir);

    if (root.has("data")) {
        auto data = root.child("data");
        data.get("path", c.dataset_path);
        if (data.has("synthetic")) {
            read_synthetic(data.child("synthetic"), c.synthetic, c.synthetic_seed_set);
        }
        if (data.has("fingerprints")) {
            auto fp = data.child("fingerprints");
            fp.get("path", c.fingerprints_path);
            fp.get("width", c.fingerprint_width);
            fp.get("noise", c.fingerprint_noise);
            fp.finish();
        }
        data.finish();
    }
    if (root.has("split")) {
        auto s = root.child("split");
        std::string scenario = to_string(c.scenario), hygiene = "strict";
        s.get("scenario", scenario);
        c.scenario = parse_scenario(scenario);
        s.get("train_fraction", c.split.train_fraction);
        s.get("ood_doses", c.split.ood_doses);
        s.get("ood_drugs", c.split.ood_drugs);
        s.get("fold_size", c.split.fold_size);
        s.get("fold_index", c.split.fold_index);
        s.get("reference_fraction", c.split.reference_fraction);
        s.get("hygiene", hygiene);
        detail::require(hygiene == "strict" || hygiene == "lax", "config: split.hygiene must be 'strict' or 'lax'");
        c.strict_hygiene = hygiene == "strict";
        s.finish();
    }
    if (root.has("autoencoder")) {
        auto s = root.child("autoencoder");
        get_index_list(s, "hidden", c.autoencoder.hidden);
        s.get("latent_dim", c.autoencoder.latent_dim);
        s.get("epochs", c.autoencoder.epochs);
        s.get("batch_size", c.autoencoder.batch_size);
        s.get("lr", c.autoencoder.adam.lr);
        s.get("weight_decay", c.autoencoder.adam.weight_decay);
        s.finish();
    }
    if (root.has("moa")) {
        auto s = root.child("moa");
        s.get("epsilon_relative", c.moa_epsilon_relative);
        s.get("dim", c.moa_dim);
        s.get("max_cells", c.moa_max_cells);
        s.get("max_iter", c.moa_max_iter);
        s.finish();
    }
    if (root.has("map")) {
        auto s = root.child("map");
        std::string mode = to_string(c.context_mode);
        s.get("name", c.model_name);
        s.get("context_mode", mode);
        c.context_mode = parse_context_mode(mode);
        s.get("embedding", c.embedding);
        s.get("scope", c.scope);
        get_index_list(s, "hidden", c.map.hidden);
        s.get("drug_width", c.map.drug_width);
        s.get("steps", c.map.steps);
        s.get("batch_size", c.map.batch_size);
        s.get("lambda", c.map.lambda);
        s.get("epsilon", c.map.epsilon);
        s.get("epsilon_relative", c.map.epsilon_relative);
        s.get("sinkhorn_tol", c.map.sinkhorn_tol);
        s.get("sinkhorn_max_iter", c.map.sinkhorn_max_iter);
        s.get("lr", c.map.adam.lr);
        s.get("weight_decay", c.map.adam.weight_decay);
        s.finish();
    }
    if (root.has("eval")) {
        auto s = root.child("eval");
        s.get("n_batches", c.eval.n_batches);
        s.get("batch_size", c.eval.batch_size);
        get_index_list(s, "features", c.eval.features);
        s.get("epsilon", c.eval.sinkhorn.epsilon);
        s.get("sinkhorn_tol", c.eval.sinkhorn.tol);
        s.get("sinkhorn_max_iter", c.eval.sinkhorn.max_iter);
        s.get("identity_baseline", c.identity_baseline);
        s.get("include_id", c.include_id);
        s.finish();
    }
    root.finish();
    return c;
}

json config_to_json(const ExperimentConfig& c) {
    json data = json::object();
    if (!c.dataset_path.empty()) {
        data["path"] = c.dataset_path;
    } else {
        SynthSpec spec = c.synthetic;
        if (!c.synthetic_seed_set) {
            spec.seed = c.seed;
        }
        data["synthetic"] = synthetic_to_json(spec);
    }
    json fp = {{"width", c.fingerprint_width}, {"noise", c.fingerprint_noise}};
    if (!c.fingerprints_path.empty()) {
        fp["path"] = c.fingerprints_path;
    }
    data["fingerprints"] = fp;
    return {
        {"seed", c.seed},
        {"output_dir", c.output_dir},
        {"data", data},
        {"split",
         {{"scenario", to_string(c.scenario)},
          {"train_fraction", c.split.train_fraction},
          {"ood_doses", c.split.ood_doses},
          {"ood_drugs", c.split.ood_drugs},
          {"fold_size", c.split.fold_size},
          {"fold_index", c.split.fold_index},
          {"reference_fraction", c.split.reference_fraction},
          {"hygiene", c.strict_hygiene ? "strict" : "lax"}}},
        {"autoencoder",
         {{"hidden", c.autoencoder.hidden},
          {"latent_dim", c.autoencoder.latent_dim},
          {"epochs", c.autoencoder.epochs},
          {"batch_size", c.autoencoder.batch_size},
          {"lr", c.autoencoder.adam.lr},
          {"weight_decay", c.autoencoder.adam.weight_decay}}},
        {"moa", {{"epsilon_relative", c.moa_epsilon_relative}, {"dim", c.moa_dim}, {"max_cells", c.moa_max_cells}, {"max_iter", c.moa_max_iter}}},
        {"map",
         {{"name", c.resolved_model_name()},
          {"context_mode", to_string(c.context_mode)},
          {"embedding", c.embedding},
          {"scope", c.scope},
          {"hidden", c.map.hidden},
          {"drug_width", c.map.drug_width},
          {"steps", c.map.steps},
          {"batch_size", c.map.batch_size},
          {"lambda", c.map.lambda},
          {"epsilon", c.map.epsilon},
          {"epsilon_relative", c.map.epsilon_relative},
          {"sinkhorn_tol", c.map.sinkhorn_tol},
          {"sinkhorn_max_iter", c.map.sinkhorn_max_iter},
          {"lr", c.map.adam.lr},
          {"weight_decay", c.map.adam.weight_decay}}},
        {"eval",
         {{"n_batches", c.eval.n_batches},
          {"batch_size", c.eval.batch_size},
          {"features", c.eval.features},
          {"epsilon", c.eval.sinkhorn.epsilon},
          {"sinkhorn_tol", c.eval.sinkhorn.tol},
          {"sinkhorn_max_iter", c.eval.sinkhorn.max_iter},
          {"identity_baseline", c.identity_baseline},
          {"include_id", c.include_id}}},
    };
}

ExperimentConfig load_config(const std::string& path) {
    json j;
    try {
        j = json::parse(read_file(path));
    } catch (const json::parse_error& e) {
        throw ConfigError(path + ": " + e.what());
    } catch (const DataError& e) {
        throw ConfigError(e.what());
    }
    if (j.is_object() && j.contains("manifest_version") && j.contains("config")) {
        return config_from_json(j.at("config"));
    }
    return config_from_json(j);
}

std::string sha256_hex(const std::string& bytes) {
    unsigned char digest[EVP_MAX_MD_SIZE];
    unsigned int len = 0;
    if (EVP_Digest(bytes.data(), bytes.size(), digest, &len, EVP_sha256(), nullptr) != 1) {
        throw std::runtime_error("SHA-256 failed");
    }
    std::ostringstream out;
    for (unsigned int i = 0; i < len; ++i) {
        out << std::hex << std::setw(2) << std::setfill('0') << static_cast<int>(digest[i]);
    }
    return out.str();
}

std::string sha256_file(const std::string& path) {
    return sha256_hex(read_file(path));
}

CommandResult cmd_gen_synth(const ExperimentConfig& c, bool force) {
    c.validate();
    if (!c.dataset_path.empty()) {
        throw ConfigError("gen-synth needs a synthetic data section, not data.path");
    }
    const auto dir = Layout{c.output_dir}.data_dir();
    claim_directory(dir, force);

    SynthSpec spec = c.synthetic;
    if (!c.synthetic_seed_set) {
        spec.seed = c.seed;
    }
    auto syn = generate_synthetic(spec);
    auto table = synthetic_fingerprints(spec, syn.truth, c.fingerprint_width, c.fingerprint_noise, spec.seed);

    json truth = {{"drug_names", syn.truth.drug_names}, {"sigmas", std::vector<double>(syn.truth.sigmas.begin(), syn.truth.sigmas.end())},
                  {"baseline", std::vector<double>(syn.truth.baseline.begin(), syn.truth.baseline.end())}};
    json shifts = json::array();
    for (Eigen::Index j = 0; j < syn.truth.latent_shifts.rows(); ++j) {
        Vector row = syn.truth.latent_shifts.row(j).transpose();
        shifts.push_back(std::vector<double>(row.begin(), row.end()));
    }
    truth["latent_shifts"] = shifts;
    json embedding = json::array();
    for (Eigen::Index i = 0; i < syn.truth.embedding.rows(); ++i) {
        Vector row = syn.truth.embedding.row(i).transpose();
        embedding.push_back(std::vector<double>(row.begin(), row.end()));
    }
    truth["embedding"] = embedding;
    json conditions = json::array();
    for (const auto& t : syn.truth.conditions) {
        conditions.push_back({{"label", t.label}, {"drugs", t.drugs}, {"dose", t.dose}, {"scale", t.scale}, {"sigma", t.sigma},
                              {"mean_shift", std::vector<double>(t.mean_shift.begin(), t.mean_shift.end())}});
    }
    truth["conditions"] = conditions;

    fs::create_directories(dir);
    auto dataset = file_bytes([&](const std::string& p) { save_dataset(syn.data, p); }, dir + "/.dataset.tmp");
    auto fingerprints = file_bytes([&](const std::string& p) { save_embedding_table(table, p); }, dir + "/.fingerprints.tmp");
    auto res = finish_command("gen-synth", c, dir, {{"dataset.csv", dataset}, {"truth.json", truth.dump(1) + "\n"}, {"fingerprints.csv", fingerprints}}, {});

    auto index = syn.data.index();
    std::cout << "wrote " << syn.data.n_cells() << " cells x " << syn.data.n_features() << " features, " << index.size() << " conditions\n";
    for (const auto& [label, rows] : index) {
        std::cout << "  " << label << "\t" << rows.size() << "\n";
    }
    return res;
}

CommandResult cmd_train_ae(const ExperimentConfig& c, bool force) {
    c.validate();
    const auto dir = Layout{c.output_dir}.ae_dir();
    claim_directory(dir, force);
    auto ds = load_input_dataset(c);
    auto plan = plan_split(c, ds);
    detail::require(c.autoencoder.latent_dim <= ds.n_features(), "config: autoencoder.latent_dim exceeds the feature count");

    AutoencoderConfig ac = c.autoencoder;
    ac.seed = seed_for(c, ae_stream);
    const Matrix x = ds.rows(autoencoder_rows(c, ds, plan));
    auto fit = train_autoencoder(x, ac);

    std::string history = "epoch\tmse\n";
    for (std::size_t e = 0; e < fit.epoch_loss.size(); ++e) {
        history += std::to_string(e + 1) + "\t" + format_number(fit.epoch_loss[e]) + "\n";
    }
    auto bundle = autoencoder_bundle(fit.params, {{"seed", ac.seed}, {"training_cells", x.rows()}});
    auto res = finish_command("train-ae", c, dir, {{"autoencoder.bin", bundle_bytes(bundle)}, {"autoencoder.json", bundle_manifest(bundle).dump(2) + "\n"}, {"history.tsv", history}},
                              {dataset_path(c)});
    std::cout << "autoencoder on " << x.rows() << " cells, final mse " << format_number(fit.epoch_loss.back()) << "\n";
    return res;
}

CommandResult cmd_embed_moa(const ExperimentConfig& c, bool force) {
    c.validate();
    const auto dir = Layout{c.output_dir}.moa_dir();
    claim_directory(dir, force);
    auto ds = load_input_dataset(c);
    auto plan = plan_split(c, ds);
    const auto index = ds.index();

    // One population per single-drug condition; held-out conditions contribute only reference cells.
    std::vector<std::string> labels;
    std::vector<Matrix> populations;
    std::mt19937_64 rng(seed_for(c, moa_stream));
    for (const auto& label : ds.conditions()) {
        auto cond = parse_condition(label);
        if (cond.drugs.size() != 1 || !cond.dose) {
            continue;
        }
        std::vector<Eigen::Index> rows;
        if (!c.strict_hygiene) {
            rows = index.at(label);
        } else if (plan.is_ood(label)) {
            auto it = plan.reference.find(label);
            if (it != plan.reference.end()) {
                rows = it->second;
            }
        } else {
            rows = plan.train.at(label);
        }
        if (rows.size() < 2) {
            continue;
        }
        std::shuffle(rows.begin(), rows.end(), rng);
        if (static_cast<Eigen::Index>(rows.size()) > c.moa_max_cells) {
            rows.resize(static_cast<std::size_t>(c.moa_max_cells));
        }
        std::sort(rows.begin(), rows.end());
        labels.push_back(label);
        populations.push_back(ds.rows(rows));
    }
    if (populations.size() < 2) {
        throw DataError("embed-moa: fewer than two single-drug conditions have usable cells");
    }

    // Regularization relative to the mean squared distance between pooled cells.
    Eigen::Index total = 0;
    for (const auto& p : populations) {
        total += p.rows();
    }
    Matrix pooled(total, ds.n_features());
    Eigen::Index at = 0;
    for (const auto& p : populations) {
        pooled.middleRows(at, p.rows()) = p;
        at += p.rows();
    }
    const double spread = 2 * (pooled.rowwise() - pooled.colwise().mean()).squaredNorm() / static_cast<double>(total);
    SinkhornOptions opt;
    opt.epsilon = c.moa_epsilon_relative * spread;
    SmacofOptions so;
    so.out_dim = c.moa_dim;
    so.max_iter = c.moa_max_iter;
    so.seed = seed_for(c, moa_stream);
    auto emb = moa_embedding(populations, opt, so);

    DrugEmbeddingTable table;
    table.source = "moa";
    for (std::size_t k = 0; k < labels.size(); ++k) {
        table.insert(labels[k], emb.mds.embedding.row(static_cast<Eigen::Index>(k)).transpose());
    }
    std::string distances = "condition";
    for (const auto& l : labels) {
        distances += "\t" + l;
    }
    distances += "\n";
    for (std::size_t i = 0; i < labels.size(); ++i) {
        distances += labels[i];
        for (std::size_t j = 0; j < labels.size(); ++j) {
            distances += "\t" + format_number(emb.distances(static_cast<Eigen::Index>(i), static_cast<Eigen::Index>(j)));
        }
        distances += "\n";
    }
    std::string stress = "iteration\tstress\n";
    for (std::size_t k = 0; k < emb.mds.stress.size(); ++k) {
        stress += std::to_string(k) + "\t" + format_number(emb.mds.stress[k]) + "\n";
    }
    fs::create_directories(dir);
    auto table_bytes = file_bytes([&](const std::string& p) { save_embedding_table(table, p); }, dir + "/.embedding.tmp");
    auto res = finish_command("embed-moa", c, dir, {{"embedding.csv", table_bytes}, {"distances.tsv", distances}, {"stress.tsv", stress}}, {dataset_path(c)});
    std::cout << "moa embedding of " << labels.size() << " conditions, epsilon " << format_number(opt.epsilon) << ", asymmetry " << format_number(emb.asymmetry) << "\n";
    return res;
}

CommandResult cmd_train_map(const ExperimentConfig& c, bool force) {
    c.validate();
    const auto name = c.resolved_model_name();
    const auto dir = Layout{c.output_dir}.map_dir(name);
    claim_directory(dir, force);
    auto ds = load_input_dataset(c);
    auto plan = plan_split(c, ds);
    auto ae = load_autoencoder(c, ds.n_features());
    std::vector<std::string> inputs{dataset_path(c), ae_path(c)};
    auto table = load_table(c, force, inputs);
    const DrugEmbeddingTable* tp = table ? &*table : nullptr;

    // Group the training conditions by model before any training starts.
    std::map<std::string, TrainingSet> sets;
    const Matrix sources = encode(ae, ds.rows(plan.control_train));
    for (const auto& label : plan.train_conditions()) {
        auto raw = parse_condition(label);
        std::string key = "global";
        if (c.scope == "per_drug") {
            if (raw.drugs.size() != 1) {
                continue;
            }
            key = raw.drugs[0];
        }
        auto& set = sets[key];
        if (set.sources.size() == 0) {
            set.sources = sources;
        }
        set.conditions.push_back({resolve_condition(raw, c.context_mode, tp), encode(ae, ds.rows(plan.train.at(label)))});
    }
    if (sets.empty()) {
        throw DataError("train-map: no training conditions");
    }

    std::vector<std::pair<std::string, std::string>> files;
    std::string history = "model\tstep\tcondition\tfitting\tgap\ttotal\n";
    std::uint64_t k = 0;
    for (const auto& [key, set] : sets) {
        MapConfig mc = c.map;
        mc.seed = derive_seed(seed_for(c, map_stream), k++);
        const Eigen::Index m = tp ? tp->dim() : 0;
        auto encoder = init_condition_encoder(c.context_mode, m, c.map.drug_width, derive_seed(mc.seed, 31));
        auto res = train_map(init_map_model(ae.latent_dim(), std::move(encoder), mc), set, mc);
        for (const auto& r : res.history) {
            history += key + "\t" + std::to_string(r.step) + "\t" + r.label + "\t" + format_number(r.fitting) + "\t" + format_number(r.gap) + "\t" + format_number(r.total) + "\n";
        }
        auto bundle = map_bundle(res.model);
        bundle.meta["model"] = key;
        bundle.meta["name"] = name;
        files.emplace_back(model_file(key), bundle_bytes(bundle));
        std::cout << name << " [" << key << "] " << set.conditions.size() << " conditions, epsilon " << format_number(res.model.epsilon) << ", final loss "
                  << format_number(res.history.empty() ? 0.0 : res.history.back().total) << "\n";
    }
    files.emplace_back("history.tsv", history);
    return finish_command("train-map", c, dir, files, inputs);
}

CommandResult cmd_evaluate(const ExperimentConfig& c, bool force) {
    c.validate();
    const auto name = c.resolved_model_name();
    const auto dir = Layout{c.output_dir}.eval_dir(name);
    claim_directory(dir, force);
    auto ds = load_input_dataset(c);
    auto plan = plan_split(c, ds);
    auto ae = load_autoencoder(c, ds.n_features());
    std::vector<std::string> inputs{dataset_path(c), ae_path(c)};
    auto table = load_table(c, false, inputs);
    const DrugEmbeddingTable* tp = table ? &*table : nullptr;
    for (auto f : c.eval.features) {
        detail::require(f < ds.n_features(), "config: eval.features index out of range");
    }

    const auto map_dir = Layout{c.output_dir}.map_dir(name);
    TrainedMaps maps;
    for (const auto& entry : fs::directory_iterator(map_dir)) {
        const auto file = entry.path().filename().string();
        if (file.rfind("model", 0) == 0 && entry.path().extension() == ".bin") {
            auto bundle = read_bundle(entry.path().string());
            maps.models[bundle.meta.value("model", "global")] = map_from_bundle(bundle);
            inputs.push_back(entry.path().string());
        }
    }
    if (maps.models.empty()) {
        throw ConfigError("no trained maps in " + map_dir + "; run train-map first");
    }
    std::sort(inputs.begin(), inputs.end());

    std::vector<std::string> labels;
    for (const auto& label : ds.conditions()) {
        if (plan.test.count(label) && plan.test.at(label).size() >= 2 && (c.scenario == Scenario::id || c.include_id || plan.is_ood(label))) {
            labels.push_back(label);
        }
    }

    // Resolve everything before the first prediction.
    std::vector<std::pair<const MapModel*, ResolvedCondition>> jobs;
    for (const auto& label : labels) {
        auto raw = parse_condition(label);
        const auto& model = maps.for_condition(c.scope, raw);
        if (model.encoder.mode != c.context_mode) {
            throw ConfigError("map checkpoint context '" + to_string(model.encoder.mode) + "' differs from the configured '" + to_string(c.context_mode) + "'");
        }
        jobs.emplace_back(&model, resolve_condition(raw, c.context_mode, tp));
    }

    const Matrix source = ds.rows(plan.control_test);
    EvalOptions eo = c.eval;
    std::vector<EvalReport> reports;
    for (std::size_t k = 0; k < labels.size(); ++k) {
        eo.seed = derive_seed(seed_for(c, eval_stream), k);
        const Matrix target = ds.rows(plan.test.at(labels[k]));
        const auto& [model, cond] = jobs[k];
        Predictor p = [&, model = model, cond = cond](const Matrix& x) { return predict(*model, ae, x, cond); };
        EvalReport rep;
        try {
            rep = evaluate_condition(p, source, target, labels[k], eo);
        } catch (const NumericalError& e) {
            throw NumericalError(labels[k] + ": " + e.what());
        }
        rep.model = name;
        reports.push_back(std::move(rep));
        if (c.identity_baseline) {
            auto id = evaluate_condition(identity_predictor(), source, target, labels[k], eo);
            id.model = "identity";
            reports.push_back(std::move(id));
        }
    }

    auto res = finish_command("evaluate", c, dir,
                              {{"report.tsv", bytes_of([&](std::ostream& o) { write_report_table(o, reports); })},
                               {"report_long.tsv", bytes_of([&](std::ostream& o) { write_report_long(o, reports); })},
                               {"summary.txt", bytes_of([&](std::ostream& o) { write_report_summary(o, reports); })}},
                              inputs);
    write_report_summary(std::cout, reports);
    return res;
}

std::vector<ReportRow> read_report_means(const std::string& path) {
    std::istringstream in(read_file(path));
    std::vector<ReportRow> rows;
    std::string line;
    while (std::getline(in, line)) {
        if (line.empty() || line[0] == '#' || line.rfind("model\t", 0) == 0) {
            continue;
        }
        std::vector<std::string> f;
        std::istringstream cells(line);
        for (std::string cell; std::getline(cells, cell, '\t');) {
            f.push_back(cell);
        }
        if (f.size() != 8) {
            throw DataError(path + ": malformed report row");
        }
        if (f[3] != "mean") {
            continue;
        }
        rows.push_back({f[0], f[1], f[4] == "nan" ? std::nan("") : std::stod(f[4]), std::stod(f[6]), std::stod(f[7])});
    }
    return rows;
}

}
