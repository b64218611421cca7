#ifndef CMONGE_DATA_HPP
#define CMONGE_DATA_HPP

#include "conditioning.hpp"
#include "error.hpp"
#include "types.hpp"

#include <algorithm>
#include <cctype>
#include <charconv>
#include <cmath>
#include <cstdint>
#include <cstdio>
#include <fstream>
#include <map>
#include <numeric>
#include <random>
#include <set>
#include <string>
#include <vector>

/**
 * @file data.hpp
 *
 * @brief Cell datasets, condition labels, train/test splits, batch sampling and a synthetic
 * perturbation generator.
 *
 * Labels have the form `drug[+drug...]_dose` or the reserved `control`. Canonical labels are
 * lowercase with the drugs of a combination sorted, and the dose written in its shortest
 * round-trip decimal form.
 */

namespace cmonge {

inline const std::string control_label = "control";

/**
 * Independent 64-bit stream seeds derived from one base seed (splitmix64 finalizer).
 */
inline std::uint64_t derive_seed(std::uint64_t base, std::uint64_t stream) {
    std::uint64_t z = base + 0x9e3779b97f4a7c15ULL * (stream + 1);
    z = (z ^ (z >> 30)) * 0xbf58476d1ce4e5b9ULL;
    z = (z ^ (z >> 27)) * 0x94d049bb133111ebULL;
    return z ^ (z >> 31);
}

namespace detail {

inline std::string trim_lower(const std::string& s) {
    auto begin = s.find_first_not_of(" \t\r");
    auto end = s.find_last_not_of(" \t\r");
    std::string out = begin == std::string::npos ? "" : s.substr(begin, end - begin + 1);
    for (auto& ch : out) {
        ch = static_cast<char>(std::tolower(static_cast<unsigned char>(ch)));
    }
    return out;
}

inline bool parse_double(const std::string& s, double& value) {
    if (s.empty()) {
        return false;
    }
    const char* first = s.data();
    if (*first == '+') {
        ++first;
    }
    auto res = std::from_chars(first, s.data() + s.size(), value);
    return res.ec == std::errc() && res.ptr == s.data() + s.size();
}

inline std::string format_dose(double dose) {
    char buf[32];
    auto res = std::to_chars(buf, buf + sizeof(buf), dose);
    return std::string(buf, res.ptr);
}

}

/**
 * Parses a label into drugs and dose. A trailing `_<number>` is the dose; labels without one
 * carry no dose.
 */
inline RawCondition parse_condition(const std::string& label) {
    RawCondition out;
    const std::string s = detail::trim_lower(label);
    if (s.empty()) {
        throw DataError("empty condition label");
    }
    if (s == control_label) {
        out.label = control_label;
        return out;
    }

    std::string drugs = s;
    auto cut = s.rfind('_');
    double dose = 0;
    if (cut != std::string::npos && detail::parse_double(s.substr(cut + 1), dose)) {
        if (!(dose > 0) || !std::isfinite(dose)) {
            throw DataError("condition '" + label + "' has a non-positive dose");
        }
        out.dose = dose;
        drugs = s.substr(0, cut);
    }

    std::size_t start = 0;
    while (true) {
        auto plus = drugs.find('+', start);
        std::string drug = detail::trim_lower(drugs.substr(start, plus == std::string::npos ? std::string::npos : plus - start));
        if (drug.empty()) {
            throw DataError("condition '" + label + "' has an empty drug name");
        }
        if (drug == control_label) {
            throw DataError("condition '" + label + "' uses the reserved name 'control' as a drug");
        }
        out.drugs.push_back(drug);
        if (plus == std::string::npos) {
            break;
        }
        start = plus + 1;
    }
    std::sort(out.drugs.begin(), out.drugs.end());
    if (std::adjacent_find(out.drugs.begin(), out.drugs.end()) != out.drugs.end()) {
        throw DataError("condition '" + label + "' lists a drug twice");
    }

    out.label = out.drugs.front();
    for (std::size_t k = 1; k < out.drugs.size(); ++k) {
        out.label += "+" + out.drugs[k];
    }
    if (out.dose) {
        out.label += "_" + detail::format_dose(*out.dose);
    }
    return out;
}

inline std::string canonical_label(const std::string& label) {
    return parse_condition(label).label;
}

/**
 * @brief Expression matrix with one condition label and one group tag per cell.
 */
struct CellDataset {
    Matrix x;
    std::vector<std::string> labels;
    std::vector<std::string> groups;
    std::vector<std::string> features;

    Eigen::Index n_cells() const { return x.rows(); }
    Eigen::Index n_features() const { return x.cols(); }

    /** Row indices per canonical label, in row order. */
    std::map<std::string, std::vector<Eigen::Index>> index() const {
        std::map<std::string, std::vector<Eigen::Index>> out;
        for (Eigen::Index i = 0; i < n_cells(); ++i) {
            out[labels[i]].push_back(i);
        }
        return out;
    }

    /** Treated condition labels, sorted, without the control. */
    std::vector<std::string> conditions() const {
        std::set<std::string> seen(labels.begin(), labels.end());
        seen.erase(control_label);
        return {seen.begin(), seen.end()};
    }

    Matrix rows(const std::vector<Eigen::Index>& idx) const {
        Matrix out(static_cast<Eigen::Index>(idx.size()), x.cols());
        for (std::size_t k = 0; k < idx.size(); ++k) {
            out.row(static_cast<Eigen::Index>(k)) = x.row(idx[k]);
        }
        return out;
    }

    void validate() const {
        if (static_cast<Eigen::Index>(labels.size()) != n_cells() || static_cast<Eigen::Index>(groups.size()) != n_cells()) {
            throw DataError("dataset: one label and one group are needed per cell");
        }
        if (static_cast<Eigen::Index>(features.size()) != n_features()) {
            throw DataError("dataset: feature names do not match the matrix width");
        }
        if (std::find(labels.begin(), labels.end(), control_label) == labels.end()) {
            throw DataError("dataset: no control cells");
        }
        for (Eigen::Index i = 0; i < n_cells(); ++i) {
            for (Eigen::Index j = 0; j < n_features(); ++j) {
                if (!std::isfinite(x(i, j))) {
                    throw DataError("dataset: non-finite value at row " + std::to_string(i + 1) + ", column " + features[j]);
                }
            }
        }
    }
};

/**
 * Writes `condition,group,<features...>` as comma-separated text with 17 significant digits,
 * enough to reload every value bit for bit.
 */
inline void save_dataset(const CellDataset& ds, const std::string& path) {
    ds.validate();
    std::FILE* f = std::fopen(path.c_str(), "w");
    if (!f) {
        throw DataError("cannot write " + path);
    }
    std::fputs("condition,group", f);
    for (const auto& name : ds.features) {
        std::fprintf(f, ",%s", name.c_str());
    }
    std::fputc('\n', f);
    for (Eigen::Index i = 0; i < ds.n_cells(); ++i) {
        std::fprintf(f, "%s,%s", ds.labels[i].c_str(), ds.groups[i].c_str());
        for (Eigen::Index j = 0; j < ds.n_features(); ++j) {
            std::fprintf(f, ",%.17g", ds.x(i, j));
        }
        std::fputc('\n', f);
    }
    if (std::fclose(f) != 0) {
        throw DataError("write failed for " + path);
    }
}

namespace detail {

inline std::vector<std::string> split_commas(const std::string& line) {
    std::vector<std::string> out;
    std::size_t start = 0;
    while (true) {
        auto comma = line.find(',', start);
        out.push_back(line.substr(start, comma == std::string::npos ? std::string::npos : comma - start));
        if (comma == std::string::npos) {
            break;
        }
        start = comma + 1;
    }
    if (!out.empty() && !out.back().empty() && out.back().back() == '\r') {
        out.back().pop_back();
    }
    return out;
}

}

/**
 * Reads a file written by `save_dataset()` or any producer of the same layout.
 * Labels are canonicalized on load. Errors name the offending line and column.
 */
inline CellDataset load_dataset(const std::string& path) {
    std::ifstream in(path);
    if (!in) {
        throw DataError("cannot open dataset " + path);
    }
    auto where = [&](std::size_t line) { return path + ":" + std::to_string(line) + ": "; };

    std::string line;
    if (!std::getline(in, line)) {
        throw DataError(where(1) + "empty file");
    }
    auto header = detail::split_commas(line);
    if (header.size() < 3 || detail::trim_lower(header[0]) != "condition" || detail::trim_lower(header[1]) != "group") {
        throw DataError(where(1) + "header must start with 'condition,group' followed by at least one feature");
    }
    CellDataset ds;
    ds.features.assign(header.begin() + 2, header.end());
    {
        std::set<std::string> seen;
        for (std::size_t j = 0; j < ds.features.size(); ++j) {
            if (ds.features[j].empty()) {
                throw DataError(where(1) + "column " + std::to_string(j + 3) + " has an empty name");
            }
            if (!seen.insert(ds.features[j]).second) {
                throw DataError(where(1) + "duplicate column '" + ds.features[j] + "'");
            }
        }
    }

    const std::size_t d = ds.features.size();
    std::vector<double> values;
    std::size_t lineno = 1;
    while (std::getline(in, line)) {
        ++lineno;
        if (line.empty() || line == "\r") {
            continue;
        }
        auto fields = detail::split_commas(line);
        if (fields.size() != d + 2) {
            throw DataError(where(lineno) + "expected " + std::to_string(d + 2) + " columns, found " + std::to_string(fields.size()));
        }
        try {
            ds.labels.push_back(canonical_label(fields[0]));
        } catch (const DataError& e) {
            throw DataError(where(lineno) + "column 'condition': " + e.what());
        }
        ds.groups.push_back(fields[1]);
        for (std::size_t j = 0; j < d; ++j) {
            double v = 0;
            if (!detail::parse_double(fields[j + 2], v)) {
                throw DataError(where(lineno) + "column '" + ds.features[j] + "' is not a number: '" + fields[j + 2] + "'");
            }
            if (!std::isfinite(v)) {
                throw DataError(where(lineno) + "column '" + ds.features[j] + "' is not finite");
            }
            values.push_back(v);
        }
    }

    const auto n = static_cast<Eigen::Index>(ds.labels.size());
    ds.x.resize(n, static_cast<Eigen::Index>(d));
    for (Eigen::Index i = 0; i < n; ++i) {
        for (std::size_t j = 0; j < d; ++j) {
            ds.x(i, static_cast<Eigen::Index>(j)) = values[static_cast<std::size_t>(i) * d + j];
        }
    }
    if (std::find(ds.labels.begin(), ds.labels.end(), control_label) == ds.labels.end()) {
        throw DataError(path + ": no rows labelled 'control'");
    }
    return ds;
}

enum class Scenario { id, dose_ood, drug_ood, k_fold_drug_ood };

inline std::string to_string(Scenario s) {
    switch (s) {
    case Scenario::id:
        return "id";
    case Scenario::dose_ood:
        return "dose_ood";
    case Scenario::drug_ood:
        return "drug_ood";
    default:
        return "k_fold_drug_ood";
    }
}

inline Scenario parse_scenario(const std::string& s) {
    if (s == "id") {
        return Scenario::id;
    }
    if (s == "dose_ood") {
        return Scenario::dose_ood;
    }
    if (s == "drug_ood") {
        return Scenario::drug_ood;
    }
    if (s == "k_fold_drug_ood") {
        return Scenario::k_fold_drug_ood;
    }
    throw ConfigError("unknown scenario '" + s + "' (expected id, dose_ood, drug_ood or k_fold_drug_ood)");
}

struct SplitParams {
    /** Fraction of each in-distribution condition (and of the controls) used for training. */
    double train_fraction = 0.8;
    /** Held-out doses for `dose_ood`. */
    std::vector<double> ood_doses;
    /** Held-out drugs for `drug_ood`. */
    std::vector<std::string> ood_drugs;
    /** Drugs per fold and the fold to hold out for `k_fold_drug_ood`. */
    int fold_size = 9;
    int fold_index = 0;
    /**
     * Fraction of each held-out condition reserved as reference cells, disjoint from its test
     * cells. They may be used to place the condition in a data-driven embedding, never for training.
     */
    double reference_fraction = 0;
};

/**
 * @brief Row indices per condition for each phase.
 */
struct SplitPlan {
    Scenario scenario = Scenario::id;
    std::map<std::string, std::vector<Eigen::Index>> train;
    std::map<std::string, std::vector<Eigen::Index>> test;
    std::map<std::string, std::vector<Eigen::Index>> reference;
    std::vector<std::string> ood_conditions;
    std::vector<Eigen::Index> control_train;
    std::vector<Eigen::Index> control_test;

    bool is_ood(const std::string& label) const {
        return std::find(ood_conditions.begin(), ood_conditions.end(), label) != ood_conditions.end();
    }

    /** Conditions with training rows. */
    std::vector<std::string> train_conditions() const {
        std::vector<std::string> out;
        for (const auto& [label, idx] : train) {
            if (!idx.empty()) {
                out.push_back(label);
            }
        }
        return out;
    }

    /** Every row usable for fitting: training controls plus training rows of all conditions. */
    std::vector<Eigen::Index> training_rows() const {
        std::vector<Eigen::Index> out = control_train;
        for (const auto& [label, idx] : train) {
            out.insert(out.end(), idx.begin(), idx.end());
        }
        std::sort(out.begin(), out.end());
        return out;
    }
};

/**
 * Sorted distinct drugs of the dataset, partitioned into folds of `fold_size` after a seeded shuffle.
 * The last fold may be smaller.
 */
inline std::vector<std::vector<std::string>> drug_folds(const CellDataset& ds, int fold_size, std::uint64_t seed) {
    detail::require(fold_size >= 1, "drug_folds: fold size must be positive");
    std::set<std::string> drugs;
    for (const auto& label : ds.conditions()) {
        for (const auto& d : parse_condition(label).drugs) {
            drugs.insert(d);
        }
    }
    std::vector<std::string> order(drugs.begin(), drugs.end());
    std::mt19937_64 rng(derive_seed(seed, 11));
    std::shuffle(order.begin(), order.end(), rng);
    std::vector<std::vector<std::string>> folds;
    for (std::size_t k = 0; k < order.size(); k += static_cast<std::size_t>(fold_size)) {
        auto end = std::min(order.size(), k + static_cast<std::size_t>(fold_size));
        std::vector<std::string> fold(order.begin() + static_cast<long>(k), order.begin() + static_cast<long>(end));
        std::sort(fold.begin(), fold.end());
        folds.push_back(std::move(fold));
    }
    return folds;
}

/**
 * Builds a seeded split. In-distribution conditions and the controls are split per condition at
 * `train_fraction`; held-out conditions get no training rows.
 */
inline SplitPlan make_split(const CellDataset& ds, Scenario scenario, const SplitParams& params, std::uint64_t seed) {
    detail::require(params.train_fraction > 0 && params.train_fraction < 1, "make_split: train_fraction must lie in (0, 1)");
    detail::require(params.reference_fraction >= 0 && params.reference_fraction < 1, "make_split: reference_fraction must lie in [0, 1)");
    SplitPlan plan;
    plan.scenario = scenario;
    const auto index = ds.index();
    if (index.find(control_label) == index.end()) {
        throw DataError("make_split: dataset has no control cells");
    }

    std::set<std::string> held_drugs;
    std::vector<double> held_doses;
    if (scenario == Scenario::dose_ood) {
        detail::require(!params.ood_doses.empty(), "make_split: dose_ood needs at least one held-out dose");
        held_doses = params.ood_doses;
    } else if (scenario == Scenario::drug_ood) {
        detail::require(!params.ood_drugs.empty(), "make_split: drug_ood needs at least one held-out drug");
        for (const auto& d : params.ood_drugs) {
            held_drugs.insert(detail::trim_lower(d));
        }
    } else if (scenario == Scenario::k_fold_drug_ood) {
        auto folds = drug_folds(ds, params.fold_size, seed);
        detail::require(params.fold_index >= 0 && params.fold_index < static_cast<int>(folds.size()),
                        "make_split: fold_index out of range (" + std::to_string(folds.size()) + " folds)");
        held_drugs.insert(folds[static_cast<std::size_t>(params.fold_index)].begin(), folds[static_cast<std::size_t>(params.fold_index)].end());
    }

    std::set<std::string> seen_drugs;
    std::set<double> seen_doses;
    for (const auto& label : ds.conditions()) {
        auto cond = parse_condition(label);
        seen_drugs.insert(cond.drugs.begin(), cond.drugs.end());
        if (cond.dose) {
            seen_doses.insert(*cond.dose);
        }
    }
    for (const auto& d : held_drugs) {
        if (!seen_drugs.count(d)) {
            throw ConfigError("make_split: held-out drug '" + d + "' is not in the dataset");
        }
    }
    for (double s : held_doses) {
        if (!seen_doses.count(s)) {
            throw ConfigError("make_split: held-out dose " + detail::format_dose(s) + " is not in the dataset");
        }
    }

    std::uint64_t stream = 0;
    for (const auto& [label, rows] : index) {
        std::vector<Eigen::Index> idx = rows;
        std::mt19937_64 rng(derive_seed(seed, 1000 + stream++));
        std::shuffle(idx.begin(), idx.end(), rng);

        bool ood = false;
        if (label != control_label) {
            auto cond = parse_condition(label);
            for (const auto& d : cond.drugs) {
                ood = ood || held_drugs.count(d) > 0;
            }
            if (cond.dose) {
                ood = ood || std::find(held_doses.begin(), held_doses.end(), *cond.dose) != held_doses.end();
            }
        }

        const auto n = idx.size();
        if (ood) {
            const auto n_ref = static_cast<std::size_t>(std::floor(params.reference_fraction * static_cast<double>(n)));
            std::vector<Eigen::Index> ref(idx.begin(), idx.begin() + static_cast<long>(n_ref));
            std::vector<Eigen::Index> test(idx.begin() + static_cast<long>(n_ref), idx.end());
            std::sort(ref.begin(), ref.end());
            std::sort(test.begin(), test.end());
            plan.ood_conditions.push_back(label);
            plan.train[label] = {};
            plan.test[label] = std::move(test);
            if (n_ref > 0) {
                plan.reference[label] = std::move(ref);
            }
            continue;
        }

        auto n_train = static_cast<std::size_t>(std::llround(params.train_fraction * static_cast<double>(n)));
        n_train = std::clamp<std::size_t>(n_train, n > 1 ? 1 : 0, n > 1 ? n - 1 : n);
        std::vector<Eigen::Index> train(idx.begin(), idx.begin() + static_cast<long>(n_train));
        std::vector<Eigen::Index> test(idx.begin() + static_cast<long>(n_train), idx.end());
        std::sort(train.begin(), train.end());
        std::sort(test.begin(), test.end());
        if (label == control_label) {
            plan.control_train = std::move(train);
            plan.control_test = std::move(test);
        } else {
            plan.train[label] = std::move(train);
            plan.test[label] = std::move(test);
        }
    }
    return plan;
}

/**
 * Uniform draw with replacement of `size` rows from `pool`.
 */
inline Matrix sample_batch(const Matrix& x, const std::vector<Eigen::Index>& pool, Eigen::Index size, std::mt19937_64& rng) {
    if (pool.empty()) {
        throw DataError("sample_batch: empty index list");
    }
    detail::require(size >= 1, "sample_batch: batch size must be positive");
    std::uniform_int_distribution<std::size_t> pick(0, pool.size() - 1);
    Matrix out(size, x.cols());
    for (Eigen::Index i = 0; i < size; ++i) {
        out.row(i) = x.row(pool[pick(rng)]);
    }
    return out;
}

enum class Role { source, target };
enum class Phase { train, test };

/**
 * Draws controls for `Role::source` and the rows of `condition` for `Role::target`, from the
 * given phase of the split.
 */
inline Matrix sample_batch(const CellDataset& ds, const SplitPlan& plan, const std::string& condition, Eigen::Index size, Role role, Phase phase, std::mt19937_64& rng) {
    if (role == Role::source) {
        return sample_batch(ds.x, phase == Phase::train ? plan.control_train : plan.control_test, size, rng);
    }
    const auto& lists = phase == Phase::train ? plan.train : plan.test;
    auto it = lists.find(condition);
    if (it == lists.end() || it->second.empty()) {
        throw DataError("sample_batch: no " + std::string(phase == Phase::train ? "training" : "test") + " rows for '" + condition + "'");
    }
    return sample_batch(ds.x, it->second, size, rng);
}

/**
 * @brief Parameters of the synthetic perturbation generator.
 *
 * Cells live on an `intrinsic_dim`-dimensional mixture of Gaussians embedded linearly in
 * `dim` features. Drug j at dose s moves the latent cloud by `scale(s) b_j` and scales its
 * spread around the mean by `1 + scale(s) (sigma_j - 1)`, where
 * `scale(s) = log(s) / log(reference_dose)`.
 */
struct SynthSpec {
    int n_drugs = 3;
    std::vector<double> doses{10, 100, 1000, 10000};
    Eigen::Index cells_per_condition = 500;
    Eigen::Index control_cells = 500;
    Eigen::Index dim = 30;
    Eigen::Index intrinsic_dim = 10;
    int clusters = 3;
    /** Standard deviation of the cluster centres around the origin. */
    double cluster_spread = 2.0;
    /** Norm of each latent drug shift. */
    double shift_norm = 4.0;
    /**
     * Correlation between drug shifts: each shift is `sqrt(rho) s + sqrt(1 - rho) e_j` before
     * normalization, with `s` shared and `e_j` drug-specific.
     */
    double shift_correlation = 0.0;
    /** Per-drug spread factors are drawn uniformly from this interval. */
    double sigma_min = 1.0;
    double sigma_max = 1.0;
    /** Isotropic feature-space noise added to every cell. */
    double noise = 0.1;
    /** Standard deviation of per-feature baseline levels shared by all cells, like gene expression levels. */
    double baseline_spread = 0.0;
    double reference_dose = 10000;
    /** Drug combinations to generate, each at every dose, by drug index. */
    std::vector<std::vector<int>> combinations;
    std::uint64_t seed = 0;

    void validate() const {
        detail::require(n_drugs >= 1, "synthetic: need at least one drug");
        detail::require(!doses.empty(), "synthetic: need at least one dose");
        for (double s : doses) {
            detail::require(s > 0 && std::isfinite(s), "synthetic: doses must be positive");
        }
        detail::require(reference_dose > 1, "synthetic: reference_dose must exceed 1");
        detail::require(cells_per_condition >= 1 && control_cells >= 2, "synthetic: need cells");
        detail::require(dim >= 1 && intrinsic_dim >= 1 && intrinsic_dim <= dim, "synthetic: need 1 <= intrinsic_dim <= dim");
        detail::require(clusters >= 1, "synthetic: need at least one cluster");
        detail::require(noise >= 0 && cluster_spread >= 0 && shift_norm >= 0 && baseline_spread >= 0, "synthetic: scales must be nonnegative");
        detail::require(shift_correlation >= 0 && shift_correlation <= 1, "synthetic: shift_correlation must lie in [0, 1]");
        detail::require(sigma_min > 0 && sigma_max >= sigma_min, "synthetic: need 0 < sigma_min <= sigma_max");
        for (const auto& combo : combinations) {
            detail::require(combo.size() >= 2, "synthetic: combinations need two or more drugs");
            for (int j : combo) {
                detail::require(j >= 0 && j < n_drugs, "synthetic: combination refers to an unknown drug");
            }
        }
    }

    double scale(double dose) const { return std::log(dose) / std::log(reference_dose); }
};

struct SynthConditionTruth {
    std::string label;
    std::vector<std::string> drugs;
    double dose = 0;
    double scale = 0;
    double sigma = 1;
    /** Feature-space shift of the condition mean relative to the control mean, before noise. */
    Vector mean_shift;
};

struct SynthTruth {
    /** Latent-to-feature embedding, intrinsic_dim x dim. */
    Matrix embedding;
    std::vector<std::string> drug_names;
    /** Latent shift per drug, one row each. */
    Matrix latent_shifts;
    Vector sigmas;
    /** Per-feature baseline added to every cell. */
    Vector baseline;
    std::vector<SynthConditionTruth> conditions;
};

struct SynthResult {
    CellDataset data;
    SynthTruth truth;
};

inline std::string synthetic_drug_name(int j) {
    return "drug" + std::to_string(j);
}

/**
 * Generates the dataset. Treated cells are fresh draws from the control mixture, recentred
 * exactly on the control sample mean before the shift, so that with zero noise every
 * condition mean differs from the control mean by exactly `mean_shift`.
 */
inline SynthResult generate_synthetic(const SynthSpec& spec) {
    spec.validate();
    const auto r = spec.intrinsic_dim, d = spec.dim;
    std::mt19937_64 rng(derive_seed(spec.seed, 0));
    std::normal_distribution<double> normal(0.0, 1.0);
    auto gaussian = [&](Eigen::Index rows, Eigen::Index cols) {
        Matrix m(rows, cols);
        for (Eigen::Index j = 0; j < cols; ++j) {
            for (Eigen::Index i = 0; i < rows; ++i) {
                m(i, j) = normal(rng);
            }
        }
        return m;
    };

    SynthResult out;
    auto& truth = out.truth;
    truth.embedding = gaussian(r, d) / std::sqrt(static_cast<double>(r));
    const Matrix centres = spec.cluster_spread * gaussian(spec.clusters, r);

    Vector shared = gaussian(r, 1).col(0);
    truth.latent_shifts.resize(spec.n_drugs, r);
    truth.sigmas.resize(spec.n_drugs);
    std::uniform_real_distribution<double> sigma_dist(spec.sigma_min, spec.sigma_max);
    for (int j = 0; j < spec.n_drugs; ++j) {
        Vector own = gaussian(r, 1).col(0);
        Vector b = std::sqrt(spec.shift_correlation) * shared + std::sqrt(1 - spec.shift_correlation) * own;
        truth.latent_shifts.row(j) = spec.shift_norm * b.normalized().transpose();
        truth.sigmas[j] = spec.sigma_max > spec.sigma_min ? sigma_dist(rng) : spec.sigma_min;
        truth.drug_names.push_back(synthetic_drug_name(j));
    }

    std::uniform_int_distribution<int> pick_cluster(0, spec.clusters - 1);
    auto draw_latent = [&](Eigen::Index n) {
        Matrix u = gaussian(n, r);
        for (Eigen::Index i = 0; i < n; ++i) {
            u.row(i) += centres.row(pick_cluster(rng));
        }
        return u;
    };

    std::vector<Matrix> blocks;
    std::vector<std::string> labels;
    const Matrix control = draw_latent(spec.control_cells);
    const Eigen::RowVectorXd control_mean = control.colwise().mean();
    blocks.push_back(control);
    labels.insert(labels.end(), static_cast<std::size_t>(spec.control_cells), control_label);

    std::vector<std::vector<int>> treatments;
    for (int j = 0; j < spec.n_drugs; ++j) {
        treatments.push_back({j});
    }
    treatments.insert(treatments.end(), spec.combinations.begin(), spec.combinations.end());

    for (const auto& drugs : treatments) {
        Eigen::RowVectorXd b = Eigen::RowVectorXd::Zero(r);
        double sigma = 0;
        std::vector<std::string> names;
        for (int j : drugs) {
            b += truth.latent_shifts.row(j);
            sigma += truth.sigmas[j];
            names.push_back(truth.drug_names[static_cast<std::size_t>(j)]);
        }
        b /= static_cast<double>(drugs.size());
        sigma /= static_cast<double>(drugs.size());
        std::sort(names.begin(), names.end());
        std::string drug_label = names.front();
        for (std::size_t k = 1; k < names.size(); ++k) {
            drug_label += "+" + names[k];
        }

        for (double dose : spec.doses) {
            const double scale = spec.scale(dose);
            const double spread = 1 + scale * (sigma - 1);
            Matrix u = draw_latent(spec.cells_per_condition);
            const Eigen::RowVectorXd own_mean = u.colwise().mean();
            Matrix treated = (spread * (u.rowwise() - own_mean)).rowwise() + (control_mean + scale * b);
            blocks.push_back(std::move(treated));

            SynthConditionTruth t;
            t.label = canonical_label(drug_label + "_" + detail::format_dose(dose));
            t.drugs = names;
            t.dose = dose;
            t.scale = scale;
            t.sigma = spread;
            t.mean_shift = (scale * b * truth.embedding).transpose();
            labels.insert(labels.end(), static_cast<std::size_t>(spec.cells_per_condition), t.label);
            truth.conditions.push_back(std::move(t));
        }
    }

    Eigen::Index total = 0;
    for (const auto& blk : blocks) {
        total += blk.rows();
    }
    auto& ds = out.data;
    ds.x.resize(total, d);
    Eigen::Index row = 0;
    for (const auto& blk : blocks) {
        ds.x.middleRows(row, blk.rows()) = blk * truth.embedding;
        row += blk.rows();
    }
    if (spec.noise > 0) {
        ds.x += spec.noise * gaussian(total, d);
    }
    if (spec.baseline_spread > 0) {
        rng.seed(derive_seed(spec.seed, 1));
        truth.baseline = spec.baseline_spread * gaussian(1, d).row(0).transpose();
        ds.x.rowwise() += truth.baseline.transpose();
    } else {
        truth.baseline = Vector::Zero(d);
    }
    ds.labels = std::move(labels);
    ds.groups.assign(static_cast<std::size_t>(total), "synthetic");
    for (Eigen::Index j = 0; j < d; ++j) {
        ds.features.push_back("f" + std::to_string(j));
    }
    return out;
}

/**
 * Stand-in molecular fingerprints for synthetic drugs: a fixed random linear image of each
 * drug's latent shift plus independent noise, so that fingerprints carry partial information.
 */
inline DrugEmbeddingTable synthetic_fingerprints(const SynthSpec& spec, const SynthTruth& truth, Eigen::Index width, double noise, std::uint64_t seed) {
    detail::require(width >= 1, "synthetic_fingerprints: width must be positive");
    std::mt19937_64 rng(derive_seed(seed, 7));
    std::normal_distribution<double> normal(0.0, 1.0);
    Matrix g(width, spec.intrinsic_dim);
    for (Eigen::Index j = 0; j < g.cols(); ++j) {
        for (Eigen::Index i = 0; i < g.rows(); ++i) {
            g(i, j) = normal(rng) / std::sqrt(static_cast<double>(spec.intrinsic_dim));
        }
    }
    DrugEmbeddingTable table;
    table.source = "fingerprint";
    for (int j = 0; j < spec.n_drugs; ++j) {
        Vector h = g * truth.latent_shifts.row(j).transpose() / std::max(spec.shift_norm, 1e-12);
        for (Eigen::Index k = 0; k < width; ++k) {
            h[k] += noise * normal(rng);
        }
        table.insert(truth.drug_names[static_cast<std::size_t>(j)], std::move(h));
    }
    return table;
}

}

#endif
