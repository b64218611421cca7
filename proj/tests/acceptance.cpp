// Acceptance checks: one PASS/FAIL line per criterion.
//
//   acceptance            run every criterion
//   acceptance 1 4 9      run a subset
//   acceptance --keep     keep the pipeline runs under the temp directory

#include "cmonge/cmonge.hpp"
#include "oracles.hpp"
#include "pipeline.hpp"

#include <chrono>
#include <cstdio>
#include <filesystem>
#include <functional>
#include <iostream>
#include <set>
#include <sstream>
#include <unistd.h>

namespace fs = std::filesystem;
using namespace cmonge;

namespace {

struct Outcome {
    bool pass = false;
    std::string detail;
};

std::string fmt(const char* f, double v) {
    char buf[64];
    std::snprintf(buf, sizeof(buf), f, v);
    return buf;
}

double seconds_since(std::chrono::steady_clock::time_point t0) {
    return std::chrono::duration<double>(std::chrono::steady_clock::now() - t0).count();
}

fs::path work_root;

// Pipeline commands report to stdout; keep the acceptance output to one line per criterion.
template <class F>
auto quietly(F&& f) {
    std::ostringstream sink;
    auto* old = std::cout.rdbuf(sink.rdbuf());
    try {
        auto r = f();
        std::cout.rdbuf(old);
        return r;
    } catch (...) {
        std::cout.rdbuf(old);
        throw;
    }
}

pipeline::ExperimentConfig config_at(const std::string& name, const std::string& run) {
    auto c = pipeline::load_config(std::string(CMONGE_SOURCE_DIR) + "/configs/" + name);
    c.output_dir = (work_root / run).string();
    c.validate();
    return c;
}

std::vector<pipeline::ReportRow> report_of(const pipeline::ExperimentConfig& c) {
    return pipeline::read_report_means(pipeline::Layout{c.output_dir}.eval_dir(c.resolved_model_name()) + "/report.tsv");
}

double dose_of(const std::string& label) {
    return *parse_condition(label).dose;
}

// Mean of a metric over the rows of one model, optionally restricted to one dose.
double mean_metric(const std::vector<pipeline::ReportRow>& rows, const std::string& model, double pipeline::ReportRow::*metric,
                   std::optional<double> dose = std::nullopt) {
    double sum = 0;
    int n = 0;
    for (const auto& r : rows) {
        if (r.model == model && (!dose || dose_of(r.condition) == *dose)) {
            sum += r.*metric;
            ++n;
        }
    }
    if (n == 0) {
        throw std::runtime_error("no report rows for " + model);
    }
    return sum / n;
}

// ---------------------------------------------------------------------------

Outcome ot_oracle() {
    const auto t0 = std::chrono::steady_clock::now();
    SinkhornOptions opt;
    opt.epsilon = 1e-3;
    double worst = 0;
    for (std::uint64_t k = 0; k < 50; ++k) {
        const Eigen::Index d = 1 + static_cast<Eigen::Index>(k % 3);
        Matrix x = oracle::random_matrix(6, d, 1000 + k), y = oracle::random_matrix(6, d, 2000 + k, 1.0, 0.5);
        const double exact = oracle::permutation_ot(x, y);
        const auto sol = sinkhorn(DiscreteMeasure(x), DiscreteMeasure(y), opt);
        worst = std::max(worst, std::abs(sol.transport_cost - exact) / exact);
    }
    const double t = seconds_since(t0);
    return {worst < 0.01 && t < 10, "max relative error " + fmt("%.2e", worst) + " over 50 instances, " + fmt("%.2f", t) + " s"};
}

Outcome debiasing() {
    // Identical inputs share one solve. A row-reversed copy is the same measure but goes
    // through three separate solves, so there the solver tolerance must sit below the bound.
    double same = 0, reordered = 0;
    int count = 0;
    for (std::uint64_t k = 0; k < 100; ++k) {
        const Eigen::Index n = 5 + static_cast<Eigen::Index>(k % 26), d = 1 + static_cast<Eigen::Index>(k % 5);
        Matrix x = oracle::random_matrix(n, d, 3000 + k, 1.0 + 0.02 * static_cast<double>(k));
        DiscreteMeasure mu(x), copy(Matrix(x.colwise().reverse()));
        for (double eps : {0.01, 0.1, 1.0}) {
            SinkhornOptions opt;
            opt.epsilon = eps;
            same = std::max(same, std::abs(sinkhorn_divergence(mu, mu, opt)));
            opt.tol = 1e-9;
            reordered = std::max(reordered, std::abs(sinkhorn_divergence(mu, copy, opt)));
            ++count;
        }
    }
    return {same <= 1e-8 && reordered <= 1e-8, "max |divergence| " + fmt("%.2e", same) + " on identical inputs, " + fmt("%.2e", reordered) +
                                                    " on reordered copies (tol 1e-9), " + std::to_string(count) + " (measure, epsilon) pairs"};
}

Outcome gradients() {
    const auto t0 = std::chrono::steady_clock::now();
    SinkhornOptions tight;
    tight.tol = 1e-12;
    tight.max_iter = 200000;
    tight.epsilon = 0.1;

    double div = 0, gap = 0, net = 0, e2e = 0;
    for (std::uint64_t k = 0; k < 5; ++k) {
        Matrix x = oracle::random_matrix(8, 3, 4000 + k), y = oracle::random_matrix(7, 3, 4100 + k, 1.0, 0.5);
        Matrix g = divergence_gradient(DiscreteMeasure(x), DiscreteMeasure(y), tight);
        Matrix fd = oracle::finite_difference([&](const Matrix& p) { return sinkhorn_divergence(DiscreteMeasure(p), DiscreteMeasure(y), tight); }, x, 1e-4);
        div = std::max(div, oracle::relative_error(g, fd));

        Matrix tx = oracle::random_matrix(8, 3, 4200 + k, 1.2, 0.3);
        g = monge_gap_gradient(x, tx, tight);
        fd = oracle::finite_difference([&](const Matrix& t) { return monge_gap(x, t, tight); }, tx, 1e-4);
        gap = std::max(gap, oracle::relative_error(g, fd));
    }

    for (std::uint64_t k = 0; k < 6; ++k) {
        const std::vector<Eigen::Index> sizes{3 + static_cast<Eigen::Index>(k), 8, 6, 2 + static_cast<Eigen::Index>(k % 3)};
        auto p = init_params(sizes, 4300 + k);
        Matrix in = oracle::random_matrix(4, sizes.front(), 4400 + k), up = oracle::random_matrix(4, sizes.back(), 4500 + k);
        auto fwd = mlp_forward(p, in);
        auto bwd = mlp_backward(p, fwd.tape, up);
        auto loss = [&](const MlpParams& q, const Matrix& z) { return (mlp_apply(q, z).array() * up.array()).sum(); };
        for (std::size_t l = 0; l < p.layers.size(); ++l) {
            Matrix fd = oracle::finite_difference(
                [&](const Matrix& w) {
                    auto q = p;
                    q.layers[l].weight = w;
                    return loss(q, in);
                },
                p.layers[l].weight, 1e-5);
            net = std::max(net, oracle::relative_error(bwd.grad_params.layers[l].weight, fd));
        }
        Matrix fd = oracle::finite_difference([&](const Matrix& z) { return loss(p, z); }, in, 1e-5);
        net = std::max(net, oracle::relative_error(bwd.grad_input, fd));
    }

    DrugEmbeddingTable table;
    table.source = "fingerprint";
    table.insert("a", oracle::random_matrix(3, 1, 4600).col(0));
    table.insert("b", oracle::random_matrix(3, 1, 4601).col(0));
    SinkhornOptions loss_opt = tight;
    loss_opt.epsilon = 0.5;
    for (auto mode : {ContextMode::none, ContextMode::dose, ContextMode::drug_dose}) {
        MapConfig mc;
        mc.hidden = {6, 6};
        auto model = init_map_model(2, init_condition_encoder(mode, 3, 2, 4700), mc);
        model.lambda = 0.5;
        auto cond = resolve_condition({{"a", "b"}, 30.0, "a+b_30"}, mode, mode == ContextMode::drug_dose ? &table : nullptr);
        Matrix z = oracle::random_matrix(6, 2, 4800), y = oracle::random_matrix(5, 2, 4801, 1.0, 1.0);
        auto analytic = map_step_gradient(model, z, y, cond, loss_opt);
        Vector flat(model.net.parameter_count() + model.encoder.flat().size());
        flat << flatten(model.net), model.encoder.flat();
        Matrix fd = oracle::finite_difference(
            [&](const Matrix& p) {
                MapModel m = model;
                Vector v = p.col(0);
                m.encoder.unflat(v, unflatten(v, 0, m.net));
                const Vector c = encode_condition(cond, m.encoder).c;
                return conditional_loss_step(z, z + mlp_apply(m.net, map_input(z, c)), y, loss_opt, m.lambda).total;
            },
            Matrix(flat), 1e-6);
        e2e = std::max(e2e, oracle::relative_error(Matrix(analytic.grad), fd));
    }

    const double t = seconds_since(t0);
    const bool pass = div < 1e-3 && gap < 1e-3 && net < 1e-4 && e2e < 1e-3 && t < 60;
    return {pass, "divergence " + fmt("%.1e", div) + ", monge gap " + fmt("%.1e", gap) + ", mlp " + fmt("%.1e", net) + ", end-to-end " + fmt("%.1e", e2e) + ", " +
                      fmt("%.1f", t) + " s"};
}

Outcome gap_marker() {
    SinkhornOptions opt;
    opt.epsilon = 0.01;
    double worst_ratio = 0;
    std::mt19937_64 rng(5000);
    std::normal_distribution<double> normal;
    for (std::uint64_t k = 0; k < 10; ++k) {
        Matrix x = oracle::random_matrix(64, 5, 5100 + k);
        Eigen::RowVectorXd b(5);
        for (int j = 0; j < 5; ++j) {
            b[j] = 2 * normal(rng);
        }
        worst_ratio = std::max(worst_ratio, monge_gap(x, x.rowwise() + b, opt) / b.squaredNorm());
    }

    // Entropy moves the swap gap by epsilon log 2, so the swap is checked at a small epsilon.
    Matrix x(2, 1), tx(2, 1);
    x << 0, 1;
    tx << 1, 0;
    SinkhornOptions swap_opt;
    swap_opt.epsilon = 1e-3;
    const double swap = monge_gap(x, tx, swap_opt);
    return {worst_ratio <= 1e-2 && std::abs(swap - 1) <= 1e-3,
            "translation gap / |b|^2 at most " + fmt("%.2e", worst_ratio) + ", swap gap " + fmt("%.6f", swap)};
}

// The in-distribution run is shared by the dose ordering and the higher-moment checks.
struct IdRun {
    std::vector<pipeline::ReportRow> cmonge, monge;
    double seconds = 0;
    int steps = 0;
};

const IdRun& id_run() {
    static std::optional<IdRun> run;
    if (run) {
        return *run;
    }
    const auto t0 = std::chrono::steady_clock::now();
    IdRun r;
    auto c = config_at("synthetic_id.json", "id");
    quietly([&] {
        pipeline::cmd_gen_synth(c, true);
        pipeline::cmd_train_ae(c, true);
        pipeline::cmd_train_map(c, true);
        pipeline::cmd_evaluate(c, true);
        return 0;
    });
    r.cmonge = report_of(c);
    auto m = c;
    m.context_mode = ContextMode::none;
    quietly([&] {
        pipeline::cmd_train_map(m, true);
        pipeline::cmd_evaluate(m, true);
        return 0;
    });
    r.monge = report_of(m);
    r.steps = c.map.steps;
    r.seconds = seconds_since(t0);
    run = r;
    return *run;
}

Outcome synthetic_id() {
    const auto& r = id_run();
    double top = 0;
    for (const auto& row : r.cmonge) {
        top = std::max(top, dose_of(row.condition));
    }
    const auto r2 = &pipeline::ReportRow::r2;
    const double mean = mean_metric(r.cmonge, "cmonge-dose", r2);
    const double c_top = mean_metric(r.cmonge, "cmonge-dose", r2, top);
    const double m_top = mean_metric(r.monge, "monge", r2, top);
    const double i_top = mean_metric(r.cmonge, "identity", r2, top);
    const bool pass = mean >= 0.95 && c_top > m_top && c_top > i_top && r.steps <= 20000 && r.seconds < 600;
    return {pass, "mean R2 " + fmt("%.4f", mean) + "; at the top dose cmonge " + fmt("%.4f", c_top) + ", monge " + fmt("%.4f", m_top) + ", identity " +
                      fmt("%.4f", i_top) + "; " + std::to_string(r.steps) + " steps per model, " + fmt("%.0f", r.seconds) + " s"};
}

Outcome synthetic_dose_ood() {
    const auto t0 = std::chrono::steady_clock::now();
    auto c = config_at("synthetic_dose_ood.json", "dose_ood");
    auto m = c;
    m.context_mode = ContextMode::none;
    quietly([&] {
        pipeline::cmd_gen_synth(c, true);
        pipeline::cmd_train_ae(c, true);
        pipeline::cmd_train_map(c, true);
        pipeline::cmd_evaluate(c, true);
        pipeline::cmd_train_map(m, true);
        pipeline::cmd_evaluate(m, true);
        return 0;
    });
    const double t = seconds_since(t0);
    const auto r2 = &pipeline::ReportRow::r2;
    const auto cm = report_of(c), mm = report_of(m);
    const double held = c.split.ood_doses.at(0);
    const double cr = mean_metric(cm, "cmonge-dose", r2, held);
    const double mr = mean_metric(mm, "monge", r2, held);
    const double ir = mean_metric(cm, "identity", r2, held);
    const bool pass = cr >= 0.90 && cr > mr && cr > ir && t < 600;
    return {pass, "held-out dose " + fmt("%g", held) + ": cmonge R2 " + fmt("%.4f", cr) + ", monge " + fmt("%.4f", mr) + ", identity " + fmt("%.4f", ir) + "; " +
                      fmt("%.0f", t) + " s"};
}

Outcome synthetic_drug_ood() {
    const auto t0 = std::chrono::steady_clock::now();
    auto c = config_at("synthetic_drug_ood_moa.json", "drug_ood");
    quietly([&] {
        pipeline::cmd_gen_synth(c, true);
        pipeline::cmd_train_ae(c, true);
        pipeline::cmd_embed_moa(c, true);
        pipeline::cmd_train_map(c, true);
        pipeline::cmd_evaluate(c, true);
        return 0;
    });
    const auto rows = report_of(c);
    std::map<std::string, double> model, identity;
    for (const auto& r : rows) {
        (r.model == "identity" ? identity : model)[r.condition] = r.mmd;
    }
    int wins = 0;
    double sum_model = 0, sum_identity = 0;
    for (const auto& [label, v] : model) {
        wins += v < identity.at(label);
        sum_model += v;
        sum_identity += identity.at(label);
    }
    const double ratio = sum_model / sum_identity;
    const bool pass = !model.empty() && wins == static_cast<int>(model.size()) && ratio < 0.5;
    return {pass, "MMD below identity on " + std::to_string(wins) + "/" + std::to_string(model.size()) + " held-out conditions, mean MMD ratio " + fmt("%.3f", ratio) +
                      "; " + fmt("%.0f", seconds_since(t0)) + " s"};
}

Outcome higher_moments() {
    const auto& r = id_run();
    std::map<std::string, double> model, identity;
    for (const auto& row : r.cmonge) {
        (row.model == "identity" ? identity : model)[row.condition] = row.wasserstein;
    }
    int wins = 0;
    for (const auto& [label, w] : model) {
        wins += w < identity.at(label);
    }
    const double share = model.empty() ? 0.0 : static_cast<double>(wins) / static_cast<double>(model.size());
    return {share >= 0.9, "Wasserstein below identity on " + std::to_string(wins) + "/" + std::to_string(model.size()) + " conditions"};
}

Outcome properties() {
    std::vector<std::string> failures;

    // Drug-set pooling is bit-exactly invariant to the order of the drugs.
    for (std::uint64_t k = 0; k < 20; ++k) {
        DenseLayer w{oracle::random_matrix(6, 4, 6000 + k), oracle::random_matrix(6, 1, 6100 + k).col(0)};
        std::vector<Vector> set;
        for (int j = 0; j < 4; ++j) {
            set.push_back(oracle::random_matrix(4, 1, 6200 + 10 * k + static_cast<std::uint64_t>(j), 5.0).col(0));
        }
        const Vector reference = pool_drug_embeddings(set, w);
        std::vector<int> order{0, 1, 2, 3};
        while (std::next_permutation(order.begin(), order.end())) {
            std::vector<Vector> shuffled;
            for (int j : order) {
                shuffled.push_back(set[static_cast<std::size_t>(j)]);
            }
            if (pool_drug_embeddings(shuffled, w) != reference) {
                failures.push_back("pooling order");
            }
        }
    }

    // Stress never increases.
    int smacof_steps = 0;
    for (std::uint64_t k = 0; k < 20; ++k) {
        Matrix pts = oracle::random_matrix(10, 5, 6300 + k);
        Matrix d(10, 10);
        for (int i = 0; i < 10; ++i) {
            for (int j = 0; j < 10; ++j) {
                d(i, j) = (pts.row(i) - pts.row(j)).lpNorm<1>();
            }
        }
        auto res = smacof(d, {.out_dim = 2, .seed = k});
        for (std::size_t s = 1; s < res.stress.size(); ++s) {
            ++smacof_steps;
            if (res.stress[s] > res.stress[s - 1] * (1 + 1e-12)) {
                failures.push_back("stress increase");
            }
        }
    }

    // Held-out conditions never reach the training rows.
    SynthSpec spec;
    spec.n_drugs = 6;
    spec.cells_per_condition = 50;
    spec.control_cells = 60;
    spec.dim = 6;
    spec.intrinsic_dim = 3;
    auto ds = generate_synthetic(spec).data;
    std::vector<std::pair<Scenario, SplitParams>> cases;
    cases.push_back({Scenario::id, {}});
    SplitParams p;
    p.ood_doses = {100};
    cases.push_back({Scenario::dose_ood, p});
    p = {};
    p.ood_drugs = {"drug1", "drug4"};
    p.reference_fraction = 0.2;
    cases.push_back({Scenario::drug_ood, p});
    p = {};
    p.fold_size = 2;
    p.fold_index = 1;
    cases.push_back({Scenario::k_fold_drug_ood, p});
    for (const auto& [scenario, params] : cases) {
        auto plan = make_split(ds, scenario, params, 6400);
        std::set<Eigen::Index> training;
        for (auto i : plan.training_rows()) {
            training.insert(i);
        }
        std::set<Eigen::Index> control_test(plan.control_test.begin(), plan.control_test.end());
        for (auto i : plan.control_train) {
            if (control_test.count(i)) {
                failures.push_back("control rows shared");
            }
        }
        if (scenario != Scenario::id && plan.ood_conditions.empty()) {
            failures.push_back("nothing held out");
        }
        for (const auto& [label, rows] : plan.test) {
            if (plan.is_ood(label) && plan.train.count(label) && !plan.train.at(label).empty()) {
                failures.push_back("held-out condition trained on");
            }
            for (auto i : rows) {
                if (training.count(i)) {
                    failures.push_back("test row in training");
                }
            }
            if (plan.reference.count(label)) {
                for (auto i : plan.reference.at(label)) {
                    if (training.count(i) || std::find(rows.begin(), rows.end(), i) != rows.end()) {
                        failures.push_back("reference row reused");
                    }
                }
            }
        }
    }

    // Two runs with the same seed give checksum-identical artifacts.
    auto tiny = nlohmann::json::parse(R"({
        "seed": 11,
        "data": {"synthetic": {"n_drugs": 3, "doses": [10, 100], "cells_per_condition": 60, "control_cells": 80,
                               "dim": 8, "intrinsic_dim": 3, "shift_norm": 3.0}},
        "split": {"scenario": "drug_ood", "ood_drugs": ["drug2"], "reference_fraction": 0.2},
        "autoencoder": {"hidden": [16], "latent_dim": 3, "epochs": 3, "batch_size": 32},
        "moa": {"dim": 2, "max_cells": 40},
        "map": {"context_mode": "drugdose", "embedding": "moa", "hidden": [16, 16], "drug_width": 4, "steps": 30, "batch_size": 16},
        "eval": {"n_batches": 2, "batch_size": 16, "identity_baseline": true}
    })");
    std::vector<std::vector<std::pair<std::string, std::string>>> runs;
    for (const char* name : {"det_a", "det_b"}) {
        auto c = pipeline::config_from_json(tiny);
        c.output_dir = (work_root / name).string();
        c.validate();
        runs.push_back(quietly([&] {
            std::vector<std::pair<std::string, std::string>> all;
            for (auto cmd : {pipeline::cmd_gen_synth, pipeline::cmd_train_ae, pipeline::cmd_embed_moa, pipeline::cmd_train_map, pipeline::cmd_evaluate}) {
                auto res = cmd(c, true);
                all.insert(all.end(), res.artifacts.begin(), res.artifacts.end());
            }
            return all;
        }));
    }
    if (runs[0].empty() || runs[0] != runs[1]) {
        failures.push_back("artifacts differ between same-seed runs");
    }

    std::sort(failures.begin(), failures.end());
    failures.erase(std::unique(failures.begin(), failures.end()), failures.end());
    std::string detail = "pooling over 20 sets x 24 orders, " + std::to_string(smacof_steps) + " stress steps, 4 scenarios, " + std::to_string(runs[0].size()) +
                         " artifacts compared";
    for (const auto& f : failures) {
        detail += "; " + f;
    }
    return {failures.empty(), detail};
}

Outcome mmd_oracle() {
    double worst = 0;
    for (std::uint64_t k = 0; k < 20; ++k) {
        Matrix a = oracle::random_matrix(64, 1 + static_cast<Eigen::Index>(k % 6), 7000 + k);
        Matrix b = oracle::random_matrix(64, a.cols(), 7100 + k, 1.0 + 0.1 * static_cast<double>(k), 0.1 * static_cast<double>(k));
        const auto bw = median_bandwidths(a, b);
        worst = std::max(worst, std::abs(mmd_unbiased(a, b, bw) - oracle::naive_mmd(a, b, bw)));
    }
    return {worst <= 1e-10, "max absolute difference " + fmt("%.2e", worst) + " over 20 cloud pairs"};
}

}

int main(int argc, char** argv) {
    const std::vector<std::pair<std::string, std::function<Outcome()>>> criteria{
        {"OT oracle equivalence", ot_oracle},
        {"debiasing identity", debiasing},
        {"gradient suite", gradients},
        {"Monge gap optimality marker", gap_marker},
        {"synthetic in-distribution doses", synthetic_id},
        {"synthetic held-out dose", synthetic_dose_ood},
        {"synthetic held-out drug with MoA context", synthetic_drug_ood},
        {"higher moments against identity", higher_moments},
        {"property suites", properties},
        {"MMD oracle", mmd_oracle},
    };

    bool keep = false;
    std::set<std::size_t> selected;
    for (int i = 1; i < argc; ++i) {
        const std::string a = argv[i];
        if (a == "--keep") {
            keep = true;
        } else {
            const auto k = std::stoul(a);
            if (k < 1 || k > criteria.size()) {
                std::cerr << "no criterion " << a << "\n";
                return 2;
            }
            selected.insert(k);
        }
    }
    if (selected.empty()) {
        for (std::size_t k = 1; k <= criteria.size(); ++k) {
            selected.insert(k);
        }
    }

    work_root = fs::temp_directory_path() / ("cmonge_acceptance_" + std::to_string(::getpid()));
    fs::create_directories(work_root);

    int failed = 0;
    for (auto k : selected) {
        const auto& [name, check] = criteria[k - 1];
        Outcome o;
        try {
            o = check();
        } catch (const std::exception& e) {
            o = {false, std::string("error: ") + e.what()};
        }
        failed += !o.pass;
        std::cout << (o.pass ? "PASS" : "FAIL") << "  " << k << "  " << name << ": " << o.detail << std::endl;
    }

    if (keep) {
        std::cout << "runs kept in " << work_root.string() << "\n";
    } else {
        fs::remove_all(work_root);
    }
    return failed == 0 ? 0 : 1;
}
