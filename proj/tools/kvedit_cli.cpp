// Command-line front end for the knowledge-editing laboratory.

#include "kvedit/errors.hpp"
#include "kvedit/eval_harness.hpp"
#include "kvedit/json_util.hpp"
#include "kvedit/matrix_io.hpp"

#include <CLI11.hpp>

#include <iostream>
#include <optional>

namespace fs = std::filesystem;
using namespace kvedit;

namespace {

struct Common {
    std::string config;
    std::optional<std::uint64_t> seed;
    std::optional<double> tau;
    std::string out = "out";
    std::string format = "csv";
    std::string world;
};

ExperimentConfig load_config(const Common& c) {
    ExperimentConfig cfg = c.config.empty() ? ExperimentConfig{} : ExperimentConfig::load(c.config);
    if (c.seed) cfg.seed = *c.seed;
    if (c.tau) {
        cfg.evaluation.tau = *c.tau;
        cfg.training.tau = *c.tau;
    }
    return cfg;
}

// A saved world when --world is given, otherwise one generated from the config.
World obtain_world(const Common& c, const ExperimentConfig& cfg) {
    if (!c.world.empty()) return load_world(c.world);
    World w = generate_world(cfg.world, cfg.seed);
    w.readout.assume_located_dominance = cfg.evaluation.assume_located_dominance;
    return w;
}

CovarianceOptions cov_options(const ExperimentConfig& cfg) {
    CovarianceOptions o;
    o.normalization = cfg.evaluation.covariance_normalization;
    o.ridge = cfg.evaluation.ridge;
    return o;
}

void write_reports(const fs::path& out, const std::string& format,
                   const std::vector<std::pair<std::string, MetricsReport>>& rows) {
    fs::create_directories(out);
    if (format == "json") {
        nlohmann::json j;
        for (const auto& [label, r] : rows) j[label] = r.to_json();
        write_json_file(out / "metrics.json", j);
    } else {
        write_metrics_csv(out / "metrics.csv", rows);
    }
}

void print_report(const std::vector<std::pair<std::string, MetricsReport>>& rows) {
    std::cout << std::fixed << std::setprecision(3);
    for (auto m : kAllMetrics) {
        std::cout << std::setw(13) << std::left << to_string(m);
        for (const auto& [label, r] : rows) {
            std::cout << "  " << label << ' ' << r.ratio(m) << " (n=" << r.cell(m).n << ')';
        }
        std::cout << '\n';
    }
}

void add_common(CLI::App* app, Common& c, bool with_world = true) {
    app->add_option("--config", c.config, "experiment config (JSON)");
    app->add_option("--seed", c.seed, "override the config seed");
    app->add_option("--tau", c.tau, "gate threshold");
    app->add_option("--out", c.out, "output directory");
    app->add_option("--format", c.format, "report format")->check(CLI::IsMember({"csv", "json"}));
    if (with_world) app->add_option("--world", c.world, "saved world directory (instead of generating one)");
}

}  // namespace

int main(int argc, char** argv) {
    CLI::App app{"kvedit: linear associative memory editing laboratory"};
    app.require_subcommand(1);
    Common c;
    int subject = 0;
    std::string dump;

    auto* gen = app.add_subcommand("gen-world", "generate a synthetic world and save it");
    add_common(gen, c, false);
    auto* fit = app.add_subcommand("fit", "fit W and C, report the retained triples");
    add_common(fit, c);
    auto* edit = app.add_subcommand("edit", "apply one rank-one edit to a subject");
    add_common(edit, c);
    edit->add_option("--subject", subject, "subject id")->required();
    auto* train = app.add_subcommand("train-rep", "train the key adaptor for one subject's edit");
    add_common(train, c);
    train->add_option("--subject", subject, "subject id")->required();
    auto* eval = app.add_subcommand("eval", "baseline and adaptor metrics on the test split");
    add_common(eval, c, false);
    auto* sweep = app.add_subcommand("sweep", "gate-threshold sweep on the validation split");
    add_common(sweep, c, false);
    auto* analyze = app.add_subcommand("analyze-keys", "whitening-similarity statistics");
    add_common(analyze, c);
    auto* lemmas = app.add_subcommand("verify-lemmas", "value-bound, robustness and specificity checks");
    add_common(lemmas, c, false);
    auto* import = app.add_subcommand("import-dump", "load an activation dump and analyse its keys");
    add_common(import, c, false);
    import->add_option("--dump", dump, "AELM dump with labels.json beside it")->required();
    auto* run = app.add_subcommand("run", "full pipeline into --out");
    add_common(run, c, false);

    CLI11_PARSE(app, argc, argv);

    try {
        if (run->parsed()) {
            if (c.config.empty()) {
                std::cerr << "error: run needs --config\n";
                return 2;
            }
            return run_experiment(c.config, c.out);
        }
        const ExperimentConfig cfg = load_config(c);
        const fs::path out = c.out;

        if (gen->parsed()) {
            save_world(obtain_world(c, cfg), out);
            std::cout << "world written to " << out.string() << '\n';
        } else if (fit->parsed()) {
            const World w = obtain_world(c, cfg);
            const BuiltModel b = build_model(w, cov_options(cfg));
            fs::create_directories(out);
            write_aelm(out / "W.aelm", b.stack.memory.W);
            write_aelm(out / "C.aelm", b.stack.cov.matrix());
            write_json_file(out / "fit.json", {{"retained", b.retained},
                                               {"filtered_fraction", b.filtered_fraction},
                                               {"condition_number", b.stack.cov.condition_number()}});
            std::cout << b.retained.size() << " of " << w.clusters.size() << " triples retained\n";
        } else if (edit->parsed() || train->parsed()) {
            const World w = obtain_world(c, cfg);
            const BuiltModel b = build_model(w, cov_options(cfg));
            if (subject < 0 || subject >= static_cast<int>(w.clusters.size())) {
                throw OutOfRange("subject " + std::to_string(subject) + " not in world");
            }
            const EditCase ec = prepare_edit(w, b, subject, cfg.evaluation);
            fs::create_directories(out);
            if (edit->parsed()) {
                write_json_file(out / "edit.json", ec.edit.to_json());
                write_aelm(out / "W_hat.aelm", ec.edit.W_hat.W);
                std::cout << "target probability at k*: " << ec.target_probability << '\n';
            } else {
                TrainConfig tc = cfg.training;
                tc.tau = cfg.evaluation.tau;
                const auto keys = training_keys(w.clusters[subject]);
                const TrainResult tr = train_adaptor(keys, ec.edit.k_star, b.stack.cov, tc);
                save_adaptor(out, tr.params, {{"training", tc.to_json()}, {"final_loss", tr.loss_trace.back()}});
                std::cout << "loss " << tr.loss_trace.front() << " -> " << tr.loss_trace.back() << '\n';
            }
        } else if (eval->parsed()) {
            const Experiment e = prepare_experiment(cfg);
            MetricsReport base = evaluate(e.world, e.built.stack, e.test_cases, {}, cfg.evaluation.tau);
            MetricsReport rep = evaluate(e.world, e.built.stack, e.test_cases, e.test_adaptors, cfg.evaluation.tau);
            base.config_hash = rep.config_hash = cfg.hash();
            const std::vector<std::pair<std::string, MetricsReport>> rows = {{"baseline", base}, {"rep", rep}};
            write_reports(out, c.format, rows);
            print_report(rows);
        } else if (sweep->parsed()) {
            const Experiment e = prepare_experiment(cfg);
            const SweepResult s = tau_sweep(e.world, e.built.stack, e.validation_cases, e.validation_adaptors,
                                            cfg.evaluation.tau_grid);
            fs::create_directories(out);
            if (c.format == "json") {
                nlohmann::json j = nlohmann::json::array();
                for (const auto& r : s.reports) j.push_back(r.to_json());
                write_json_file(out / "sweep.json", j);
            } else {
                s.write_csv(out / "sweep.csv");
            }
            s.write_plot_data(out / "sweep_plot.csv");
            for (std::size_t i = 0; i < s.taus.size(); ++i) {
                std::cout << "tau " << s.taus[i] << "  locality " << s.reports[i].ratio(Metric::Locality)
                          << "  shuffle_id " << s.reports[i].ratio(Metric::ShuffleId) << '\n';
            }
        } else if (analyze->parsed()) {
            const World w = obtain_world(c, cfg);
            const BuiltModel b = build_model(w, cov_options(cfg));
            const KeyStatsReport r = analyze_keys(w, b.stack.cov);
            fs::create_directories(out);
            write_json_file(out / "keystats.json", r.to_json());
            std::cout << "random-pair p25/p50/p75/p99: " << r.p25 << ' ' << r.p50 << ' ' << r.p75 << ' ' << r.p99
                      << '\n';
        } else if (lemmas->parsed()) {
            const Experiment e = prepare_experiment(cfg);
            LemmaSummary s;
            const auto records = verify_lemmas(e.world, e.built.stack, e.test_cases, e.test_adaptors,
                                               cfg.evaluation.tau, cfg.evaluation.lemma_confidence, &s);
            fs::create_directories(out);
            write_lemma_csv(out / "lemma_report.csv", records);
            std::cout << "value_bound " << s.value_bound_pass << '/' << s.value_bound_n << "  robustness "
                      << s.robustness_pass << '/' << s.robustness_n << "  robustness_rep " << s.robustness_rep_pass
                      << '/' << s.robustness_rep_n << "  specificity " << s.specificity_pass << '/'
                      << s.specificity_n << '\n';
        } else if (import->parsed()) {
            const ActivationDump d = load_activation_dump(dump);
            Matrix bg(d.keys.dim(), static_cast<Index>(d.background_columns.size()));
            for (std::size_t i = 0; i < d.background_columns.size(); ++i) {
                bg.col(static_cast<Index>(i)) = d.keys.data.col(d.background_columns[i]);
            }
            // Without background rows, the covariance comes from every key in the dump.
            const KeySet basis = bg.cols() > 0 ? KeySet(bg) : d.keys;
            const Covariance cov = covariance(basis, cov_options(cfg));
            AnalysisOptions ao;
            ao.seed = cfg.seed;
            const KeyStatsReport r = analyze_clusters(d.clusters, cov, ao);
            fs::create_directories(out);
            write_json_file(out / "keystats.json", r.to_json());
            std::cout << d.keys.count() << " keys, " << d.clusters.size() << " subjects\n";
        }
    } catch (const std::exception& ex) {
        std::cerr << "error: " << ex.what() << '\n';
        return 1;
    }
    return 0;
}
