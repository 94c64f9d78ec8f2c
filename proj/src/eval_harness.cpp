#include "kvedit/eval_harness.hpp"

#include "kvedit/errors.hpp"
#include "kvedit/json_util.hpp"
#include "kvedit/matrix_io.hpp"

#include <algorithm>
#include <chrono>
#include <cmath>
#include <cstdio>
#include <fstream>
#include <iomanip>
#include <iostream>
#include <sstream>

namespace kvedit {

namespace fs = std::filesystem;

// ------------------------------------------------------------------ config

nlohmann::json EvalConfig::to_json() const {
    return {{"n_validation", n_validation},
            {"n_test", n_test},
            {"locality_neighbours", locality_neighbours},
            {"tau", tau},
            {"tau_grid", tau_grid},
            {"shared_adaptor", shared_adaptor},
            {"covariance_normalization", covariance_normalization == CovarianceNormalization::Sum ? "sum" : "mean"},
            {"ridge", ridge},
            {"lemma_confidence", lemma_confidence},
            {"assume_located_dominance", assume_located_dominance},
            {"value_opt",
             {{"steps", value_opt.steps},
              {"learning_rate", value_opt.learning_rate},
              {"kl_weight", value_opt.kl_weight},
              {"clip_norm", value_opt.clip_norm},
              {"max_backtracks", value_opt.max_backtracks}}}};
}

EvalConfig EvalConfig::from_json(const nlohmann::json& j) {
    EvalConfig c;
    reject_unknown_keys(j, c.to_json(), "evaluation");
    c.n_validation = j.value("n_validation", c.n_validation);
    c.n_test = j.value("n_test", c.n_test);
    c.locality_neighbours = j.value("locality_neighbours", c.locality_neighbours);
    c.tau = j.value("tau", c.tau);
    c.tau_grid = j.value("tau_grid", c.tau_grid);
    c.shared_adaptor = j.value("shared_adaptor", c.shared_adaptor);
    const std::string norm = j.value("covariance_normalization", std::string("sum"));
    if (norm == "sum") {
        c.covariance_normalization = CovarianceNormalization::Sum;
    } else if (norm == "mean") {
        c.covariance_normalization = CovarianceNormalization::Mean;
    } else {
        throw ConfigMismatch("covariance_normalization must be 'sum' or 'mean', got '" + norm + "'");
    }
    c.ridge = j.value("ridge", c.ridge);
    c.lemma_confidence = j.value("lemma_confidence", c.lemma_confidence);
    c.assume_located_dominance = j.value("assume_located_dominance", c.assume_located_dominance);
    if (j.contains("value_opt")) {
        const auto& v = j.at("value_opt");
        c.value_opt.steps = v.value("steps", c.value_opt.steps);
        c.value_opt.learning_rate = v.value("learning_rate", c.value_opt.learning_rate);
        c.value_opt.kl_weight = v.value("kl_weight", c.value_opt.kl_weight);
        c.value_opt.clip_norm = v.value("clip_norm", c.value_opt.clip_norm);
        c.value_opt.max_backtracks = v.value("max_backtracks", c.value_opt.max_backtracks);
    }
    if (c.n_validation < 0 || c.n_test < 1) throw ConfigMismatch("need n_test >= 1 and n_validation >= 0");
    if (c.locality_neighbours < 1) throw ConfigMismatch("locality_neighbours must be positive");
    for (std::size_t i = 0; i < c.tau_grid.size(); ++i) {
        if (c.tau_grid[i] < 0.0 || c.tau_grid[i] > 1.0) throw ConfigMismatch("tau grid must lie in [0,1]");
        if (i > 0 && !(c.tau_grid[i] > c.tau_grid[i - 1])) throw ConfigMismatch("tau grid must be strictly increasing");
    }
    return c;
}

nlohmann::json ExperimentConfig::to_json() const {
    return {{"seed", seed}, {"world", world.to_json()}, {"training", training.to_json()},
            {"evaluation", evaluation.to_json()}};
}

ExperimentConfig ExperimentConfig::from_json(const nlohmann::json& j) {
    ExperimentConfig c;
    for (const auto& [key, _] : j.items()) {
        if (key != "seed" && key != "world" && key != "training" && key != "evaluation") {
            throw ConfigMismatch("unknown config section '" + key + "'");
        }
    }
    c.seed = j.value("seed", std::uint64_t{0});
    if (j.contains("world")) c.world = WorldConfig::from_json(j.at("world"));
    if (j.contains("training")) c.training = TrainConfig::from_json(j.at("training"));
    if (j.contains("evaluation")) c.evaluation = EvalConfig::from_json(j.at("evaluation"));
    return c;
}

ExperimentConfig ExperimentConfig::load(const fs::path& path) {
    if (!fs::exists(path)) throw IoError("config file not found: " + path.string());
    return from_json(read_json_file(path));
}

std::string ExperimentConfig::hash() const {
    const std::string s = to_json().dump();
    std::uint64_t h = 0xcbf29ce484222325ull;
    for (unsigned char c : s) {
        h ^= c;
        h *= 0x100000001b3ull;
    }
    std::ostringstream os;
    os << std::hex << std::setw(16) << std::setfill('0') << h;
    return os.str();
}

// ----------------------------------------------------------------- metrics

std::string to_string(Metric m) {
    switch (m) {
        case Metric::Success: return "success";
        case Metric::Locality: return "locality";
        case Metric::RephraseId: return "rephrase_id";
        case Metric::ShuffleId: return "shuffle_id";
        case Metric::LongId: return "long_id";
        case Metric::RephraseOod: return "rephrase_ood";
        case Metric::ShuffleOod: return "shuffle_ood";
        case Metric::LongOod: return "long_ood";
    }
    return "unknown";
}

Metric robustness_metric(PerturbationKind kind, bool in_domain) {
    switch (kind) {
        case PerturbationKind::Rephrase: return in_domain ? Metric::RephraseId : Metric::RephraseOod;
        case PerturbationKind::Shuffle: return in_domain ? Metric::ShuffleId : Metric::ShuffleOod;
        case PerturbationKind::LongContext: return in_domain ? Metric::LongId : Metric::LongOod;
    }
    return Metric::Success;
}

double MetricCell::standard_error() const {
    if (n == 0) return 0.0;
    const double p = ratio();
    return std::sqrt(p * (1.0 - p) / double(n));
}

void MetricsReport::check_complete() const {
    for (auto m : kAllMetrics) {
        if (cell(m).n <= 0) throw EmptyInput("metric cell '" + to_string(m) + "' has no cases");
    }
}

nlohmann::json MetricsReport::to_json() const {
    nlohmann::json j = {{"tau", tau}, {"with_adaptor", with_adaptor}, {"seed", seed}, {"config_hash", config_hash}};
    for (auto m : kAllMetrics) {
        j["metrics"][to_string(m)] = {{"value", ratio(m)}, {"hits", cell(m).hits}, {"n_cases", cell(m).n}};
    }
    return j;
}

void write_metrics_csv(const fs::path& path, std::span<const std::pair<std::string, MetricsReport>> rows) {
    std::ofstream f(path);
    if (!f) throw IoError("cannot open " + path.string() + " for writing");
    f << std::setprecision(10);
    f << "label,tau,metric,value,hits,n_cases\n";
    for (const auto& [label, r] : rows) {
        for (auto m : kAllMetrics) {
            f << label << ',' << r.tau << ',' << to_string(m) << ',' << r.ratio(m) << ',' << r.cell(m).hits << ','
              << r.cell(m).n << '\n';
        }
    }
}

// ------------------------------------------------------------------- edits

std::vector<int> locality_neighbours(const World& world, const BuiltModel& built, int subject, const Vector& k_star,
                                     int count, std::uint64_t seed) {
    std::vector<std::pair<double, int>> scored;
    for (int o : built.retained) {
        if (o == subject) continue;
        scored.push_back({std::abs(whitening_similarity(world.clusters[o].canonical_key, k_star, built.stack.cov)), o});
    }
    if (static_cast<int>(scored.size()) < count) throw InfeasibleConfig("not enough retained subjects for locality");
    std::sort(scored.begin(), scored.end());

    const int third = count / 3;
    const int want[3] = {third, third, count - 2 * third};
    const std::size_t n = scored.size();
    Rng rng(seed, 0x10ca1000ull + static_cast<std::uint64_t>(subject));
    std::vector<int> out;
    for (int b = 0; b < 3; ++b) {
        const std::size_t lo = n * b / 3, hi = n * (b + 1) / 3;
        std::vector<int> bucket;
        for (std::size_t i = lo; i < hi; ++i) bucket.push_back(scored[i].second);
        if (static_cast<int>(bucket.size()) < want[b]) throw InfeasibleConfig("locality bucket too small");
        const auto perm = rng.permutation(static_cast<Index>(bucket.size()));
        for (int i = 0; i < want[b]; ++i) out.push_back(bucket[static_cast<std::size_t>(perm[static_cast<std::size_t>(i)])]);
    }
    return out;
}

EditCase prepare_edit(const World& world, const BuiltModel& built, int subject, const EvalConfig& config) {
    const SubjectCluster& cl = world.clusters.at(static_cast<std::size_t>(subject));
    const KnowledgeTriple& triple = world.triples.at(static_cast<std::size_t>(subject));
    ModelStack stack = built.stack;

    EditRequest req;
    req.subject_contexts = cl.contexts;
    req.k_star = extract_key(req.subject_contexts);
    req.target_token = triple.new_tail;
    req.original_token = triple.tail;

    const ValueOptResult vo = optimize_value(stack.readout, stack.memory, req.k_star, req.target_token,
                                             cl.essence_queries, config.value_opt);
    EditCase c;
    c.subject = subject;
    c.tail = triple.tail;
    c.target = triple.new_tail;
    c.edit = apply_edit(stack.memory, stack.cov, req, vo.z);
    c.target_probability = vo.target_probability;
    c.neighbours = locality_neighbours(world, built, subject, req.k_star, config.locality_neighbours, world.seed);
    return c;
}

std::vector<EditCase> prepare_edits(const World& world, const BuiltModel& built, std::span<const int> subjects,
                                    const EvalConfig& config) {
    std::vector<EditCase> out;
    out.reserve(subjects.size());
    for (int s : subjects) out.push_back(prepare_edit(world, built, s, config));
    return out;
}

std::vector<Vector> training_keys(const SubjectCluster& cluster) {
    std::vector<Vector> keys = cluster.contexts;
    for (auto kind : kAllPerturbations) {
        const auto id = cluster.split_keys(kind, true);
        keys.insert(keys.end(), id.begin(), id.end());
    }
    return keys;
}

std::vector<AdaptorParams> train_adaptors(const World& world, const Covariance& cov, std::span<const EditCase> cases,
                                          const TrainConfig& training, bool shared) {
    std::vector<AdaptorParams> out;
    if (shared) {
        std::vector<TrainingGroup> groups;
        for (const auto& c : cases) groups.push_back({training_keys(world.clusters[c.subject]), c.edit.k_star});
        out.push_back(train_adaptor(groups, cov, training).params);
        return out;
    }
    out.reserve(cases.size());
    for (const auto& c : cases) {
        TrainConfig tc = training;
        tc.seed = training.seed * 1000003ull + static_cast<std::uint64_t>(c.subject);
        const TrainingGroup group{training_keys(world.clusters[c.subject]), c.edit.k_star};
        out.push_back(train_adaptor(std::span<const TrainingGroup>(&group, 1), cov, tc).params);
    }
    return out;
}

bool edit_success(const ModelStack& stack, const MemoryMatrix& memory, const Vector& query, Index t_star) {
    return predict(stack, memory, query) == t_star;
}

namespace {

const AdaptorParams* adaptor_for(std::span<const AdaptorParams> adaptors, std::size_t i) {
    if (adaptors.empty()) return nullptr;
    return adaptors.size() == 1 ? &adaptors[0] : &adaptors[i];
}

void check_adaptors(std::span<const AdaptorParams> adaptors, std::size_t n_cases, Index dim) {
    if (adaptors.size() > 1 && adaptors.size() != n_cases) {
        throw ConfigMismatch(std::to_string(adaptors.size()) + " adaptors for " + std::to_string(n_cases) + " cases");
    }
    for (const auto& a : adaptors) {
        if (a.dim() != dim) throw ConfigMismatch("adaptor dimension differs from key dimension");
    }
}

}  // namespace

MetricsReport evaluate(const World& world, const ModelStack& stack, std::span<const EditCase> cases,
                       std::span<const AdaptorParams> adaptors, double tau) {
    if (cases.empty()) throw EmptyInput("no edit cases to evaluate");
    check_adaptors(adaptors, cases.size(), stack.memory.key_dim());
    MetricsReport r;
    r.tau = tau;
    r.with_adaptor = !adaptors.empty();
    r.seed = world.seed;

    for (std::size_t i = 0; i < cases.size(); ++i) {
        const EditCase& c = cases[i];
        if (c.edit.W_hat.W.rows() != stack.memory.W.rows() || c.edit.W_hat.W.cols() != stack.memory.W.cols()) {
            throw ConfigMismatch("edited memory shape differs from the model");
        }
        const AdaptorParams* a = adaptor_for(adaptors, i);
        auto key = [&](const Vector& k) { return a ? forward(*a, k, AdaptorMode::Test, tau) : k; };
        auto hit = [&](Metric m, const Vector& k, Index want) {
            MetricCell& cell = r.cell(m);
            ++cell.n;
            if (predict(stack, c.edit.W_hat, key(k)) == want) ++cell.hits;
        };
        const SubjectCluster& cl = world.clusters[c.subject];
        hit(Metric::Success, cl.canonical_key, c.target);
        for (int n : c.neighbours) hit(Metric::Locality, world.clusters[n].canonical_key, world.triples[n].tail);
        for (auto kind : kAllPerturbations) {
            for (bool in_domain : {true, false}) {
                for (const auto& k : cl.split_keys(kind, in_domain)) hit(robustness_metric(kind, in_domain), k, c.target);
            }
        }
    }
    return r;
}

SweepResult tau_sweep(const World& world, const ModelStack& stack, std::span<const EditCase> cases,
                      std::span<const AdaptorParams> adaptors, std::span<const double> grid) {
    if (grid.empty()) throw EmptyInput("empty tau grid");
    SweepResult s;
    for (double tau : grid) {
        s.taus.push_back(tau);
        s.reports.push_back(evaluate(world, stack, cases, adaptors, tau));
    }
    return s;
}

void SweepResult::write_csv(const fs::path& path) const {
    std::ofstream f(path);
    if (!f) throw IoError("cannot open " + path.string() + " for writing");
    f << std::setprecision(10) << "tau";
    for (auto m : kAllMetrics) f << ',' << to_string(m) << ',' << to_string(m) << "_n";
    f << '\n';
    for (std::size_t i = 0; i < taus.size(); ++i) {
        f << taus[i];
        for (auto m : kAllMetrics) f << ',' << reports[i].ratio(m) << ',' << reports[i].cell(m).n;
        f << '\n';
    }
}

void SweepResult::write_plot_data(const fs::path& path) const {
    std::ofstream f(path);
    if (!f) throw IoError("cannot open " + path.string() + " for writing");
    f << std::setprecision(10) << "tau,metric,value,stderr,n_cases\n";
    for (std::size_t i = 0; i < taus.size(); ++i) {
        for (auto m : kAllMetrics) {
            const MetricCell& c = reports[i].cell(m);
            f << taus[i] << ',' << to_string(m) << ',' << c.ratio() << ',' << c.standard_error() << ',' << c.n << '\n';
        }
    }
}

// ------------------------------------------------------------------ lemmas

namespace {

double gap(const Vector& logits, Index up, Index down) { return logits(up) - logits(down); }

}  // namespace

std::vector<LemmaRecord> verify_lemmas(const World& world, const ModelStack& stack, std::span<const EditCase> cases,
                                       std::span<const AdaptorParams> adaptors, double tau, double confidence,
                                       LemmaSummary* summary) {
    check_adaptors(adaptors, cases.size(), stack.memory.key_dim());
    const double eps_target = epsilon_for_confidence(confidence);
    std::vector<LemmaRecord> out;
    LemmaSummary sum;
    auto pre_logits = [&](const Vector& k) { return readout_logits(stack.readout, retrieve(stack.memory, k)); };

    for (std::size_t i = 0; i < cases.size(); ++i) {
        const EditCase& c = cases[i];
        const std::string id = "s" + std::to_string(c.subject);
        const Vector& k_star = c.edit.k_star;
        const Vector& v_star = c.edit.v_star;

        const double eps1 = gap(pre_logits(k_star), c.tail, c.target);
        LemmaCheck vb = check_value_bound(stack.readout, v_star - c.edit.v_original, c.tail, c.target, eps1, eps_target);
        out.push_back({id + "/k_star", "value_bound", vb});
        ++sum.value_bound_n;
        sum.value_bound_pass += vb.pass;

        const SubjectCluster& cl = world.clusters[c.subject];
        const AdaptorParams* a = adaptor_for(adaptors, i);
        for (auto kind : kAllPerturbations) {
            const auto& keys = cl.keys(kind);
            for (std::size_t q = 0; q < keys.size(); ++q) {
                const std::string qid = id + "/" + to_string(kind) + std::to_string(q);
                const Vector& k_s = keys[q];
                const double e1 = gap(pre_logits(k_s), c.tail, c.target);
                LemmaCheck rc = check_robustness_requirement(stack.readout, stack.cov, k_s, k_star, v_star, c.tail,
                                                             c.target, e1, eps_target);
                out.push_back({qid, "robustness", rc});
                ++sum.robustness_n;
                sum.robustness_pass += rc.pass;
                if (a) {
                    const Vector k_hat = forward(*a, k_s, AdaptorMode::Test, tau);
                    const double e1h = gap(pre_logits(k_hat), c.tail, c.target);
                    LemmaCheck rr = check_robustness_requirement(stack.readout, stack.cov, k_hat, k_star, v_star,
                                                                 c.tail, c.target, e1h, eps_target);
                    out.push_back({qid, "robustness_rep", rr});
                    ++sum.robustness_rep_n;
                    sum.robustness_rep_pass += rr.pass;
                }
            }
        }
        for (int n : c.neighbours) {
            const Vector& k_n = world.clusters[n].canonical_key;
            const Index t_n = world.triples[n].tail;
            const double eps3 = gap(pre_logits(k_n), t_n, c.target);
            LemmaCheck sc = check_specificity_requirement(stack.readout, stack.cov, k_n, k_star, v_star, t_n, c.target, eps3);
            out.push_back({id + "/n" + std::to_string(n), "specificity", sc});
            ++sum.specificity_n;
            sum.specificity_pass += sc.pass;
        }
    }
    if (summary) *summary = sum;
    return out;
}

SpecificityStress specificity_stress(const World& world, const BuiltModel& built, const EvalConfig& config) {
    SpecificityStress st;
    std::vector<bool> retained(world.clusters.size(), false);
    for (int s : built.retained) retained[static_cast<std::size_t>(s)] = true;
    const ModelStack& stack = built.stack;

    for (const auto& pair : world.confusable) {
        if (!retained[pair.a] || !retained[pair.b]) continue;
        ++st.pairs_considered;
        for (auto [edited, other] : {std::pair{pair.a, pair.b}, std::pair{pair.b, pair.a}}) {
            const EditCase c = prepare_edit(world, built, edited, config);
            if (!edit_success(stack, c.edit.W_hat, c.edit.k_star, c.target)) continue;
            ++st.successful_edits;
            const Vector& k_n = world.clusters[other].canonical_key;
            const Index t_n = world.triples[other].tail;
            const Vector pre = readout_logits(stack.readout, retrieve(stack.memory, k_n));
            const LemmaCheck chk = check_specificity_requirement(stack.readout, stack.cov, k_n, c.edit.k_star,
                                                                 c.edit.v_star, t_n, c.target, pre(t_n) - pre(c.target));
            if (!chk.pass) ++st.violations;
            st.records.push_back({"s" + std::to_string(edited) + "/partner" + std::to_string(other), "specificity", chk});
        }
    }
    return st;
}

// -------------------------------------------------------------- experiment

Experiment prepare_experiment(const ExperimentConfig& config, bool with_adaptors) {
    Experiment e;
    e.config = config;
    e.world = generate_world(config.world, config.seed);
    e.world.readout.assume_located_dominance = config.evaluation.assume_located_dominance;
    CovarianceOptions co;
    co.normalization = config.evaluation.covariance_normalization;
    co.ridge = config.evaluation.ridge;
    e.built = build_model(e.world, co);

    const EvalConfig& ec = config.evaluation;
    if (static_cast<int>(e.built.retained.size()) < ec.n_validation + ec.n_test) {
        throw InfeasibleConfig("only " + std::to_string(e.built.retained.size()) + " triples survive filtering, need " +
                               std::to_string(ec.n_validation + ec.n_test));
    }
    Rng rng(config.seed, 0x5b117ull);
    const auto perm = rng.permutation(static_cast<Index>(e.built.retained.size()));
    for (int i = 0; i < ec.n_validation + ec.n_test; ++i) {
        const int s = e.built.retained[static_cast<std::size_t>(perm[static_cast<std::size_t>(i)])];
        (i < ec.n_validation ? e.validation_subjects : e.test_subjects).push_back(s);
    }
    e.validation_cases = prepare_edits(e.world, e.built, e.validation_subjects, ec);
    e.test_cases = prepare_edits(e.world, e.built, e.test_subjects, ec);
    if (with_adaptors) {
        TrainConfig tc = config.training;
        tc.tau = ec.tau;
        e.validation_adaptors = train_adaptors(e.world, e.built.stack.cov, e.validation_cases, tc, ec.shared_adaptor);
        e.test_adaptors = train_adaptors(e.world, e.built.stack.cov, e.test_cases, tc, ec.shared_adaptor);
    }
    return e;
}

int run_experiment(const fs::path& config_path, const fs::path& out_dir) {
    ExperimentConfig config;
    try {
        config = ExperimentConfig::load(config_path);
    } catch (const std::exception& ex) {
        std::cerr << "error: cannot load config " << config_path.string() << ": " << ex.what() << '\n';
        return 2;
    }
    try {
        const auto t0 = std::chrono::steady_clock::now();
        const Experiment e = prepare_experiment(config);
        const std::string hash = config.hash();
        const ModelStack& stack = e.built.stack;

        MetricsReport baseline = evaluate(e.world, stack, e.test_cases, {}, config.evaluation.tau);
        MetricsReport rep = evaluate(e.world, stack, e.test_cases, e.test_adaptors, config.evaluation.tau);
        for (MetricsReport* r : {&baseline, &rep}) {
            r->config_hash = hash;
            r->check_complete();
        }
        SweepResult sweep = tau_sweep(e.world, stack, e.validation_cases, e.validation_adaptors, config.evaluation.tau_grid);
        for (auto& r : sweep.reports) r.config_hash = hash;

        LemmaSummary lsum;
        std::vector<LemmaRecord> lemmas = verify_lemmas(e.world, stack, e.test_cases, e.test_adaptors,
                                                        config.evaluation.tau, config.evaluation.lemma_confidence, &lsum);
        const SpecificityStress stress = specificity_stress(e.world, e.built, config.evaluation);
        lemmas.insert(lemmas.end(), stress.records.begin(), stress.records.end());

        const KeyStatsReport stats = analyze_keys(e.world, stack.cov);
        const WorldContracts contracts = check_contracts(e.world, stack.cov, stats);

        fs::create_directories(out_dir);
        write_json_file(out_dir / "config.json", config.to_json());
        write_json_file(out_dir / "seeds.json", {{"seed", config.seed},
                                                 {"config_hash", hash},
                                                 {"validation_subjects", e.validation_subjects},
                                                 {"test_subjects", e.test_subjects}});
        const std::vector<std::pair<std::string, MetricsReport>> rows = {{"baseline", baseline}, {"rep", rep}};
        write_metrics_csv(out_dir / "metrics.csv", rows);
        write_json_file(out_dir / "metrics.json", {{"baseline", baseline.to_json()},
                                                   {"rep", rep.to_json()},
                                                   {"filtered_fraction", e.built.filtered_fraction},
                                                   {"retained", e.built.retained.size()}});
        sweep.write_csv(out_dir / "sweep.csv");
        sweep.write_plot_data(out_dir / "sweep_plot.csv");
        write_lemma_csv(out_dir / "lemma_report.csv", lemmas);
        nlohmann::json ks = stats.to_json();
        ks["contracts"] = {{"rephrase_bimodal", contracts.rephrase_bimodal},
                           {"shuffle_below_p25", contracts.shuffle_below_p25},
                           {"long_above_p75", contracts.long_above_p75},
                           {"confusable_above_p99", contracts.confusable_above_p99},
                           {"near_fraction", contracts.near_fraction},
                           {"zero_fraction", contracts.zero_fraction},
                           {"confusable_count", contracts.confusable_count}};
        ks["specificity_stress"] = {{"pairs", stress.pairs_considered},
                                    {"successful_edits", stress.successful_edits},
                                    {"violations", stress.violations}};
        write_json_file(out_dir / "keystats.json", ks);

        const double secs = std::chrono::duration<double>(std::chrono::steady_clock::now() - t0).count();
        std::cout << std::fixed << std::setprecision(3);
        std::cout << "run complete in " << secs << " s, " << e.test_cases.size() << " test edits\n";
        for (auto m : kAllMetrics) {
            std::cout << "  " << std::setw(13) << std::left << to_string(m) << " baseline " << baseline.ratio(m)
                      << "  rep " << rep.ratio(m) << '\n';
        }
        return 0;
    } catch (const std::exception& ex) {
        std::cerr << "error: experiment failed: " << ex.what() << '\n';
        return 1;
    }
}

}  // namespace kvedit
