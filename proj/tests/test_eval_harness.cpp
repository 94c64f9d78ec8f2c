#include "kvedit/errors.hpp"
#include "kvedit/eval_harness.hpp"
#include "support.hpp"

#include <doctest.h>

#include <fstream>
#include <iostream>
#include <set>
#include <sstream>

using namespace kvedit;

namespace {

ExperimentConfig small_config() {
    ExperimentConfig c;
    c.seed = 4;
    c.world.n_subjects = 160;
    c.world.n_confusable = 8;
    c.evaluation.n_validation = 10;
    c.evaluation.n_test = 30;
    return c;
}

const Experiment& small_experiment() {
    static const Experiment e = prepare_experiment(small_config());
    return e;
}

AdaptorParams closed_adaptor(Index dim) {
    Rng rng(0);
    AdaptorParams p = init_adaptor(static_cast<int>(dim), AdaptorInit{}, rng);
    p.proj_up = rng.normal_matrix(p.proj_up.rows(), p.proj_up.cols());
    p.proj_up_bias = rng.normal_vector(dim);
    p.gate_out.setZero();
    p.gate_out_bias = -1000.0;
    return p;
}

}  // namespace

TEST_CASE("edit_success compares the top-1 token and counts ties as failures") {
    ModelStack stack;
    stack.readout.W_Q = Matrix::Identity(2, 2);
    stack.readout.W_K = Matrix::Identity(2, 2);
    stack.readout.W_V = Matrix::Identity(2, 2);
    stack.readout.q = Vector::Zero(2);
    stack.readout.W_out = Matrix::Identity(2, 2);
    stack.readout.vocab = {"a", "b"};
    stack.readout.assume_located_dominance = true;
    stack.cov = Covariance::from_matrix(Matrix::Identity(2, 2));
    MemoryMatrix m{Matrix::Identity(2, 2), 0};
    CHECK(edit_success(stack, m, Vector::Unit(2, 0), 0));
    CHECK_FALSE(edit_success(stack, m, Vector::Unit(2, 0), 1));
    CHECK(edit_success(stack, m, Vector::Unit(2, 1), 1));
    CHECK_FALSE(edit_success(stack, m, Vector::Ones(2), 0));
    CHECK_FALSE(edit_success(stack, m, Vector::Ones(2), 1));
}

TEST_CASE("metric names and cells") {
    CHECK(to_string(Metric::Success) == "success");
    CHECK(to_string(Metric::ShuffleOod) == "shuffle_ood");
    CHECK(robustness_metric(PerturbationKind::LongContext, true) == Metric::LongId);
    CHECK(robustness_metric(PerturbationKind::Rephrase, false) == Metric::RephraseOod);
    MetricCell c{30, 40};
    CHECK(c.ratio() == 0.75);
    CHECK(c.standard_error() == doctest::Approx(std::sqrt(0.75 * 0.25 / 40)));
    MetricsReport r;
    CHECK_THROWS_AS(r.check_complete(), EmptyInput);
}

TEST_CASE("experiment config JSON, validation and hash") {
    const ExperimentConfig c = small_config();
    const ExperimentConfig back = ExperimentConfig::from_json(c.to_json());
    CHECK(back.to_json() == c.to_json());
    CHECK(back.hash() == c.hash());
    CHECK(c.hash().size() == 16);
    ExperimentConfig other = c;
    other.evaluation.tau = 0.5;
    CHECK(other.hash() != c.hash());

    nlohmann::json j = c.to_json();
    j["unexpected_section"] = 1;
    CHECK_THROWS_AS(ExperimentConfig::from_json(j), ConfigMismatch);
    j = c.to_json();
    j["evaluation"]["covariance_normalization"] = "median";
    CHECK_THROWS_AS(ExperimentConfig::from_json(j), ConfigMismatch);
    j = c.to_json();
    j["evaluation"]["tau_grid"] = {0.5, 0.3};
    CHECK_THROWS_AS(ExperimentConfig::from_json(j), ConfigMismatch);
    j = c.to_json();
    j["evaluation"]["n_tests"] = 5;
    CHECK_THROWS_AS(ExperimentConfig::from_json(j), ConfigMismatch);
    j = c.to_json();
    j["evaluation"]["value_opt"]["stepz"] = 5;
    CHECK_THROWS_AS(ExperimentConfig::from_json(j), ConfigMismatch);
    j = c.to_json();
    j["training"]["lr"] = 0.1;
    CHECK_THROWS_AS(ExperimentConfig::from_json(j), ConfigMismatch);
    CHECK_THROWS_AS(ExperimentConfig::load("/definitely/not/here.json"), IoError);
}

TEST_CASE("the shipped default config parses to the defaults") {
    const ExperimentConfig c = ExperimentConfig::load(KVEDIT_SOURCE_DIR "/configs/default.json");
    CHECK(c.to_json() == ExperimentConfig{}.to_json());
}

TEST_CASE("experiment preparation") {
    const Experiment& e = small_experiment();
    REQUIRE(e.test_cases.size() == 30);
    REQUIRE(e.validation_cases.size() == 10);
    REQUIRE(e.test_adaptors.size() == 30);

    std::set<int> seen;
    for (int s : e.validation_subjects) seen.insert(s);
    for (int s : e.test_subjects) CHECK(seen.insert(s).second);

    SUBCASE("each case is an independent edit of the pristine memory") {
        for (const auto& c : e.test_cases) {
            CHECK(c.edit.W_hat.edit_count == 1);
            CHECK(c.target == e.world.triples[static_cast<std::size_t>(c.subject)].new_tail);
            CHECK(c.target != c.tail);
            const Matrix delta = c.edit.W_hat.W - e.built.stack.memory.W;
            CHECK(numerical_rank(delta) == 1);
        }
    }
    SUBCASE("locality neighbours are retained, distinct and exclude the subject") {
        const std::set<int> retained(e.built.retained.begin(), e.built.retained.end());
        for (const auto& c : e.test_cases) {
            CHECK(c.neighbours.size() == 10);
            const std::set<int> uniq(c.neighbours.begin(), c.neighbours.end());
            CHECK(uniq.size() == c.neighbours.size());
            CHECK(uniq.count(c.subject) == 0);
            for (int n : c.neighbours) CHECK(retained.count(n) == 1);
        }
        const auto& c = e.test_cases.front();
        CHECK(locality_neighbours(e.world, e.built, c.subject, c.edit.k_star, 10, e.config.seed) == c.neighbours);
    }
    SUBCASE("locality buckets run from low to high whitened similarity") {
        const auto& c = e.test_cases.front();
        auto sim = [&](int n) {
            return std::abs(whitening_similarity(e.world.clusters[static_cast<std::size_t>(n)].canonical_key,
                                                 c.edit.k_star, e.built.stack.cov));
        };
        double low_max = 0, high_min = 1e300;
        for (int i = 0; i < 3; ++i) low_max = std::max(low_max, sim(c.neighbours[static_cast<std::size_t>(i)]));
        for (int i = 6; i < 10; ++i) high_min = std::min(high_min, sim(c.neighbours[static_cast<std::size_t>(i)]));
        CHECK(low_max <= high_min);
    }
    SUBCASE("training keys are the contexts plus in-domain perturbations") {
        const auto& cl = e.world.clusters[static_cast<std::size_t>(e.test_cases[0].subject)];
        const std::size_t id = cl.split_keys(PerturbationKind::Rephrase, true).size() +
                               cl.split_keys(PerturbationKind::Shuffle, true).size() +
                               cl.split_keys(PerturbationKind::LongContext, true).size();
        CHECK(training_keys(cl).size() == cl.contexts.size() + id);
    }
}

TEST_CASE("gate locality") {
    const Experiment& e = small_experiment();
    const auto& stack = e.built.stack;
    const AdaptorParams closed = closed_adaptor(e.world.config.dim);

    SUBCASE("keys below tau pass through bit for bit") {
        for (const auto& cl : e.world.clusters) {
            for (auto kind : kAllPerturbations)
                for (const auto& k : cl.keys(kind)) {
                    REQUIRE(gate(closed, k) < 0.9);
                    CHECK(forward(closed, k, AdaptorMode::Test, 0.9) == k);
                }
        }
    }
    SUBCASE("a closed gate reproduces the baseline report exactly") {
        const MetricsReport base = evaluate(e.world, stack, e.test_cases, {}, 0.9);
        const std::vector<AdaptorParams> shared = {closed};
        const MetricsReport gated = evaluate(e.world, stack, e.test_cases, shared, 0.9);
        CHECK(gated.same_counts(base));
        const std::vector<AdaptorParams> per_case(e.test_cases.size(), closed);
        CHECK(evaluate(e.world, stack, e.test_cases, per_case, 0.9).same_counts(base));
    }
    SUBCASE("tau above one switches every trained adaptor off") {
        const MetricsReport base = evaluate(e.world, stack, e.test_cases, {}, 0.9);
        CHECK(evaluate(e.world, stack, e.test_cases, e.test_adaptors, 1.01).same_counts(base));
    }
    SUBCASE("tau of zero opens every gate, so locality is at its lowest") {
        const MetricsReport open = evaluate(e.world, stack, e.test_cases, e.test_adaptors, 0.0);
        for (double tau : {0.3, 0.9, 0.99}) {
            CHECK(open.ratio(Metric::Locality) <=
                  evaluate(e.world, stack, e.test_cases, e.test_adaptors, tau).ratio(Metric::Locality));
        }
    }
}

TEST_CASE("evaluate argument checks") {
    const Experiment& e = small_experiment();
    const std::vector<AdaptorParams> two(2, e.test_adaptors[0]);
    CHECK_THROWS_AS(evaluate(e.world, e.built.stack, e.test_cases, two, 0.9), ConfigMismatch);
    const std::vector<AdaptorParams> wrong_dim = {AdaptorParams::zeros(3, 1, 1)};
    CHECK_THROWS_AS(evaluate(e.world, e.built.stack, e.test_cases, wrong_dim, 0.9), ConfigMismatch);
}

TEST_CASE("baseline robustness orders shuffle below rephrase below clean") {
    const Experiment& e = small_experiment();
    const MetricsReport base = evaluate(e.world, e.built.stack, e.test_cases, {}, 0.9);
    base.check_complete();
    CHECK(base.ratio(Metric::ShuffleId) < base.ratio(Metric::RephraseId));
    CHECK(base.ratio(Metric::RephraseId) < base.ratio(Metric::Success));
    CHECK(base.ratio(Metric::ShuffleOod) < base.ratio(Metric::RephraseOod));
}

TEST_CASE("sweep output") {
    const Experiment& e = small_experiment();
    const std::vector<double> grid = {0.1, 0.5, 0.9};
    const SweepResult s = tau_sweep(e.world, e.built.stack, e.validation_cases, e.validation_adaptors, grid);
    REQUIRE(s.reports.size() == 3);
    for (std::size_t i = 0; i < 3; ++i) CHECK(s.reports[i].tau == grid[i]);
    const auto dir = testing::scratch("sweep");
    s.write_csv(dir / "sweep.csv");
    s.write_plot_data(dir / "plot.csv");
    const std::string csv = testing::slurp(dir / "sweep.csv");
    CHECK(csv.rfind("tau,success,success_n", 0) == 0);
    const std::string plot = testing::slurp(dir / "plot.csv");
    CHECK(plot.rfind("tau,metric,value,stderr,n_cases\n", 0) == 0);
    CHECK(std::count(plot.begin(), plot.end(), '\n') == 1 + 3 * kMetricCount);
}

TEST_CASE("lemma verification on edited cases") {
    const Experiment& e = small_experiment();
    LemmaSummary sum;
    const auto records = verify_lemmas(e.world, e.built.stack, e.test_cases, e.test_adaptors, 0.9, 0.9, &sum);
    CHECK(sum.value_bound_n == 30);
    CHECK(sum.robustness_n > 0);
    CHECK(sum.robustness_rep_n == sum.robustness_n);
    CHECK(sum.specificity_n == 300);
    CHECK(records.size() ==
          static_cast<std::size_t>(sum.value_bound_n + sum.robustness_n + sum.robustness_rep_n + sum.specificity_n));
    for (const auto& r : records) {
        CHECK(std::isfinite(r.check.margin));
        CHECK(r.check.pass == (r.check.margin > 0));
    }
    // Raising the post-edit confidence on the value bound can only lose passes.
    LemmaSummary strict;
    verify_lemmas(e.world, e.built.stack, e.test_cases, {}, 0.9, 0.999999, &strict);
    CHECK(strict.value_bound_pass <= sum.value_bound_pass);
    CHECK(strict.robustness_rep_n == 0);
}

TEST_CASE("run_experiment") {
    const auto dir = testing::scratch("run");
    nlohmann::json cfg = small_config().to_json();
    cfg["evaluation"]["tau_grid"] = {0.5, 0.9};
    {
        std::ofstream(dir / "cfg.json") << cfg.dump(2);
    }
    SUBCASE("writes every artifact and is reproducible") {
        REQUIRE(run_experiment(dir / "cfg.json", dir / "a") == 0);
        REQUIRE(run_experiment(dir / "cfg.json", dir / "b") == 0);
        for (const char* f : {"config.json", "seeds.json", "metrics.csv", "metrics.json", "sweep.csv",
                              "sweep_plot.csv", "lemma_report.csv", "keystats.json"}) {
            INFO(f);
            REQUIRE(std::filesystem::exists(dir / "a" / f));
            CHECK(testing::slurp(dir / "a" / f) == testing::slurp(dir / "b" / f));
        }
        CHECK(testing::slurp(dir / "a" / "metrics.csv").rfind("label,tau,metric,value,hits,n_cases\n", 0) == 0);
    }
    SUBCASE("a missing config fails and names the path") {
        std::ostringstream captured;
        auto* old = std::cerr.rdbuf(captured.rdbuf());
        const int rc = run_experiment(dir / "missing.json", dir / "c");
        std::cerr.rdbuf(old);
        CHECK(rc != 0);
        CHECK(captured.str().find("missing.json") != std::string::npos);
    }
}

TEST_CASE("robustness requirement on the seed-12 world before and after adaptation") {
    ExperimentConfig c;
    c.seed = 12;
    const Experiment e = prepare_experiment(c);
    LemmaSummary sum;
    verify_lemmas(e.world, e.built.stack, e.test_cases, e.test_adaptors, c.evaluation.tau,
                  c.evaluation.lemma_confidence, &sum);
    REQUIRE(sum.robustness_n > 0);
    const double pre = double(sum.robustness_pass) / sum.robustness_n;
    const double post = double(sum.robustness_rep_pass) / sum.robustness_rep_n;
    MESSAGE("pre-adaptor pass rate " << pre << ", adapted " << post);
    CHECK(pre < 0.5);
    CHECK(post >= 0.9);
}
