#pragma once

#include "kvedit/readout_model.hpp"
#include "kvedit/rep_adaptor.hpp"
#include "kvedit/rome_edit.hpp"
#include "kvedit/synthetic_world.hpp"

#include <json.hpp>

#include <array>
#include <filesystem>
#include <optional>
#include <span>
#include <string>
#include <vector>

namespace kvedit {

struct EvalConfig {
    int n_validation = 100;
    int n_test = 400;
    int locality_neighbours = 10;
    double tau = kDefaultTau;
    std::vector<double> tau_grid = {0.1, 0.2, 0.3, 0.4, 0.5, 0.6, 0.7, 0.8, 0.9, 0.99};
    bool shared_adaptor = false;
    CovarianceNormalization covariance_normalization = CovarianceNormalization::Sum;
    double ridge = 0.0;
    // Confidence whose two-class logit gap is demanded of the edited fact in
    // the value-bound and robustness checks.
    double lemma_confidence = 0.9;
    bool assume_located_dominance = false;
    ValueOptConfig value_opt;

    nlohmann::json to_json() const;
    static EvalConfig from_json(const nlohmann::json& j);
};

struct ExperimentConfig {
    std::uint64_t seed = 0;
    WorldConfig world;
    TrainConfig training;
    EvalConfig evaluation;

    nlohmann::json to_json() const;
    static ExperimentConfig from_json(const nlohmann::json& j);
    static ExperimentConfig load(const std::filesystem::path& path);
    // FNV-1a of the canonical JSON dump, as 16 hex digits.
    std::string hash() const;
};

// ----------------------------------------------------------------- metrics

enum class Metric { Success, Locality, RephraseId, ShuffleId, LongId, RephraseOod, ShuffleOod, LongOod };
inline constexpr int kMetricCount = 8;
inline constexpr std::array<Metric, kMetricCount> kAllMetrics = {
    Metric::Success,    Metric::Locality,  Metric::RephraseId, Metric::ShuffleId,
    Metric::LongId,     Metric::RephraseOod, Metric::ShuffleOod, Metric::LongOod};

std::string to_string(Metric m);
Metric robustness_metric(PerturbationKind kind, bool in_domain);

struct MetricCell {
    int hits = 0;
    int n = 0;
    double ratio() const { return n > 0 ? double(hits) / double(n) : 0.0; }
    // Binomial standard error of the ratio.
    double standard_error() const;
    bool operator==(const MetricCell&) const = default;
};

struct MetricsReport {
    std::array<MetricCell, kMetricCount> cells{};
    double tau = 0.0;
    bool with_adaptor = false;
    std::uint64_t seed = 0;
    std::string config_hash;

    const MetricCell& cell(Metric m) const { return cells[static_cast<int>(m)]; }
    MetricCell& cell(Metric m) { return cells[static_cast<int>(m)]; }
    double ratio(Metric m) const { return cell(m).ratio(); }

    // Throws EmptyInput when some cell has no cases.
    void check_complete() const;
    bool same_counts(const MetricsReport& other) const { return cells == other.cells; }

    nlohmann::json to_json() const;
};

void write_metrics_csv(const std::filesystem::path& path, std::span<const std::pair<std::string, MetricsReport>> rows);

// ------------------------------------------------------------------- edits

struct EditCase {
    int subject = 0;
    Index tail = 0;
    Index target = 0;
    EditResult edit;
    double target_probability = 0.0;  // at k*, from value optimisation
    std::vector<int> neighbours;       // locality subjects
};

// One fresh edit of the pristine memory per subject.
std::vector<EditCase> prepare_edits(const World& world, const BuiltModel& built, std::span<const int> subjects,
                                    const EvalConfig& config);

EditCase prepare_edit(const World& world, const BuiltModel& built, int subject, const EvalConfig& config);

// Locality subjects: equal thirds drawn from the low / medium / high buckets
// of |k_n^T C^-1 k*| over the other retained subjects (remainder to "high").
std::vector<int> locality_neighbours(const World& world, const BuiltModel& built, int subject, const Vector& k_star,
                                     int count, std::uint64_t seed);

// Contexts plus the in-domain rephrase, shuffle and long-context keys.
std::vector<Vector> training_keys(const SubjectCluster& cluster);

// One adaptor per case, or a single shared adaptor when config says so.
std::vector<AdaptorParams> train_adaptors(const World& world, const Covariance& cov, std::span<const EditCase> cases,
                                          const TrainConfig& training, bool shared);

bool edit_success(const ModelStack& stack, const MemoryMatrix& memory, const Vector& query, Index t_star);

// `adaptors` may be empty (no adaptor), hold one shared adaptor, or one per case.
MetricsReport evaluate(const World& world, const ModelStack& stack, std::span<const EditCase> cases,
                       std::span<const AdaptorParams> adaptors, double tau);

struct SweepResult {
    std::vector<double> taus;
    std::vector<MetricsReport> reports;

    void write_csv(const std::filesystem::path& path) const;
    // Long format for plotting: tau,metric,value,stderr,n_cases.
    void write_plot_data(const std::filesystem::path& path) const;
};

SweepResult tau_sweep(const World& world, const ModelStack& stack, std::span<const EditCase> cases,
                      std::span<const AdaptorParams> adaptors, std::span<const double> grid);

// ------------------------------------------------------------------ lemmas

struct LemmaSummary {
    int value_bound_pass = 0, value_bound_n = 0;
    int robustness_pass = 0, robustness_n = 0;
    int robustness_rep_pass = 0, robustness_rep_n = 0;
    int specificity_pass = 0, specificity_n = 0;
};

// value_bound at k*, robustness on every perturbed key of the subject (raw and,
// when adaptors are given, adapted), specificity on every locality neighbour.
std::vector<LemmaRecord> verify_lemmas(const World& world, const ModelStack& stack, std::span<const EditCase> cases,
                                       std::span<const AdaptorParams> adaptors, double tau, double confidence,
                                       LemmaSummary* summary = nullptr);

struct SpecificityStress {
    int pairs_considered = 0;
    int successful_edits = 0;
    int violations = 0;
    std::vector<LemmaRecord> records;
    double violation_rate() const { return successful_edits ? double(violations) / successful_edits : 0.0; }
};

// Edits each retained member of every planted confusable pair and checks the
// specificity requirement at its partner.
SpecificityStress specificity_stress(const World& world, const BuiltModel& built, const EvalConfig& config);

// -------------------------------------------------------------- experiment

struct Experiment {
    ExperimentConfig config;
    World world;
    BuiltModel built;
    std::vector<int> validation_subjects;
    std::vector<int> test_subjects;
    std::vector<EditCase> validation_cases;
    std::vector<EditCase> test_cases;
    std::vector<AdaptorParams> validation_adaptors;
    std::vector<AdaptorParams> test_adaptors;
};

// Generate, fit, split, edit, and (unless with_adaptors is false) train.
Experiment prepare_experiment(const ExperimentConfig& config, bool with_adaptors = true);

// Full pipeline into out_dir; returns 0 on success, non-zero with a message
// on stderr otherwise.
int run_experiment(const std::filesystem::path& config_path, const std::filesystem::path& out_dir);

}  // namespace kvedit
