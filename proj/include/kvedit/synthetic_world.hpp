#pragma once

// Synthetic "group discussion" worlds: background keys that define the
// covariance, subject clusters with perturbed keys, stored values and a toy
// readout. Also the activation-dump container used to bring in real keys.

#include "kvedit/memory_core.hpp"
#include "kvedit/readout_model.hpp"

#include <json.hpp>

#include <array>
#include <cstdint>
#include <filesystem>
#include <string>
#include <vector>

namespace kvedit {

enum class PerturbationKind { Rephrase = 0, Shuffle = 1, LongContext = 2 };
inline constexpr std::array<PerturbationKind, 3> kAllPerturbations = {
    PerturbationKind::Rephrase, PerturbationKind::Shuffle, PerturbationKind::LongContext};

std::string to_string(PerturbationKind kind);
PerturbationKind perturbation_from_string(const std::string& name);

struct KnowledgeTriple {
    int head = 0;
    int relation = 0;
    Index tail = 0;
    Index new_tail = 0;
};

struct SubjectCluster {
    int subject_id = 0;
    Vector canonical_key;
    // Indexed by PerturbationKind.
    std::array<std::vector<Vector>, 3> perturbed_keys;
    std::array<std::vector<int>, 3> in_domain_ids;
    std::array<std::vector<int>, 3> out_of_domain_ids;
    // Keys averaged into k* for an edit of this subject.
    std::vector<Vector> contexts;
    // Held-out keys of the same subject used to anchor value optimisation.
    std::vector<Vector> essence_queries;

    const std::vector<Vector>& keys(PerturbationKind k) const { return perturbed_keys[static_cast<int>(k)]; }
    std::vector<Vector> split_keys(PerturbationKind k, bool in_domain) const;
};

struct WorldConfig {
    int dim = 64;
    int high_variance_dims = 32;
    int n_background = 512;
    int n_subjects = 640;
    int vocab_size = 256;

    // Background spectrum: eigenvalues high_variance_eigenvalue * exp(U(-j/2, j/2))
    // on the first block, divided by variance_ratio on the rest.
    double high_variance_eigenvalue = 1600.0;
    double variance_ratio = 1e5;
    double spectrum_jitter = 1.0;

    // Subject keys in whitened coordinates: this share of the whitened energy
    // sits on the high-variance directions, the rest on the low-variance ones.
    double high_variance_energy = 0.03;
    double whitened_norm_jitter = 0.1;

    // Rephrase mixture.
    double rephrase_p_near = 0.5;
    double rephrase_near_cos_min = 0.85;
    double rephrase_near_cos_max = 0.99;
    double rephrase_far_cos = 0.1;  // far mode draws cosine in [-x, x]
    double rephrase_high_noise = 0.05;

    // Shuffle keys: cosine in [lo, hi], also kept below the random-pair p25.
    double shuffle_cos_min = -0.3;
    double shuffle_cos_max = -0.13;
    double shuffle_percentile_margin = 0.05;
    double shuffle_high_noise = 0.15;

    // Long context: cosine in [lo, hi], also kept above the random-pair p75.
    double long_cos_min = 0.15;
    double long_cos_max = 0.7;
    double long_percentile_margin = 0.02;
    double long_high_noise = 0.02;

    int queries_per_kind = 10;  // split 50/50 into in-domain and out-of-domain
    int contexts_per_subject = 5;
    double context_cos_min = 0.97;
    double context_cos_max = 0.995;
    double context_high_noise = 0.01;
    int essence_per_subject = 3;

    int n_confusable = 16;
    double confusable_cos_min = 0.95;
    double confusable_cos_max = 0.96;

    // Random pairs sampled for the percentile thresholds.
    int random_pairs = 4000;

    // Readout construction.
    int n_context_values = 2;
    double context_value_scale = 0.2;
    double value_noise = 0.1;
    double output_logit_scale = 4.0;

    nlohmann::json to_json() const;
    static WorldConfig from_json(const nlohmann::json& j);
    void validate() const;
};

struct ConfusablePair {
    int a = 0;
    int b = 0;
    double similarity = 0.0;
};

struct World {
    WorldConfig config;
    std::uint64_t seed = 0;
    KeySet background_keys;
    ValueSet background_values;
    std::vector<SubjectCluster> clusters;
    ValueSet values;  // subject values, column s belongs to clusters[s]
    std::vector<KnowledgeTriple> triples;
    std::vector<ConfusablePair> confusable;
    ReadoutModel readout;
    // Random-pair percentiles (p25, p50, p75, p99) measured at generation time.
    std::array<double, 4> random_pair_percentiles{};

    KeySet canonical_keys() const;
};

World generate_world(const WorldConfig& config, std::uint64_t seed);

struct ModelStack {
    MemoryMatrix memory;
    Covariance cov;
    ReadoutModel readout;
};

struct BuiltModel {
    ModelStack stack;
    std::vector<int> retained;  // subject ids answered correctly
    double filtered_fraction = 0.0;
};

// Fits W on canonical plus background keys, takes C from the background keys
// and drops triples whose stored fact no longer reads out as top-1.
BuiltModel build_model(const World& world, const CovarianceOptions& cov_options = {});

// Top-1 token for a key under an (optionally edited) memory; -1 on a tie.
Index predict(const ModelStack& stack, const MemoryMatrix& memory, const Vector& key);

// ---------------------------------------------------------------- analysis

struct Histogram {
    std::vector<double> edges;  // bins + 1
    std::vector<int> counts;
    nlohmann::json to_json() const;
};

Histogram make_histogram(const std::vector<double>& samples, double lo, double hi, int bins);
double percentile(std::vector<double> samples, double q);

struct FamilyStats {
    std::vector<double> similarities;  // to the canonical key
    Histogram histogram;
    double median = 0.0;
};

struct ClusterProjection {
    int subject_id = 0;
    std::vector<std::array<double, 2>> coordinates;
    std::array<double, 2> explained_variance{};
    double total_variance = 0.0;
    Matrix components;  // D x 2
};

struct KeyStatsReport {
    std::array<FamilyStats, 3> families;
    std::vector<double> random_pairs;
    Histogram random_histogram;
    double p25 = 0.0, p50 = 0.0, p75 = 0.0, p99 = 0.0;
    std::vector<ConfusablePair> top_pairs;
    std::vector<ClusterProjection> projections;

    nlohmann::json to_json() const;
};

struct AnalysisOptions {
    int top_pairs = 10;
    int histogram_bins = 40;
    int max_projections = 16;
    int random_pairs = 4000;
    std::uint64_t seed = 0;
};

KeyStatsReport analyze_clusters(const std::vector<SubjectCluster>& clusters, const Covariance& cov,
                                const AnalysisOptions& options = {});
KeyStatsReport analyze_keys(const World& world, const Covariance& cov, const AnalysisOptions& options = {});

// Leading two principal directions of the columns of `keys`.
ClusterProjection principal_projection(const Matrix& keys);

struct WorldContracts {
    bool rephrase_bimodal = false;
    bool shuffle_below_p25 = false;
    bool long_above_p75 = false;
    bool confusable_above_p99 = false;
    double near_fraction = 0.0;
    double zero_fraction = 0.0;
    int confusable_count = 0;

    bool all() const { return rephrase_bimodal && shuffle_below_p25 && long_above_p75 && confusable_above_p99; }
};

WorldContracts check_contracts(const World& world, const Covariance& cov, const KeyStatsReport& report);

// ------------------------------------------------------------ persistence

// Directory with world.json plus AELM matrices.
void save_world(const World& world, const std::filesystem::path& dir);
World load_world(const std::filesystem::path& dir);

struct ActivationDump {
    KeySet keys;  // D x N
    std::vector<SubjectCluster> clusters;
    std::vector<Index> background_columns;
};

// Writes <path> (AELM, one key per row) and labels.json next to it.
void export_activation_dump(const World& world, const std::filesystem::path& path);
ActivationDump load_activation_dump(const std::filesystem::path& path);
std::filesystem::path labels_path_for(const std::filesystem::path& dump_path);

}  // namespace kvedit
