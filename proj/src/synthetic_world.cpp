#include "kvedit/synthetic_world.hpp"

#include "kvedit/errors.hpp"
#include "kvedit/random.hpp"

#include <algorithm>
#include <cmath>
#include <optional>
#include <set>

namespace kvedit {

std::string to_string(PerturbationKind kind) {
    switch (kind) {
        case PerturbationKind::Rephrase: return "rephrase";
        case PerturbationKind::Shuffle: return "shuffle";
        case PerturbationKind::LongContext: return "long_context";
    }
    return "unknown";
}

PerturbationKind perturbation_from_string(const std::string& name) {
    if (name == "rephrase") return PerturbationKind::Rephrase;
    if (name == "shuffle") return PerturbationKind::Shuffle;
    if (name == "long_context") return PerturbationKind::LongContext;
    throw MalformedDump("unknown perturbation kind '" + name + "'");
}

std::vector<Vector> SubjectCluster::split_keys(PerturbationKind k, bool in_domain) const {
    const int i = static_cast<int>(k);
    const auto& ids = in_domain ? in_domain_ids[i] : out_of_domain_ids[i];
    std::vector<Vector> out;
    out.reserve(ids.size());
    for (int id : ids) out.push_back(perturbed_keys[i].at(static_cast<std::size_t>(id)));
    return out;
}

// ------------------------------------------------------------------ config

#define KV_FIELDS(X)                                                                                   \
    X(dim) X(high_variance_dims) X(n_background) X(n_subjects) X(vocab_size) X(high_variance_eigenvalue) \
    X(variance_ratio) X(spectrum_jitter) X(high_variance_energy) X(whitened_norm_jitter)                 \
    X(rephrase_p_near) X(rephrase_near_cos_min) X(rephrase_near_cos_max) X(rephrase_far_cos)             \
    X(rephrase_high_noise) X(shuffle_cos_min) X(shuffle_cos_max) X(shuffle_percentile_margin)            \
    X(shuffle_high_noise) X(long_cos_min) X(long_cos_max) X(long_percentile_margin) X(long_high_noise)  \
    X(queries_per_kind) X(contexts_per_subject) X(context_cos_min) X(context_cos_max)                    \
    X(context_high_noise) X(essence_per_subject) X(n_confusable) X(confusable_cos_min)                   \
    X(confusable_cos_max) X(random_pairs) X(n_context_values) X(context_value_scale) X(value_noise)      \
    X(output_logit_scale)

nlohmann::json WorldConfig::to_json() const {
    nlohmann::json j;
#define X(f) j[#f] = f;
    KV_FIELDS(X)
#undef X
    return j;
}

WorldConfig WorldConfig::from_json(const nlohmann::json& j) {
    WorldConfig c;
    std::set<std::string> known;
#define X(f)                                                 \
    known.insert(#f);                                        \
    if (j.contains(#f)) c.f = j.at(#f).get<decltype(c.f)>();
    KV_FIELDS(X)
#undef X
    for (const auto& [key, _] : j.items()) {
        if (!known.count(key)) throw ConfigMismatch("unknown world config key '" + key + "'");
    }
    c.validate();
    return c;
}

#undef KV_FIELDS

void WorldConfig::validate() const {
    auto need = [](bool ok, const std::string& what) {
        if (!ok) throw InfeasibleConfig(what);
    };
    need(dim >= 2, "dim must be at least 2");
    need(high_variance_dims >= 1 && high_variance_dims < dim, "high_variance_dims must lie in [1, dim)");
    need(n_subjects >= 2, "need at least two subjects");
    need(n_background >= dim, "need at least dim background keys for an invertible covariance");
    need(vocab_size >= 2, "vocabulary needs two tokens");
    need(high_variance_energy > 0.0 && high_variance_energy < 1.0, "high_variance_energy must lie in (0,1)");
    need(rephrase_p_near >= 0.0 && rephrase_p_near <= 1.0, "rephrase_p_near must be a probability");
    need(rephrase_near_cos_min <= rephrase_near_cos_max && rephrase_near_cos_max <= 1.0, "bad near-cosine range");
    need(shuffle_cos_min <= shuffle_cos_max, "bad shuffle range");
    need(long_cos_min <= long_cos_max && long_cos_max <= 1.0, "bad long-context range");
    need(queries_per_kind >= 2 && queries_per_kind % 2 == 0, "queries_per_kind must be even and >= 2");
    need(contexts_per_subject >= 1, "need at least one context per subject");
    need(essence_per_subject >= 0, "essence_per_subject must be non-negative");
    need(n_confusable >= 0 && 2 * n_confusable <= n_subjects, "too many confusable pairs for the subject count");
    need(random_pairs >= 10, "random_pairs too small");
    need(n_context_values >= 0, "n_context_values must be non-negative");
}

KeySet World::canonical_keys() const {
    Matrix m(config.dim, static_cast<Index>(clusters.size()));
    for (std::size_t s = 0; s < clusters.size(); ++s) m.col(static_cast<Index>(s)) = clusters[s].canonical_key;
    return KeySet(std::move(m));
}

// --------------------------------------------------------------- generation

namespace {

// Moves a in whitened coordinates so that a'.a hits cos_target * |a|^2 while
// the low-variance block keeps its norm. The high-variance block gets
// isotropic noise of relative size high_noise.
Vector perturb_whitened(const Vector& a, double cos_target, double high_noise, Index high, Rng& rng) {
    const Index low = a.size() - high;
    Vector out(a.size());
    const Vector a_h = a.head(high);
    const Vector a_l = a.tail(low);
    const Vector new_h = a_h + rng.normal_vector(high, high_noise * a_h.norm() / std::sqrt(double(high)));
    const double n_l = a_l.norm();
    Vector w = rng.normal_vector(low);
    w -= (w.dot(a_l) / (n_l * n_l)) * a_l;
    w.normalize();
    const double c = (cos_target * a.squaredNorm() - new_h.dot(a_h)) / (n_l * n_l);
    if (std::abs(c) > 1.0) {
        throw InfeasibleConfig("target whitened cosine " + std::to_string(cos_target) +
                               " unreachable with the configured energy split");
    }
    out.head(high) = new_h;
    out.tail(low) = c * a_l + std::sqrt(1.0 - c * c) * n_l * w;
    return out;
}

Vector random_whitened(const WorldConfig& cfg, Rng& rng) {
    const Index high = cfg.high_variance_dims;
    const Index low = cfg.dim - high;
    Vector a(cfg.dim);
    a.head(high) = rng.normal_vector(high, std::sqrt(cfg.high_variance_energy / double(high)));
    a.tail(low) = rng.normal_vector(low, std::sqrt((1.0 - cfg.high_variance_energy) / double(low)));
    const double jitter = std::exp(rng.uniform(-cfg.whitened_norm_jitter, cfg.whitened_norm_jitter));
    return a / a.norm() * jitter;
}

// A distinct subject that sits on top of `a` in whitened space: a fresh
// high-variance block of equal norm orthogonal to a's, so the whole cosine is
// carried by the low-variance block. Empty when that block cannot carry it.
std::optional<Vector> confusable_partner(const Vector& a, double cos_target, Index high, Rng& rng) {
    constexpr double kMaxLowCos = 0.995;
    const Index low = a.size() - high;
    const Vector a_h = a.head(high);
    const Vector a_l = a.tail(low);
    const double n_h = a_h.norm();
    const double n_l = a_l.norm();
    const double c = cos_target * a.squaredNorm() / (n_l * n_l);
    if (std::abs(c) > kMaxLowCos) return std::nullopt;
    Vector fresh = rng.normal_vector(high);
    fresh -= (fresh.dot(a_h) / (n_h * n_h)) * a_h;
    fresh *= n_h / fresh.norm();
    Vector w = rng.normal_vector(low);
    w -= (w.dot(a_l) / (n_l * n_l)) * a_l;
    w.normalize();
    Vector out(a.size());
    out.head(high) = fresh;
    out.tail(low) = c * a_l + std::sqrt(1.0 - c * c) * n_l * w;
    return out;
}

Index argmax(const Vector& x) {
    Index best = 0;
    x.maxCoeff(&best);
    return best;
}

}  // namespace

World generate_world(const WorldConfig& config, std::uint64_t seed) {
    config.validate();
    Rng rng(seed);
    const Index d = config.dim;
    const Index high = config.high_variance_dims;
    const int n_subj = config.n_subjects;

    World world;
    world.config = config;
    world.seed = seed;

    // Background corpus and its covariance.
    const Matrix basis = rng.orthogonal(d);
    Vector lambda(d);
    const double half = 0.5 * config.spectrum_jitter;
    for (Index i = 0; i < d; ++i) {
        const double base = i < high ? config.high_variance_eigenvalue
                                     : config.high_variance_eigenvalue / config.variance_ratio;
        lambda(i) = base * std::exp(rng.uniform(-half, half));
    }
    const Matrix gauss = rng.normal_matrix(d, config.n_background);
    world.background_keys = KeySet(basis * lambda.cwiseSqrt().asDiagonal() * gauss);

    const Matrix c = world.background_keys.data * world.background_keys.data.transpose();
    Eigen::SelfAdjointEigenSolver<Matrix> eig(c);
    if (eig.info() != Eigen::Success || eig.eigenvalues().minCoeff() <= 0.0) {
        throw InfeasibleConfig("background covariance is not positive definite");
    }
    // Descending order: whitened coordinate i scales eigenvector i.
    const Matrix evecs = eig.eigenvectors().rowwise().reverse();
    const Vector evals = eig.eigenvalues().reverse();
    const Matrix to_key = evecs * evals.cwiseSqrt().asDiagonal();

    // Whitened subject coordinates; the last n_confusable subjects shadow the first ones.
    std::vector<Vector> a(static_cast<std::size_t>(n_subj));
    const int n_conf = config.n_confusable;
    for (int s = 0; s < n_subj - n_conf; ++s) a[s] = random_whitened(config, rng);
    // Partners go to the earliest subjects whose low-variance share can carry the target cosine.
    for (int i = 0, base = 0; i < n_conf; ++i, ++base) {
        const double target = rng.uniform(config.confusable_cos_min, config.confusable_cos_max);
        std::optional<Vector> partner;
        for (; base < n_subj - n_conf; ++base) {
            if ((partner = confusable_partner(a[base], target, high, rng))) break;
        }
        if (!partner) throw InfeasibleConfig("no subject can host a confusable partner at the requested cosine");
        a[n_subj - n_conf + i] = *partner;
        world.confusable.push_back({base, n_subj - n_conf + i, 0.0});
    }

    std::vector<double> pair_sims;
    pair_sims.reserve(static_cast<std::size_t>(config.random_pairs));
    while (static_cast<int>(pair_sims.size()) < config.random_pairs) {
        const auto i = rng.integer(0, n_subj - 1);
        const auto j = rng.integer(0, n_subj - 1);
        if (i != j) pair_sims.push_back(a[i].dot(a[j]));
    }
    const double p25 = percentile(pair_sims, 0.25);
    const double p75 = percentile(pair_sims, 0.75);
    world.random_pair_percentiles = {p25, percentile(pair_sims, 0.5), p75, percentile(pair_sims, 0.99)};

    const double theta_lo = std::acos(std::min(1.0, config.rephrase_near_cos_max));
    const double theta_hi = std::acos(std::max(-1.0, config.rephrase_near_cos_min));
    const int half_queries = config.queries_per_kind / 2;

    world.clusters.resize(static_cast<std::size_t>(n_subj));
    for (int s = 0; s < n_subj; ++s) {
        SubjectCluster& cl = world.clusters[s];
        const Vector& as = a[s];
        const double self = as.squaredNorm();
        cl.subject_id = s;
        cl.canonical_key = to_key * as;

        auto& reph = cl.perturbed_keys[static_cast<int>(PerturbationKind::Rephrase)];
        for (int i = 0; i < config.queries_per_kind; ++i) {
            double target;
            if (rng.bernoulli(config.rephrase_p_near)) {
                target = std::cos(rng.uniform(theta_lo, theta_hi));
            } else {
                target = rng.uniform(-config.rephrase_far_cos, config.rephrase_far_cos);
            }
            reph.push_back(to_key * perturb_whitened(as, target, config.rephrase_high_noise, high, rng));
        }
        auto& shuf = cl.perturbed_keys[static_cast<int>(PerturbationKind::Shuffle)];
        for (int i = 0; i < config.queries_per_kind; ++i) {
            const double target = std::min(rng.uniform(config.shuffle_cos_min, config.shuffle_cos_max),
                                           p25 / self - config.shuffle_percentile_margin);
            shuf.push_back(to_key * perturb_whitened(as, target, config.shuffle_high_noise, high, rng));
        }
        auto& lng = cl.perturbed_keys[static_cast<int>(PerturbationKind::LongContext)];
        for (int i = 0; i < config.queries_per_kind; ++i) {
            const double target = std::max(rng.uniform(config.long_cos_min, config.long_cos_max),
                                           p75 / self + config.long_percentile_margin);
            lng.push_back(to_key * perturb_whitened(as, target, config.long_high_noise, high, rng));
        }
        for (int i = 0; i < config.contexts_per_subject; ++i) {
            const double target = rng.uniform(config.context_cos_min, config.context_cos_max);
            cl.contexts.push_back(to_key * perturb_whitened(as, target, config.context_high_noise, high, rng));
        }
        for (int i = 0; i < config.essence_per_subject; ++i) {
            const double target = rng.uniform(config.context_cos_min, config.context_cos_max);
            cl.essence_queries.push_back(to_key * perturb_whitened(as, target, config.context_high_noise, high, rng));
        }
        for (int k = 0; k < 3; ++k) {
            const auto perm = rng.permutation(config.queries_per_kind);
            for (int i = 0; i < config.queries_per_kind; ++i) {
                auto& dst = i < half_queries ? cl.in_domain_ids[k] : cl.out_of_domain_ids[k];
                dst.push_back(static_cast<int>(perm[static_cast<std::size_t>(i)]));
            }
            std::sort(cl.in_domain_ids[k].begin(), cl.in_domain_ids[k].end());
            std::sort(cl.out_of_domain_ids[k].begin(), cl.out_of_domain_ids[k].end());
        }
    }

    // Values and readout.
    const Matrix w0 = rng.normal_matrix(d, d, 1.0 / std::sqrt(double(d)));
    const KeySet canon = world.canonical_keys();
    const double value_norm = (w0 * canon.data).colwise().norm().mean();

    ReadoutModel& rd = world.readout;
    rd.W_Q = rng.orthogonal(d);
    rd.W_K = rng.orthogonal(d);
    rd.W_V = rng.orthogonal(d);
    rd.q = rd.W_Q * rng.normal_vector(d);
    rd.q /= (rd.W_K.transpose() * rd.q).norm() * value_norm;
    for (int i = 0; i < config.n_context_values; ++i) {
        rd.context_values.push_back(rng.normal_vector(d, config.context_value_scale * value_norm / std::sqrt(double(d))));
    }
    rd.W_out = rng.normal_matrix(config.vocab_size, d, config.output_logit_scale / value_norm);
    for (int t = 0; t < config.vocab_size; ++t) rd.vocab.push_back("tok" + std::to_string(t));
    rd.validate();

    const double noise_sd = config.value_noise * value_norm / std::sqrt(double(d));
    Matrix values(d, n_subj);
    std::vector<Index> tails(static_cast<std::size_t>(n_subj));
    for (int s = 0; s < n_subj; ++s) {
        values.col(s) = w0 * canon.data.col(s) + rng.normal_vector(d, noise_sd);
        tails[s] = argmax(readout_logits(rd, values.col(s)));
    }
    // Confusable partners must disagree on the stored tail.
    for (const auto& pair : world.confusable) {
        int tries = 0;
        while (tails[pair.b] == tails[pair.a]) {
            if (++tries > 1000) throw InfeasibleConfig("cannot give confusable partners distinct tails");
            // Widen the noise on repeated collisions; the stored value is whatever gets drawn.
            const double widen = 1.0 + 0.1 * tries;
            values.col(pair.b) = w0 * canon.data.col(pair.b) + rng.normal_vector(d, widen * noise_sd);
            tails[pair.b] = argmax(readout_logits(rd, values.col(pair.b)));
        }
    }
    world.values = ValueSet(values);
    world.background_values = ValueSet(w0 * world.background_keys.data);

    std::vector<Index> partner_tail(static_cast<std::size_t>(n_subj), -1);
    for (const auto& pair : world.confusable) {
        partner_tail[pair.a] = tails[pair.b];
        partner_tail[pair.b] = tails[pair.a];
    }
    for (int s = 0; s < n_subj; ++s) {
        KnowledgeTriple t;
        t.head = s;
        t.relation = 0;
        t.tail = tails[s];
        do {
            t.new_tail = rng.integer(0, config.vocab_size - 1);
        } while (t.new_tail == t.tail || (t.new_tail == partner_tail[s] && config.vocab_size > 2));
        world.triples.push_back(t);
    }
    for (auto& pair : world.confusable) pair.similarity = a[pair.a].dot(a[pair.b]);
    return world;
}

BuiltModel build_model(const World& world, const CovarianceOptions& cov_options) {
    const KeySet canon = world.canonical_keys();
    const Index n_canon = canon.count();
    const Index n_bg = world.background_keys.count();
    Matrix keys(canon.dim(), n_canon + n_bg);
    keys << canon.data, world.background_keys.data;
    Matrix values(world.values.dim(), n_canon + n_bg);
    values << world.values.data, world.background_values.data;

    BuiltModel built;
    built.stack.memory = fit_memory(KeySet(std::move(keys)), ValueSet(std::move(values)));
    built.stack.cov = Covariance::from_keys(world.background_keys, cov_options);
    built.stack.readout = world.readout;
    built.stack.readout.validate();

    for (std::size_t s = 0; s < world.clusters.size(); ++s) {
        if (predict(built.stack, built.stack.memory, world.clusters[s].canonical_key) == world.triples[s].tail) {
            built.retained.push_back(static_cast<int>(s));
        }
    }
    built.filtered_fraction = 1.0 - double(built.retained.size()) / double(world.clusters.size());
    return built;
}

Index predict(const ModelStack& stack, const MemoryMatrix& memory, const Vector& key) {
    return unique_argmax(readout_logits(stack.readout, retrieve(memory, key)));
}

// ----------------------------------------------------------------- analysis

nlohmann::json Histogram::to_json() const { return {{"edges", edges}, {"counts", counts}}; }

Histogram make_histogram(const std::vector<double>& samples, double lo, double hi, int bins) {
    if (bins < 1) throw OutOfRange("histogram needs at least one bin");
    if (!(hi > lo)) hi = lo + 1.0;
    Histogram h;
    h.counts.assign(static_cast<std::size_t>(bins), 0);
    for (int i = 0; i <= bins; ++i) h.edges.push_back(lo + (hi - lo) * i / bins);
    for (double x : samples) {
        int b = static_cast<int>(std::floor((x - lo) / (hi - lo) * bins));
        b = std::clamp(b, 0, bins - 1);
        ++h.counts[static_cast<std::size_t>(b)];
    }
    return h;
}

double percentile(std::vector<double> samples, double q) {
    if (samples.empty()) throw EmptyInput("percentile of an empty sample");
    std::sort(samples.begin(), samples.end());
    const double pos = q * double(samples.size() - 1);
    const auto lo = static_cast<std::size_t>(std::floor(pos));
    const auto hi = std::min(lo + 1, samples.size() - 1);
    const double frac = pos - double(lo);
    return samples[lo] * (1.0 - frac) + samples[hi] * frac;
}

ClusterProjection principal_projection(const Matrix& keys) {
    if (keys.cols() < 1) throw EmptyInput("no keys to project");
    const Vector mean = keys.rowwise().mean();
    const Matrix centered = keys.colwise() - mean;
    const Matrix scatter = centered * centered.transpose() / double(keys.cols());
    Eigen::SelfAdjointEigenSolver<Matrix> eig(scatter);
    const Index d = keys.rows();
    ClusterProjection p;
    p.components.resize(d, 2);
    p.components.col(0) = eig.eigenvectors().col(d - 1);
    p.components.col(1) = d >= 2 ? Vector(eig.eigenvectors().col(d - 2)) : Vector::Zero(d);
    p.explained_variance = {eig.eigenvalues()(d - 1), d >= 2 ? eig.eigenvalues()(d - 2) : 0.0};
    p.total_variance = scatter.trace();
    const Matrix coords = p.components.transpose() * centered;
    for (Index i = 0; i < coords.cols(); ++i) p.coordinates.push_back({coords(0, i), coords(1, i)});
    return p;
}

KeyStatsReport analyze_clusters(const std::vector<SubjectCluster>& clusters, const Covariance& cov,
                                const AnalysisOptions& options) {
    if (clusters.size() < 2) throw EmptyInput("analysis needs at least two clusters");
    KeyStatsReport r;
    const Index n = static_cast<Index>(clusters.size());
    Matrix canon(cov.dim(), n);
    for (Index s = 0; s < n; ++s) canon.col(s) = clusters[s].canonical_key;
    const Matrix whitened = cov.inverse() * canon;

    for (const auto& cl : clusters) {
        for (auto kind : kAllPerturbations) {
            auto& fam = r.families[static_cast<int>(kind)];
            for (const auto& k : cl.keys(kind)) fam.similarities.push_back(whitening_similarity(k, cl.canonical_key, cov));
        }
    }

    Rng rng(options.seed, 0xa11a);
    while (static_cast<int>(r.random_pairs.size()) < options.random_pairs) {
        const auto i = rng.integer(0, n - 1);
        const auto j = rng.integer(0, n - 1);
        if (i != j) r.random_pairs.push_back(canon.col(i).dot(whitened.col(j)));
    }
    r.p25 = percentile(r.random_pairs, 0.25);
    r.p50 = percentile(r.random_pairs, 0.5);
    r.p75 = percentile(r.random_pairs, 0.75);
    r.p99 = percentile(r.random_pairs, 0.99);

    double lo = *std::min_element(r.random_pairs.begin(), r.random_pairs.end());
    double hi = *std::max_element(r.random_pairs.begin(), r.random_pairs.end());
    for (const auto& fam : r.families) {
        for (double x : fam.similarities) {
            lo = std::min(lo, x);
            hi = std::max(hi, x);
        }
    }
    r.random_histogram = make_histogram(r.random_pairs, lo, hi, options.histogram_bins);
    for (auto& fam : r.families) {
        fam.histogram = make_histogram(fam.similarities, lo, hi, options.histogram_bins);
        if (!fam.similarities.empty()) fam.median = percentile(fam.similarities, 0.5);
    }

    const Matrix gram = canon.transpose() * whitened;
    std::vector<ConfusablePair> pairs;
    pairs.reserve(static_cast<std::size_t>(n * (n - 1) / 2));
    for (Index i = 0; i < n; ++i) {
        for (Index j = i + 1; j < n; ++j) {
            pairs.push_back({clusters[i].subject_id, clusters[j].subject_id, 0.5 * (gram(i, j) + gram(j, i))});
        }
    }
    const auto k = std::min<std::size_t>(static_cast<std::size_t>(options.top_pairs), pairs.size());
    std::partial_sort(pairs.begin(), pairs.begin() + static_cast<std::ptrdiff_t>(k), pairs.end(),
                      [](const ConfusablePair& x, const ConfusablePair& y) { return x.similarity > y.similarity; });
    r.top_pairs.assign(pairs.begin(), pairs.begin() + static_cast<std::ptrdiff_t>(k));

    const auto n_proj = std::min<std::size_t>(static_cast<std::size_t>(options.max_projections), clusters.size());
    for (std::size_t s = 0; s < n_proj; ++s) {
        const auto& cl = clusters[s];
        std::vector<Vector> keys{cl.canonical_key};
        for (auto kind : kAllPerturbations) keys.insert(keys.end(), cl.keys(kind).begin(), cl.keys(kind).end());
        keys.insert(keys.end(), cl.contexts.begin(), cl.contexts.end());
        Matrix m(cov.dim(), static_cast<Index>(keys.size()));
        for (std::size_t i = 0; i < keys.size(); ++i) m.col(static_cast<Index>(i)) = keys[i];
        ClusterProjection p = principal_projection(m);
        p.subject_id = cl.subject_id;
        r.projections.push_back(std::move(p));
    }
    return r;
}

KeyStatsReport analyze_keys(const World& world, const Covariance& cov, const AnalysisOptions& options) {
    AnalysisOptions o = options;
    o.seed = options.seed ^ world.seed;
    return analyze_clusters(world.clusters, cov, o);
}

nlohmann::json KeyStatsReport::to_json() const {
    nlohmann::json j;
    for (auto kind : kAllPerturbations) {
        const auto& fam = families[static_cast<int>(kind)];
        j["families"][to_string(kind)] = {{"median", fam.median},
                                          {"count", fam.similarities.size()},
                                          {"histogram", fam.histogram.to_json()}};
    }
    j["random_pairs"] = {{"count", random_pairs.size()}, {"p25", p25}, {"p50", p50}, {"p75", p75},
                         {"p99", p99}, {"histogram", random_histogram.to_json()}};
    j["top_pairs"] = nlohmann::json::array();
    for (const auto& p : top_pairs) j["top_pairs"].push_back({{"a", p.a}, {"b", p.b}, {"similarity", p.similarity}});
    j["projections"] = nlohmann::json::array();
    for (const auto& p : projections) {
        nlohmann::json coords = nlohmann::json::array();
        for (const auto& c : p.coordinates) coords.push_back({c[0], c[1]});
        j["projections"].push_back({{"subject", p.subject_id},
                                    {"explained_variance", {p.explained_variance[0], p.explained_variance[1]}},
                                    {"total_variance", p.total_variance},
                                    {"coordinates", coords}});
    }
    return j;
}

WorldContracts check_contracts(const World& world, const Covariance& cov, const KeyStatsReport& report) {
    WorldContracts w;
    const auto& reph = report.families[static_cast<int>(PerturbationKind::Rephrase)].similarities;
    std::size_t idx = 0;
    int near = 0, zero = 0;
    // Family vectors are filled cluster by cluster, in cluster order.
    for (const auto& cl : world.clusters) {
        const double self = whitening_similarity(cl.canonical_key, cl.canonical_key, cov);
        for (std::size_t i = 0; i < cl.keys(PerturbationKind::Rephrase).size(); ++i, ++idx) {
            const double rel = reph.at(idx) / self;
            if (rel > 0.5) ++near;
            if (std::abs(rel) < 0.2) ++zero;
        }
    }
    const double total = std::max<double>(1.0, double(reph.size()));
    w.near_fraction = near / total;
    w.zero_fraction = zero / total;
    const double p = world.config.rephrase_p_near;
    w.rephrase_bimodal = w.near_fraction >= 0.5 * p && w.zero_fraction >= 0.5 * (1.0 - p);

    const auto& shuf = report.families[static_cast<int>(PerturbationKind::Shuffle)].similarities;
    w.shuffle_below_p25 = std::all_of(shuf.begin(), shuf.end(), [&](double x) { return x < report.p25; });
    const auto& lng = report.families[static_cast<int>(PerturbationKind::LongContext)].similarities;
    w.long_above_p75 = std::all_of(lng.begin(), lng.end(), [&](double x) { return x > report.p75; });

    for (const auto& pair : world.confusable) {
        const double s = whitening_similarity(world.clusters[pair.a].canonical_key,
                                              world.clusters[pair.b].canonical_key, cov);
        if (s > report.p99) ++w.confusable_count;
    }
    w.confusable_above_p99 = w.confusable_count >= world.config.n_confusable;
    return w;
}

}  // namespace kvedit
