#include "kvedit/errors.hpp"
#include "kvedit/json_util.hpp"
#include "kvedit/matrix_io.hpp"
#include "kvedit/synthetic_world.hpp"

#include <map>

namespace kvedit {

namespace fs = std::filesystem;

namespace {

constexpr const char* kDumpFormat = "kvedit-activation-dump";
constexpr const char* kWorldFormat = "kvedit-world";

struct Segment {
    std::string kind;
    int subject = -1;
    Index start = 0;
    Index count = 0;
    std::vector<int> in_domain;
};

nlohmann::json segment_json(const Segment& s) {
    nlohmann::json j = {{"kind", s.kind}, {"start", s.start}, {"count", s.count}};
    if (s.subject >= 0) j["subject"] = s.subject;
    if (!s.in_domain.empty()) j["in_domain"] = s.in_domain;
    return j;
}

Matrix stack_columns(const std::vector<Vector>& cols, Index dim) {
    Matrix m(dim, static_cast<Index>(cols.size()));
    for (std::size_t i = 0; i < cols.size(); ++i) m.col(static_cast<Index>(i)) = cols[i];
    return m;
}

std::vector<Vector> split_columns(const Matrix& m) {
    std::vector<Vector> out;
    for (Index c = 0; c < m.cols(); ++c) out.push_back(m.col(c));
    return out;
}

}  // namespace

fs::path labels_path_for(const fs::path& dump_path) { return dump_path.parent_path() / "labels.json"; }

void export_activation_dump(const World& world, const fs::path& path) {
    std::vector<Vector> rows;
    std::vector<Segment> segments;
    auto add = [&](const std::string& kind, int subject, const std::vector<Vector>& keys, std::vector<int> in_domain) {
        if (keys.empty()) return;
        segments.push_back({kind, subject, static_cast<Index>(rows.size()), static_cast<Index>(keys.size()),
                            std::move(in_domain)});
        rows.insert(rows.end(), keys.begin(), keys.end());
    };
    add("background", -1, split_columns(world.background_keys.data), {});
    for (const auto& cl : world.clusters) {
        add("canonical", cl.subject_id, {cl.canonical_key}, {});
        add("context", cl.subject_id, cl.contexts, {});
        add("essence", cl.subject_id, cl.essence_queries, {});
        for (auto kind : kAllPerturbations) {
            add(to_string(kind), cl.subject_id, cl.keys(kind), cl.in_domain_ids[static_cast<int>(kind)]);
        }
    }
    const Index dim = world.config.dim;
    write_aelm(path, stack_columns(rows, dim).transpose());

    nlohmann::json labels = {{"format", kDumpFormat}, {"version", 1}, {"dim", dim},
                             {"rows", rows.size()}, {"segments", nlohmann::json::array()}};
    for (const auto& s : segments) labels["segments"].push_back(segment_json(s));
    write_json_file(labels_path_for(path), labels);
}

ActivationDump load_activation_dump(const fs::path& path) {
    const Matrix rows = read_aelm(path);
    const fs::path labels_path = labels_path_for(path);
    if (!fs::exists(labels_path)) throw LabelMismatch("missing sidecar " + labels_path.string());
    const nlohmann::json labels = read_json_file(labels_path);

    const Index n = rows.rows();
    if (labels.value("rows", Index{-1}) != n) {
        throw LabelMismatch("labels describe " + std::to_string(labels.value("rows", Index{-1})) + " rows, dump has " +
                            std::to_string(n));
    }
    if (labels.value("dim", Index{-1}) != rows.cols()) {
        throw LabelMismatch("labels declare dim " + std::to_string(labels.value("dim", Index{-1})) +
                            ", dump has " + std::to_string(rows.cols()));
    }
    if (!rows.allFinite()) throw MalformedDump("dump contains non-finite values");

    ActivationDump dump;
    dump.keys = KeySet(rows.transpose());
    std::vector<int> covered(static_cast<std::size_t>(n), 0);
    std::map<int, SubjectCluster> clusters;
    std::map<int, bool> has_canonical;

    for (const auto& js : labels.at("segments")) {
        const std::string kind = js.at("kind").get<std::string>();
        const Index start = js.at("start").get<Index>();
        const Index count = js.at("count").get<Index>();
        if (start < 0 || count < 0 || start + count > n) {
            throw LabelMismatch("segment [" + std::to_string(start) + ", +" + std::to_string(count) +
                                ") exceeds " + std::to_string(n) + " rows");
        }
        for (Index r = start; r < start + count; ++r) ++covered[static_cast<std::size_t>(r)];
        auto block = [&] {
            std::vector<Vector> out;
            for (Index r = start; r < start + count; ++r) out.push_back(dump.keys.data.col(r));
            return out;
        };
        if (kind == "background") {
            for (Index r = start; r < start + count; ++r) dump.background_columns.push_back(r);
            continue;
        }
        if (!js.contains("subject")) throw LabelMismatch(kind + " segment without a subject");
        const int subject = js.at("subject").get<int>();
        SubjectCluster& cl = clusters[subject];
        cl.subject_id = subject;
        if (kind == "canonical") {
            if (count != 1) throw LabelMismatch("canonical segment must hold exactly one row");
            cl.canonical_key = dump.keys.data.col(start);
            has_canonical[subject] = true;
        } else if (kind == "context") {
            auto b = block();
            cl.contexts.insert(cl.contexts.end(), b.begin(), b.end());
        } else if (kind == "essence") {
            auto b = block();
            cl.essence_queries.insert(cl.essence_queries.end(), b.begin(), b.end());
        } else {
            PerturbationKind pk;
            try {
                pk = perturbation_from_string(kind);
            } catch (const MalformedDump&) {
                throw LabelMismatch("unknown segment kind '" + kind + "'");
            }
            const int k = static_cast<int>(pk);
            if (!cl.perturbed_keys[k].empty()) throw LabelMismatch("duplicate " + kind + " segment for a subject");
            cl.perturbed_keys[k] = block();
            std::vector<int> in_domain;
            if (js.contains("in_domain")) {
                in_domain = js.at("in_domain").get<std::vector<int>>();
            } else {
                for (int i = 0; i < count / 2; ++i) in_domain.push_back(i);
            }
            std::vector<bool> is_in(static_cast<std::size_t>(count), false);
            for (int id : in_domain) {
                if (id < 0 || id >= count) throw LabelMismatch("in_domain index out of range");
                is_in[static_cast<std::size_t>(id)] = true;
            }
            for (int i = 0; i < count; ++i) {
                (is_in[static_cast<std::size_t>(i)] ? cl.in_domain_ids[k] : cl.out_of_domain_ids[k]).push_back(i);
            }
        }
    }
    for (Index r = 0; r < n; ++r) {
        if (covered[static_cast<std::size_t>(r)] != 1) {
            throw LabelMismatch("row " + std::to_string(r) + " is labelled " +
                                std::to_string(covered[static_cast<std::size_t>(r)]) + " times");
        }
    }
    for (auto& [id, cl] : clusters) {
        if (!has_canonical[id]) throw LabelMismatch("subject " + std::to_string(id) + " has no canonical row");
        dump.clusters.push_back(std::move(cl));
    }
    return dump;
}

void save_world(const World& world, const fs::path& dir) {
    fs::create_directories(dir);
    export_activation_dump(world, dir / "keys.aelm");
    write_aelm(dir / "subject_values.aelm", world.values.data);
    write_aelm(dir / "background_values.aelm", world.background_values.data);
    const ReadoutModel& rd = world.readout;
    write_aelm(dir / "readout_W_Q.aelm", rd.W_Q);
    write_aelm(dir / "readout_W_K.aelm", rd.W_K);
    write_aelm(dir / "readout_W_V.aelm", rd.W_V);
    write_aelm(dir / "readout_q.aelm", rd.q);
    write_aelm(dir / "readout_W_out.aelm", rd.W_out);
    write_aelm(dir / "readout_context_values.aelm", stack_columns(rd.context_values, rd.dim()));

    nlohmann::json j = {{"format", kWorldFormat}, {"version", 1}, {"seed", world.seed},
                        {"config", world.config.to_json()}};
    j["triples"] = nlohmann::json::array();
    for (const auto& t : world.triples) {
        j["triples"].push_back({{"head", t.head}, {"relation", t.relation}, {"tail", t.tail}, {"new_tail", t.new_tail}});
    }
    j["confusable"] = nlohmann::json::array();
    for (const auto& p : world.confusable) j["confusable"].push_back({{"a", p.a}, {"b", p.b}, {"similarity", p.similarity}});
    j["random_pair_percentiles"] = world.random_pair_percentiles;
    j["readout"] = {{"vocab", rd.vocab}, {"assume_located_dominance", rd.assume_located_dominance}};
    write_json_file(dir / "world.json", j);
}

World load_world(const fs::path& dir) {
    const fs::path meta = dir / "world.json";
    if (!fs::exists(meta)) throw IoError("no world.json in " + dir.string());
    const nlohmann::json j = read_json_file(meta);
    if (j.value("format", std::string{}) != kWorldFormat) throw MalformedDump(meta.string() + " is not a world file");

    World w;
    w.seed = j.at("seed").get<std::uint64_t>();
    w.config = WorldConfig::from_json(j.at("config"));
    ActivationDump dump = load_activation_dump(dir / "keys.aelm");
    Matrix bg(dump.keys.dim(), static_cast<Index>(dump.background_columns.size()));
    for (std::size_t i = 0; i < dump.background_columns.size(); ++i) {
        bg.col(static_cast<Index>(i)) = dump.keys.data.col(dump.background_columns[i]);
    }
    w.background_keys = KeySet(std::move(bg));
    w.clusters = std::move(dump.clusters);
    w.values = ValueSet(read_aelm(dir / "subject_values.aelm"));
    w.background_values = ValueSet(read_aelm(dir / "background_values.aelm"));
    for (const auto& t : j.at("triples")) {
        w.triples.push_back({t.at("head").get<int>(), t.at("relation").get<int>(), t.at("tail").get<Index>(),
                             t.at("new_tail").get<Index>()});
    }
    for (const auto& p : j.at("confusable")) {
        w.confusable.push_back({p.at("a").get<int>(), p.at("b").get<int>(), p.at("similarity").get<double>()});
    }
    w.random_pair_percentiles = j.at("random_pair_percentiles").get<std::array<double, 4>>();

    ReadoutModel& rd = w.readout;
    rd.W_Q = read_aelm(dir / "readout_W_Q.aelm");
    rd.W_K = read_aelm(dir / "readout_W_K.aelm");
    rd.W_V = read_aelm(dir / "readout_W_V.aelm");
    rd.q = read_aelm(dir / "readout_q.aelm");
    rd.W_out = read_aelm(dir / "readout_W_out.aelm");
    rd.context_values = split_columns(read_aelm(dir / "readout_context_values.aelm"));
    rd.vocab = j.at("readout").at("vocab").get<std::vector<std::string>>();
    rd.assume_located_dominance = j.at("readout").value("assume_located_dominance", false);
    rd.validate();

    if (w.clusters.size() != w.triples.size() || w.values.count() != static_cast<Index>(w.clusters.size())) {
        throw LabelMismatch("world has " + std::to_string(w.clusters.size()) + " clusters but " +
                            std::to_string(w.triples.size()) + " triples");
    }
    return w;
}

}  // namespace kvedit
