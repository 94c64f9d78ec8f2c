#include "kvedit/readout_model.hpp"

#include "kvedit/errors.hpp"

#include <cmath>
#include <fstream>
#include <iomanip>

namespace kvedit {

void ReadoutModel::validate() const {
    const Index d = W_V.rows();
    if (W_Q.rows() != d || W_Q.cols() != d || W_K.rows() != d || W_K.cols() != d || W_V.cols() != d) {
        throw DimensionMismatch("attention matrices must all be D x D");
    }
    if (q.size() != d) throw DimensionMismatch("query state length differs from D");
    if (W_out.cols() != d) throw DimensionMismatch("output embeddings must have D columns");
    if (W_out.rows() < 2) throw OutOfRange("vocabulary needs at least two tokens");
    if (!vocab.empty() && static_cast<Index>(vocab.size()) != W_out.rows()) {
        throw DimensionMismatch("vocab table size differs from output embedding rows");
    }
    for (const auto& c : context_values) {
        if (c.size() != d) throw DimensionMismatch("context value length differs from D");
        if (!c.allFinite()) throw NonFinite("context value");
    }
    if (!W_Q.allFinite() || !W_K.allFinite() || !W_V.allFinite() || !q.allFinite() || !W_out.allFinite()) {
        throw NonFinite("readout parameters");
    }
}

Vector ReadoutModel::embedding(Index token) const {
    if (token < 0 || token >= vocab_size()) throw OutOfRange("token " + std::to_string(token));
    return W_out.row(token).transpose();
}

Vector softmax(const Vector& x) {
    const double m = x.maxCoeff();
    Vector e = (x.array() - m).exp();
    return e / e.sum();
}

Vector log_softmax(const Vector& x) {
    const double m = x.maxCoeff();
    const double lse = m + std::log((x.array() - m).exp().sum());
    return x.array() - lse;
}

AttentionResult attention_output(const ReadoutModel& model, std::span<const Vector> values) {
    if (values.empty()) throw EmptyInput("attention over zero values");
    const Index n = static_cast<Index>(values.size());
    const Vector kq = model.W_K.transpose() * model.q;
    Vector scores(n);
    for (Index j = 0; j < n; ++j) {
        if (values[j].size() != model.dim()) throw DimensionMismatch("value length differs from D");
        scores(j) = kq.dot(values[j]);
    }
    AttentionResult r;
    r.weights = softmax(scores);
    r.output = Vector::Zero(model.dim());
    for (Index j = 0; j < n; ++j) r.output += r.weights(j) * (model.W_V * values[j]);
    return r;
}

Vector logits(const ReadoutModel& model, const Vector& o) {
    if (o.size() != model.W_out.cols()) throw DimensionMismatch("attention output length differs from D");
    return model.W_out * o;
}

Vector readout_logits(const ReadoutModel& model, const Vector& subject_value) {
    if (model.assume_located_dominance) {
        if (subject_value.size() != model.dim()) throw DimensionMismatch("value length differs from D");
        return logits(model, model.W_V * subject_value);
    }
    std::vector<Vector> values;
    values.reserve(model.context_values.size() + 1);
    values.push_back(subject_value);
    values.insert(values.end(), model.context_values.begin(), model.context_values.end());
    return logits(model, attention_output(model, values).output);
}

Vector readout_value_gradient(const ReadoutModel& model, const Vector& z, const Vector& g) {
    const Vector go = model.W_out.transpose() * g;
    if (model.assume_located_dominance) return model.W_V.transpose() * go;

    std::vector<Vector> values;
    values.push_back(z);
    values.insert(values.end(), model.context_values.begin(), model.context_values.end());
    const AttentionResult att = attention_output(model, values);
    const double w0 = att.weights(0);
    // o = sum_j w_j W_V v_j with w = softmax(q^T W_K v_j); only position 0 depends on z.
    const double dscore = w0 * go.dot(model.W_V * z - att.output);
    return w0 * (model.W_V.transpose() * go) + dscore * (model.W_K.transpose() * model.q);
}

Index unique_argmax(const Vector& x) {
    Index best = 0;
    for (Index i = 1; i < x.size(); ++i) {
        if (x(i) > x(best)) best = i;
    }
    for (Index i = 0; i < x.size(); ++i) {
        if (i != best && x(i) == x(best)) return -1;
    }
    return best;
}

double epsilon_for_confidence(double p_max) {
    if (!(p_max >= 0.5 && p_max < 1.0)) {
        throw OutOfRange("confidence must lie in [0.5, 1), got " + std::to_string(p_max));
    }
    return -std::log(1.0 / p_max - 1.0);
}

namespace {

void check_token(const ReadoutModel& model, Index t) {
    if (t < 0 || t >= model.vocab_size()) throw OutOfRange("token " + std::to_string(t) + " outside vocabulary");
}

Vector direction(const ReadoutModel& model, Index up, Index down) {
    check_token(model, up);
    check_token(model, down);
    return model.W_V.transpose() * (model.embedding(up) - model.embedding(down));
}

}  // namespace

LemmaCheck check_value_bound(const ReadoutModel& model, const Vector& delta_v, Index t, Index t_star,
                             double eps1, double eps2) {
    if (delta_v.size() != model.dim()) throw DimensionMismatch("delta_v length differs from D");
    const Vector dir = direction(model, t_star, t);
    LemmaCheck c;
    c.lhs = dir.dot(delta_v);
    c.rhs = eps1 + eps2;
    c.margin = c.lhs - c.rhs;
    c.pass = c.lhs > c.rhs;
    c.cauchy_schwarz = dir.norm() * delta_v.norm();
    return c;
}

LemmaCheck check_robustness_requirement(const ReadoutModel& model, const Covariance& cov, const Vector& k_s,
                                        const Vector& k_star, const Vector& v_star, Index t, Index t_star,
                                        double eps1, double eps2) {
    if (v_star.size() != model.dim()) throw DimensionMismatch("v* length differs from D");
    const double s = whitening_similarity(k_s, k_star, cov);
    LemmaCheck c;
    c.lhs = s * direction(model, t_star, t).dot(v_star);
    c.rhs = eps1 + eps2;
    c.margin = c.lhs - c.rhs;
    c.pass = c.lhs > c.rhs;
    return c;
}

LemmaCheck check_specificity_requirement(const ReadoutModel& model, const Covariance& cov, const Vector& k_n,
                                         const Vector& k_star, const Vector& v_star, Index t_n, Index t_star,
                                         double eps3) {
    if (v_star.size() != model.dim()) throw DimensionMismatch("v* length differs from D");
    const double s = whitening_similarity(k_n, k_star, cov);
    LemmaCheck c;
    c.lhs = s * direction(model, t_star, t_n).dot(v_star);
    c.rhs = eps3;
    c.margin = c.rhs - c.lhs;
    c.pass = c.lhs < c.rhs;
    return c;
}

nlohmann::json LogitGapReport::to_json() const {
    return {{"eps1", eps1}, {"eps2", eps2}, {"eps3", eps3}, {"p_top1", p_top1}};
}

LogitGapReport LogitGapReport::from_json(const nlohmann::json& j) {
    LogitGapReport r;
    r.eps1 = j.at("eps1").get<double>();
    r.eps2 = j.at("eps2").get<double>();
    r.eps3 = j.at("eps3").get<double>();
    r.p_top1 = j.at("p_top1").get<double>();
    return r;
}

LogitGapReport measure_logit_gaps(const Vector& pre_logits, const Vector& post_logits, Index t, Index t_star,
                                  const Vector& neighbour_pre_logits, Index t_n) {
    LogitGapReport r;
    r.eps1 = pre_logits(t) - pre_logits(t_star);
    r.eps2 = post_logits(t_star) - post_logits(t);
    r.eps3 = neighbour_pre_logits(t_n) - neighbour_pre_logits(t_star);
    r.p_top1 = softmax(post_logits).maxCoeff();
    return r;
}

void write_lemma_csv(const std::filesystem::path& path, std::span<const LemmaRecord> records) {
    std::ofstream f(path);
    if (!f) throw IoError("cannot open " + path.string() + " for writing");
    f << std::setprecision(12);
    f << "case_id,lemma,lhs,rhs,margin,pass\n";
    for (const auto& r : records) {
        f << r.case_id << ',' << r.lemma << ',' << r.check.lhs << ',' << r.check.rhs << ',' << r.check.margin
          << ',' << (r.check.pass ? 1 : 0) << '\n';
    }
}

}  // namespace kvedit
