#pragma once

// Toy prediction stack: one attention read over memory values followed by an
// output-embedding projection, plus the logit-gap checkers built on it.

#include "kvedit/memory_core.hpp"

#include <json.hpp>

#include <filesystem>
#include <span>
#include <string>
#include <vector>

namespace kvedit {

// The often-quoted "about 2.30 for 90% confidence". The two-class gap that
// actually gives 0.9 is ln 9; this constant is kept only for comparison.
inline constexpr double kQuotedEpsilonAt90 = 2.30;

struct ReadoutModel {
    Matrix W_Q;    // D x D
    Matrix W_K;    // D x D
    Matrix W_V;    // D x D
    Vector q;      // D, query state at the prediction token (W_Q h_pred)
    Matrix W_out;  // |vocab| x D, row t is the output embedding w_t
    std::vector<std::string> vocab;
    // Values at the non-subject positions that the query also attends to.
    std::vector<Vector> context_values;
    // Force the subject position to take all of the attention mass.
    bool assume_located_dominance = false;

    Index dim() const { return W_V.rows(); }
    Index vocab_size() const { return W_out.rows(); }

    // Throws DimensionMismatch / NonFinite / OutOfRange on a malformed model.
    void validate() const;
    Vector embedding(Index token) const;
};

struct AttentionResult {
    Vector output;
    Vector weights;
};

Vector softmax(const Vector& x);
Vector log_softmax(const Vector& x);

AttentionResult attention_output(const ReadoutModel& model, std::span<const Vector> values);
Vector logits(const ReadoutModel& model, const Vector& o);

// Logits when `subject_value` sits at the subject position next to the
// model's context values.
Vector readout_logits(const ReadoutModel& model, const Vector& subject_value);

// d(g . logits) / d(subject_value) for the readout above.
Vector readout_value_gradient(const ReadoutModel& model, const Vector& subject_value, const Vector& g);

// Unique argmax, or -1 when the maximum is tied.
Index unique_argmax(const Vector& x);

double epsilon_for_confidence(double p_max);

struct LemmaCheck {
    bool pass = false;
    double lhs = 0.0;
    double rhs = 0.0;
    // Positive when the inequality holds with room to spare.
    double margin = 0.0;
    // Only set by the value-bound checker: ||W_V^T (w_t* - w_t)|| * ||dv||.
    double cauchy_schwarz = 0.0;
};

// (w_t* - w_t)^T W_V dv > eps1 + eps2
LemmaCheck check_value_bound(const ReadoutModel& model, const Vector& delta_v, Index t, Index t_star,
                             double eps1, double eps2);

// s (w_t* - w_t)^T W_V v* > eps1 + eps2,  s = k_s^T C^-1 k*
LemmaCheck check_robustness_requirement(const ReadoutModel& model, const Covariance& cov, const Vector& k_s,
                                        const Vector& k_star, const Vector& v_star, Index t, Index t_star,
                                        double eps1, double eps2);

// s (w_t* - w_n)^T W_V v* < eps3,  s = k_n^T C^-1 k*
// eps3 is the margin by which t_n beat t* at k_n before the edit.
LemmaCheck check_specificity_requirement(const ReadoutModel& model, const Covariance& cov, const Vector& k_n,
                                         const Vector& k_star, const Vector& v_star, Index t_n, Index t_star,
                                         double eps3);

struct LogitGapReport {
    double eps1 = 0.0;  // pre-edit: logit(t) - logit(t*)
    double eps2 = 0.0;  // post-edit: logit(t*) - logit(t)
    double eps3 = 0.0;  // neighbour margin: logit(t_n) - logit(t*) before the edit
    double p_top1 = 0.0;

    nlohmann::json to_json() const;
    static LogitGapReport from_json(const nlohmann::json& j);
};

LogitGapReport measure_logit_gaps(const Vector& pre_logits, const Vector& post_logits, Index t, Index t_star,
                                  const Vector& neighbour_pre_logits, Index t_n);

struct LemmaRecord {
    std::string case_id;
    std::string lemma;
    LemmaCheck check;
};

void write_lemma_csv(const std::filesystem::path& path, std::span<const LemmaRecord> records);

}  // namespace kvedit
