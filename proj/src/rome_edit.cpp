#include "kvedit/rome_edit.hpp"

#include "kvedit/errors.hpp"
#include "kvedit/json_util.hpp"

#include <cmath>

namespace kvedit {

void EditRequest::validate() const {
    if (!k_star.allFinite()) throw NonFinite("k* has non-finite entries");
    if (subject_contexts.empty()) throw EmptyInput("edit request needs at least one subject context");
}

nlohmann::json EditResult::to_json() const {
    return {{"k_star", vector_to_json(k_star)},
            {"v_star", vector_to_json(v_star)},
            {"lambda", vector_to_json(lambda)},
            {"target_token", target_token},
            {"delta_v_norm", delta_v_norm}};
}

nlohmann::json edit_request_to_json(const EditRequest& r) {
    nlohmann::json contexts = nlohmann::json::array();
    for (const auto& c : r.subject_contexts) contexts.push_back(vector_to_json(c));
    return {{"k_star", vector_to_json(r.k_star)},
            {"target_token", r.target_token},
            {"original_token", r.original_token},
            {"subject_contexts", contexts}};
}

EditRequest edit_request_from_json(const nlohmann::json& j) {
    EditRequest r;
    r.k_star = vector_from_json(j.at("k_star"));
    r.target_token = j.at("target_token").get<Index>();
    r.original_token = j.value("original_token", Index{0});
    if (j.contains("subject_contexts")) {
        for (const auto& c : j.at("subject_contexts")) r.subject_contexts.push_back(vector_from_json(c));
    }
    return r;
}

Vector extract_key(std::span<const Vector> subject_contexts) {
    if (subject_contexts.empty()) throw EmptyInput("no subject contexts to average");
    Vector sum = Vector::Zero(subject_contexts.front().size());
    for (const auto& c : subject_contexts) {
        if (c.size() != sum.size()) throw DimensionMismatch("subject contexts differ in length");
        sum += c;
    }
    return sum / static_cast<double>(subject_contexts.size());
}

LambdaResult compute_lambda(const MemoryMatrix& memory, const Covariance& cov, const Vector& k_star,
                            const Vector& v_star) {
    if (k_star.size() != memory.key_dim() || k_star.size() != cov.dim()) {
        throw DimensionMismatch("k* length differs from key dimension");
    }
    if (v_star.size() != memory.value_dim()) throw DimensionMismatch("v* length differs from value dimension");
    const Vector u = cov.whiten(k_star);
    LambdaResult r;
    r.denominator = u.dot(k_star);
    if (!(std::abs(r.denominator) >= kDegenerateDenominator)) {
        throw DegenerateKey("(C^-1 k*)^T k* = " + std::to_string(r.denominator));
    }
    r.lambda = (v_star - memory.W * k_star) / r.denominator;
    return r;
}

EditResult apply_edit(const MemoryMatrix& memory, const Covariance& cov, const EditRequest& request,
                      const Vector& v_star) {
    request.validate();
    const LambdaResult lr = compute_lambda(memory, cov, request.k_star, v_star);

    EditResult r;
    r.k_star = request.k_star;
    r.lambda = lr.lambda;
    r.denominator = lr.denominator;
    r.v_star = v_star;
    r.v_original = memory.W * request.k_star;
    r.delta_v_norm = (v_star - r.v_original).norm();
    r.target_token = request.target_token;
    r.W_hat.W = memory.W + lr.lambda * cov.whiten(request.k_star).transpose();
    r.W_hat.edit_count = memory.edit_count + 1;
    return r;
}

double value_loss(const ReadoutModel& model, const MemoryMatrix& memory, const Vector& k_star, Index target,
                  std::span<const Vector> essence_queries, double kl_weight, const Vector& z, Vector* gradient) {
    const Vector lg = readout_logits(model, z);
    const Vector p = softmax(lg);
    double loss = -log_softmax(lg)(target);
    if (gradient) {
        Vector g = p;
        g(target) -= 1.0;
        *gradient = readout_value_gradient(model, z, g);
    }
    if (kl_weight == 0.0 || essence_queries.empty()) return loss;

    const Vector shift = z - memory.W * k_star;
    const double scale = kl_weight / static_cast<double>(essence_queries.size());
    for (const auto& ke : essence_queries) {
        const Vector base_value = memory.W * ke;
        const Vector with_value = base_value + shift;
        const Vector log_p = log_softmax(readout_logits(model, with_value));
        const Vector log_q = log_softmax(readout_logits(model, base_value));
        const Vector pw = log_p.array().exp();
        const double kl = pw.dot(log_p - log_q);
        loss += scale * kl;
        if (gradient) {
            // dKL/dlogits = p (log p - log q - KL)
            const Vector g = pw.array() * (log_p - log_q).array() - pw.array() * kl;
            *gradient += scale * readout_value_gradient(model, with_value, g);
        }
    }
    return loss;
}

ValueOptResult optimize_value(const ReadoutModel& model, const MemoryMatrix& memory, const Vector& k_star,
                              Index target, std::span<const Vector> essence_queries, const ValueOptConfig& config) {
    if (target < 0 || target >= model.vocab_size()) throw OutOfRange("target token outside vocabulary");
    if (config.steps < 1) throw OutOfRange("value optimisation needs at least one step");

    ValueOptResult r;
    r.z = retrieve(memory, k_star);
    Vector grad;
    double loss = value_loss(model, memory, k_star, target, essence_queries, config.kl_weight, r.z, &grad);
    r.loss_trace.push_back(loss);

    for (int step = 0; step < config.steps; ++step) {
        const double gn = grad.norm();
        if (gn > config.clip_norm) grad *= config.clip_norm / gn;
        double lr = config.learning_rate;
        bool accepted = false;
        for (int b = 0; b <= config.max_backtracks; ++b, lr *= 0.5) {
            const Vector candidate = r.z - lr * grad;
            Vector candidate_grad;
            const double candidate_loss = value_loss(model, memory, k_star, target, essence_queries,
                                                     config.kl_weight, candidate, &candidate_grad);
            if (std::isfinite(candidate_loss) && candidate_loss <= loss) {
                r.z = candidate;
                loss = candidate_loss;
                grad = std::move(candidate_grad);
                accepted = true;
                break;
            }
        }
        r.loss_trace.push_back(loss);
        if (!accepted) break;
    }
    if (!r.z.allFinite() || !std::isfinite(loss)) throw NonFinite("value optimisation diverged");
    r.target_probability = softmax(readout_logits(model, r.z))(target);
    return r;
}

}  // namespace kvedit
