#pragma once

#include "kvedit/memory_core.hpp"
#include "kvedit/readout_model.hpp"

#include <json.hpp>

#include <span>
#include <vector>

namespace kvedit {

struct EditRequest {
    Vector k_star;
    Index target_token = 0;
    Index original_token = 0;
    std::vector<Vector> subject_contexts;

    void validate() const;
};

struct EditResult {
    MemoryMatrix W_hat;
    Vector k_star;
    Vector lambda;
    Vector v_star;
    Vector v_original;  // W k* before the edit
    double delta_v_norm = 0.0;
    double denominator = 0.0;  // (C^-1 k*)^T k*
    Index target_token = 0;

    nlohmann::json to_json() const;
};

nlohmann::json edit_request_to_json(const EditRequest& r);
EditRequest edit_request_from_json(const nlohmann::json& j);

// Mean of the context keys.
Vector extract_key(std::span<const Vector> subject_contexts);

struct LambdaResult {
    Vector lambda;
    double denominator = 0.0;
};

inline constexpr double kDegenerateDenominator = 1e-12;

LambdaResult compute_lambda(const MemoryMatrix& memory, const Covariance& cov, const Vector& k_star,
                            const Vector& v_star);

// Functional: `memory` is left untouched.
EditResult apply_edit(const MemoryMatrix& memory, const Covariance& cov, const EditRequest& request,
                      const Vector& v_star);

struct ValueOptConfig {
    int steps = 100;
    double learning_rate = 40.0;
    double kl_weight = 0.1;
    double clip_norm = 10.0;
    // Step halvings tried before a step is rejected outright.
    int max_backtracks = 30;
};

struct ValueOptResult {
    Vector z;
    double target_probability = 0.0;
    std::vector<double> loss_trace;  // loss at the start and after every step
};

// Loss for a candidate value z at k*:
//   -log p(target | z) + kl_weight * mean_e KL(p_e(with z) || p_e(without z)),
// where essence query e reads W k_e + (z - W k*) when z is in place.
double value_loss(const ReadoutModel& model, const MemoryMatrix& memory, const Vector& k_star, Index target,
                  std::span<const Vector> essence_queries, double kl_weight, const Vector& z,
                  Vector* gradient = nullptr);

ValueOptResult optimize_value(const ReadoutModel& model, const MemoryMatrix& memory, const Vector& k_star,
                              Index target, std::span<const Vector> essence_queries,
                              const ValueOptConfig& config = {});

}  // namespace kvedit
