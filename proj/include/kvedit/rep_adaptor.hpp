#pragma once

// Gated low-rank key adaptor.
//
//   gate(k)  = sigmoid(gate_out . GELU(gate_in k + gate_in_bias) + gate_out_bias)
//   proj(k)  = proj_up (proj_down drop(k) + proj_down_bias) + proj_up_bias
//   train:  k^ = gate(k) * proj(k) + k
//   test:   k^ = [gate(k) >= tau] * proj(k) + k
//
// It is trained to pull a subject's keys toward the edit key k* in whitened
// space, loss = -|(k^/|k^|)^T C^-1 k*|.

#include "kvedit/memory_core.hpp"
#include "kvedit/random.hpp"

#include <json.hpp>

#include <filesystem>
#include <span>
#include <vector>

namespace kvedit {

inline constexpr int kDefaultProjectionRank = 32;
inline constexpr double kDefaultTau = 0.9;

// round(ratio * dim), at least 1.
int gate_hidden_size(int dim, double ratio = 0.1);

struct AdaptorParams {
    Matrix gate_in;        // H x D
    Vector gate_in_bias;   // H
    Vector gate_out;       // H
    double gate_out_bias = 0.0;
    Matrix proj_down;      // R x D
    Vector proj_down_bias; // R
    Matrix proj_up;        // D x R
    Vector proj_up_bias;   // D
    double dropout_rate = 0.0;
    double tau = kDefaultTau;

    Index dim() const { return gate_in.cols(); }
    Index hidden() const { return gate_in.rows(); }
    Index rank() const { return proj_down.rows(); }

    void validate() const;
    bool all_finite() const;

    // Zero-filled parameters of the given shape.
    static AdaptorParams zeros(Index dim, Index hidden, Index rank);
};

// The four trainable blocks, each with its bias, flattened in this order.
enum class ParamBlock { GateIn = 0, GateOut = 1, ProjDown = 2, ProjUp = 3 };

Vector flatten(const AdaptorParams& p);
void unflatten(AdaptorParams& p, const Vector& flat);
// [begin, end) of each block inside the flattened vector.
std::pair<Index, Index> block_range(const AdaptorParams& p, ParamBlock block);

struct AdaptorInit {
    int rank = kDefaultProjectionRank;
    double gate_ratio = 0.1;
    double gate_in_std = 0.0;
    double gate_out_std = 2.0;
    double gate_out_bias = -2.0;
    double proj_down_std = 0.02;
    double proj_up_std = 0.0;
};

AdaptorParams init_adaptor(int dim, const AdaptorInit& init, Rng& rng);

double gelu(double x);
double gelu_derivative(double x);
double sigmoid(double x);

double gate(const AdaptorParams& p, const Vector& k);

// Inverted-dropout mask over the D input coordinates (all ones when rate is 0).
Vector dropout_mask(Index dim, double rate, Rng& rng);

// With training == true, dropout at p.dropout_rate is applied to the input
// when a random stream is supplied (a rate of 1 zeroes the input regardless).
// Without a stream, or at inference, dropout is off.
Vector projection(const AdaptorParams& p, const Vector& k, bool training = false, Rng* rng = nullptr);
Vector projection_masked(const AdaptorParams& p, const Vector& k, const Vector& mask);

enum class AdaptorMode { Train, Test };

Vector forward(const AdaptorParams& p, const Vector& k, AdaptorMode mode, double tau = kDefaultTau,
               Rng* rng = nullptr);

// Test mode with the tau stored in the parameters.
inline Vector adapt(const AdaptorParams& p, const Vector& k) { return forward(p, k, AdaptorMode::Test, p.tau); }

double rep_loss(const Vector& k_hat, const Vector& k_star, const Covariance& cov);

struct TrainingGroup {
    std::vector<Vector> keys;
    Vector k_star;
};

// Mean train-mode loss over every key of every group (each key is pulled
// toward its own group's k*). When `grad` is set it receives the gradient in
// AdaptorParams layout. `masks`, if given, holds one dropout mask per key in
// the same order; otherwise no dropout is applied.
double rep_objective(const AdaptorParams& p, std::span<const TrainingGroup> groups, const Covariance& cov,
                     AdaptorParams* grad = nullptr, const std::vector<Vector>* masks = nullptr);

struct TrainConfig {
    double learning_rate = 5e-4;
    int steps = 10;
    double beta1 = 0.9;
    double beta2 = 0.999;
    double adam_eps = 1e-8;
    double dropout_rate = 0.0;
    std::uint64_t seed = 0;
    AdaptorInit init;
    double tau = kDefaultTau;

    void validate() const;
    nlohmann::json to_json() const;
    static TrainConfig from_json(const nlohmann::json& j);
};

struct TrainResult {
    AdaptorParams params;
    std::vector<double> loss_trace;  // loss before each update, then the final loss
};

// Trains one adaptor from `start` (or a fresh init when null).
TrainResult train_adaptor(std::span<const TrainingGroup> groups, const Covariance& cov, const TrainConfig& config,
                          const AdaptorParams* start = nullptr);
TrainResult train_adaptor(std::span<const Vector> keys, const Vector& k_star, const Covariance& cov,
                          const TrainConfig& config);

// Mean over keys of |(k^/|k^|)^T C^-1 k*| in train mode; null params means k^ = k.
double mean_abs_similarity(const AdaptorParams* p, std::span<const Vector> keys, const Vector& k_star,
                           const Covariance& cov);

// proj_up * proj_down as a D x D matrix (rank <= R).
Matrix composed_projection(const AdaptorParams& p);

void save_adaptor(const std::filesystem::path& dir, const AdaptorParams& p, const nlohmann::json& extra = {});
AdaptorParams load_adaptor(const std::filesystem::path& dir);

}  // namespace kvedit
