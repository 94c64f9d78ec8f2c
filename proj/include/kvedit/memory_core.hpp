#pragma once

// Linear associative memory: a matrix W that stores key/value pairs as
// columns of K and V with W K ~= V, plus the key covariance used for
// whitening and rank-one edits.
//
// Interface convention: every key/value bank is column-major by contract,
// i.e. column i of KeySet::data is key k_i.

#include <Eigen/Dense>

#include <cstdint>
#include <span>
#include <vector>

namespace kvedit {

using Matrix = Eigen::MatrixXd;
using Vector = Eigen::VectorXd;
using Index = Eigen::Index;

struct KeySet {
    Matrix data;  // D1 x N

    KeySet() = default;
    explicit KeySet(Matrix keys);

    Index dim() const { return data.rows(); }
    Index count() const { return data.cols(); }
    Vector key(Index i) const { return data.col(i); }

    // rank(K) == D1, judged by a rank-revealing decomposition.
    bool full_row_rank(double threshold = 1e-10) const;

    static KeySet from_columns(std::span<const Vector> keys);
};

struct ValueSet {
    Matrix data;  // D2 x N

    ValueSet() = default;
    explicit ValueSet(Matrix values);

    Index dim() const { return data.rows(); }
    Index count() const { return data.cols(); }
    Vector value(Index i) const { return data.col(i); }
};

struct MemoryMatrix {
    Matrix W;             // D2 x D1
    int edit_count = 0;   // 0 == freshly fitted

    bool edited() const { return edit_count > 0; }
    Index key_dim() const { return W.cols(); }
    Index value_dim() const { return W.rows(); }
};

enum class CovarianceNormalization { Sum, Mean };

struct CovarianceOptions {
    CovarianceNormalization normalization = CovarianceNormalization::Sum;
    // Added to the diagonal only when the plain matrix is rejected.
    double ridge = 0.0;
    double max_condition = 1e12;
    // ||C C^-1 - I||_max above this rejects the inverse.
    double inverse_tolerance = 1e-6;
};

class Covariance {
public:
    static Covariance from_keys(const KeySet& keys, const CovarianceOptions& options = {});
    static Covariance from_matrix(const Matrix& c, const CovarianceOptions& options = {});

    const Matrix& matrix() const { return c_; }
    const Matrix& inverse() const { return c_inv_; }
    double condition_number() const { return condition_; }
    double ridge_applied() const { return ridge_applied_; }
    CovarianceNormalization normalization() const { return normalization_; }
    Index dim() const { return c_.rows(); }

    // C^-1 k
    Vector whiten(const Vector& k) const;

    // Largest |(C C^-1 - I)_ij|.
    double inverse_residual() const;

private:
    Matrix c_;
    Matrix c_inv_;
    double condition_ = 0.0;
    double ridge_applied_ = 0.0;
    CovarianceNormalization normalization_ = CovarianceNormalization::Sum;
};

struct FitOptions {
    // Above this condition number of K K^T the normal equations are skipped in
    // favour of a complete orthogonal decomposition.
    double normal_equations_max_condition = 1e8;
    // When false a rank-deficient or ill-conditioned K raises SingularCovariance
    // instead of returning the minimum-norm solution.
    bool allow_min_norm = true;
};

MemoryMatrix fit_memory(const KeySet& keys, const ValueSet& values, const FitOptions& options = {});

Vector retrieve(const MemoryMatrix& memory, const Vector& query);

Covariance covariance(const KeySet& keys, const CovarianceOptions& options = {});

double whitening_similarity(const Vector& k1, const Vector& k2, const Covariance& cov);

// Minimum-norm alpha with K alpha = query (least squares when inconsistent).
Vector pseudoinverse_coefficients(const KeySet& keys, const Vector& query);

Vector fuzzy_value(const ValueSet& values, const Vector& alpha);

// Numerical rank with singular values above threshold * sigma_max.
Index numerical_rank(const Matrix& m, double threshold = 1e-8);

bool all_finite(const Matrix& m);

}  // namespace kvedit
