#include "kvedit/memory_core.hpp"

#include "kvedit/errors.hpp"

#include <cmath>
#include <iostream>
#include <limits>
#include <string>

namespace kvedit {

namespace {

std::string shape(const Matrix& m) {
    return std::to_string(m.rows()) + "x" + std::to_string(m.cols());
}

double spd_condition(const Matrix& sym) {
    Eigen::SelfAdjointEigenSolver<Matrix> eig(sym, Eigen::EigenvaluesOnly);
    const double lo = eig.eigenvalues().minCoeff();
    const double hi = eig.eigenvalues().maxCoeff();
    if (lo <= 0.0) return std::numeric_limits<double>::infinity();
    return hi / lo;
}

}  // namespace

bool all_finite(const Matrix& m) { return m.allFinite(); }

Index numerical_rank(const Matrix& m, double threshold) {
    if (m.size() == 0) return 0;
    Eigen::JacobiSVD<Matrix> svd(m);
    const auto& s = svd.singularValues();
    if (s.size() == 0 || s(0) == 0.0) return 0;
    Index r = 0;
    for (Index i = 0; i < s.size(); ++i) {
        if (s(i) > threshold * s(0)) ++r;
    }
    return r;
}

KeySet::KeySet(Matrix keys) : data(std::move(keys)) {
    if (data.cols() < 1) throw EmptyInput("key set needs at least one column");
    if (!data.allFinite()) throw NonFinite("key set contains non-finite entries");
}

bool KeySet::full_row_rank(double threshold) const {
    Eigen::ColPivHouseholderQR<Matrix> qr(data);
    qr.setThreshold(threshold);
    return qr.rank() == data.rows();
}

KeySet KeySet::from_columns(std::span<const Vector> keys) {
    if (keys.empty()) throw EmptyInput("no keys");
    Matrix m(keys.front().size(), static_cast<Index>(keys.size()));
    for (std::size_t i = 0; i < keys.size(); ++i) {
        if (keys[i].size() != m.rows()) throw DimensionMismatch("key columns differ in length");
        m.col(static_cast<Index>(i)) = keys[i];
    }
    return KeySet(std::move(m));
}

ValueSet::ValueSet(Matrix values) : data(std::move(values)) {
    if (!data.allFinite()) throw NonFinite("value set contains non-finite entries");
}

Covariance Covariance::from_keys(const KeySet& keys, const CovarianceOptions& options) {
    Matrix c = keys.data * keys.data.transpose();
    if (options.normalization == CovarianceNormalization::Mean) {
        c /= static_cast<double>(keys.count());
    }
    if (keys.count() < keys.dim()) {
        std::cerr << "warning: covariance from " << keys.count() << " keys of dimension "
                  << keys.dim() << " is rank deficient\n";
    }
    return from_matrix(c, options);
}

Covariance Covariance::from_matrix(const Matrix& c_in, const CovarianceOptions& options) {
    if (c_in.rows() != c_in.cols()) throw DimensionMismatch("covariance must be square, got " + shape(c_in));
    if (!c_in.allFinite()) throw NonFinite("covariance has non-finite entries");

    Covariance cov;
    cov.normalization_ = options.normalization;
    cov.c_ = 0.5 * (c_in + c_in.transpose());

    auto try_invert = [&](const Matrix& m, double& condition, Matrix& inv) {
        condition = spd_condition(m);
        if (!(condition <= options.max_condition)) return false;
        Eigen::LLT<Matrix> llt(m);
        if (llt.info() != Eigen::Success) return false;
        inv = llt.solve(Matrix::Identity(m.rows(), m.cols()));
        inv = 0.5 * (inv + inv.transpose());
        const double residual = (m * inv - Matrix::Identity(m.rows(), m.cols())).cwiseAbs().maxCoeff();
        return residual <= options.inverse_tolerance;
    };

    double condition = 0.0;
    Matrix inv;
    if (try_invert(cov.c_, condition, inv)) {
        cov.c_inv_ = std::move(inv);
        cov.condition_ = condition;
        return cov;
    }
    if (options.ridge > 0.0) {
        Matrix ridged = cov.c_;
        ridged.diagonal().array() += options.ridge;
        if (try_invert(ridged, condition, inv)) {
            cov.c_ = std::move(ridged);
            cov.c_inv_ = std::move(inv);
            cov.condition_ = condition;
            cov.ridge_applied_ = options.ridge;
            return cov;
        }
    }
    throw SingularCovariance("condition number " + std::to_string(condition) + " exceeds cap " +
                             std::to_string(options.max_condition));
}

Vector Covariance::whiten(const Vector& k) const {
    if (k.size() != dim()) throw DimensionMismatch("key has length " + std::to_string(k.size()) +
                                                   ", covariance is " + shape(c_));
    return c_inv_ * k;
}

double Covariance::inverse_residual() const {
    return (c_ * c_inv_ - Matrix::Identity(dim(), dim())).cwiseAbs().maxCoeff();
}

MemoryMatrix fit_memory(const KeySet& keys, const ValueSet& values, const FitOptions& options) {
    if (keys.count() != values.count()) {
        throw DimensionMismatch("keys have " + std::to_string(keys.count()) + " columns, values " +
                                std::to_string(values.count()));
    }
    const Matrix& k = keys.data;
    const Matrix& v = values.data;
    const Matrix kkt = k * k.transpose();
    const double condition = spd_condition(0.5 * (kkt + kkt.transpose()));

    MemoryMatrix memory;
    if (condition <= options.normal_equations_max_condition) {
        // W = V K^T (K K^T)^-1, solved as (K K^T) W^T = K V^T.
        Eigen::LLT<Matrix> llt(kkt);
        if (llt.info() == Eigen::Success) {
            memory.W = llt.solve(k * v.transpose()).transpose();
        }
    }
    if (memory.W.size() == 0) {
        if (!options.allow_min_norm) {
            throw SingularCovariance("K K^T condition number " + std::to_string(condition) +
                                     " exceeds normal-equation cap");
        }
        // Minimum-norm least squares: W^T = argmin ||K^T W^T - V^T||.
        Eigen::CompleteOrthogonalDecomposition<Matrix> cod(k.transpose());
        memory.W = cod.solve(v.transpose()).transpose();
    }
    if (!memory.W.allFinite()) throw FitFailure("fitted memory is not finite");
    return memory;
}

Vector retrieve(const MemoryMatrix& memory, const Vector& query) {
    if (query.size() != memory.key_dim()) {
        throw DimensionMismatch("query length " + std::to_string(query.size()) + " vs memory " +
                                shape(memory.W));
    }
    return memory.W * query;
}

Covariance covariance(const KeySet& keys, const CovarianceOptions& options) {
    return Covariance::from_keys(keys, options);
}

double whitening_similarity(const Vector& k1, const Vector& k2, const Covariance& cov) {
    if (k1.size() != cov.dim() || k2.size() != cov.dim()) {
        throw DimensionMismatch("whitening similarity needs keys of length " + std::to_string(cov.dim()));
    }
    return k1.dot(cov.inverse() * k2);
}

Vector pseudoinverse_coefficients(const KeySet& keys, const Vector& query) {
    if (query.size() != keys.dim()) throw DimensionMismatch("query does not match key dimension");
    if (!keys.full_row_rank()) throw RankDeficient("K does not have full row rank");
    const Matrix& k = keys.data;
    const Matrix kkt = k * k.transpose();
    if (spd_condition(kkt) <= 1e8) {
        Eigen::LLT<Matrix> llt(kkt);
        return k.transpose() * llt.solve(query);
    }
    Eigen::CompleteOrthogonalDecomposition<Matrix> cod(k);
    return cod.solve(query);
}

Vector fuzzy_value(const ValueSet& values, const Vector& alpha) {
    if (alpha.size() != values.count()) {
        throw DimensionMismatch("alpha has " + std::to_string(alpha.size()) + " entries for " +
                                std::to_string(values.count()) + " values");
    }
    return values.data * alpha;
}

}  // namespace kvedit
