#pragma once

#include "kvedit/memory_core.hpp"
#include "kvedit/random.hpp"
#include "kvedit/readout_model.hpp"

#include <cmath>
#include <filesystem>
#include <fstream>
#include <iterator>
#include <string>

namespace testing {

using kvedit::Index;
using kvedit::Matrix;
using kvedit::Vector;

inline double rel_err(const Matrix& a, const Matrix& b) {
    const double scale = std::max({a.norm(), b.norm(), 1e-300});
    return (a - b).norm() / scale;
}

// Symmetric positive definite matrix with eigenvalues in [lo, hi].
inline Matrix random_spd(Index d, kvedit::Rng& rng, double lo = 0.5, double hi = 4.0) {
    const Matrix q = rng.orthogonal(d);
    Vector ev(d);
    for (Index i = 0; i < d; ++i) ev(i) = rng.uniform(lo, hi);
    return q * ev.asDiagonal() * q.transpose();
}

// Small readout with random orthogonal attention maps and Gaussian embeddings.
inline kvedit::ReadoutModel random_readout(Index d, Index vocab, kvedit::Rng& rng, int n_context = 2,
                                           double out_scale = 1.0) {
    kvedit::ReadoutModel m;
    m.W_Q = rng.orthogonal(d);
    m.W_K = rng.orthogonal(d);
    m.W_V = rng.orthogonal(d);
    m.q = rng.normal_vector(d, 0.3);
    m.W_out = rng.normal_matrix(vocab, d, out_scale);
    for (Index t = 0; t < vocab; ++t) m.vocab.push_back("t" + std::to_string(t));
    for (int i = 0; i < n_context; ++i) m.context_values.push_back(rng.normal_vector(d, 0.2));
    return m;
}

inline std::string slurp(const std::filesystem::path& p) {
    std::ifstream f(p, std::ios::binary);
    return {std::istreambuf_iterator<char>(f), std::istreambuf_iterator<char>()};
}

// Fresh scratch directory under the system temp dir.
inline std::filesystem::path scratch(const std::string& name) {
    const auto dir = std::filesystem::temp_directory_path() / ("kvedit_test_" + name);
    std::filesystem::remove_all(dir);
    std::filesystem::create_directories(dir);
    return dir;
}

}  // namespace testing
