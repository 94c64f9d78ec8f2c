#include "kvedit/random.hpp"

#include <algorithm>
#include <numeric>

namespace kvedit {

Rng::Rng(std::uint64_t seed, std::uint64_t stream) {
    std::seed_seq seq{static_cast<std::uint32_t>(seed), static_cast<std::uint32_t>(seed >> 32),
                      static_cast<std::uint32_t>(stream), static_cast<std::uint32_t>(stream >> 32), 0x6b76u};
    engine_.seed(seq);
}

std::int64_t Rng::integer(std::int64_t lo, std::int64_t hi) {
    std::uniform_int_distribution<std::int64_t> d(lo, hi);
    return d(engine_);
}

Vector Rng::normal_vector(Index n, double stddev) {
    Vector v(n);
    for (Index i = 0; i < n; ++i) v(i) = stddev * normal();
    return v;
}

Matrix Rng::normal_matrix(Index rows, Index cols, double stddev) {
    Matrix m(rows, cols);
    // Column by column so the draw order matches the column-major contract.
    for (Index c = 0; c < cols; ++c) {
        for (Index r = 0; r < rows; ++r) m(r, c) = stddev * normal();
    }
    return m;
}

Matrix Rng::orthogonal(Index n) {
    const Matrix g = normal_matrix(n, n);
    Eigen::HouseholderQR<Matrix> qr(g);
    Matrix q = qr.householderQ() * Matrix::Identity(n, n);
    const Matrix r = qr.matrixQR().triangularView<Eigen::Upper>();
    for (Index i = 0; i < n; ++i) {
        if (r(i, i) < 0) q.col(i) *= -1.0;
    }
    return q;
}

std::vector<Index> Rng::permutation(Index n) {
    std::vector<Index> p(static_cast<std::size_t>(n));
    std::iota(p.begin(), p.end(), Index{0});
    // Fisher-Yates with our own integer draws; std::shuffle's algorithm is
    // unspecified across standard libraries.
    for (Index i = n - 1; i > 0; --i) {
        const auto j = static_cast<Index>(integer(0, i));
        std::swap(p[static_cast<std::size_t>(i)], p[static_cast<std::size_t>(j)]);
    }
    return p;
}

}  // namespace kvedit
