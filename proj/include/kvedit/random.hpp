#pragma once

#include "kvedit/memory_core.hpp"

#include <cstdint>
#include <random>
#include <vector>

namespace kvedit {

// Thin wrapper over a 64-bit Mersenne twister. Every random quantity in the
// library is drawn through one of these so a seed fully determines a run.
class Rng {
public:
    explicit Rng(std::uint64_t seed) : engine_(seed) {}
    // Independent stream for (seed, stream) pairs, e.g. one per subject.
    Rng(std::uint64_t seed, std::uint64_t stream);

    double normal() { return normal_(engine_); }
    double uniform(double lo, double hi) { return lo + (hi - lo) * unit_(engine_); }
    double uniform() { return unit_(engine_); }
    // Integer in [lo, hi].
    std::int64_t integer(std::int64_t lo, std::int64_t hi);
    bool bernoulli(double p) { return unit_(engine_) < p; }

    Vector normal_vector(Index n, double stddev = 1.0);
    Matrix normal_matrix(Index rows, Index cols, double stddev = 1.0);
    // Haar-distributed orthogonal matrix (QR of a Gaussian, signs fixed).
    Matrix orthogonal(Index n);
    std::vector<Index> permutation(Index n);

    std::mt19937_64& engine() { return engine_; }

private:
    std::mt19937_64 engine_;
    std::normal_distribution<double> normal_{0.0, 1.0};
    std::uniform_real_distribution<double> unit_{0.0, 1.0};
};

}  // namespace kvedit
