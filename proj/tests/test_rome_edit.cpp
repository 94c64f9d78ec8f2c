#include "kvedit/errors.hpp"
#include "kvedit/rome_edit.hpp"
#include "kvedit/synthetic_world.hpp"
#include "support.hpp"

#include <doctest.h>

#include <numbers>

using namespace kvedit;
using testing::rel_err;

namespace {

struct Instance {
    MemoryMatrix memory;
    Covariance cov;
    Vector k_star;
    Vector v_star;
};

Instance random_instance(std::uint64_t seed, Index d_key, Index d_val) {
    Rng rng(seed);
    Instance in{MemoryMatrix{rng.normal_matrix(d_val, d_key)}, Covariance::from_matrix(testing::random_spd(d_key, rng)),
                rng.normal_vector(d_key), rng.normal_vector(d_val)};
    return in;
}

EditRequest request_for(const Vector& k_star) {
    EditRequest r;
    r.k_star = k_star;
    r.subject_contexts = {k_star};
    r.target_token = 1;
    r.original_token = 0;
    return r;
}

// Rows of the update decouple: min d^T C d subject to d^T k* = r_i. Solved
// through the KKT system [2C k*; k*^T 0] [d; mu] = [0; r_i].
Matrix kkt_minimiser(const Matrix& c, const Vector& k_star, const Vector& residual) {
    const Index d = c.rows();
    Matrix kkt = Matrix::Zero(d + 1, d + 1);
    kkt.topLeftCorner(d, d) = 2.0 * c;
    kkt.topRightCorner(d, 1) = k_star;
    kkt.bottomLeftCorner(1, d) = k_star.transpose();
    const auto lu = kkt.fullPivLu();
    Matrix delta(residual.size(), d);
    for (Index i = 0; i < residual.size(); ++i) {
        Vector rhs = Vector::Zero(d + 1);
        rhs(d) = residual(i);
        delta.row(i) = lu.solve(rhs).head(d).transpose();
    }
    return delta;
}

double weighted_norm(const Matrix& delta, const Matrix& c) {
    const Eigen::SelfAdjointEigenSolver<Matrix> eig(c);
    const Matrix root = eig.eigenvectors() * eig.eigenvalues().cwiseSqrt().asDiagonal() * eig.eigenvectors().transpose();
    return (delta * root).norm();
}

}  // namespace

TEST_CASE("extract_key") {
    Rng rng(2);
    const Vector k = rng.normal_vector(3);
    const std::vector<Vector> one = {k};
    CHECK((extract_key(one) - k).norm() == 0.0);

    const std::vector<Vector> two = {Vector::Unit(2, 0), Vector::Unit(2, 1)};
    CHECK((extract_key(two) - Vector::Constant(2, 0.5)).norm() == 0.0);

    std::vector<Vector> ten;
    for (int i = 0; i < 10; ++i) ten.push_back(rng.normal_vector(6));
    Vector running = Vector::Zero(6);
    for (const auto& c : ten) running += c;
    CHECK((extract_key(ten) - running / 10.0).norm() < 1e-12);

    CHECK_THROWS_AS(extract_key(std::vector<Vector>{}), EmptyInput);
    const std::vector<Vector> ragged = {Vector::Ones(2), Vector::Ones(3)};
    CHECK_THROWS_AS(extract_key(ragged), DimensionMismatch);
}

TEST_CASE("compute_lambda") {
    SUBCASE("no-op edit") {
        const Instance in = random_instance(4, 5, 3);
        const Vector v = retrieve(in.memory, in.k_star);
        CHECK(compute_lambda(in.memory, in.cov, in.k_star, v).lambda.norm() == 0.0);
    }
    SUBCASE("unit denominator") {
        const Covariance id = Covariance::from_matrix(Matrix::Identity(3, 3));
        const Vector u = Vector::LinSpaced(2, 1.0, 2.0);
        const LambdaResult r = compute_lambda(MemoryMatrix{Matrix::Zero(2, 3)}, id, Vector::Unit(3, 0), u);
        CHECK(r.denominator == 1.0);
        CHECK((r.lambda - u).norm() == 0.0);
    }
    SUBCASE("substitution recovers v*") {
        const Instance in = random_instance(4, 6, 4);
        const LambdaResult r = compute_lambda(in.memory, in.cov, in.k_star, in.v_star);
        const Matrix w_hat = in.memory.W + r.lambda * (in.cov.inverse() * in.k_star).transpose();
        CHECK(rel_err(w_hat * in.k_star, in.v_star) < 1e-8);
    }
    SUBCASE("degenerate key") {
        const Instance in = random_instance(4, 4, 2);
        CHECK_THROWS_AS(compute_lambda(in.memory, in.cov, Vector::Zero(4), in.v_star), DegenerateKey);
        CHECK_THROWS_AS(compute_lambda(in.memory, in.cov, Vector::Constant(4, 1e-8), in.v_star), DegenerateKey);
    }
}

TEST_CASE("apply_edit: structure of the update") {
    const Instance in = random_instance(21, 6, 5);
    const EditRequest req = request_for(in.k_star);

    SUBCASE("no-op edit leaves W unchanged") {
        const EditResult r = apply_edit(in.memory, in.cov, req, retrieve(in.memory, in.k_star));
        CHECK(r.W_hat.W == in.memory.W);
    }
    SUBCASE("rank one, exact at k*, functional") {
        const Matrix before = in.memory.W;
        const EditResult r = apply_edit(in.memory, in.cov, req, in.v_star);
        CHECK(numerical_rank(r.W_hat.W - in.memory.W, 1e-8) == 1);
        CHECK((retrieve(r.W_hat, in.k_star) - in.v_star).norm() < 1e-6 * in.v_star.norm());
        CHECK(in.memory.W == before);
        CHECK(r.W_hat.edit_count == in.memory.edit_count + 1);
        CHECK(r.W_hat.edited());
        CHECK(r.delta_v_norm == doctest::Approx((in.v_star - in.memory.W * in.k_star).norm()));
        const EditResult again = apply_edit(r.W_hat, in.cov, req, in.v_star);
        CHECK(again.W_hat.edit_count == 2);
    }
    SUBCASE("C^-1-orthogonal stored keys are untouched") {
        Rng rng(5);
        const Matrix c_inv = in.cov.matrix().fullPivLu().inverse();
        const Vector r = rng.normal_vector(6);
        const Vector k_j = r - (in.k_star.dot(c_inv * r) / in.k_star.dot(c_inv * in.k_star)) * in.k_star;
        const EditResult e = apply_edit(in.memory, in.cov, req, in.v_star);
        CHECK((retrieve(e.W_hat, k_j) - retrieve(in.memory, k_j)).norm() < 1e-9);
    }
    SUBCASE("invalid requests") {
        EditRequest bad = req;
        bad.subject_contexts.clear();
        CHECK_THROWS_AS(apply_edit(in.memory, in.cov, bad, in.v_star), EmptyInput);
        bad = req;
        bad.k_star(0) = std::numeric_limits<double>::infinity();
        CHECK_THROWS_AS(apply_edit(in.memory, in.cov, bad, in.v_star), NonFinite);
    }
}

TEST_CASE("apply_edit: exactness over many random edits") {
    for (std::uint64_t seed = 0; seed < 200; ++seed) {
        const Instance in = random_instance(seed, 2 + seed % 12, 1 + seed % 9);
        const EditResult r = apply_edit(in.memory, in.cov, request_for(in.k_star), in.v_star);
        CHECK((retrieve(r.W_hat, in.k_star) - in.v_star).norm() < 1e-6 * in.v_star.norm());
    }
}

TEST_CASE("apply_edit: the update is the C-weighted minimum-norm solution") {
    for (std::uint64_t seed = 0; seed < 40; ++seed) {
        const Index d = 2 + seed % 5;  // D1 in [2, 6]
        const Instance in = random_instance(100 + seed, d, 3);
        const EditResult r = apply_edit(in.memory, in.cov, request_for(in.k_star), in.v_star);
        const Matrix delta = r.W_hat.W - in.memory.W;
        const Matrix oracle = kkt_minimiser(in.cov.matrix(), in.k_star, in.v_star - in.memory.W * in.k_star);
        const double ours = weighted_norm(delta, in.cov.matrix());
        const double best = weighted_norm(oracle, in.cov.matrix());
        CHECK(std::abs(ours - best) < 1e-5 * std::max(1.0, best));
        CHECK(rel_err(delta, oracle) < 1e-5);
    }
}

TEST_CASE("patch property: the edit adds s * Lambda at every query") {
    for (std::uint64_t seed = 0; seed < 10; ++seed) {
        const Instance in = random_instance(300 + seed, 8, 5);
        const EditResult r = apply_edit(in.memory, in.cov, request_for(in.k_star), in.v_star);
        Rng rng(seed);
        for (int q = 0; q < 100; ++q) {
            const Vector k = rng.normal_vector(8);
            const Vector diff = retrieve(r.W_hat, k) - retrieve(in.memory, k);
            const Vector want = whitening_similarity(k, in.k_star, in.cov) * r.lambda;
            CHECK((diff - want).norm() < 1e-8 * std::max(1.0, want.norm()));
        }
    }
}

TEST_CASE("JSON schema of edit requests and results") {
    const Instance in = random_instance(8, 3, 2);
    EditRequest req = request_for(in.k_star);
    req.subject_contexts.push_back(in.k_star * 2.0);
    const EditRequest back = edit_request_from_json(edit_request_to_json(req));
    CHECK(back.k_star == req.k_star);
    CHECK(back.subject_contexts.size() == 2);
    CHECK(back.target_token == req.target_token);
    CHECK(back.original_token == req.original_token);

    const EditResult r = apply_edit(in.memory, in.cov, req, in.v_star);
    const auto j = r.to_json();
    for (const char* key : {"k_star", "v_star", "lambda", "target_token", "delta_v_norm"}) CHECK(j.contains(key));
    CHECK(j.at("k_star").is_array());
    CHECK(j.at("lambda").size() == 2);
    CHECK(j.at("delta_v_norm").get<double>() == r.delta_v_norm);
}

TEST_CASE("optimize_value: two tokens, no anchor, agrees with a grid search") {
    Rng rng(31);
    ReadoutModel model = testing::random_readout(2, 2, rng, 0, 1.0);
    model.assume_located_dominance = true;
    const MemoryMatrix memory{rng.normal_matrix(2, 2)};
    const Vector k_star = rng.normal_vector(2);
    const Vector z0 = retrieve(memory, k_star);
    const Vector pre = readout_logits(model, z0);
    const Index target = pre(0) > pre(1) ? 1 : 0;

    ValueOptConfig cfg;
    cfg.steps = 200;
    cfg.kl_weight = 0.0;
    const ValueOptResult r = optimize_value(model, memory, k_star, target, {}, cfg);
    CHECK(r.target_probability >= 0.99);

    // Best direction of travel on a fine grid of angles at the achieved radius.
    const Vector step = r.z - z0;
    const double radius = step.norm();
    // The target probability saturates at 1 in double precision, so rank the
    // angles by the logit margin, which is monotone in it.
    auto margin = [&](const Vector& z) {
        const Vector l = readout_logits(model, z);
        return l(target) - l(1 - target);
    };
    double best_angle = 0.0, best_m = -1e300;
    const int n = 7200;
    for (int i = 0; i < n; ++i) {
        const double a = 2.0 * std::numbers::pi * i / n;
        const Vector z = z0 + radius * Vector::Map(std::array{std::cos(a), std::sin(a)}.data(), 2);
        const double m = margin(z);
        if (m > best_m) best_m = m, best_angle = a;
    }
    const Vector best_dir = Vector::Map(std::array{std::cos(best_angle), std::sin(best_angle)}.data(), 2);
    CHECK(step.normalized().dot(best_dir) > std::cos(3.0 * 2.0 * std::numbers::pi / n));
    CHECK(margin(r.z) >= best_m - 1e-6 * std::abs(best_m));
}

TEST_CASE("optimize_value: a heavy anchor keeps a confident value in place") {
    Rng rng(32);
    ReadoutModel model = testing::random_readout(4, 5, rng, 2, 1.0);
    const MemoryMatrix memory{rng.normal_matrix(4, 4)};
    const Vector k_star = rng.normal_vector(4);
    const Vector z0 = retrieve(memory, k_star);
    // Sharpen the readout until the stored value is confidently top-1.
    Index target = 0;
    for (int i = 0; i < 40; ++i) {
        const Vector p = softmax(readout_logits(model, z0));
        p.maxCoeff(&target);
        if (p(target) >= 0.99) break;
        model.W_out *= 1.5;
    }
    REQUIRE(softmax(readout_logits(model, z0))(target) >= 0.99);
    std::vector<Vector> essence;
    for (int i = 0; i < 3; ++i) essence.push_back(k_star + 0.05 * rng.normal_vector(4));

    ValueOptConfig cfg;
    cfg.kl_weight = 1e3;
    const ValueOptResult r = optimize_value(model, memory, k_star, target, essence, cfg);
    CHECK((r.z - z0).norm() < 1e-3);
}

TEST_CASE("optimize_value: loss trace never increases on a synthetic world") {
    const World w = generate_world(WorldConfig{}, 3);
    const BuiltModel b = build_model(w);
    for (int i = 0; i < 5; ++i) {
        const int s = b.retained[static_cast<std::size_t>(i)];
        const auto& cl = w.clusters[s];
        const Vector k_star = extract_key(cl.contexts);
        const ValueOptResult r =
            optimize_value(b.stack.readout, b.stack.memory, k_star, w.triples[s].new_tail, cl.essence_queries);
        REQUIRE(r.loss_trace.size() >= 2);
        for (std::size_t t = 1; t < r.loss_trace.size(); ++t) CHECK(r.loss_trace[t] <= r.loss_trace[t - 1]);
        CHECK(r.loss_trace.back() < r.loss_trace.front());
    }
}

TEST_CASE("value_loss gradient matches finite differences") {
    Rng rng(33);
    const ReadoutModel model = testing::random_readout(5, 7, rng, 2, 1.0);
    const MemoryMatrix memory{rng.normal_matrix(5, 5)};
    const Vector k_star = rng.normal_vector(5);
    std::vector<Vector> essence = {rng.normal_vector(5), rng.normal_vector(5)};
    const Vector z = rng.normal_vector(5);
    Vector g;
    value_loss(model, memory, k_star, 3, essence, 0.7, z, &g);
    const double h = 1e-6;
    for (Index i = 0; i < 5; ++i) {
        Vector zp = z, zm = z;
        zp(i) += h;
        zm(i) -= h;
        const double fd = (value_loss(model, memory, k_star, 3, essence, 0.7, zp) -
                           value_loss(model, memory, k_star, 3, essence, 0.7, zm)) /
                          (2 * h);
        CHECK(g(i) == doctest::Approx(fd).epsilon(1e-5));
    }
}

TEST_CASE("optimize_value: argument errors") {
    Rng rng(34);
    const ReadoutModel model = testing::random_readout(3, 4, rng);
    const MemoryMatrix memory{rng.normal_matrix(3, 3)};
    CHECK_THROWS_AS(optimize_value(model, memory, Vector::Ones(3), 9, {}), OutOfRange);
    ValueOptConfig zero;
    zero.steps = 0;
    CHECK_THROWS_AS(optimize_value(model, memory, Vector::Ones(3), 1, {}, zero), OutOfRange);
}

TEST_CASE("loud voices: optimised values outgrow the stored ones (seeds 0..49)") {
    double sum_new = 0.0, sum_old = 0.0;
    int n = 0;
    for (std::uint64_t seed = 0; seed < 50; ++seed) {
        const World w = generate_world(WorldConfig{}, seed);
        const BuiltModel b = build_model(w);
        for (int i = 0; i < 4; ++i) {
            const int s = b.retained[static_cast<std::size_t>(i)];
            const auto& cl = w.clusters[s];
            const Vector k_star = extract_key(cl.contexts);
            const ValueOptResult r =
                optimize_value(b.stack.readout, b.stack.memory, k_star, w.triples[s].new_tail, cl.essence_queries);
            sum_new += r.z.norm();
            sum_old += retrieve(b.stack.memory, k_star).norm();
            ++n;
        }
    }
    MESSAGE("mean |v*| = " << sum_new / n << ", mean |W k*| = " << sum_old / n);
    CHECK(sum_new / n > sum_old / n);
}
