#include "kvedit/rep_adaptor.hpp"

#include "kvedit/errors.hpp"
#include "kvedit/json_util.hpp"
#include "kvedit/matrix_io.hpp"

#include <cmath>
#include <numbers>

namespace kvedit {

int gate_hidden_size(int dim, double ratio) {
    return std::max(1, static_cast<int>(std::lround(ratio * dim)));
}

void AdaptorParams::validate() const {
    const Index d = dim(), h = hidden(), r = rank();
    if (gate_in_bias.size() != h || gate_out.size() != h) throw DimensionMismatch("gate shapes inconsistent");
    if (proj_down.cols() != d || proj_down_bias.size() != r || proj_up.rows() != d || proj_up.cols() != r ||
        proj_up_bias.size() != d) {
        throw DimensionMismatch("projection shapes inconsistent");
    }
    if (!(dropout_rate >= 0.0 && dropout_rate <= 1.0)) throw OutOfRange("dropout rate must lie in [0,1]");
    if (!(tau >= 0.0 && tau <= 1.0)) throw OutOfRange("tau must lie in [0,1]");
}

bool AdaptorParams::all_finite() const {
    return gate_in.allFinite() && gate_in_bias.allFinite() && gate_out.allFinite() && std::isfinite(gate_out_bias) &&
           proj_down.allFinite() && proj_down_bias.allFinite() && proj_up.allFinite() && proj_up_bias.allFinite();
}

AdaptorParams AdaptorParams::zeros(Index dim, Index hidden, Index rank) {
    AdaptorParams p;
    p.gate_in = Matrix::Zero(hidden, dim);
    p.gate_in_bias = Vector::Zero(hidden);
    p.gate_out = Vector::Zero(hidden);
    p.proj_down = Matrix::Zero(rank, dim);
    p.proj_down_bias = Vector::Zero(rank);
    p.proj_up = Matrix::Zero(dim, rank);
    p.proj_up_bias = Vector::Zero(dim);
    return p;
}

std::pair<Index, Index> block_range(const AdaptorParams& p, ParamBlock block) {
    const Index d = p.dim(), h = p.hidden(), r = p.rank();
    const Index sizes[4] = {h * d + h, h + 1, r * d + r, d * r + d};
    Index begin = 0;
    for (int b = 0; b < static_cast<int>(block); ++b) begin += sizes[b];
    return {begin, begin + sizes[static_cast<int>(block)]};
}

Vector flatten(const AdaptorParams& p) {
    const Index total = block_range(p, ParamBlock::ProjUp).second;
    Vector v(total);
    Index o = 0;
    auto put = [&](const auto& m) {
        for (Index c = 0; c < m.cols(); ++c)
            for (Index r = 0; r < m.rows(); ++r) v(o++) = m(r, c);
    };
    put(p.gate_in);
    put(p.gate_in_bias);
    put(p.gate_out);
    v(o++) = p.gate_out_bias;
    put(p.proj_down);
    put(p.proj_down_bias);
    put(p.proj_up);
    put(p.proj_up_bias);
    return v;
}

void unflatten(AdaptorParams& p, const Vector& v) {
    if (v.size() != block_range(p, ParamBlock::ProjUp).second) throw DimensionMismatch("flat parameter length");
    Index o = 0;
    auto take = [&](auto& m) {
        for (Index c = 0; c < m.cols(); ++c)
            for (Index r = 0; r < m.rows(); ++r) m(r, c) = v(o++);
    };
    take(p.gate_in);
    take(p.gate_in_bias);
    take(p.gate_out);
    p.gate_out_bias = v(o++);
    take(p.proj_down);
    take(p.proj_down_bias);
    take(p.proj_up);
    take(p.proj_up_bias);
}

AdaptorParams init_adaptor(int dim, const AdaptorInit& init, Rng& rng) {
    const int h = gate_hidden_size(dim, init.gate_ratio);
    AdaptorParams p = AdaptorParams::zeros(dim, h, init.rank);
    p.gate_in = rng.normal_matrix(h, dim, init.gate_in_std);
    p.gate_out = rng.normal_vector(h, init.gate_out_std);
    p.gate_out_bias = init.gate_out_bias;
    p.proj_down = rng.normal_matrix(init.rank, dim, init.proj_down_std);
    p.proj_up = rng.normal_matrix(dim, init.rank, init.proj_up_std);
    return p;
}

double gelu(double x) { return 0.5 * x * (1.0 + std::erf(x / std::numbers::sqrt2)); }

double gelu_derivative(double x) {
    const double cdf = 0.5 * (1.0 + std::erf(x / std::numbers::sqrt2));
    const double pdf = std::exp(-0.5 * x * x) / std::sqrt(2.0 * std::numbers::pi);
    return cdf + x * pdf;
}

double sigmoid(double x) {
    if (x >= 0) return 1.0 / (1.0 + std::exp(-x));
    const double e = std::exp(x);
    return e / (1.0 + e);
}

namespace {

void check_dim(const AdaptorParams& p, const Vector& k) {
    if (k.size() != p.dim()) {
        throw DimensionMismatch("key length " + std::to_string(k.size()) + ", adaptor dim " + std::to_string(p.dim()));
    }
}

}  // namespace

double gate(const AdaptorParams& p, const Vector& k) {
    check_dim(p, k);
    const Vector pre = p.gate_in * k + p.gate_in_bias;
    const Vector h = pre.unaryExpr([](double x) { return gelu(x); });
    return sigmoid(p.gate_out.dot(h) + p.gate_out_bias);
}

Vector dropout_mask(Index dim, double rate, Rng& rng) {
    if (rate <= 0.0) return Vector::Ones(dim);
    if (rate >= 1.0) return Vector::Zero(dim);
    Vector m(dim);
    for (Index i = 0; i < dim; ++i) m(i) = rng.bernoulli(rate) ? 0.0 : 1.0 / (1.0 - rate);
    return m;
}

Vector projection_masked(const AdaptorParams& p, const Vector& k, const Vector& mask) {
    check_dim(p, k);
    return p.proj_up * (p.proj_down * k.cwiseProduct(mask) + p.proj_down_bias) + p.proj_up_bias;
}

Vector projection(const AdaptorParams& p, const Vector& k, bool training, Rng* rng) {
    check_dim(p, k);
    if (training && p.dropout_rate > 0.0) {
        if (p.dropout_rate >= 1.0) return projection_masked(p, k, Vector::Zero(k.size()));
        if (rng) return projection_masked(p, k, dropout_mask(k.size(), p.dropout_rate, *rng));
    }
    return p.proj_up * (p.proj_down * k + p.proj_down_bias) + p.proj_up_bias;
}

Vector forward(const AdaptorParams& p, const Vector& k, AdaptorMode mode, double tau, Rng* rng) {
    check_dim(p, k);
    const double g = gate(p, k);
    if (mode == AdaptorMode::Train) return g * projection(p, k, true, rng) + k;
    if (!(tau >= 0.0)) throw OutOfRange("tau must be non-negative");
    if (g < tau) return k;
    return projection(p, k, false) + k;
}

double rep_loss(const Vector& k_hat, const Vector& k_star, const Covariance& cov) {
    const double n = k_hat.norm();
    if (!(n > 0.0)) throw ZeroVector("adapted key has zero norm");
    return -std::abs((k_hat / n).dot(cov.whiten(k_star)));
}

double rep_objective(const AdaptorParams& p, std::span<const TrainingGroup> groups, const Covariance& cov,
                     AdaptorParams* grad, const std::vector<Vector>* masks) {
    if (grad) *grad = AdaptorParams::zeros(p.dim(), p.hidden(), p.rank());
    double total = 0.0;
    std::size_t count = 0;
    for (const auto& group : groups) {
        const Vector u = cov.whiten(group.k_star);
        for (const auto& k : group.keys) {
            check_dim(p, k);
            const Vector x = masks ? Vector(k.cwiseProduct(masks->at(count))) : k;
            // Forward.
            const Vector pre = p.gate_in * k + p.gate_in_bias;
            const Vector h = pre.unaryExpr([](double v) { return gelu(v); });
            const double g = sigmoid(p.gate_out.dot(h) + p.gate_out_bias);
            const Vector hp = p.proj_down * x + p.proj_down_bias;
            const Vector proj = p.proj_up * hp + p.proj_up_bias;
            const Vector kh = g * proj + k;
            const double n = kh.norm();
            if (!(n > 0.0)) throw ZeroVector("adapted key has zero norm");
            const Vector nh = kh / n;
            const double s = nh.dot(u);
            total += -std::abs(s);
            ++count;
            if (!grad) continue;

            // Reverse pass. d|s|/ds is taken as 0 at s == 0.
            const double sign = s > 0 ? 1.0 : (s < 0 ? -1.0 : 0.0);
            const Vector dnh = -sign * u;
            const Vector dkh = (dnh - dnh.dot(nh) * nh) / n;
            const double dg = dkh.dot(proj);
            const Vector dproj = g * dkh;
            grad->proj_up.noalias() += dproj * hp.transpose();
            grad->proj_up_bias += dproj;
            const Vector dhp = p.proj_up.transpose() * dproj;
            grad->proj_down.noalias() += dhp * x.transpose();
            grad->proj_down_bias += dhp;
            const double dout = dg * g * (1.0 - g);
            grad->gate_out += dout * h;
            grad->gate_out_bias += dout;
            const Vector dpre = (dout * p.gate_out).cwiseProduct(pre.unaryExpr([](double v) { return gelu_derivative(v); }));
            grad->gate_in.noalias() += dpre * k.transpose();
            grad->gate_in_bias += dpre;
        }
    }
    if (count == 0) throw EmptyInput("no training keys");
    const double inv = 1.0 / double(count);
    if (grad) {
        grad->gate_in *= inv;
        grad->gate_in_bias *= inv;
        grad->gate_out *= inv;
        grad->gate_out_bias *= inv;
        grad->proj_down *= inv;
        grad->proj_down_bias *= inv;
        grad->proj_up *= inv;
        grad->proj_up_bias *= inv;
    }
    return total * inv;
}

void TrainConfig::validate() const {
    if (!(learning_rate > 0.0)) throw OutOfRange("learning rate must be positive");
    if (steps < 1) throw OutOfRange("training needs at least one step");
    if (!(dropout_rate >= 0.0 && dropout_rate <= 1.0)) throw OutOfRange("dropout rate must lie in [0,1]");
    if (!(tau >= 0.0 && tau <= 1.0)) throw OutOfRange("tau must lie in [0,1]");
}

nlohmann::json TrainConfig::to_json() const {
    return {{"learning_rate", learning_rate},
            {"steps", steps},
            {"beta1", beta1},
            {"beta2", beta2},
            {"adam_eps", adam_eps},
            {"dropout_rate", dropout_rate},
            {"seed", seed},
            {"tau", tau},
            {"init",
             {{"rank", init.rank},
              {"gate_ratio", init.gate_ratio},
              {"gate_in_std", init.gate_in_std},
              {"gate_out_std", init.gate_out_std},
              {"gate_out_bias", init.gate_out_bias},
              {"proj_down_std", init.proj_down_std},
              {"proj_up_std", init.proj_up_std}}}};
}

TrainConfig TrainConfig::from_json(const nlohmann::json& j) {
    TrainConfig c;
    reject_unknown_keys(j, c.to_json(), "training");
    c.learning_rate = j.value("learning_rate", c.learning_rate);
    c.steps = j.value("steps", c.steps);
    c.beta1 = j.value("beta1", c.beta1);
    c.beta2 = j.value("beta2", c.beta2);
    c.adam_eps = j.value("adam_eps", c.adam_eps);
    c.dropout_rate = j.value("dropout_rate", c.dropout_rate);
    c.seed = j.value("seed", c.seed);
    c.tau = j.value("tau", c.tau);
    if (j.contains("init")) {
        const auto& i = j.at("init");
        c.init.rank = i.value("rank", c.init.rank);
        c.init.gate_ratio = i.value("gate_ratio", c.init.gate_ratio);
        c.init.gate_in_std = i.value("gate_in_std", c.init.gate_in_std);
        c.init.gate_out_std = i.value("gate_out_std", c.init.gate_out_std);
        c.init.gate_out_bias = i.value("gate_out_bias", c.init.gate_out_bias);
        c.init.proj_down_std = i.value("proj_down_std", c.init.proj_down_std);
        c.init.proj_up_std = i.value("proj_up_std", c.init.proj_up_std);
    }
    c.validate();
    return c;
}

TrainResult train_adaptor(std::span<const TrainingGroup> groups, const Covariance& cov, const TrainConfig& config,
                          const AdaptorParams* start) {
    config.validate();
    if (groups.empty() || groups.front().keys.empty()) throw EmptyInput("no training keys");
    Rng rng(config.seed);
    TrainResult r;
    r.params = start ? *start : init_adaptor(static_cast<int>(groups.front().k_star.size()), config.init, rng);
    r.params.dropout_rate = config.dropout_rate;
    r.params.tau = config.tau;
    r.params.validate();

    std::size_t n_keys = 0;
    for (const auto& g : groups) n_keys += g.keys.size();

    Vector theta = flatten(r.params);
    Vector m = Vector::Zero(theta.size());
    Vector v = Vector::Zero(theta.size());
    AdaptorParams grad;
    for (int t = 1; t <= config.steps; ++t) {
        std::vector<Vector> masks;
        if (config.dropout_rate > 0.0) {
            for (std::size_t i = 0; i < n_keys; ++i) masks.push_back(dropout_mask(r.params.dim(), config.dropout_rate, rng));
        }
        const double loss = rep_objective(r.params, groups, cov, &grad, masks.empty() ? nullptr : &masks);
        r.loss_trace.push_back(loss);
        const Vector g = flatten(grad);
        m = config.beta1 * m + (1.0 - config.beta1) * g;
        v = config.beta2 * v + (1.0 - config.beta2) * g.cwiseProduct(g);
        const double c1 = 1.0 - std::pow(config.beta1, t);
        const double c2 = 1.0 - std::pow(config.beta2, t);
        theta -= config.learning_rate * ((m / c1).array() / ((v / c2).array().sqrt() + config.adam_eps)).matrix();
        unflatten(r.params, theta);
        if (!r.params.all_finite()) throw NonFinite("adaptor parameters diverged at step " + std::to_string(t));
    }
    r.loss_trace.push_back(rep_objective(r.params, groups, cov));
    return r;
}

TrainResult train_adaptor(std::span<const Vector> keys, const Vector& k_star, const Covariance& cov,
                          const TrainConfig& config) {
    const TrainingGroup group{std::vector<Vector>(keys.begin(), keys.end()), k_star};
    return train_adaptor(std::span<const TrainingGroup>(&group, 1), cov, config);
}

double mean_abs_similarity(const AdaptorParams* p, std::span<const Vector> keys, const Vector& k_star,
                           const Covariance& cov) {
    if (keys.empty()) throw EmptyInput("no keys");
    double sum = 0.0;
    for (const auto& k : keys) {
        const Vector kh = p ? forward(*p, k, AdaptorMode::Train) : k;
        sum += -rep_loss(kh, k_star, cov);
    }
    return sum / double(keys.size());
}

Matrix composed_projection(const AdaptorParams& p) { return p.proj_up * p.proj_down; }

void save_adaptor(const std::filesystem::path& dir, const AdaptorParams& p, const nlohmann::json& extra) {
    std::filesystem::create_directories(dir);
    write_aelm(dir / "gate_in.aelm", p.gate_in);
    write_aelm(dir / "gate_in_bias.aelm", p.gate_in_bias);
    write_aelm(dir / "gate_out.aelm", p.gate_out);
    write_aelm(dir / "proj_down.aelm", p.proj_down);
    write_aelm(dir / "proj_down_bias.aelm", p.proj_down_bias);
    write_aelm(dir / "proj_up.aelm", p.proj_up);
    write_aelm(dir / "proj_up_bias.aelm", p.proj_up_bias);
    nlohmann::json manifest = extra.is_object() ? extra : nlohmann::json::object();
    manifest["format"] = "kvedit-adaptor";
    manifest["version"] = 1;
    manifest["dim"] = p.dim();
    manifest["gate_hidden"] = p.hidden();
    manifest["rank"] = p.rank();
    manifest["tau"] = p.tau;
    manifest["dropout_rate"] = p.dropout_rate;
    manifest["gate_out_bias"] = p.gate_out_bias;
    write_json_file(dir / "manifest.json", manifest);
}

AdaptorParams load_adaptor(const std::filesystem::path& dir) {
    const nlohmann::json manifest = read_json_file(dir / "manifest.json");
    if (manifest.value("format", std::string{}) != "kvedit-adaptor") throw MalformedDump("not an adaptor manifest");
    AdaptorParams p;
    p.gate_in = read_aelm(dir / "gate_in.aelm");
    p.gate_in_bias = read_aelm(dir / "gate_in_bias.aelm");
    p.gate_out = read_aelm(dir / "gate_out.aelm");
    p.proj_down = read_aelm(dir / "proj_down.aelm");
    p.proj_down_bias = read_aelm(dir / "proj_down_bias.aelm");
    p.proj_up = read_aelm(dir / "proj_up.aelm");
    p.proj_up_bias = read_aelm(dir / "proj_up_bias.aelm");
    p.gate_out_bias = manifest.at("gate_out_bias").get<double>();
    p.tau = manifest.at("tau").get<double>();
    p.dropout_rate = manifest.at("dropout_rate").get<double>();
    p.validate();
    if (p.dim() != manifest.at("dim").get<Index>() || p.rank() != manifest.at("rank").get<Index>()) {
        throw ConfigMismatch("adaptor manifest disagrees with stored matrices");
    }
    return p;
}

}  // namespace kvedit
