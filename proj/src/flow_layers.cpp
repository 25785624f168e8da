#include "x2ct/flow_layers.hpp"

#include <Eigen/Dense>
#include <cmath>

namespace x2ct {

namespace {

std::int64_t spatial_size(const Shape& s) {
    if (s.size() != 4) throw Error("E_SHAPE", "expected a (D,H,W,C) tensor, got " + shape_str(s));
    return s[0] * s[1] * s[2];
}

}  // namespace

FlowVars actnorm_apply(Var x, Var logs, Var bias, Direction dir) {
    Graph& g = *x.g;
    const Shape& s = g.node(x.id).shape;
    const double dhw = static_cast<double>(spatial_size(s));
    Var logdet = scalar_mul(sum_all(logs), dhw);
    if (dir == Direction::Forward) {
        Var y = channel_scale(channel_shift(x, bias), vexp(logs));
        return {y, logdet};
    }
    Var y = channel_shift(channel_scale(x, vexp(neg(logs))), neg(bias));
    return {y, logdet};
}

FlowVars invconv_apply(Var x, Var w, Var w_inv, Direction dir) {
    Graph& g = *x.g;
    const Shape s = g.node(x.id).shape;
    const std::int64_t n = spatial_size(s), c = s[3];
    Var logdet = scalar_mul(logabsdet(w), static_cast<double>(n));
    Var flat = reshape(x, {n, c});
    Var mixed = (dir == Direction::Forward) ? matmul(flat, transpose(w, {1, 0}))
                                            : matmul(flat, transpose(w_inv, {1, 0}));
    return {reshape(mixed, s), logdet};
}

FlowVars coupling_apply(Var x, const CouplingVars& net, Direction dir) {
    Graph& g = *x.g;
    const Shape& s = g.node(x.id).shape;
    const std::int64_t c = s[3];
    if (c % 2 != 0) throw Error("E_SHAPE", "coupling requires an even channel count, got " + shape_str(s));
    Var x1 = slice_channels(x, 0, c / 2);
    Var x2 = slice_channels(x, c / 2, c);
    Var h = conv3d(relu(conv3d(relu(conv3d(x1, net.w1, net.b1)), net.w2, net.b2)), net.w3, net.b3);
    Var h2 = slice_channels(h, 0, c / 2);
    Var t = slice_channels(h, c / 2, c);
    Var scale = scalar_add(sigmoid(scalar_add(h2, -0.1)), 0.6);
    Var logdet = sum_all(vlog(scale));
    Var y2 = (dir == Direction::Forward) ? add(mul(scale, x2), t) : mul(sub(x2, t), recip(scale));
    return {concat_channels(x1, y2), logdet};
}

Var gaussian_logp_map(Var z, Var mean, Var logs) {
    Graph& g = *z.g;
    const double n = static_cast<double>(shape_size(g.node(z.id).shape));
    Var diff = mul(sub(z, mean), vexp(neg(logs)));
    Var quad = scalar_mul(sqnorm(diff), 0.5);
    return scalar_add(neg(add(sum_all(logs), quad)), -0.5 * n * kLn2Pi);
}

Var gaussian_logp_channel(Var z, Var mean_c, Var logs_c) {
    Graph& g = *z.g;
    const Shape& s = g.node(z.id).shape;
    const double n = static_cast<double>(shape_size(s));
    const double dhw = static_cast<double>(spatial_size(s));
    Var diff = channel_scale(channel_shift(z, neg(mean_c)), vexp(neg(logs_c)));
    Var quad = scalar_mul(sqnorm(diff), 0.5);
    return scalar_add(neg(add(scalar_mul(sum_all(logs_c), dhw), quad)), -0.5 * n * kLn2Pi);
}

Var std_normal_logp(Var z) {
    Graph& g = *z.g;
    const double n = static_cast<double>(shape_size(g.node(z.id).shape));
    return scalar_add(scalar_mul(sqnorm(z), -0.5), -0.5 * n * kLn2Pi);
}

GaussianVars split_prior_head(Var kept, Var head_w, Var head_b) {
    Graph& g = *kept.g;
    const std::int64_t c = g.node(kept.id).shape[3];
    Var h = conv3d(kept, head_w, head_b);
    return {slice_channels(h, 0, c), slice_channels(h, c, 2 * c)};
}

CouplingParams CouplingParams::init(std::int64_t channels, std::int64_t width, Rng& rng) {
    if (channels % 2 != 0) throw Error("E_SHAPE", "coupling requires an even channel count");
    const std::int64_t half = channels / 2;
    CouplingParams p;
    p.w1 = rng.normal_tensor({3, 3, 3, half, width}, 0.0, 0.05);
    p.b1 = Tensor::zeros({width});
    p.w2 = rng.normal_tensor({1, 1, 1, width, width}, 0.0, 0.05);
    p.b2 = Tensor::zeros({width});
    p.w3 = Tensor::zeros({3, 3, 3, width, channels});
    p.b3 = Tensor::zeros({channels});
    return p;
}

Tensor random_orthogonal(std::int64_t c, Rng& rng) {
    Eigen::MatrixXd a(c, c);
    for (std::int64_t i = 0; i < c; ++i)
        for (std::int64_t j = 0; j < c; ++j) a(i, j) = rng.normal();
    Eigen::HouseholderQR<Eigen::MatrixXd> qr(a);
    Eigen::MatrixXd q = qr.householderQ();
    Eigen::MatrixXd r = qr.matrixQR().triangularView<Eigen::Upper>();
    for (std::int64_t j = 0; j < c; ++j)
        if (r(j, j) < 0) q.col(j) = -q.col(j);
    std::vector<double> v(static_cast<std::size_t>(c * c));
    for (std::int64_t i = 0; i < c; ++i)
        for (std::int64_t j = 0; j < c; ++j) v[static_cast<std::size_t>(i * c + j)] = q(i, j);
    return Tensor({c, c}, std::move(v));
}

std::pair<Tensor, Tensor> actnorm_init_stats(const std::vector<Tensor>& batch) {
    if (batch.empty()) throw Error("E_STATE", "actnorm initialization requires a non-empty batch");
    const Shape& s = batch.front().shape();
    const std::int64_t c = s.back();
    std::vector<double> mean(static_cast<std::size_t>(c), 0.0);
    std::vector<double> sq(static_cast<std::size_t>(c), 0.0);
    std::int64_t count = 0;
    for (const Tensor& x : batch) {
        if (x.shape() != s) throw Error("E_SHAPE", "inconsistent batch shapes in actnorm initialization");
        for (std::int64_t i = 0; i < x.size(); ++i) {
            const double v = x[i];
            mean[static_cast<std::size_t>(i % c)] += v;
            sq[static_cast<std::size_t>(i % c)] += v * v;
        }
        count += x.size() / c;
    }
    std::vector<double> logs(static_cast<std::size_t>(c)), bias(static_cast<std::size_t>(c));
    for (std::int64_t k = 0; k < c; ++k) {
        const double mu = mean[static_cast<std::size_t>(k)] / static_cast<double>(count);
        const double var = sq[static_cast<std::size_t>(k)] / static_cast<double>(count) - mu * mu;
        const double sigma = std::sqrt(std::max(var, 0.0));
        if (!(sigma > 1e-10))
            throw Error("E_STATE", "degenerate actnorm initialization: channel " + std::to_string(k) +
                                       " has (near-)zero variance");
        logs[static_cast<std::size_t>(k)] = -std::log(sigma);
        bias[static_cast<std::size_t>(k)] = -mu;
    }
    return {Tensor({c}, std::move(logs)), Tensor({c}, std::move(bias))};
}

// --- plain-tensor wrappers ---------------------------------------------------

namespace {

LayerIO run_single(Graph& g, FlowVars out) {
    g.forward();
    return {g.value(out.value), g.value(out.logdet).item()};
}

}  // namespace

LayerIO actnorm_eval(const Tensor& x, const Tensor& scale, const Tensor& bias, Direction dir) {
    if (scale.rank() != 1 || scale.shape() != bias.shape())
        throw Error("E_SHAPE", "actnorm expects per-channel scale and bias");
    std::vector<double> logs(static_cast<std::size_t>(scale.size()));
    for (std::int64_t i = 0; i < scale.size(); ++i) {
        if (!(scale[i] > 0.0)) throw Error("E_RANGE", "actnorm scale must be strictly positive");
        logs[static_cast<std::size_t>(i)] = std::log(scale[i]);
    }
    Graph g;
    Var xv = g.constant(x);
    Var lv = g.constant(Tensor(scale.shape(), std::move(logs)));
    Var bv = g.constant(bias);
    return run_single(g, actnorm_apply(xv, lv, bv, dir));
}

LayerIO invconv_eval(const Tensor& x, const Tensor& w, Direction dir) {
    Graph g;
    Var xv = g.constant(x);
    Var wv = g.constant(w);
    Var wi = g.constant(dir == Direction::Inverse ? matrix_inverse(w) : w);
    return run_single(g, invconv_apply(xv, wv, wi, dir));
}

LayerIO coupling_eval(const Tensor& x, const CouplingParams& p, Direction dir) {
    Graph g;
    Var xv = g.constant(x);
    CouplingVars net{g.constant(p.w1), g.constant(p.b1), g.constant(p.w2),
                     g.constant(p.b2), g.constant(p.w3), g.constant(p.b3)};
    return run_single(g, coupling_apply(xv, net, dir));
}

Tensor squeeze_eval(const Tensor& x, Direction dir) {
    Graph g;
    Var xv = g.constant(x);
    Var y = (dir == Direction::Forward) ? squeeze3d(xv) : unsqueeze3d(xv);
    g.forward();
    return g.value(y);
}

Tensor matrix_inverse(const Tensor& w) {
    if (w.rank() != 2 || w.dim(0) != w.dim(1)) throw Error("E_SHAPE", "matrix_inverse expects a square matrix");
    const std::int64_t c = w.dim(0);
    using RowMat = Eigen::Matrix<double, Eigen::Dynamic, Eigen::Dynamic, Eigen::RowMajor>;
    Eigen::Map<const RowMat> m(w.data(), c, c);
    Eigen::PartialPivLU<Eigen::MatrixXd> lu(m);
    double ld = 0.0;
    for (Eigen::Index i = 0; i < c; ++i) ld += std::log(std::abs(lu.matrixLU()(i, i)));
    if (!std::isfinite(ld) || ld < std::log(1e-12))
        throw Error("E_SINGULAR", "mixing matrix is singular (|det| below 1e-12 floor)");
    Eigen::MatrixXd inv = lu.inverse();
    std::vector<double> v(static_cast<std::size_t>(c * c));
    for (std::int64_t i = 0; i < c; ++i)
        for (std::int64_t j = 0; j < c; ++j) v[static_cast<std::size_t>(i * c + j)] = inv(i, j);
    return Tensor({c, c}, std::move(v));
}

}  // namespace x2ct
