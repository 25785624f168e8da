#pragma once

#include <utility>
#include <vector>

#include "x2ct/graph.hpp"
#include "x2ct/rng.hpp"
#include "x2ct/tensor.hpp"

namespace x2ct {

inline constexpr double kLn2Pi = 1.8378770664093454835606594728112;

enum class Direction { Forward, Inverse };

/// Value plus the accumulated log-determinant of the encode-direction
/// Jacobian. Builders return the encode-direction log-det for both
/// directions; it depends only on parameters and the conditioning half.
struct LayerIO {
    Tensor value;
    double logdet = 0.0;
};

struct FlowVars {
    Var value;
    Var logdet;  // encode-direction contribution, scalar
};

// --- graph builders ---------------------------------------------------------

/// Per-channel affine y = s*(x+b) with s = exp(logs).
FlowVars actnorm_apply(Var x, Var logs, Var bias, Direction dir);

/// Invertible 1x1x1 convolution: every voxel's channel vector is multiplied
/// by w (or by w_inv when inverting; pass the precomputed inverse).
FlowVars invconv_apply(Var x, Var w, Var w_inv, Direction dir);

struct CouplingVars {
    Var w1, b1, w2, b2, w3, b3;
};

/// Affine coupling: first channel half conditions, second half is scaled and
/// shifted. Scale = sigmoid(h2 - 0.1) + 0.6, so it stays in (0.6, 1.6).
FlowVars coupling_apply(Var x, const CouplingVars& net, Direction dir);

/// Gaussian log-density with per-element mean/log-scale maps.
Var gaussian_logp_map(Var z, Var mean, Var logs);
/// Gaussian log-density with per-channel mean/log-scale vectors.
Var gaussian_logp_channel(Var z, Var mean_c, Var logs_c);
/// Standard-normal closed form: -(N/2)ln(2pi) - ||z||^2/2.
Var std_normal_logp(Var z);

struct GaussianVars {
    Var mean, logs;
};

/// Prior head for a split level: zero-initialized convolution of the kept
/// half emits the factored half's mean and log-scale maps.
GaussianVars split_prior_head(Var kept, Var head_w, Var head_b);

// --- parameters and initialization ------------------------------------------

struct CouplingParams {
    Tensor w1, b1, w2, b2, w3, b3;
    /// Subnet over the conditioning half: conv3 -> relu -> conv1 -> relu ->
    /// conv3, hidden width `width`, final layer zero-initialized.
    static CouplingParams init(std::int64_t channels, std::int64_t width, Rng& rng);
};

/// Random orthogonal matrix (QR of a Gaussian draw, R-diagonal sign fixed).
Tensor random_orthogonal(std::int64_t c, Rng& rng);

/// Data-dependent actnorm initialization: returns (logs, bias) such that
/// s*(x+b) has per-channel zero mean and unit variance over the batch.
std::pair<Tensor, Tensor> actnorm_init_stats(const std::vector<Tensor>& batch);

// --- plain-tensor evaluation (thin wrappers over the graph builders) --------

LayerIO actnorm_eval(const Tensor& x, const Tensor& scale, const Tensor& bias, Direction dir);
LayerIO invconv_eval(const Tensor& x, const Tensor& w, Direction dir);
LayerIO coupling_eval(const Tensor& x, const CouplingParams& p, Direction dir);
Tensor squeeze_eval(const Tensor& x, Direction dir);

/// Inverse of a square matrix via LU; errors below the singularity floor.
Tensor matrix_inverse(const Tensor& w);

}  // namespace x2ct
