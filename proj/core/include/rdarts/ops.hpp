#pragma once

// Differentiable operations over tape values. Every function records its
// result on the tape of its first operand; gradients follow the usual
// reverse-mode rules.

#include "rdarts/autodiff.hpp"

#include <span>
#include <vector>

namespace rdarts::ops {

class GeometryError : public std::invalid_argument {
public:
    using std::invalid_argument::invalid_argument;
};

// Elementwise. `b` may broadcast against `a`: shapes are right-aligned and
// each axis of `b` either matches or is 1 (e.g. Cx1x1 against CxHxW).
Var add(Var a, Var b);
Var sub(Var a, Var b);
Var mul(Var a, Var b);
Var neg(Var a);
Var scale(Var a, double c);
Var add_scalar(Var a, double c);
Var square(Var a);
Var log(Var a);
Var exp(Var a);

enum class ElementwiseKind { add, sub, mul };
Var elementwise(ElementwiseKind kind, Var a, Var b);

// Reductions.
Var sum(Var a);
Var mean(Var a);
/// [B x ...] -> [B]: sums everything but the leading axis.
Var row_sum(Var a);

Var reshape(Var a, Shape shape);
Var matmul(Var a, Var b);
/// Adds a length-n bias to every row of an [m x n] matrix.
Var add_bias(Var a, Var bias);

enum class ActivationKind { relu, tanh, sigmoid };
Var activation(ActivationKind kind, Var x);
inline Var relu(Var x) { return activation(ActivationKind::relu, x); }
inline Var tanh(Var x) { return activation(ActivationKind::tanh, x); }
inline Var sigmoid(Var x) { return activation(ActivationKind::sigmoid, x); }

/// Softmax over the last axis.
Var softmax(Var logits);
/// Row `i` of a 2-D value as a vector.
Var row(Var a, std::size_t i);
/// sum_r w[r] * xs[r]; all xs share one shape.
Var weighted_sum(Var w, std::span<const Var> xs);
/// sum_r w[which[r]] * xs[r]; weights not named in `which` are skipped.
Var weighted_sum(Var w, std::span<const Var> xs, std::span<const std::size_t> which);

struct ConvGeometry {
    std::size_t stride = 1;
    std::size_t dilation = 1;
    std::size_t padding = 0;
    std::size_t groups = 1;
};

/// Output extent along one spatial axis; throws GeometryError if not positive.
std::size_t conv_out_extent(std::size_t in, std::size_t k, const ConvGeometry& g);

/// x: [B x Cin x H x W] or [Cin x H x W]; w: [Cout x Cin/groups x k x k].
/// Zero padding.
Var conv2d(Var x, Var w, const ConvGeometry& g);

enum class PoolKind { max, avg };
/// Max pooling ignores padded cells; average pooling divides by k*k.
Var pool2d(PoolKind kind, Var x, std::size_t k, std::size_t stride, std::size_t padding);

/// [B x C x H x W] -> [B x C]
Var spatial_mean(Var x);
/// Concatenate [B x Ci x H x W] values along the channel axis.
Var concat_channels(std::span<const Var> xs);
/// Spatial crop of a [B x C x H x W] value.
Var crop(Var x, std::size_t top, std::size_t left, std::size_t h, std::size_t w);

/// Per-row cross-entropy of softmax(logits) against one-hot rows: [B].
Var cross_entropy_rows(Var logits, const Tensor& onehot);
/// Mean over the batch of cross_entropy_rows.
Var softmax_cross_entropy(Var logits, const Tensor& onehot);
Tensor one_hot(std::span<const int> labels, std::size_t classes);

struct BatchNormState {
    Tensor running_mean;
    Tensor running_var;
    double momentum = 0.1;
    double eps = 1e-5;

    explicit BatchNormState(std::size_t channels = 1)
        : running_mean(Shape{channels}, 0.0), running_var(Shape{channels}, 1.0)
    {
    }
};

/// x: [B x C x H x W] or [B x C]. `gamma`/`beta` may be invalid Vars for the
/// non-affine variant. Training mode normalizes with batch statistics and,
/// when `update_stats`, folds them into the running estimates.
Var batch_norm(Var x, Var gamma, Var beta, BatchNormState& state, bool train, bool update_stats);

} // namespace rdarts::ops
