// SPDX-License-Identifier: Apache-2.0
#pragma once

#include <vector>

#include "ddtrack/tensor.hpp"

/// Differentiable operations. Every op validates operand shapes and throws
/// ShapeError naming the offending shapes.
namespace ddtrack::ad {

/// [M,K] x [K,N] -> [M,N]
Tensor matmul(const Tensor& a, const Tensor& b);
/// [N,C] + [C] broadcast over rows.
Tensor add_bias(const Tensor& x, const Tensor& bias);
/// x * w + b for a [N,in] input, [in,out] weight and [out] bias.
Tensor linear(const Tensor& x, const Tensor& weight, const Tensor& bias);

Tensor add(const Tensor& a, const Tensor& b);
Tensor sub(const Tensor& a, const Tensor& b);
Tensor mul(const Tensor& a, const Tensor& b);
/// a * x + b with scalar constants.
Tensor affine(const Tensor& x, double a, double b);

Tensor relu(const Tensor& x);
Tensor tanh(const Tensor& x);
Tensor sigmoid(const Tensor& x);

/// x:[N,C,D,H,W], weight:[Co,C,k,k,k], bias:[Co]; stride 1, symmetric zero padding.
Tensor conv3d(const Tensor& x, const Tensor& weight, const Tensor& bias, std::size_t padding);
/// x:[N,C,L], weight:[Co,C,k], bias:[Co].
Tensor conv1d(const Tensor& x, const Tensor& weight, const Tensor& bias, std::size_t stride, std::size_t padding);
/// x:[N,C,L], weight:[C,Co,k], bias:[Co]; output length (L-1)*stride - 2*padding + k + output_padding.
Tensor conv_transpose1d(const Tensor& x, const Tensor& weight, const Tensor& bias, std::size_t stride,
                        std::size_t padding, std::size_t output_padding = 0);

/// Joins tensors along `axis`; all other extents must agree.
Tensor concat(const std::vector<Tensor>& parts, std::size_t axis);
/// Half-open range [begin, end) along `axis`.
Tensor slice(const Tensor& x, std::size_t axis, std::size_t begin, std::size_t end);
Tensor reshape(const Tensor& x, Shape shape);

Tensor sum(const Tensor& x);
Tensor mean(const Tensor& x);

/// Elementwise Huber-style distance: 0.5 d^2 / beta for |d| < beta, |d| - 0.5 beta otherwise.
Tensor smooth_l1(const Tensor& a, const Tensor& b, double beta = 1.0);

/// gamma * x + beta with x:[N,C,L] and per-sample, per-channel gamma/beta:[N,C].
Tensor film(const Tensor& x, const Tensor& gamma, const Tensor& beta);

/// x:[N,C,L] normalised over each (sample, group of C/groups channels), then per-channel affine.
Tensor group_norm(const Tensor& x, std::size_t groups, const Tensor& weight, const Tensor& bias, double eps = 1e-5);
/// x:[N,D] normalised over D, then per-feature affine.
Tensor layer_norm(const Tensor& x, const Tensor& weight, const Tensor& bias, double eps = 1e-5);

}  // namespace ddtrack::ad
