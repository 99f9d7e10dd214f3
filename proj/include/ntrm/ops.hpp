// Copyright 2026 The NTRM Authors
// SPDX-License-Identifier: Apache-2.0
//
// Differentiable tensor ops. Every op checks shapes up front, throws
// ShapeError naming the offending shapes, and records its backward on the
// tape when any input requires grad.

#pragma once

#include <cstdint>
#include <span>
#include <vector>

#include "ntrm/tensor.hpp"

namespace ntrm {

// Elementwise binary ops with numpy-style broadcasting.
Tensor add(const Tensor& a, const Tensor& b);
Tensor sub(const Tensor& a, const Tensor& b);
Tensor mul(const Tensor& a, const Tensor& b);
Tensor div(const Tensor& a, const Tensor& b);

Tensor scale(const Tensor& a, double factor);
Tensor add_scalar(const Tensor& a, double value);

Tensor relu(const Tensor& x);
Tensor leaky_relu(const Tensor& x, double slope);
Tensor sigmoid(const Tensor& x);

Tensor sum(const Tensor& x);
Tensor mean(const Tensor& x);
Tensor sum_axis(const Tensor& x, int axis, bool keepdim = false);

Tensor reshape(const Tensor& x, Shape shape);
/// 2-D transpose.
Tensor transpose(const Tensor& x);

/// (M x K) . (K x N).
Tensor matmul(const Tensor& a, const Tensor& b);
/// x (N x in), weight (out x in), optional bias (out) -> x . weight^T + bias.
Tensor linear(const Tensor& x, const Tensor& weight, const Tensor& bias = {});

Tensor concat(const std::vector<Tensor>& parts, int axis);
Tensor slice(const Tensor& x, int axis, std::int64_t start, std::int64_t length);

/// Gathers rows of a (N x ...) tensor.
Tensor take_rows(const Tensor& x, std::span<const std::int64_t> rows);
/// out[r] = sum of x[e] over e with rows[e] == r. Each output element is
/// accumulated in ascending value order, so the result does not depend on
/// the order in which contributions are listed.
Tensor scatter_add_rows(const Tensor& x, std::span<const std::int64_t> rows,
                        std::int64_t num_rows);
/// Row r of the result is a[r] when take_a[r], else b[r]. Copies bits exactly.
Tensor select_rows(const Tensor& a, const Tensor& b, const std::vector<bool>& take_a);

/// Softmax of a 1-D score vector within groups given by `segment`.
Tensor segment_softmax(const Tensor& scores, std::span<const std::int64_t> segment,
                       std::int64_t num_segments);

Tensor softmax(const Tensor& x, int axis);

/// Normalizes over the last dimension; gamma/beta have that dimension's size.
Tensor layer_norm(const Tensor& x, const Tensor& gamma, const Tensor& beta, double eps = 1e-5);

struct BatchNormStats {
    Tensor running_mean;
    Tensor running_var;
};

/// Per-channel batch normalization of B x C x H x W input. Training mode
/// normalizes with batch statistics (biased variance) and updates
/// `stats` as run = (1 - momentum) * run + momentum * batch, using the
/// unbiased variance for the running estimate.
Tensor batch_norm2d(const Tensor& x, const Tensor& gamma, const Tensor& beta,
                    BatchNormStats& stats, bool training, double momentum = 0.1,
                    double eps = 1e-5);

/// x: B x C x H x W, weight: O x C x k x k (k odd), bias: O or undefined.
Tensor conv2d(const Tensor& x, const Tensor& weight, const Tensor& bias, int stride, int pad);

/// Window max with -inf padding; the gradient goes to the first maximum in
/// row-major window order.
Tensor maxpool2d(const Tensor& x, int kernel, int stride, int pad);

/// Bilinear resize with half-pixel sample centers:
/// src = (dst + 0.5) * in / out - 0.5, clamped below at 0.
Tensor upsample_bilinear(const Tensor& x, std::int64_t out_h, std::int64_t out_w);

std::int64_t conv_out_size(std::int64_t in, int kernel, int stride, int pad);

}  // namespace ntrm
