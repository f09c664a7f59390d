// SPDX-License-Identifier: Apache-2.0
#pragma once

#include <cstdint>
#include <memory>
#include <vector>

#include "picr/tensor.hpp"

/// Differentiable tensor operations.
///
/// Feature maps are C×H×W (single image, no batch axis). Token matrices are
/// [..., C] with channels last.
namespace picr::ops {

using Index = std::shared_ptr<const std::vector<std::int64_t>>;

Tensor add(const Tensor& a, const Tensor& b);
Tensor sub(const Tensor& a, const Tensor& b);
Tensor mul(const Tensor& a, const Tensor& b);

// `b` is broadcast against `a` with right-aligned numpy rules; the result has
// a's shape.
Tensor add_broadcast(const Tensor& a, const Tensor& b);
Tensor mul_broadcast(const Tensor& a, const Tensor& b);

Tensor scale(const Tensor& a, double s);
Tensor add_scalar(const Tensor& a, double s);

Tensor sum(const Tensor& a);
Tensor mean(const Tensor& a);

Tensor exp(const Tensor& a);
Tensor log(const Tensor& a);
Tensor tanh(const Tensor& a);
Tensor sigmoid(const Tensor& a);
Tensor softplus(const Tensor& a);
Tensor gelu(const Tensor& a);
Tensor abs(const Tensor& a);
Tensor square(const Tensor& a);

/// max(a, bound). The gradient passes where a > bound, and also where the
/// incoming gradient would push a upward.
Tensor lower_bound(const Tensor& a, double bound);

/// out[i] = a[index[i]], or 0 where index[i] < 0. Backward scatter-adds.
Tensor gather(const Tensor& a, Index index, Shape out_shape);
Tensor permute(const Tensor& a, const std::vector<std::size_t>& axes);

Tensor concat(const std::vector<Tensor>& parts, std::size_t axis);
Tensor slice(const Tensor& a, std::size_t axis, std::size_t begin, std::size_t end);

/// x: Ci×H×W, weight: Co×Ci×k×k, bias: Co (may be undefined).
Tensor conv2d(const Tensor& x, const Tensor& weight, const Tensor& bias, int stride, int pad);

/// x: Ci×H×W, weight: Ci×Co×k×k. Output side (H-1)·stride - 2·pad + k + output_pad.
Tensor conv_transpose2d(const Tensor& x, const Tensor& weight, const Tensor& bias, int stride,
                        int pad, int output_pad);

/// x: [..., Cin], weight: Cin×Cout, bias: Cout (may be undefined).
Tensor linear(const Tensor& x, const Tensor& weight, const Tensor& bias);

/// Normalizes the last axis.
Tensor layer_norm(const Tensor& x, const Tensor& gamma, const Tensor& beta, double eps = 1e-5);

/// Batched matrix product: [B,M,K] × [B,K,N] -> [B,M,N].
Tensor bmm(const Tensor& a, const Tensor& b);

}  // namespace picr::ops
