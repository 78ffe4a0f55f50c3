#pragma once

#include <cstdint>
#include <functional>
#include <vector>

#include "apex/tensor.hpp"

namespace apex::ad {

// Elementwise binary ops. Shapes must match exactly, or the second operand's
// shape must equal a trailing suffix of the first's, in which case it is
// broadcast across the leading axes (the only broadcast rule supported).
Tensor add(const Tensor& a, const Tensor& b);
Tensor sub(const Tensor& a, const Tensor& b);
Tensor mul(const Tensor& a, const Tensor& b);
Tensor div(const Tensor& a, const Tensor& b);  // exact shape match only

Tensor add_scalar(const Tensor& a, double s);
Tensor mul_scalar(const Tensor& a, double s);
Tensor neg(const Tensor& a);

Tensor relu(const Tensor& a);
Tensor gelu(const Tensor& a);  // exact erf form
Tensor sigmoid(const Tensor& a);
Tensor exp(const Tensor& a);
Tensor log(const Tensor& a);

Tensor matmul(const Tensor& a, const Tensor& b);  // [M,K] x [K,N]
Tensor transpose(const Tensor& a);                // 2-D
Tensor reshape(const Tensor& a, Shape s);
Tensor slice(const Tensor& a, std::size_t axis, std::size_t start,
             std::size_t len);
Tensor concat(const std::vector<Tensor>& parts, std::size_t axis);

// Numerically stable softmax over one axis; rows sum to 1 and are strictly
// positive.
Tensor softmax(const Tensor& a, std::size_t axis);

// Normalizes over the last axis; gain/bias have that axis's extent.
Tensor layer_norm(const Tensor& x, const Tensor& gain, const Tensor& bias,
                  double eps = 1e-5);

Tensor sum_all(const Tensor& a);   // -> rank-0 scalar
Tensor mean_all(const Tensor& a);
Tensor sum_axis(const Tensor& a, std::size_t axis);   // drops the axis
Tensor mean_axis(const Tensor& a, std::size_t axis);

// x: [Cin,H,W], w: [Cout,Cin,kh,kw], optional bias [Cout] (pass undefined
// Tensor for none).
Tensor conv2d(const Tensor& x, const Tensor& w, const Tensor& bias,
              std::size_t stride, std::size_t pad);

Tensor embedding_lookup(const Tensor& table,
                        const std::vector<std::size_t>& ids);  // [n, D]

// Replaces elements where mask != 0 with `v`; gradient is zeroed there.
// mask is row-major over the tensor's elements.
Tensor masked_fill(const Tensor& a, const std::vector<std::uint8_t>& mask,
                   double v);

Tensor upsample2x_nearest(const Tensor& x);  // [C,H,W] -> [C,2H,2W]

// Bilinear upsampling of row-major planes by an integer factor with
// half-pixel alignment and clamped borders (the same grid the evaluation
// upsampler uses). x is [R, h*w]; the result is [R, (h*f)*(w*f)].
Tensor upsample_bilinear(const Tensor& x, std::size_t h, std::size_t w,
                         std::size_t factor);

// Stable elementwise binary cross-entropy with logits:
//   max(z,0) - z*t + log1p(exp(-|z|)).
// Targets may be fractional (coverage targets). Gradient w.r.t. logits is
// sigmoid(z) - t.
Tensor bce_with_logits(const Tensor& logits, const Tensor& targets);

// Weighted mean cross-entropy over rows of [N,C] logits:
//   (1/N) * sum_i w[t_i] * (logsumexp(row_i) - row_i[t_i]).
// The 1/N normalizer is weight-independent so per-class weights scale the
// loss linearly.
Tensor cross_entropy_rows(const Tensor& logits,
                          const std::vector<std::size_t>& target,
                          const std::vector<double>& class_weight);

// Central finite-difference check of an analytic gradient.
// Returns max over checked elements of |analytic - fd| / max(1, |fd|).
// max_elements == 0 checks every element; otherwise a deterministic sample
// of that many distinct elements (seeded by sample_seed).
double grad_check(const std::function<Tensor(const Tensor&)>& f,
                  const Tensor& x, double h = 1e-6,
                  std::size_t max_elements = 0,
                  std::uint64_t sample_seed = 0);

}  // namespace apex::ad
