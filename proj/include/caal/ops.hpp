#pragma once

#include <vector>

#include "caal/autograd.hpp"
#include "caal/tensor.hpp"

namespace caal::ops {

using ag::Var;

// ---- elementwise primitives (same shape) ----
Var add(const Var& a, const Var& b);
Var sub(const Var& a, const Var& b);
Var mul(const Var& a, const Var& b);
Var div(const Var& a, const Var& b);
Var adds(const Var& a, double s);
Var muls(const Var& a, double s);
Var neg(const Var& a);
Var exp(const Var& a);
Var log(const Var& a);
Var sqrt(const Var& a);
Var leaky_relu(const Var& a, double slope);
Var relu(const Var& a);
// multiply by a constant tensor (mask); constant w.r.t. differentiation
Var mul_const(const Var& a, const Tensor& c);

// ---- shape primitives ----
Var reshape(const Var& a, std::vector<int> shape);
Var broadcast_to(const Var& a, const std::vector<int>& shape);
Var reduce_sum(const Var& a, std::vector<int> axes, bool keepdims);
Var transpose(const Var& a);                       // 2-D
Var concat_ch(const std::vector<Var>& parts);      // NCHW, axis 1
Var slice_ch(const Var& a, int c0, int len);       // NCHW, axis 1
Var embed_ch(const Var& a, int c0, int total_ch);  // zero-pad channels

// ---- linear algebra ----
Var matmul(const Var& a, const Var& b);  // (m,k)x(k,n)

// ---- convolution family (NCHW, weights OIHW) ----
Var conv2d(const Var& x, const Var& w, int stride, int pad);
Var conv2d_input_grad(const Var& g, const Var& w, int stride, int pad, int in_h, int in_w);
Var conv2d_weight_grad(const Var& x, const Var& g, int stride, int pad, int kh, int kw);

// ---- resampling ----
Var avg_pool2(const Var& a);  // 2x2 window, stride 2
Var upsample2(const Var& a);  // nearest-neighbor x2

// ---- composites ----
Var square(const Var& a);
Var abs(const Var& a);
Var softplus(const Var& a);
Var sigmoid(const Var& a);
Var sum_all(const Var& a);   // -> (1)
Var mean_all(const Var& a);  // -> (1)
Var softmax_rows(const Var& logits);     // (N,C) -> (N,C)
Var logsumexp_rows(const Var& logits);   // (N,C) -> (N,1)
Var l2_norm_rows(const Var& a);          // (N,...) -> (N), norm over non-batch dims
Var mse_loss(const Var& a, const Var& b);
// mean over batch of softmax NLL; targets one-hot (N,C); optional per-class weights
Var ce_with_logits(const Var& logits, const Tensor& onehot, const Tensor* class_weights = nullptr);
// mean over batch and classes of binary cross-entropy; targets in [0,1]
Var bce_with_logits(const Var& logits, const Tensor& targets, const Tensor* class_weights = nullptr);

// ---- tensor-level helpers (no autodiff) ----
Tensor ew_binary(const Tensor& a, const Tensor& b, double (*f)(double, double), const char* op);
Tensor ew_unary(const Tensor& a, double (*f)(double));

}  // namespace caal::ops
