#pragma once

#include <memory>
#include <vector>

#include "guard/autodiff.hpp"

namespace guard::ad {

// Elementwise binary ops require equal shapes, except that either operand may
// be a rank-0 scalar.
Var add(const Var& a, const Var& b);
Var sub(const Var& a, const Var& b);
Var mul(const Var& a, const Var& b);
Var div(const Var& a, const Var& b);
inline Var operator+(const Var& a, const Var& b) { return add(a, b); }
inline Var operator-(const Var& a, const Var& b) { return sub(a, b); }
inline Var operator*(const Var& a, const Var& b) { return mul(a, b); }
inline Var operator/(const Var& a, const Var& b) { return div(a, b); }

Var neg(const Var& a);
Var scale(const Var& a, double s);
Var add_scalar(const Var& a, double s);
Var square(const Var& a);
Var sqrt(const Var& a);
Var exp(const Var& a);
Var log(const Var& a);
Var tanh(const Var& a);
Var sigmoid(const Var& a);
Var relu(const Var& a);
// (1/beta) log(1 + exp(beta x))
Var softplus(const Var& a, double beta);

Var sum(const Var& a);
Var mean(const Var& a);
Var l2_norm(const Var& a);
// Broadcasts a rank-0 value to `shape`.
Var expand(const Var& scalar, const Shape& shape);
Var reshape(const Var& a, Shape shape);

Var matmul(const Var& a, const Var& b);
Var transpose(const Var& a);

// (N, ...) -> (N) and back.
Var row_sum(const Var& a);
Var row_broadcast(const Var& v, const Shape& shape);
// Channel dimension is 1 for rank-2 (N, C) and rank-4 (N, C, H, W) tensors.
Var channel_sum(const Var& a);
Var channel_broadcast(const Var& v, const Shape& shape);

struct Conv2dParams {
  std::size_t stride = 1;
  std::size_t pad = 0;
};
Shape conv2d_output_shape(const Shape& x, const Shape& w, Conv2dParams p);
Var conv2d(const Var& x, const Var& w, Conv2dParams p = {});
// Adjoints of conv2d with respect to its input and its weight.
Var conv2d_input_grad(const Var& g, const Var& w, const Shape& x_shape, Conv2dParams p);
Var conv2d_weight_grad(const Var& x, const Var& g, const Shape& w_shape, Conv2dParams p);

Var avg_pool2d(const Var& x, std::size_t kernel, std::size_t stride);
Var avg_pool2d_adjoint(const Var& g, const Shape& x_shape, std::size_t kernel, std::size_t stride);
Var max_pool2d(const Var& x, std::size_t kernel, std::size_t stride);

using IndexList = std::shared_ptr<const std::vector<std::size_t>>;
// out[i] = x[idx[i]] (flat indices), and its adjoint.
Var gather(const Var& x, IndexList idx, const Shape& out_shape);
Var scatter_add(const Var& g, IndexList idx, const Shape& x_shape);
// logits[i, labels[i]] -> (N)
Var pick(const Var& logits, const std::vector<int>& labels);

// Row-wise over (N, C).
Var softmax(const Var& logits);
// Sum over the batch of -log softmax(logits)[label].
Var cross_entropy_sum(const Var& logits, const std::vector<int>& labels);
// Sum over the batch of -sum_c p_c log softmax(logits)_c.
Var soft_cross_entropy_sum(const Var& logits, const Tensor& probs);

}  // namespace guard::ad

namespace guard {

// Eager (non-recording) helpers on plain tensors.
Tensor softmax_rows(const Tensor& logits);
std::vector<int> argmax_rows(const Tensor& logits);
Tensor add(const Tensor& a, const Tensor& b);
Tensor sub(const Tensor& a, const Tensor& b);
Tensor scale(const Tensor& a, double s);
Tensor axpy(double alpha, const Tensor& x, const Tensor& y);  // alpha x + y
double dot(const Tensor& a, const Tensor& b);
double norm2(const Tensor& a);
double max_abs(const Tensor& a);
Tensor clamp(const Tensor& a, double lo, double hi);
Tensor matmul(const Tensor& a, const Tensor& b);

}  // namespace guard
