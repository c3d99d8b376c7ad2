#pragma once

#include "purigrad/tape.hpp"
#include "purigrad/tensor.hpp"

namespace purigrad::ops {

// Elementwise (shapes must match exactly).
Tensor add(Tape& t, const Tensor& a, const Tensor& b);
Tensor sub(Tape& t, const Tensor& a, const Tensor& b);
Tensor mul(Tape& t, const Tensor& a, const Tensor& b);

Tensor scale(Tape& t, const Tensor& a, double c);

// [m,k] x [k,n] -> [m,n]; rank-1 operands are promoted to a single row/column
// only when dimensions make that unambiguous (vectors as [1,k] lhs / [k,1] rhs).
Tensor matmul(Tape& t, const Tensor& a, const Tensor& b);

// Full reductions to a scalar (shape {1}).
Tensor sum(Tape& t, const Tensor& a);
Tensor mean(Tape& t, const Tensor& a);

// x [B,in], w [out,in], b [out] -> x * w^T + b, [B,out].
Tensor affine(Tape& t, const Tensor& x, const Tensor& w, const Tensor& b);

Tensor silu(Tape& t, const Tensor& a);
Tensor leaky_relu(Tape& t, const Tensor& a, double slope = 0.05);
// (1-a)x + a*sqrt(x^2+e^2) - a*e; a in [0,1), e > 0.
Tensor soft_leaky_relu(Tape& t, const Tensor& x, double a = 0.49, double e = 0.01);

// logits [B,C], labels size B -> per-sample cross-entropy losses [B].
Tensor softmax_cross_entropy(Tape& t, const Tensor& logits, const std::vector<int32_t>& labels);

Tensor clamp(Tape& t, const Tensor& a, double lo, double hi);

// Along axis 1 for matching row counts ([B,c1] ++ [B,c2] -> [B,c1+c2]);
// rank-1 tensors concatenate along axis 0.
Tensor concat(Tape& t, const Tensor& a, const Tensor& b);

// values rank-1 [K], one index per output element -> [B].
Tensor gather_t(Tape& t, const Tensor& values, const std::vector<int32_t>& indices);

// x [B,D] scaled per row by s [B] (or [B,1]).
Tensor rowscale(Tape& t, const Tensor& x, const Tensor& s);

// scalar {1} -> filled shape.
Tensor broadcast(Tape& t, const Tensor& s, Shape dims);

// Elementwise first derivatives of the activations, as primitives (these are
// what recorded backward passes emit; their own derivatives carry the
// second-order information).
Tensor leaky_relu_grad(Tape& t, const Tensor& x, double slope);
Tensor soft_leaky_relu_grad(Tape& t, const Tensor& x, double a, double e);

// ---- tape-free numeric helpers (same kernels, no recording) ----
namespace eval {
std::vector<double> softmax(std::span<const double> logits_row);
double silu_val(double x);
double silu_grad_val(double x);
double soft_leaky_relu_val(double x, double a, double e);
double soft_leaky_relu_grad_val(double x, double a, double e);
double soft_leaky_relu_grad2_val(double x, double a, double e);
}  // namespace eval

}  // namespace purigrad::ops
