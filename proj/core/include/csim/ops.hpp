#pragma once

// Differentiable primitives over dense matrices and vectors.
//
// Matrix ops take rank-2 tensors; rank-1 tensors are accepted where a single
// row makes sense. Broadcasting is limited to the explicit helpers below.

#include <cstdint>
#include <random>
#include <span>
#include <vector>

#include "csim/tensor.hpp"

namespace csim {

// --- linear algebra -------------------------------------------------------
Tensor matmul(const Tensor& a, const Tensor& b);
Tensor transpose(const Tensor& a);

// --- elementwise ----------------------------------------------------------
Tensor add(const Tensor& a, const Tensor& b);
Tensor sub(const Tensor& a, const Tensor& b);
Tensor mul(const Tensor& a, const Tensor& b);
Tensor scale(const Tensor& a, double factor);
Tensor add_scalar(const Tensor& a, double value);
/// a + s, where s is a one-element tensor that receives the summed gradient.
Tensor add_scalar_tensor(const Tensor& a, const Tensor& s);
/// a * s, where s is a one-element tensor.
Tensor mul_scalar_tensor(const Tensor& a, const Tensor& s);
Tensor tanh(const Tensor& a);
/// Hyperbolic tangent of a one-element tensor.
Tensor scalar_tanh(const Tensor& x);
Tensor gelu(const Tensor& a);
Tensor relu(const Tensor& a);

// --- broadcasting ---------------------------------------------------------
/// m[r x c] + v[c] added to every row.
Tensor add_row_vector(const Tensor& m, const Tensor& v);
/// Row i of m[r x c] multiplied by w[i].
Tensor row_scale(const Tensor& m, const Tensor& w);

// --- reductions -----------------------------------------------------------
Tensor sum(const Tensor& a);
Tensor mean(const Tensor& a);
/// Column sums of m[r x c] -> [c].
Tensor sum_rows(const Tensor& m);
/// Column means of m[r x c] -> [c]; global average pooling over positions.
Tensor mean_rows(const Tensor& m);
/// Global maximum / minimum as a one-element tensor. The gradient flows to
/// the (first) arg-extremum entry.
Tensor max_all(const Tensor& a);
Tensor min_all(const Tensor& a);

// --- structure ------------------------------------------------------------
Tensor concat_rows(std::span<const Tensor> parts);
Tensor slice_rows(const Tensor& m, std::size_t begin, std::size_t count);
/// Row i as a length-c vector.
Tensor row(const Tensor& m, std::size_t i);

// --- normalization --------------------------------------------------------
/// Softmax of a vector, max-subtracted.
Tensor softmax_vec(const Tensor& v);
/// Softmax applied to each row independently.
Tensor softmax_rows(const Tensor& m);
inline constexpr double kNormEpsilon = 1e-12;
/// Each row divided by max(||row||_2, 1e-12).
Tensor l2_normalize_rows(const Tensor& m);
Tensor layer_norm_rows(const Tensor& m, const Tensor& gamma, const Tensor& beta,
                       double eps = 1e-5);

// --- geometry -------------------------------------------------------------
/// Inside-root guard: sqrt(d^2 + eps) keeps the derivative finite at zero
/// distance.
inline constexpr double kDistanceEpsilon = 1e-12;
/// (i, j) = ||q_i - k_j||_2 for q[l x c], k[m x c].
Tensor pairwise_euclidean(const Tensor& q, const Tensor& k);
/// vec(a^T b) / r for a[r x c], b[r x c'] -> [c * c'].
Tensor bilinear_pool(const Tensor& a, const Tensor& b);

// --- losses ---------------------------------------------------------------
/// Mean over the batch of -log softmax(logits)[label].
Tensor cross_entropy(const Tensor& logits, std::span<const int> labels);
/// Mean over the batch of KL(softmax(teacher) || softmax(student)). The
/// teacher never receives a gradient.
Tensor kl_divergence(const Tensor& student_logits, const Tensor& teacher_logits);
/// Mean squared difference over all elements.
Tensor mse_loss(const Tensor& a, const Tensor& b);

// --- regularization -------------------------------------------------------
/// Inverted dropout; identity when p == 0.
Tensor dropout(const Tensor& a, double p, std::mt19937_64& rng);

}  // namespace csim
