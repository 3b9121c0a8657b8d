#pragma once

#include <cmath>
#include <cstdint>
#include <span>

#include "mshed/numerics/graph.hpp"
#include "mshed/numerics/tensor.hpp"

namespace mshed {

enum class UnaryOp { silu, softplus, exp, neg, sigmoid };
enum class BinaryOp { add, mul };

// a[m×k] · b[k×n]
Tensor matmul(const Tensor& a, const Tensor& b);

// x[T×in] · weightᵀ + bias, weight[out×in]. `bias` may be undefined.
Tensor linear(const Tensor& x, const Tensor& weight, const Tensor& bias = {});

// Only scalar (numel 1) and identical-shape right operands are accepted.
Tensor binary(BinaryOp op, const Tensor& a, const Tensor& b);
Tensor unary(UnaryOp op, const Tensor& x);

inline Tensor add(const Tensor& a, const Tensor& b) { return binary(BinaryOp::add, a, b); }
inline Tensor mul(const Tensor& a, const Tensor& b) { return binary(BinaryOp::mul, a, b); }
inline Tensor silu(const Tensor& x) { return unary(UnaryOp::silu, x); }
inline Tensor softplus(const Tensor& x) { return unary(UnaryOp::softplus, x); }
inline Tensor exp(const Tensor& x) { return unary(UnaryOp::exp, x); }
inline Tensor neg(const Tensor& x) { return unary(UnaryOp::neg, x); }
inline Tensor sigmoid(const Tensor& x) { return unary(UnaryOp::sigmoid, x); }

Tensor scale(const Tensor& x, float factor);
Tensor sum(const Tensor& x);
Tensor mean(const Tensor& x);

// Leading `rows` rows / `cols` columns of a rank-2 tensor (copy).
Tensor narrow_rows(const Tensor& x, std::int64_t rows);
Tensor narrow_cols(const Tensor& x, std::int64_t cols);

// Gathers rows of weight[V×d] for each id.
Tensor embedding(const Tensor& weight, std::span<const std::int32_t> ids);

// Mean negative log-likelihood of targets under row-wise softmax(logits).
Tensor cross_entropy(const Tensor& logits, std::span<const std::int32_t> targets);

// Scalar helpers shared with the step-wise inference path.
inline double silu_value(double x) { return x / (1.0 + std::exp(-x)); }
double softplus_value(double x);

}  // namespace mshed
