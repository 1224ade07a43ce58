#pragma once

#include <cstddef>
#include <span>
#include <vector>

#include "mtpt/tape.hpp"

namespace mtpt::diff {

/// Floor applied to log inputs.
inline constexpr double kLogFloor = 1e-12;

// Elementwise; operands must have identical shapes.
Var add(Var a, Var b);
Var sub(Var a, Var b);
Var mul(Var a, Var b);
Var div(Var a, Var b);

Var scale(Var a, double k);
Var add_scalar(Var a, double k);
Var exp(Var a);
/// log(max(a, kLogFloor)); clamped entries get zero gradient.
Var log(Var a);
Var pow(Var a, double exponent);
Var tanh(Var a);

/// [m,k]x[k,n] or batched [b,m,k]x[b,k,n].
Var matmul(Var a, Var b);
/// Swaps the last two axes of a rank-2 or rank-3 tensor.
Var transpose(Var a);

Var sum(Var a);
/// Reduces `axis` away.
Var sum(Var a, std::size_t axis);
Var mean(Var a);
Var mean(Var a, std::size_t axis);
Var softmax(Var a);

/// Euclidean norm of a rank-1 tensor.
Var l2_norm(Var v);
Var cosine_similarity(Var a, Var b);

Var concat(std::span<const Var> parts, std::size_t axis);
Var slice(Var a, std::size_t axis, std::size_t begin, std::size_t end);
Var reshape(Var a, Shape shape);
/// out[i] = a.flat[index[i]]; backward scatter-adds.
Var gather(Var a, std::vector<std::size_t> index, Shape out_shape);

/// Scalar to any shape.
Var broadcast(Var scalar, Shape shape);
/// Vector [d] repeated as rows of [n,d].
Var broadcast_rows(Var v, std::size_t n);
/// Vector [n] repeated as columns of [n,d].
Var broadcast_cols(Var v, std::size_t d);

namespace kernel {
// Raw row-major kernels; `c` is accumulated into.
void gemm_nn(const double* a, const double* b, double* c, std::size_t m, std::size_t k, std::size_t n);
void gemm_nt(const double* a, const double* b, double* c, std::size_t m, std::size_t k, std::size_t n);
void gemm_tn(const double* a, const double* b, double* c, std::size_t m, std::size_t k, std::size_t n);
}  // namespace kernel

}  // namespace mtpt::diff
