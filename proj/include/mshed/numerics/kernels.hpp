#pragma once

#include <cstdint>
#include <span>

// Raw float32 kernels with float64 accumulation. Used by the recorded ops and
// directly by the token-at-a-time inference path.
namespace mshed::kernels {

double dot(const float* a, const float* b, std::int64_t n);

// y[m×n] (+)= a[m×k] · b[n×k]ᵀ
void matmul_nt(const float* a, const float* b, float* y, std::int64_t m, std::int64_t k,
               std::int64_t n, bool accumulate = false);
// y[m×n] (+)= a[m×k] · b[k×n]
void matmul_nn(const float* a, const float* b, float* y, std::int64_t m, std::int64_t k,
               std::int64_t n, bool accumulate = false);
// y[m×n] (+)= a[k×m]ᵀ · b[k×n]
void matmul_tn(const float* a, const float* b, float* y, std::int64_t m, std::int64_t k,
               std::int64_t n, bool accumulate = false);

// y[out] = w[out×in] · x[in] (+ bias when non-null).
void matvec(const float* w, const float* x, const float* bias, float* y, std::int64_t out,
            std::int64_t in);

}  // namespace mshed::kernels
