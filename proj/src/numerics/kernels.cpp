#include "mshed/numerics/kernels.hpp"

#include <Eigen/Dense>

namespace mshed::kernels {
namespace {

using MatF = Eigen::Matrix<float, Eigen::Dynamic, Eigen::Dynamic, Eigen::RowMajor>;
using MatD = Eigen::Matrix<double, Eigen::Dynamic, Eigen::Dynamic, Eigen::RowMajor>;
using ConstMapF = Eigen::Map<const MatF>;
using MapF = Eigen::Map<MatF>;

void store(const MatD& result, float* y, std::int64_t m, std::int64_t n, bool accumulate) {
  MapF out(y, m, n);
  if (accumulate) {
    out = (out.cast<double>() + result).cast<float>();
  } else {
    out = result.cast<float>();
  }
}

}  // namespace

double dot(const float* a, const float* b, std::int64_t n) {
  // Eight independent lanes so the compiler can keep the loop vectorized
  // without reassociating a single accumulator.
  double acc[8] = {0, 0, 0, 0, 0, 0, 0, 0};
  std::int64_t i = 0;
  for (; i + 8 <= n; i += 8) {
    for (int l = 0; l < 8; ++l) acc[l] += static_cast<double>(a[i + l]) * static_cast<double>(b[i + l]);
  }
  double total = ((acc[0] + acc[1]) + (acc[2] + acc[3])) + ((acc[4] + acc[5]) + (acc[6] + acc[7]));
  for (; i < n; ++i) total += static_cast<double>(a[i]) * static_cast<double>(b[i]);
  return total;
}

void matmul_nt(const float* a, const float* b, float* y, std::int64_t m, std::int64_t k,
               std::int64_t n, bool accumulate) {
  if (m == 0 || n == 0) return;
  MatD prod = ConstMapF(a, m, k).cast<double>() * ConstMapF(b, n, k).cast<double>().transpose();
  store(prod, y, m, n, accumulate);
}

void matmul_nn(const float* a, const float* b, float* y, std::int64_t m, std::int64_t k,
               std::int64_t n, bool accumulate) {
  if (m == 0 || n == 0) return;
  MatD prod = ConstMapF(a, m, k).cast<double>() * ConstMapF(b, k, n).cast<double>();
  store(prod, y, m, n, accumulate);
}

void matmul_tn(const float* a, const float* b, float* y, std::int64_t m, std::int64_t k,
               std::int64_t n, bool accumulate) {
  if (m == 0 || n == 0) return;
  MatD prod = ConstMapF(a, k, m).cast<double>().transpose() * ConstMapF(b, k, n).cast<double>();
  store(prod, y, m, n, accumulate);
}

void matvec(const float* w, const float* x, const float* bias, float* y, std::int64_t out,
            std::int64_t in) {
  for (std::int64_t o = 0; o < out; ++o) {
    double v = dot(w + o * in, x, in);
    if (bias) v += bias[o];
    y[o] = static_cast<float>(v);
  }
}

}  // namespace mshed::kernels
