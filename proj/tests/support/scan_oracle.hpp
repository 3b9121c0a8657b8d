#pragma once

#include <cmath>
#include <vector>

#include "mshed/numerics/tensor.hpp"

namespace mshed::testing {

// Straightforward double-precision recurrence, written independently of the
// library scan:
//   h[c][n] ← exp(dt[t][c]·A[c][n])·h[c][n] + dt[t][c]·B[t][n]·x[t][c]
//   y[t][c] = Σ_n C[t][n]·h[c][n] + D[c]·x[t][c]
// with A = -exp(a_log) (a_log per channel when tied).
inline std::vector<double> naive_scan(const Tensor& x, const Tensor& dt, const Tensor& a_log, const Tensor& b,
                                      const Tensor& c, const Tensor& d) {
  const auto steps = x.dim(0), channels = x.dim(1), n_state = b.dim(1);
  const bool tied = a_log.rank() == 1;
  std::vector<double> h(static_cast<std::size_t>(channels * n_state), 0.0);
  std::vector<double> y(static_cast<std::size_t>(steps * channels), 0.0);
  for (std::int64_t t = 0; t < steps; ++t) {
    for (std::int64_t ch = 0; ch < channels; ++ch) {
      const double delta = dt.at(t, ch);
      const double xv = x.at(t, ch);
      double acc = 0.0;
      for (std::int64_t n = 0; n < n_state; ++n) {
        const double a = -std::exp(double(tied ? a_log.data()[ch] : a_log.at(ch, n)));
        double& state = h[ch * n_state + n];
        state = std::exp(delta * a) * state + delta * double(b.at(t, n)) * xv;
        acc += double(c.at(t, n)) * state;
      }
      y[t * channels + ch] = acc + double(d.data()[ch]) * xv;
    }
  }
  return y;
}

}  // namespace mshed::testing
