#pragma once

#include <cstdint>
#include <span>
#include <vector>

#include "mshed/layers.hpp"
#include "mshed/numerics/random.hpp"
#include "mshed/numerics/tensor.hpp"

namespace mshed::ssm {

// S6 keeps one decay per (channel, state) pair; SSD ties A to a single
// scalar per channel (scalar-times-identity over the state).
enum class Variant { s6, ssd };

// Parameters of one selective SSM core.
//
// A is stored as a_log = log(-A), so A = -exp(a_log) < 0 and the discretized
// decay exp(dt·A) always lies in (0, 1). B, C and dt are computed from the
// input token: B_t = x_to_b(x_t), C_t = x_to_c(x_t) (shared across channels),
// dt_t = softplus(x_to_dt(x_t) + dt_bias) per channel.
struct SsmParams {
  Variant variant = Variant::s6;
  Tensor a_log;            // [channels × N] (S6) or [channels] (SSD)
  layers::Linear x_to_b;   // channels → N
  layers::Linear x_to_c;   // channels → N
  layers::Linear x_to_dt;  // channels → channels, bias = dt_bias
  Tensor d_skip;           // [channels]

  static SsmParams create(Variant variant, std::int64_t channels, std::int64_t state_size, Rng& rng);

  std::int64_t channels() const { return d_skip.numel(); }
  std::int64_t state_size() const { return x_to_b.out(); }
  const Tensor& dt_bias() const { return x_to_dt.bias; }
  std::int64_t param_count() const;
  // Decay A[c][n] = -exp(a_log), expanded to [channels × N] for both variants.
  std::vector<double> decay_matrix() const;
};

// Recurrent state h [channels × N] carried in double precision.
struct ScanState {
  std::vector<double> h;
  std::int64_t position = 0;

  static ScanState zeros(std::int64_t channels, std::int64_t state_size);
};

struct Discretized {
  double a_bar;
  double b_bar;
};

// Zero-order hold for A, Euler rule for B: Ā = exp(dt·A), B̄ = dt·B.
inline Discretized discretize(double a, double b, double dt) { return {std::exp(dt * a), dt * b}; }

// Differentiable scan primitive over precomputed per-token quantities:
//   h_t = exp(dt_t ∘ A) ∘ h_{t-1} + (dt_t ∘ x_t) ⊗ B_t
//   y_t = h_t · C_t + d_skip ∘ x_t
// x, dt: [T × channels]; b, c: [T × N]; a_log as in SsmParams.
// When `final_state` is given it receives h_T (used to seed decoding).
Tensor scan(const Tensor& x, const Tensor& dt, const Tensor& a_log, const Tensor& b, const Tensor& c,
            const Tensor& d_skip, ScanState* final_state = nullptr);

// Full selective scan of x [T × channels] from a zero state.
Tensor selective_scan(const SsmParams& p, const Tensor& x, ScanState* final_state = nullptr);

// One recurrence step. Repeating it over a sequence reproduces selective_scan.
void scan_step(const SsmParams& p, ScanState& state, const float* x, float* y);
std::vector<float> scan_step(const SsmParams& p, ScanState& state, std::span<const float> x);

}  // namespace mshed::ssm
