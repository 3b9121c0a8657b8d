#include "mshed/ssm.hpp"

#include <cmath>

#include <Eigen/Core>

#include "mshed/errors.hpp"
#include "mshed/numerics/kernels.hpp"
#include "mshed/numerics/ops.hpp"

namespace mshed::ssm {
namespace {

constexpr double kDtMin = 1e-3;
constexpr double kDtMax = 1e-1;

void check_finite(double v, std::int64_t token) {
  if (!std::isfinite(v)) throw NumericError("non-finite value in selective scan", token);
}

// Decay for (channel, state) under either layout of a_log.
inline double decay(const float* a_log, bool tied, std::int64_t c, std::int64_t n, std::int64_t state) {
  return -std::exp(static_cast<double>(tied ? a_log[c] : a_log[c * state + n]));
}

// Ā over the [channels × N] grid for one token: exp(dt[ch]·A[ch][n]).
void decay_bar(const double* decay_ax, const float* dt, std::int64_t channels, std::int64_t state, double* out) {
  for (std::int64_t ch = 0; ch < channels; ++ch) {
    const double delta = dt[ch];
    for (std::int64_t n = 0; n < state; ++n) out[ch * state + n] = delta * decay_ax[ch * state + n];
  }
  Eigen::Map<Eigen::ArrayXd> z(out, channels * state);
  z = z.exp();
}

}  // namespace

SsmParams SsmParams::create(Variant variant, std::int64_t channels, std::int64_t state_size, Rng& rng) {
  SsmParams p;
  p.variant = variant;
  const double proj_std = 1.0 / std::sqrt(static_cast<double>(channels));
  p.x_to_b = layers::Linear::create(channels, state_size, false, rng, proj_std);
  p.x_to_c = layers::Linear::create(channels, state_size, false, rng, proj_std);
  p.x_to_dt = layers::Linear::create(channels, channels, true, rng, 0.1 * proj_std);
  // dt bias: inverse softplus of dt drawn log-uniformly in [kDtMin, kDtMax].
  for (auto& b : p.x_to_dt.bias.mutable_data()) {
    const double dt = std::exp(rng.uniform(std::log(kDtMin), std::log(kDtMax)));
    b = static_cast<float>(dt + std::log(-std::expm1(-dt)));
  }
  if (variant == Variant::s6) {
    p.a_log = Tensor::zeros({channels, state_size}, true);
    auto a = p.a_log.mutable_data();
    for (std::int64_t c = 0; c < channels; ++c) {
      for (std::int64_t n = 0; n < state_size; ++n) a[c * state_size + n] = static_cast<float>(std::log(n + 1.0));
    }
  } else {
    p.a_log = Tensor::zeros({channels}, true);
    for (auto& a : p.a_log.mutable_data()) a = static_cast<float>(std::log(rng.uniform(1.0, 16.0)));
  }
  p.d_skip = Tensor::full({channels}, 1.0f, true);
  return p;
}

std::int64_t SsmParams::param_count() const {
  return a_log.numel() + x_to_b.param_count() + x_to_c.param_count() + x_to_dt.param_count() + d_skip.numel();
}

std::vector<double> SsmParams::decay_matrix() const {
  const auto ch = channels(), n_state = state_size();
  const bool tied = a_log.rank() == 1;
  std::vector<double> a(static_cast<std::size_t>(ch * n_state));
  for (std::int64_t c = 0; c < ch; ++c) {
    for (std::int64_t n = 0; n < n_state; ++n) a[c * n_state + n] = decay(a_log.data().data(), tied, c, n, n_state);
  }
  return a;
}

ScanState ScanState::zeros(std::int64_t channels, std::int64_t state_size) {
  ScanState s;
  s.h.assign(static_cast<std::size_t>(channels * state_size), 0.0);
  return s;
}

Tensor scan(const Tensor& x, const Tensor& dt, const Tensor& a_log, const Tensor& b, const Tensor& c,
            const Tensor& d_skip, ScanState* final_state) {
  if (x.rank() != 2 || dt.shape() != x.shape() || b.rank() != 2 || c.shape() != b.shape() ||
      b.dim(0) != x.dim(0)) {
    throw DimensionError("scan: x " + shape_str(x.shape()) + ", dt " + shape_str(dt.shape()) + ", B " +
                         shape_str(b.shape()) + ", C " + shape_str(c.shape()));
  }
  const auto steps = x.dim(0), channels = x.dim(1), state = b.dim(1);
  const bool tied = a_log.rank() == 1;
  if ((tied && a_log.numel() != channels) || (!tied && a_log.shape() != Shape{channels, state}) ||
      d_skip.numel() != channels) {
    throw DimensionError("scan: A " + shape_str(a_log.shape()) + " / D " + shape_str(d_skip.shape()) +
                         " for " + std::to_string(channels) + " channels, state " + std::to_string(state));
  }
  if (steps < 1) throw ContractError("scan needs at least one token");

  const bool recording = should_record({&x, &dt, &a_log, &b, &c, &d_skip});
  const float* xd = x.data().data();
  const float* dtd = dt.data().data();
  const float* ad = a_log.data().data();
  const float* bd = b.data().data();
  const float* cd = c.data().data();
  const float* dd = d_skip.data().data();

  std::vector<double> decay_ax(static_cast<std::size_t>(channels * state));
  for (std::int64_t ch = 0; ch < channels; ++ch) {
    for (std::int64_t n = 0; n < state; ++n) decay_ax[ch * state + n] = decay(ad, tied, ch, n, state);
  }

  // Per-token decays Ā_t, kept (with h_0..h_T, h_0 = 0) only when a backward
  // pass will replay them.
  const std::size_t hsize = static_cast<std::size_t>(channels * state);
  std::vector<double> history(recording ? hsize * static_cast<std::size_t>(steps + 1) : 0, 0.0);
  std::vector<double> abar_hist(recording ? hsize * static_cast<std::size_t>(steps) : 0);
  std::vector<double> h(hsize, 0.0), abar_now(recording ? 0 : hsize);

  Tensor y = Tensor::zeros(x.shape());
  auto yd = y.mutable_data();
  for (std::int64_t t = 0; t < steps; ++t) {
    const float* bt = bd + t * state;
    const float* ct = cd + t * state;
    double* abar = recording ? abar_hist.data() + t * hsize : abar_now.data();
    decay_bar(decay_ax.data(), dtd + t * channels, channels, state, abar);
    for (std::int64_t ch = 0; ch < channels; ++ch) {
      const double u = double(dtd[t * channels + ch]) * xd[t * channels + ch];
      double* hc = h.data() + ch * state;
      const double* ac = abar + ch * state;
      double out = 0;
      for (std::int64_t n = 0; n < state; ++n) {
        hc[n] = ac[n] * hc[n] + u * bt[n];
        out += hc[n] * ct[n];
      }
      out += double(dd[ch]) * xd[t * channels + ch];
      check_finite(out, t);
      yd[t * channels + ch] = static_cast<float>(out);
    }
    if (recording) std::copy(h.begin(), h.end(), history.begin() + static_cast<std::ptrdiff_t>((t + 1) * hsize));
  }
  if (final_state) {
    final_state->h = h;
    final_state->position = steps;
  }

  if (recording) {
    record_op({x, dt, a_log, b, c, d_skip}, y,
              [x, dt, a_log, b, c, d_skip, y, history = std::move(history), abar_hist = std::move(abar_hist),
               decay_ax = std::move(decay_ax),
               steps, channels, state, tied, hsize]() mutable {
                const float* gy = y.grad().data();
                const float* xd = x.data().data();
                const float* dtd = dt.data().data();
                const float* bd = b.data().data();
                const float* cd = c.data().data();
                const float* dd = d_skip.data().data();
                std::vector<double> gx(static_cast<std::size_t>(steps * channels), 0.0);
                std::vector<double> gdt(gx.size(), 0.0);
                std::vector<double> gb(static_cast<std::size_t>(steps * state), 0.0);
                std::vector<double> gc(gb.size(), 0.0);
                std::vector<double> ga(hsize, 0.0);  // d/dA per (channel, state)
                std::vector<double> gd(static_cast<std::size_t>(channels), 0.0);
                std::vector<double> gh(hsize, 0.0);  // d loss / d h_t, carried backwards
                for (std::int64_t t = steps - 1; t >= 0; --t) {
                  const double* h_now = history.data() + (t + 1) * hsize;
                  const double* h_prev = history.data() + t * hsize;
                  const double* abar = abar_hist.data() + t * hsize;
                  const float* bt = bd + t * state;
                  const float* ct = cd + t * state;
                  for (std::int64_t ch = 0; ch < channels; ++ch) {
                    const double g = gy[t * channels + ch];
                    const double xv = xd[t * channels + ch];
                    const double delta = dtd[t * channels + ch];
                    gd[ch] += g * xv;
                    gx[t * channels + ch] += g * dd[ch];
                    double gdelta = 0, gxv = 0;
                    for (std::int64_t n = 0; n < state; ++n) {
                      const std::size_t i = static_cast<std::size_t>(ch * state + n);
                      gc[t * state + n] += g * h_now[i];
                      double& ghi = gh[i];
                      ghi += g * ct[n];
                      const double a = decay_ax[i];
                      const double a_bar = abar[i];
                      const double g_abar = ghi * h_prev[i];
                      gdelta += g_abar * a_bar * a + ghi * bt[n] * xv;
                      ga[i] += g_abar * a_bar * delta;
                      gb[t * state + n] += ghi * delta * xv;
                      gxv += ghi * delta * bt[n];
                      ghi *= a_bar;
                    }
                    gdt[t * channels + ch] += gdelta;
                    gx[t * channels + ch] += gxv;
                  }
                }
                auto flush = [](const Tensor& t, const std::vector<double>& g) {
                  if (!t.requires_grad()) return;
                  auto buf = t.grad_buffer();
                  for (std::size_t i = 0; i < g.size(); ++i) buf[i] += static_cast<float>(g[i]);
                };
                flush(x, gx);
                flush(dt, gdt);
                flush(b, gb);
                flush(c, gc);
                flush(d_skip, gd);
                if (a_log.requires_grad()) {
                  // dA/da_log = A, so d/da_log = d/dA · A.
                  auto buf = a_log.grad_buffer();
                  for (std::int64_t ch = 0; ch < channels; ++ch) {
                    double tied_acc = 0;
                    for (std::int64_t n = 0; n < state; ++n) {
                      const std::size_t i = static_cast<std::size_t>(ch * state + n);
                      const double v = ga[i] * decay_ax[i];
                      if (tied) {
                        tied_acc += v;
                      } else {
                        buf[i] += static_cast<float>(v);
                      }
                    }
                    if (tied) buf[ch] += static_cast<float>(tied_acc);
                  }
                }
              });
  }
  return y;
}

Tensor selective_scan(const SsmParams& p, const Tensor& x, ScanState* final_state) {
  if (x.rank() != 2 || x.dim(1) != p.channels()) {
    throw DimensionError("selective_scan: input " + shape_str(x.shape()) + " for " +
                         std::to_string(p.channels()) + " channels");
  }
  const Tensor dt = softplus(p.x_to_dt.forward(x));
  const Tensor b = p.x_to_b.forward(x);
  const Tensor c = p.x_to_c.forward(x);
  return scan(x, dt, p.a_log, b, c, p.d_skip, final_state);
}

void scan_step(const SsmParams& p, ScanState& state, const float* x, float* y) {
  const auto channels = p.channels(), n_state = p.state_size();
  if (state.h.size() != static_cast<std::size_t>(channels * n_state)) {
    throw ContractError("scan_step: state of size " + std::to_string(state.h.size()) + " for " +
                        std::to_string(channels) + "x" + std::to_string(n_state) + " SSM");
  }
  std::vector<float> dt_raw(static_cast<std::size_t>(channels));
  std::vector<float> b(static_cast<std::size_t>(n_state)), c(b.size());
  p.x_to_dt.apply(x, dt_raw.data());
  p.x_to_b.apply(x, b.data());
  p.x_to_c.apply(x, c.data());
  const bool tied = p.a_log.rank() == 1;
  const float* ad = p.a_log.data().data();
  const float* dd = p.d_skip.data().data();
  // Round dt through float so the step path sees exactly what the batch path stores.
  std::vector<float> dt(dt_raw.size());
  for (std::size_t i = 0; i < dt.size(); ++i) dt[i] = static_cast<float>(softplus_value(dt_raw[i]));
  std::vector<double> decay_ax(static_cast<std::size_t>(channels * n_state)), abar(decay_ax.size());
  for (std::int64_t ch = 0; ch < channels; ++ch) {
    for (std::int64_t n = 0; n < n_state; ++n) decay_ax[ch * n_state + n] = decay(ad, tied, ch, n, n_state);
  }
  decay_bar(decay_ax.data(), dt.data(), channels, n_state, abar.data());
  for (std::int64_t ch = 0; ch < channels; ++ch) {
    const double u = double(dt[ch]) * x[ch];
    double* hc = state.h.data() + ch * n_state;
    const double* ac = abar.data() + ch * n_state;
    double out = 0;
    for (std::int64_t n = 0; n < n_state; ++n) {
      hc[n] = ac[n] * hc[n] + u * b[n];
      out += hc[n] * c[n];
    }
    out += double(dd[ch]) * x[ch];
    check_finite(out, state.position);
    y[ch] = static_cast<float>(out);
  }
  ++state.position;
}

std::vector<float> scan_step(const SsmParams& p, ScanState& state, std::span<const float> x) {
  if (static_cast<std::int64_t>(x.size()) != p.channels()) {
    throw DimensionError("scan_step: input of " + std::to_string(x.size()) + " for " +
                         std::to_string(p.channels()) + " channels");
  }
  std::vector<float> y(x.size());
  scan_step(p, state, x.data(), y.data());
  return y;
}

}  // namespace mshed::ssm
