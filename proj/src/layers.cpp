#include "mshed/layers.hpp"

#include <algorithm>
#include <cmath>

#include "mshed/errors.hpp"
#include "mshed/numerics/kernels.hpp"

namespace mshed::layers {
namespace {

void require_rank2(const Tensor& t, const char* op) {
  if (t.rank() != 2) {
    throw DimensionError(std::string(op) + ": expected [rows x cols], got " + shape_str(t.shape()));
  }
}

Tensor normal_tensor(Shape shape, Rng& rng, double std) {
  Tensor t = Tensor::zeros(std::move(shape), true);
  for (auto& v : t.mutable_data()) v = static_cast<float>(rng.normal() * std);
  return t;
}

constexpr double kRopeBase = 10000.0;

}  // namespace

Linear Linear::create(std::int64_t in, std::int64_t out, bool with_bias, Rng& rng, double init_std) {
  Linear l;
  l.weight = normal_tensor({out, in}, rng, init_std);
  if (with_bias) l.bias = Tensor::zeros({out}, true);
  return l;
}

void Linear::apply(const float* x, float* y) const {
  kernels::matvec(weight.data().data(), x, bias.defined() ? bias.data().data() : nullptr, y, out(), in());
}

RmsNorm RmsNorm::create(std::int64_t width) { return RmsNorm{Tensor::full({width}, 1.0f, true)}; }

Tensor RmsNorm::forward(const Tensor& x) const { return rmsnorm_forward(x, scale); }

void RmsNorm::apply(const float* x, float* y) const {
  const auto d = scale.numel();
  const double r = 1.0 / std::sqrt(kernels::dot(x, x, d) / static_cast<double>(d) + kRmsEps);
  const auto s = scale.data();
  for (std::int64_t i = 0; i < d; ++i) y[i] = static_cast<float>(x[i] * r * s[i]);
}

CausalConv1d CausalConv1d::create(std::int64_t channels, std::int64_t width, Rng& rng) {
  CausalConv1d c;
  const double bound = 1.0 / std::sqrt(static_cast<double>(width));
  c.kernel = Tensor::zeros({channels, width}, true);
  for (auto& v : c.kernel.mutable_data()) v = static_cast<float>(rng.uniform(-bound, bound));
  c.bias = Tensor::zeros({channels}, true);
  return c;
}

GatedMlp make_gated_mlp(std::int64_t d_model, std::int64_t width, Rng& rng, double init_std,
                        double out_std) {
  GatedMlp m;
  m.up = Linear::create(d_model, width, false, rng, init_std);
  m.gate = Linear::create(d_model, width, false, rng, init_std);
  m.down = Linear::create(width, d_model, false, rng, out_std);
  return m;
}

MultiHeadAttention make_mha(std::int64_t d_model, std::int64_t n_heads, Rng& rng, double init_std,
                            double out_std) {
  if (n_heads <= 0 || d_model % n_heads != 0 || (d_model / n_heads) % 2 != 0) {
    throw ValidationError("attention needs an even head dimension dividing d_model (d_model=" +
                          std::to_string(d_model) + ", heads=" + std::to_string(n_heads) + ")");
  }
  MultiHeadAttention a;
  a.q = Linear::create(d_model, d_model, false, rng, init_std);
  a.k = Linear::create(d_model, d_model, false, rng, init_std);
  a.v = Linear::create(d_model, d_model, false, rng, init_std);
  a.o = Linear::create(d_model, d_model, false, rng, out_std);
  a.n_heads = n_heads;
  return a;
}

Tensor rmsnorm_forward(const Tensor& x, const Tensor& scale, double eps) {
  require_rank2(x, "rmsnorm");
  const auto rows = x.dim(0), d = x.dim(1);
  if (scale.numel() != d) {
    throw DimensionError("rmsnorm: scale " + shape_str(scale.shape()) + " for input " + shape_str(x.shape()));
  }
  Tensor y = Tensor::zeros(x.shape());
  std::vector<double> inv(static_cast<std::size_t>(rows));
  const auto xd = x.data();
  const auto sd = scale.data();
  auto yd = y.mutable_data();
  for (std::int64_t r = 0; r < rows; ++r) {
    const float* row = xd.data() + r * d;
    inv[r] = 1.0 / std::sqrt(kernels::dot(row, row, d) / static_cast<double>(d) + eps);
    for (std::int64_t i = 0; i < d; ++i) yd[r * d + i] = static_cast<float>(row[i] * inv[r] * sd[i]);
  }
  if (should_record({&x, &scale})) {
    record_op({x, scale}, y, [x, scale, y, inv = std::move(inv), rows, d]() mutable {
      const auto dy = y.grad();
      const auto xd = x.data();
      const auto sd = scale.data();
      std::span<float> dx = x.requires_grad() ? x.grad_buffer() : std::span<float>{};
      std::span<float> ds = scale.requires_grad() ? scale.grad_buffer() : std::span<float>{};
      for (std::int64_t r = 0; r < rows; ++r) {
        const double ir = inv[r];
        double proj = 0;  // Σ g_i s_i x_i
        for (std::int64_t i = 0; i < d; ++i) proj += double(dy[r * d + i]) * sd[i] * xd[r * d + i];
        for (std::int64_t i = 0; i < d; ++i) {
          const double xi = xd[r * d + i];
          const double gi = dy[r * d + i];
          if (!dx.empty()) {
            dx[r * d + i] += static_cast<float>(gi * sd[i] * ir - xi * ir * ir * ir * proj / double(d));
          }
          if (!ds.empty()) ds[i] += static_cast<float>(gi * xi * ir);
        }
      }
    });
  }
  return y;
}

Tensor causal_conv1d(const Tensor& x, const Tensor& kernel, const Tensor& bias) {
  require_rank2(x, "causal_conv1d");
  require_rank2(kernel, "causal_conv1d");
  const auto steps = x.dim(0), channels = x.dim(1), width = kernel.dim(1);
  if (kernel.dim(0) != channels || bias.numel() != channels) {
    throw DimensionError("causal_conv1d: kernel " + shape_str(kernel.shape()) + " / bias " +
                         shape_str(bias.shape()) + " for input " + shape_str(x.shape()));
  }
  Tensor y = Tensor::zeros(x.shape());
  const auto xd = x.data();
  const auto kd = kernel.data();
  const auto bd = bias.data();
  auto yd = y.mutable_data();
  for (std::int64_t t = 0; t < steps; ++t) {
    for (std::int64_t c = 0; c < channels; ++c) {
      double acc = bd[c];
      for (std::int64_t j = 0; j < width; ++j) {
        const std::int64_t src = t - (width - 1) + j;
        if (src >= 0) acc += double(kd[c * width + j]) * xd[src * channels + c];
      }
      yd[t * channels + c] = static_cast<float>(acc);
    }
  }
  if (should_record({&x, &kernel, &bias})) {
    record_op({x, kernel, bias}, y, [x, kernel, bias, y, steps, channels, width]() mutable {
      const auto dy = y.grad();
      const auto xd = x.data();
      const auto kd = kernel.data();
      std::span<float> dx = x.requires_grad() ? x.grad_buffer() : std::span<float>{};
      std::span<float> dk = kernel.requires_grad() ? kernel.grad_buffer() : std::span<float>{};
      std::span<float> db = bias.requires_grad() ? bias.grad_buffer() : std::span<float>{};
      std::vector<double> dk_acc(static_cast<std::size_t>(channels * width), 0.0);
      std::vector<double> db_acc(static_cast<std::size_t>(channels), 0.0);
      for (std::int64_t t = 0; t < steps; ++t) {
        for (std::int64_t c = 0; c < channels; ++c) {
          const double g = dy[t * channels + c];
          db_acc[c] += g;
          for (std::int64_t j = 0; j < width; ++j) {
            const std::int64_t src = t - (width - 1) + j;
            if (src < 0) continue;
            dk_acc[c * width + j] += g * xd[src * channels + c];
            if (!dx.empty()) dx[src * channels + c] += static_cast<float>(g * kd[c * width + j]);
          }
        }
      }
      for (std::size_t i = 0; i < dk.size(); ++i) dk[i] += static_cast<float>(dk_acc[i]);
      for (std::size_t i = 0; i < db.size(); ++i) db[i] += static_cast<float>(db_acc[i]);
    });
  }
  return y;
}

Tensor gated_mlp_forward(const GatedMlp& m, const Tensor& x, std::int64_t active_width) {
  if (x.rank() != 2 || x.dim(1) != m.up.in()) {
    throw DimensionError("gated_mlp: input " + shape_str(x.shape()) + " for MLP of input width " +
                         std::to_string(m.up.in()));
  }
  const auto full = m.width();
  if (active_width < 0) active_width = full;
  if (active_width > full) {
    throw CapacityError("gated_mlp: active width " + std::to_string(active_width) + " exceeds " +
                        std::to_string(full));
  }
  if (active_width == 0) return Tensor::zeros({x.dim(0), m.down.out()});
  if (active_width == full) {
    return m.down.forward(mul(silu(m.gate.forward(x)), m.up.forward(x)));
  }
  const Tensor up = narrow_rows(m.up.weight, active_width);
  const Tensor gate = narrow_rows(m.gate.weight, active_width);
  const Tensor down = narrow_cols(m.down.weight, active_width);
  return linear(mul(silu(linear(x, gate)), linear(x, up)), down);
}

void rope_apply(float* row, std::int64_t width, std::int64_t n_heads, std::int64_t position, bool inverse) {
  const auto head_dim = width / n_heads;
  for (std::int64_t h = 0; h < n_heads; ++h) {
    float* head = row + h * head_dim;
    for (std::int64_t i = 0; i < head_dim / 2; ++i) {
      const double freq = std::pow(kRopeBase, -2.0 * static_cast<double>(i) / static_cast<double>(head_dim));
      const double angle = static_cast<double>(position) * freq * (inverse ? -1.0 : 1.0);
      const double c = std::cos(angle), s = std::sin(angle);
      const double a = head[2 * i], b = head[2 * i + 1];
      head[2 * i] = static_cast<float>(a * c - b * s);
      head[2 * i + 1] = static_cast<float>(a * s + b * c);
    }
  }
}

Tensor rope(const Tensor& x, std::int64_t n_heads, std::int64_t position0) {
  require_rank2(x, "rope");
  const auto rows = x.dim(0), width = x.dim(1);
  if (n_heads <= 0 || width % n_heads != 0 || (width / n_heads) % 2 != 0) {
    throw DimensionError("rope: width " + std::to_string(width) + " does not split into " +
                         std::to_string(n_heads) + " even heads");
  }
  Tensor y = x.clone();
  y.set_requires_grad(false);
  auto yd = y.mutable_data();
  for (std::int64_t r = 0; r < rows; ++r) rope_apply(yd.data() + r * width, width, n_heads, position0 + r);
  if (should_record({&x})) {
    record_op({x}, y, [x, y, rows, width, n_heads, position0]() mutable {
      std::vector<float> g(y.grad().begin(), y.grad().end());
      auto dx = x.grad_buffer();
      for (std::int64_t r = 0; r < rows; ++r) {
        rope_apply(g.data() + r * width, width, n_heads, position0 + r, true);
        for (std::int64_t i = 0; i < width; ++i) dx[r * width + i] += g[r * width + i];
      }
    });
  }
  return y;
}

Tensor causal_attention(const Tensor& q, const Tensor& k, const Tensor& v, std::int64_t n_heads) {
  require_rank2(q, "causal_attention");
  if (k.shape() != q.shape() || v.shape() != q.shape()) {
    throw DimensionError("causal_attention: q " + shape_str(q.shape()) + ", k " + shape_str(k.shape()) +
                         ", v " + shape_str(v.shape()));
  }
  const auto steps = q.dim(0), width = q.dim(1);
  if (steps < 1) throw ContractError("causal_attention needs at least one position");
  const auto hd = width / n_heads;
  const double scale = 1.0 / std::sqrt(static_cast<double>(hd));
  const auto qd = q.data(), kd = k.data(), vd = v.data();
  // probs[h][t][s] for s ≤ t, stored densely.
  std::vector<double> probs(static_cast<std::size_t>(n_heads * steps * steps), 0.0);
  Tensor y = Tensor::zeros(q.shape());
  auto yd = y.mutable_data();
  for (std::int64_t h = 0; h < n_heads; ++h) {
    for (std::int64_t t = 0; t < steps; ++t) {
      double* p = probs.data() + (h * steps + t) * steps;
      double mx = -INFINITY;
      for (std::int64_t s = 0; s <= t; ++s) {
        p[s] = kernels::dot(qd.data() + t * width + h * hd, kd.data() + s * width + h * hd, hd) * scale;
        mx = std::max(mx, p[s]);
      }
      double z = 0;
      for (std::int64_t s = 0; s <= t; ++s) {
        p[s] = std::exp(p[s] - mx);
        z += p[s];
      }
      for (std::int64_t s = 0; s <= t; ++s) p[s] /= z;
      for (std::int64_t c = 0; c < hd; ++c) {
        double acc = 0;
        for (std::int64_t s = 0; s <= t; ++s) acc += p[s] * vd[s * width + h * hd + c];
        yd[t * width + h * hd + c] = static_cast<float>(acc);
      }
    }
  }
  if (should_record({&q, &k, &v})) {
    record_op({q, k, v}, y, [q, k, v, y, probs = std::move(probs), steps, width, n_heads, hd, scale]() mutable {
      const auto dy = y.grad();
      const auto qd = q.data(), kd = k.data(), vd = v.data();
      std::vector<double> dq(static_cast<std::size_t>(steps * width), 0.0);
      std::vector<double> dk(dq.size(), 0.0), dv(dq.size(), 0.0);
      std::vector<double> dp(static_cast<std::size_t>(steps));
      for (std::int64_t h = 0; h < n_heads; ++h) {
        for (std::int64_t t = 0; t < steps; ++t) {
          const double* p = probs.data() + (h * steps + t) * steps;
          const float* g = dy.data() + t * width + h * hd;
          double row_dot = 0;
          for (std::int64_t s = 0; s <= t; ++s) {
            double acc = 0;
            for (std::int64_t c = 0; c < hd; ++c) {
              acc += double(g[c]) * vd[s * width + h * hd + c];
              dv[s * width + h * hd + c] += p[s] * g[c];
            }
            dp[s] = acc;
            row_dot += acc * p[s];
          }
          for (std::int64_t s = 0; s <= t; ++s) {
            const double ds = p[s] * (dp[s] - row_dot) * scale;
            for (std::int64_t c = 0; c < hd; ++c) {
              dq[t * width + h * hd + c] += ds * kd[s * width + h * hd + c];
              dk[s * width + h * hd + c] += ds * qd[t * width + h * hd + c];
            }
          }
        }
      }
      auto flush = [](const Tensor& t, const std::vector<double>& g) {
        if (!t.requires_grad()) return;
        auto buf = t.grad_buffer();
        for (std::size_t i = 0; i < g.size(); ++i) buf[i] += static_cast<float>(g[i]);
      };
      flush(q, dq);
      flush(k, dk);
      flush(v, dv);
    });
  }
  return y;
}

Tensor mha_forward(const MultiHeadAttention& a, const Tensor& x, KvCache* capture) {
  if (x.rank() != 2 || x.dim(1) != a.q.in()) {
    throw DimensionError("mha: input " + shape_str(x.shape()) + " for attention of width " +
                         std::to_string(a.q.in()));
  }
  const Tensor q = rope(a.q.forward(x), a.n_heads);
  const Tensor k = rope(a.k.forward(x), a.n_heads);
  const Tensor v = a.v.forward(x);
  if (capture) {
    capture->keys.assign(k.data().begin(), k.data().end());
    capture->values.assign(v.data().begin(), v.data().end());
    capture->length = x.dim(0);
  }
  return a.o.forward(causal_attention(q, k, v, a.n_heads));
}

void mha_step(const MultiHeadAttention& a, KvCache& cache, const float* x, float* y) {
  const auto width = a.q.out();
  const auto hd = a.head_dim();
  const auto pos = cache.length;
  std::vector<float> q(static_cast<std::size_t>(width)), k(q.size()), v(q.size()), ctx(q.size());
  a.q.apply(x, q.data());
  a.k.apply(x, k.data());
  a.v.apply(x, v.data());
  rope_apply(q.data(), width, a.n_heads, pos);
  rope_apply(k.data(), width, a.n_heads, pos);
  cache.keys.insert(cache.keys.end(), k.begin(), k.end());
  cache.values.insert(cache.values.end(), v.begin(), v.end());
  cache.length = pos + 1;
  const double scale = 1.0 / std::sqrt(static_cast<double>(hd));
  std::vector<double> p(static_cast<std::size_t>(cache.length));
  for (std::int64_t h = 0; h < a.n_heads; ++h) {
    double mx = -INFINITY;
    for (std::int64_t s = 0; s < cache.length; ++s) {
      p[s] = kernels::dot(q.data() + h * hd, cache.keys.data() + s * width + h * hd, hd) * scale;
      mx = std::max(mx, p[s]);
    }
    double z = 0;
    for (auto& e : p) {
      e = std::exp(e - mx);
      z += e;
    }
    for (std::int64_t c = 0; c < hd; ++c) {
      double acc = 0;
      for (std::int64_t s = 0; s < cache.length; ++s) acc += p[s] * cache.values[s * width + h * hd + c];
      ctx[h * hd + c] = static_cast<float>(acc / z);
    }
  }
  a.o.apply(ctx.data(), y);
}

void conv_step(const CausalConv1d& conv, ConvState& state, const float* x, float* y) {
  const auto channels = conv.channels(), width = conv.width();
  if (static_cast<std::int64_t>(state.history.size()) != (width - 1) * channels) {
    state.history.assign(static_cast<std::size_t>((width - 1) * channels), 0.0f);
  }
  const auto kd = conv.kernel.data();
  const auto bd = conv.bias.data();
  for (std::int64_t c = 0; c < channels; ++c) {
    double acc = bd[c];
    for (std::int64_t j = 0; j + 1 < width; ++j) acc += double(kd[c * width + j]) * state.history[j * channels + c];
    acc += double(kd[c * width + width - 1]) * x[c];
    y[c] = static_cast<float>(acc);
  }
  if (width > 1) {
    std::copy(state.history.begin() + channels, state.history.end(), state.history.begin());
    std::copy(x, x + channels, state.history.end() - channels);
  }
}

}  // namespace mshed::layers
