#pragma once

#include <cstdint>
#include <span>
#include <vector>

#include "mshed/numerics/ops.hpp"
#include "mshed/numerics/random.hpp"
#include "mshed/numerics/tensor.hpp"

namespace mshed::layers {

inline constexpr double kRmsEps = 1e-5;
inline constexpr std::int64_t kDefaultConvWidth = 4;

struct Linear {
  Tensor weight;  // [out × in]
  Tensor bias;    // [out] or undefined

  static Linear create(std::int64_t in, std::int64_t out, bool with_bias, Rng& rng, double init_std);

  std::int64_t in() const { return weight.dim(1); }
  std::int64_t out() const { return weight.dim(0); }
  std::int64_t param_count() const { return weight.numel() + (bias.defined() ? bias.numel() : 0); }

  Tensor forward(const Tensor& x) const { return linear(x, weight, bias); }
  // Single-row inference: y[out] = W x + b.
  void apply(const float* x, float* y) const;
};

struct RmsNorm {
  Tensor scale;  // [d]

  static RmsNorm create(std::int64_t width);
  Tensor forward(const Tensor& x) const;
  void apply(const float* x, float* y) const;
};

// Depthwise causal convolution over the time axis of x[T × channels].
struct CausalConv1d {
  Tensor kernel;  // [channels × width]; tap width-1 multiplies the current token
  Tensor bias;    // [channels]

  static CausalConv1d create(std::int64_t channels, std::int64_t width, Rng& rng);
  std::int64_t channels() const { return kernel.dim(0); }
  std::int64_t width() const { return kernel.dim(1); }
};

// down( silu(gate(x)) ∘ up(x) ). The intermediate width D shrinks under
// channel slicing; up/gate/down always agree on it.
struct GatedMlp {
  Linear up;
  Linear gate;
  Linear down;

  std::int64_t width() const { return up.out(); }
  std::int64_t param_count() const { return up.param_count() + gate.param_count() + down.param_count(); }
};

GatedMlp make_gated_mlp(std::int64_t d_model, std::int64_t width, Rng& rng, double init_std,
                        double out_std);

struct MultiHeadAttention {
  Linear q, k, v, o;
  std::int64_t n_heads = 1;

  std::int64_t head_dim() const { return q.out() / n_heads; }
  std::int64_t param_count() const {
    return q.param_count() + k.param_count() + v.param_count() + o.param_count();
  }
};

MultiHeadAttention make_mha(std::int64_t d_model, std::int64_t n_heads, Rng& rng, double init_std,
                            double out_std);

// x / sqrt(mean(x²) + ε) ∘ scale, row-wise.
Tensor rmsnorm_forward(const Tensor& x, const Tensor& scale, double eps = kRmsEps);

Tensor causal_conv1d(const Tensor& x, const Tensor& kernel, const Tensor& bias);

// Evaluates the MLP using only its first `active_width` channels (the rest
// behave as if sliced away). -1 means the full width.
Tensor gated_mlp_forward(const GatedMlp& m, const Tensor& x, std::int64_t active_width = -1);

// Rotary position encoding applied per head; `position0` is the absolute
// position of row 0.
Tensor rope(const Tensor& x, std::int64_t n_heads, std::int64_t position0 = 0);

// Causal softmax attention over q,k,v [T × d] split into n_heads.
Tensor causal_attention(const Tensor& q, const Tensor& k, const Tensor& v, std::int64_t n_heads);

// Keys/values of every processed position, already rotated.
struct KvCache {
  std::vector<float> keys;
  std::vector<float> values;
  std::int64_t length = 0;
};

Tensor mha_forward(const MultiHeadAttention& a, const Tensor& x, KvCache* capture = nullptr);

// One-token attention step; appends to `cache`. x and y have d_model entries.
void mha_step(const MultiHeadAttention& a, KvCache& cache, const float* x, float* y);

// Last (width-1) conv inputs, oldest first.
struct ConvState {
  std::vector<float> history;
};

void conv_step(const CausalConv1d& conv, ConvState& state, const float* x, float* y);

void rope_apply(float* row, std::int64_t width, std::int64_t n_heads, std::int64_t position,
                bool inverse = false);

}  // namespace mshed::layers
