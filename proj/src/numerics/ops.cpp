#include "mshed/numerics/ops.hpp"

#include <algorithm>
#include <cmath>
#include <vector>

#include "mshed/errors.hpp"
#include "mshed/numerics/kernels.hpp"

namespace mshed {
namespace {

void require_rank(const Tensor& t, std::int64_t rank, const char* op) {
  if (t.rank() != rank) {
    throw DimensionError(std::string(op) + ": expected rank " + std::to_string(rank) + ", got " +
                         shape_str(t.shape()));
  }
}

double sigmoid_value(double x) {
  if (x >= 0) return 1.0 / (1.0 + std::exp(-x));
  const double e = std::exp(x);
  return e / (1.0 + e);
}

}  // namespace

double softplus_value(double x) {
  // log(1 + e^x) without overflow for large |x|.
  if (x > 20.0) return x + std::log1p(std::exp(-x));
  return std::log1p(std::exp(x));
}

Tensor matmul(const Tensor& a, const Tensor& b) {
  require_rank(a, 2, "matmul");
  require_rank(b, 2, "matmul");
  const auto m = a.dim(0), k = a.dim(1), n = b.dim(1);
  if (b.dim(0) != k) {
    throw DimensionError("matmul: inner dimensions differ for " + shape_str(a.shape()) + " and " +
                         shape_str(b.shape()));
  }
  Tensor y = Tensor::zeros({m, n});
  kernels::matmul_nn(a.data().data(), b.data().data(), y.mutable_data().data(), m, k, n);
  if (should_record({&a, &b})) {
    record_op({a, b}, y, [a, b, y, m, k, n]() mutable {
      const float* dy = y.grad().data();
      if (a.requires_grad()) kernels::matmul_nt(dy, b.data().data(), a.grad_buffer().data(), m, n, k, true);
      if (b.requires_grad()) kernels::matmul_tn(a.data().data(), dy, b.grad_buffer().data(), k, m, n, true);
    });
  }
  return y;
}

Tensor linear(const Tensor& x, const Tensor& weight, const Tensor& bias) {
  require_rank(x, 2, "linear");
  require_rank(weight, 2, "linear");
  const auto rows = x.dim(0), in = x.dim(1), out = weight.dim(0);
  if (weight.dim(1) != in) {
    throw DimensionError("linear: input " + shape_str(x.shape()) + " does not match weight " +
                         shape_str(weight.shape()));
  }
  if (bias.defined() && bias.numel() != out) {
    throw DimensionError("linear: bias " + shape_str(bias.shape()) + " does not match weight " +
                         shape_str(weight.shape()));
  }
  Tensor y = Tensor::zeros({rows, out});
  auto yd = y.mutable_data();
  kernels::matmul_nt(x.data().data(), weight.data().data(), yd.data(), rows, in, out);
  if (bias.defined()) {
    const auto bd = bias.data();
    for (std::int64_t r = 0; r < rows; ++r) {
      for (std::int64_t o = 0; o < out; ++o) yd[r * out + o] += bd[o];
    }
  }
  if (should_record({&x, &weight, &bias})) {
    record_op({x, weight, bias}, y, [x, weight, bias, y, rows, in, out]() mutable {
      const float* dy = y.grad().data();
      if (x.requires_grad()) {
        kernels::matmul_nn(dy, weight.data().data(), x.grad_buffer().data(), rows, out, in, true);
      }
      if (weight.requires_grad()) {
        kernels::matmul_tn(dy, x.data().data(), weight.grad_buffer().data(), out, rows, in, true);
      }
      if (bias.defined() && bias.requires_grad()) {
        auto db = bias.grad_buffer();
        for (std::int64_t o = 0; o < out; ++o) {
          double acc = 0;
          for (std::int64_t r = 0; r < rows; ++r) acc += dy[r * out + o];
          db[o] += static_cast<float>(acc);
        }
      }
    });
  }
  return y;
}

Tensor binary(BinaryOp op, const Tensor& a, const Tensor& b) {
  const bool scalar_rhs = b.numel() == 1 && a.numel() != 1;
  if (!scalar_rhs && a.shape() != b.shape()) {
    throw DimensionError("elementwise: incompatible shapes " + shape_str(a.shape()) + " and " +
                         shape_str(b.shape()));
  }
  const auto n = a.numel();
  Tensor y = Tensor::zeros(a.shape());
  auto yd = y.mutable_data();
  const auto ad = a.data();
  const auto bd = b.data();
  for (std::int64_t i = 0; i < n; ++i) {
    const float bv = bd[scalar_rhs ? 0 : i];
    yd[i] = op == BinaryOp::add ? ad[i] + bv : ad[i] * bv;
  }
  if (should_record({&a, &b})) {
    record_op({a, b}, y, [op, a, b, y, n, scalar_rhs]() mutable {
      const auto dy = y.grad();
      if (a.requires_grad()) {
        auto da = a.grad_buffer();
        const auto bd = b.data();
        for (std::int64_t i = 0; i < n; ++i) {
          da[i] += op == BinaryOp::add ? dy[i] : dy[i] * bd[scalar_rhs ? 0 : i];
        }
      }
      if (b.requires_grad()) {
        auto db = b.grad_buffer();
        const auto ad = a.data();
        if (scalar_rhs) {
          double acc = 0;
          for (std::int64_t i = 0; i < n; ++i) acc += op == BinaryOp::add ? dy[i] : double(dy[i]) * ad[i];
          db[0] += static_cast<float>(acc);
        } else {
          for (std::int64_t i = 0; i < n; ++i) db[i] += op == BinaryOp::add ? dy[i] : dy[i] * ad[i];
        }
      }
    });
  }
  return y;
}

Tensor unary(UnaryOp op, const Tensor& x) {
  const auto n = x.numel();
  Tensor y = Tensor::zeros(x.shape());
  auto yd = y.mutable_data();
  const auto xd = x.data();
  for (std::int64_t i = 0; i < n; ++i) {
    const double v = xd[i];
    double r = 0;
    switch (op) {
      case UnaryOp::silu: r = v * sigmoid_value(v); break;
      case UnaryOp::softplus: r = softplus_value(v); break;
      case UnaryOp::exp: r = std::exp(v); break;
      case UnaryOp::neg: r = -v; break;
      case UnaryOp::sigmoid: r = sigmoid_value(v); break;
    }
    yd[i] = static_cast<float>(r);
  }
  if (should_record({&x})) {
    record_op({x}, y, [op, x, y, n]() mutable {
      const auto dy = y.grad();
      const auto xd = x.data();
      const auto yd = y.data();
      auto dx = x.grad_buffer();
      for (std::int64_t i = 0; i < n; ++i) {
        const double v = xd[i];
        double d = 0;
        switch (op) {
          case UnaryOp::silu: {
            const double s = sigmoid_value(v);
            d = s * (1.0 + v * (1.0 - s));
            break;
          }
          case UnaryOp::softplus: d = sigmoid_value(v); break;
          case UnaryOp::exp: d = yd[i]; break;
          case UnaryOp::neg: d = -1.0; break;
          case UnaryOp::sigmoid: d = double(yd[i]) * (1.0 - yd[i]); break;
        }
        dx[i] += static_cast<float>(dy[i] * d);
      }
    });
  }
  return y;
}

Tensor scale(const Tensor& x, float factor) {
  Tensor y = Tensor::zeros(x.shape());
  auto yd = y.mutable_data();
  const auto xd = x.data();
  for (std::size_t i = 0; i < yd.size(); ++i) yd[i] = xd[i] * factor;
  if (should_record({&x})) {
    record_op({x}, y, [x, y, factor]() mutable {
      const auto dy = y.grad();
      auto dx = x.grad_buffer();
      for (std::size_t i = 0; i < dx.size(); ++i) dx[i] += dy[i] * factor;
    });
  }
  return y;
}

Tensor sum(const Tensor& x) {
  double acc = 0;
  for (float v : x.data()) acc += v;
  Tensor y = Tensor::scalar(static_cast<float>(acc));
  if (should_record({&x})) {
    record_op({x}, y, [x, y]() mutable {
      const float g = y.grad()[0];
      for (auto& d : x.grad_buffer()) d += g;
    });
  }
  return y;
}

Tensor mean(const Tensor& x) {
  if (x.numel() == 0) throw ContractError("mean of empty tensor");
  return scale(sum(x), 1.0f / static_cast<float>(x.numel()));
}

Tensor narrow_rows(const Tensor& x, std::int64_t rows) {
  require_rank(x, 2, "narrow_rows");
  if (rows < 0 || rows > x.dim(0)) {
    throw DimensionError("narrow_rows: " + std::to_string(rows) + " rows of " + shape_str(x.shape()));
  }
  const auto cols = x.dim(1);
  std::vector<float> out(x.data().begin(), x.data().begin() + rows * cols);
  Tensor y = Tensor::from_data({rows, cols}, std::move(out));
  if (should_record({&x})) {
    record_op({x}, y, [x, y]() mutable {
      const auto dy = y.grad();
      auto dx = x.grad_buffer();
      for (std::size_t i = 0; i < dy.size(); ++i) dx[i] += dy[i];
    });
  }
  return y;
}

Tensor narrow_cols(const Tensor& x, std::int64_t cols) {
  require_rank(x, 2, "narrow_cols");
  if (cols < 0 || cols > x.dim(1)) {
    throw DimensionError("narrow_cols: " + std::to_string(cols) + " columns of " + shape_str(x.shape()));
  }
  const auto rows = x.dim(0), full = x.dim(1);
  Tensor y = Tensor::zeros({rows, cols});
  auto yd = y.mutable_data();
  const auto xd = x.data();
  for (std::int64_t r = 0; r < rows; ++r) {
    std::copy_n(xd.begin() + r * full, cols, yd.begin() + r * cols);
  }
  if (should_record({&x})) {
    record_op({x}, y, [x, y, rows, cols, full]() mutable {
      const auto dy = y.grad();
      auto dx = x.grad_buffer();
      for (std::int64_t r = 0; r < rows; ++r) {
        for (std::int64_t c = 0; c < cols; ++c) dx[r * full + c] += dy[r * cols + c];
      }
    });
  }
  return y;
}

Tensor embedding(const Tensor& weight, std::span<const std::int32_t> ids) {
  require_rank(weight, 2, "embedding");
  const auto vocab = weight.dim(0), width = weight.dim(1);
  const auto rows = static_cast<std::int64_t>(ids.size());
  Tensor y = Tensor::zeros({rows, width});
  auto yd = y.mutable_data();
  const auto wd = weight.data();
  for (std::int64_t r = 0; r < rows; ++r) {
    const auto id = ids[static_cast<std::size_t>(r)];
    if (id < 0 || id >= vocab) {
      throw InputError("token id " + std::to_string(id) + " at position " + std::to_string(r) +
                           " outside vocabulary of " + std::to_string(vocab),
                       r);
    }
    std::copy_n(wd.begin() + id * width, width, yd.begin() + r * width);
  }
  if (should_record({&weight})) {
    std::vector<std::int32_t> saved(ids.begin(), ids.end());
    record_op({weight}, y, [weight, y, saved = std::move(saved), width]() mutable {
      const auto dy = y.grad();
      auto dw = weight.grad_buffer();
      for (std::size_t r = 0; r < saved.size(); ++r) {
        for (std::int64_t c = 0; c < width; ++c) dw[saved[r] * width + c] += dy[r * width + c];
      }
    });
  }
  return y;
}

Tensor cross_entropy(const Tensor& logits, std::span<const std::int32_t> targets) {
  require_rank(logits, 2, "cross_entropy");
  const auto rows = logits.dim(0), vocab = logits.dim(1);
  if (static_cast<std::int64_t>(targets.size()) != rows || rows == 0) {
    throw DimensionError("cross_entropy: " + std::to_string(targets.size()) + " targets for logits " +
                         shape_str(logits.shape()));
  }
  const auto ld = logits.data();
  std::vector<double> probs(static_cast<std::size_t>(rows * vocab));
  double total = 0;
  for (std::int64_t r = 0; r < rows; ++r) {
    const float* row = ld.data() + r * vocab;
    const double mx = *std::max_element(row, row + vocab);
    double z = 0;
    for (std::int64_t v = 0; v < vocab; ++v) {
      probs[r * vocab + v] = std::exp(row[v] - mx);
      z += probs[r * vocab + v];
    }
    for (std::int64_t v = 0; v < vocab; ++v) probs[r * vocab + v] /= z;
    const auto t = targets[static_cast<std::size_t>(r)];
    if (t < 0 || t >= vocab) throw InputError("target id out of range at row " + std::to_string(r), r);
    total += -(row[t] - mx - std::log(z));
  }
  Tensor y = Tensor::scalar(static_cast<float>(total / static_cast<double>(rows)));
  if (should_record({&logits})) {
    std::vector<std::int32_t> saved(targets.begin(), targets.end());
    record_op({logits}, y,
           [logits, y, probs = std::move(probs), saved = std::move(saved), rows, vocab]() mutable {
             const double g = y.grad()[0] / static_cast<double>(rows);
             auto dl = logits.grad_buffer();
             for (std::int64_t r = 0; r < rows; ++r) {
               for (std::int64_t v = 0; v < vocab; ++v) {
                 double p = probs[r * vocab + v];
                 if (v == saved[r]) p -= 1.0;
                 dl[r * vocab + v] += static_cast<float>(g * p);
               }
             }
           });
  }
  return y;
}

}  // namespace mshed
