#include <doctest.h>

#include <cmath>

#include "mshed/errors.hpp"
#include "mshed/numerics/graph.hpp"
#include "mshed/numerics/kernels.hpp"
#include "mshed/numerics/ops.hpp"
#include "mshed/numerics/random.hpp"
#include "support/test_support.hpp"

using namespace mshed;
using mshed::testing::gradient_error;
using mshed::testing::random_tensor;

namespace {

std::vector<double> naive_matmul(const Tensor& a, const Tensor& b) {
  const auto m = a.dim(0), k = a.dim(1), n = b.dim(1);
  std::vector<double> y(static_cast<std::size_t>(m * n), 0.0);
  for (std::int64_t i = 0; i < m; ++i)
    for (std::int64_t j = 0; j < n; ++j)
      for (std::int64_t p = 0; p < k; ++p) y[i * n + j] += double(a.at(i, p)) * b.at(p, j);
  return y;
}

}  // namespace

TEST_CASE("tensor basics") {
  Tensor t = Tensor::full({2, 3}, 1.5f);
  CHECK(t.numel() == 6);
  CHECK(t.rank() == 2);
  CHECK(t.at(1, 2) == doctest::Approx(1.5));
  Tensor c = t.clone();
  c.mutable_data()[0] = 7.0f;
  CHECK(t.data()[0] == 1.5f);
  CHECK_FALSE(c.same_storage(t));
  CHECK(Tensor{}.numel() == 0);
  CHECK_THROWS_AS(Tensor::from_data({2, 2}, {1.0f, 2.0f}), DimensionError);
}

TEST_CASE("rng is deterministic per seed") {
  Rng a(42), b(42), c(43);
  for (int i = 0; i < 10; ++i) {
    const double x = a.normal();
    CHECK(x == b.normal());
    (void)c;
  }
  Rng d(42);
  Rng e(43);
  CHECK(d.uniform() != e.uniform());
  for (int i = 0; i < 1000; ++i) {
    const auto v = d.below(7);
    CHECK(v < 7u);
  }
}

TEST_CASE("matmul matches a naive double product") {
  Rng rng(1);
  const Tensor a = random_tensor({5, 7}, rng);
  const Tensor b = random_tensor({7, 3}, rng);
  const Tensor y = matmul(a, b);
  const auto ref = naive_matmul(a, b);
  for (std::size_t i = 0; i < ref.size(); ++i) CHECK(y.data()[i] == doctest::Approx(ref[i]).epsilon(1e-6));
  CHECK_THROWS_AS(matmul(a, a), DimensionError);
}

TEST_CASE("kernel transposes agree") {
  Rng rng(2);
  const Tensor a = random_tensor({4, 6}, rng);
  const Tensor b = random_tensor({5, 6}, rng);
  std::vector<float> nt(20), ref(20);
  kernels::matmul_nt(a.data().data(), b.data().data(), nt.data(), 4, 6, 5);
  for (int i = 0; i < 4; ++i)
    for (int j = 0; j < 5; ++j) ref[i * 5 + j] = static_cast<float>(kernels::dot(&a.data()[i * 6], &b.data()[j * 6], 6));
  CHECK(mshed::testing::max_abs_diff(nt, ref) < 1e-6);
  std::vector<float> mv(5);
  kernels::matvec(b.data().data(), a.data().data(), nullptr, mv.data(), 5, 6);
  for (int j = 0; j < 5; ++j) CHECK(mv[j] == doctest::Approx(ref[j]).epsilon(1e-6));
}

TEST_CASE("gradients of elementwise and reduction ops") {
  Rng rng(3);
  Tensor x = random_tensor({3, 4}, rng, 1.0, true);
  Tensor w = random_tensor({3, 4}, rng, 1.0, true);
  mshed::testing::Projector proj;
  for (auto op : {UnaryOp::silu, UnaryOp::softplus, UnaryOp::exp, UnaryOp::neg, UnaryOp::sigmoid}) {
    CAPTURE(static_cast<int>(op));
    CHECK(gradient_error([&] { return proj(unary(op, x)); }, {x}) < 1e-3);
  }
  CHECK(gradient_error([&] { return proj(add(x, w)); }, {x, w}) < 1e-3);
  CHECK(gradient_error([&] { return proj(mul(x, w)); }, {x, w}) < 1e-3);
  CHECK(gradient_error([&] { return mean(mul(x, x)); }, {x}) < 1e-3);
  CHECK(gradient_error([&] { return scale(sum(x), 0.5f); }, {x}) < 1e-3);
  CHECK(gradient_error([&] { return proj(narrow_rows(x, 2)); }, {x}) < 1e-3);
  CHECK(gradient_error([&] { return proj(narrow_cols(x, 3)); }, {x}) < 1e-3);
}

TEST_CASE("gradients of linear, embedding and cross entropy") {
  Rng rng(4);
  Tensor x = random_tensor({4, 5}, rng, 1.0, true);
  Tensor w = random_tensor({3, 5}, rng, 0.5, true);
  Tensor bias = random_tensor({3}, rng, 0.5, true);
  mshed::testing::Projector proj;
  CHECK(gradient_error([&] { return proj(linear(x, w, bias)); }, {x, w, bias}) < 1e-3);
  Tensor b = random_tensor({5, 2}, rng, 1.0, true);
  CHECK(gradient_error([&] { return proj(matmul(x, b)); }, {x, b}) < 1e-3);

  Tensor table = random_tensor({6, 3}, rng, 1.0, true);
  const std::vector<std::int32_t> ids{1, 4, 1, 0};
  CHECK(gradient_error([&] { return proj(embedding(table, ids)); }, {table}) < 1e-3);

  Tensor logits = random_tensor({4, 6}, rng, 1.0, true);
  const std::vector<std::int32_t> targets{2, 0, 5, 3};
  CHECK(gradient_error([&] { return cross_entropy(logits, targets); }, {logits}) < 1e-3);
}

TEST_CASE("cross entropy equals mean negative log softmax") {
  Rng rng(5);
  const Tensor logits = random_tensor({3, 4}, rng);
  const std::vector<std::int32_t> targets{1, 3, 0};
  double ref = 0.0;
  for (int r = 0; r < 3; ++r) {
    double z = 0.0;
    for (int c = 0; c < 4; ++c) z += std::exp(double(logits.at(r, c)));
    ref += std::log(z) - logits.at(r, targets[r]);
  }
  CHECK(cross_entropy(logits, targets).item() == doctest::Approx(ref / 3.0).epsilon(1e-6));
}

TEST_CASE("input and contract errors") {
  Rng rng(6);
  const Tensor table = random_tensor({4, 2}, rng);
  const std::vector<std::int32_t> bad{0, 9};
  try {
    embedding(table, bad);
    FAIL("expected InputError");
  } catch (const InputError& e) {
    CHECK(e.position() == 1);
  }
  const Tensor a = random_tensor({2, 3}, rng, 1.0, true);
  const Tensor b = random_tensor({3, 2}, rng);
  CHECK_THROWS_AS(add(a, b), DimensionError);
  CHECK_THROWS_AS(backward(a), ContractError);
  Graph::current().clear();
}

TEST_CASE("no-grad mode records nothing") {
  Rng rng(7);
  const Tensor a = random_tensor({2, 2}, rng, 1.0, true);
  Graph::current().clear();
  {
    NoGradGuard guard;
    const Tensor y = silu(a);
    CHECK_FALSE(y.requires_grad());
  }
  CHECK(Graph::current().size() == 0);
  const Tensor y = silu(a);
  CHECK(Graph::current().size() == 1);
  Graph::current().clear();
}

TEST_CASE("softplus is stable for large inputs") {
  CHECK(softplus_value(1000.0) == doctest::Approx(1000.0));
  CHECK(softplus_value(-1000.0) >= 0.0);
  CHECK(std::isfinite(softplus_value(-1000.0)));
  CHECK(softplus_value(0.0) == doctest::Approx(std::log(2.0)));
}
