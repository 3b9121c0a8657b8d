#include "mshed/numerics/tensor.hpp"

#include <algorithm>
#include <sstream>

#include "mshed/errors.hpp"

namespace mshed {

std::int64_t shape_numel(const Shape& shape) {
  std::int64_t n = 1;
  for (auto d : shape) {
    if (d < 0) throw DimensionError("negative dimension in shape " + shape_str(shape));
    n *= d;
  }
  return n;
}

std::string shape_str(const Shape& shape) {
  std::ostringstream out;
  out << '[';
  for (std::size_t i = 0; i < shape.size(); ++i) {
    if (i) out << "x";
    out << shape[i];
  }
  out << ']';
  return out.str();
}

Tensor Tensor::zeros(Shape shape, bool requires_grad) { return full(std::move(shape), 0.0f, requires_grad); }

Tensor Tensor::full(Shape shape, float value, bool requires_grad) {
  auto impl = std::make_shared<detail::TensorData>();
  impl->data.assign(static_cast<std::size_t>(shape_numel(shape)), value);
  impl->shape = std::move(shape);
  impl->requires_grad = requires_grad;
  return Tensor(std::move(impl));
}

Tensor Tensor::from_data(Shape shape, std::vector<float> data, bool requires_grad) {
  if (shape_numel(shape) != static_cast<std::int64_t>(data.size())) {
    throw DimensionError("shape " + shape_str(shape) + " does not match " +
                         std::to_string(data.size()) + " elements");
  }
  auto impl = std::make_shared<detail::TensorData>();
  impl->shape = std::move(shape);
  impl->data = std::move(data);
  impl->requires_grad = requires_grad;
  return Tensor(std::move(impl));
}

Tensor Tensor::scalar(float value, bool requires_grad) { return full({}, value, requires_grad); }

const Shape& Tensor::shape() const {
  if (!impl_) throw ContractError("use of undefined tensor");
  return impl_->shape;
}

std::int64_t Tensor::dim(std::int64_t i) const {
  const auto& s = shape();
  if (i < 0) i += static_cast<std::int64_t>(s.size());
  if (i < 0 || i >= static_cast<std::int64_t>(s.size())) {
    throw DimensionError("dimension index " + std::to_string(i) + " out of range for " + shape_str(s));
  }
  return s[static_cast<std::size_t>(i)];
}

std::int64_t Tensor::numel() const { return static_cast<std::int64_t>(impl_ ? impl_->data.size() : 0); }

std::span<const float> Tensor::data() const {
  if (!impl_) throw ContractError("use of undefined tensor");
  return impl_->data;
}

std::span<float> Tensor::mutable_data() const {
  if (!impl_) throw ContractError("use of undefined tensor");
  return impl_->data;
}

float Tensor::item() const {
  if (numel() != 1) throw ContractError("item() on tensor of shape " + shape_str(shape()));
  return impl_->data[0];
}

float Tensor::at(std::int64_t row, std::int64_t col) const {
  if (rank() != 2) throw DimensionError("at(row, col) needs rank 2, got " + shape_str(shape()));
  return impl_->data[static_cast<std::size_t>(row * impl_->shape[1] + col)];
}

bool Tensor::requires_grad() const { return impl_ && impl_->requires_grad; }

void Tensor::set_requires_grad(bool flag) {
  if (!impl_) throw ContractError("use of undefined tensor");
  impl_->requires_grad = flag;
}

bool Tensor::has_grad() const { return impl_ && !impl_->grad.empty(); }

std::span<const float> Tensor::grad() const {
  if (!impl_) throw ContractError("use of undefined tensor");
  return impl_->grad;
}

std::span<float> Tensor::grad_buffer() const {
  if (!impl_) throw ContractError("use of undefined tensor");
  if (impl_->grad.empty()) impl_->grad.assign(impl_->data.size(), 0.0f);
  return impl_->grad;
}

void Tensor::zero_grad() const {
  if (impl_ && !impl_->grad.empty()) std::fill(impl_->grad.begin(), impl_->grad.end(), 0.0f);
}

Tensor Tensor::clone() const {
  if (!impl_) return {};
  auto impl = std::make_shared<detail::TensorData>(*impl_);
  return Tensor(std::move(impl));
}

}  // namespace mshed
