#pragma once

#include <cstdint>
#include <memory>
#include <span>
#include <string>
#include <vector>

namespace mshed {

using Shape = std::vector<std::int64_t>;

std::int64_t shape_numel(const Shape& shape);
std::string shape_str(const Shape& shape);

namespace detail {
struct TensorData {
  Shape shape;
  std::vector<float> data;
  std::vector<float> grad;  // empty until the first accumulation
  bool requires_grad = false;
};
}  // namespace detail

// Dense row-major float32 array with an optional gradient buffer.
//
// Tensor is a shared handle: copies alias the same storage, which is what the
// recording graph relies on to route gradients back to parameters. Use
// clone() for a deep copy.
class Tensor {
 public:
  Tensor() = default;

  static Tensor zeros(Shape shape, bool requires_grad = false);
  static Tensor full(Shape shape, float value, bool requires_grad = false);
  static Tensor from_data(Shape shape, std::vector<float> data, bool requires_grad = false);
  static Tensor scalar(float value, bool requires_grad = false);

  bool defined() const noexcept { return impl_ != nullptr; }

  const Shape& shape() const;
  std::int64_t rank() const { return static_cast<std::int64_t>(shape().size()); }
  std::int64_t dim(std::int64_t i) const;
  std::int64_t numel() const;

  std::span<const float> data() const;
  // Direct write access for initialization, optimizers and weight surgery.
  // Never call on a tensor that is an input of a live recorded graph.
  std::span<float> mutable_data() const;
  float item() const;
  float at(std::int64_t row, std::int64_t col) const;

  bool requires_grad() const;
  void set_requires_grad(bool flag);

  bool has_grad() const;
  std::span<const float> grad() const;
  // Gradient storage, allocated (zero-filled) on first use.
  std::span<float> grad_buffer() const;
  void zero_grad() const;

  Tensor clone() const;
  bool same_storage(const Tensor& other) const noexcept { return impl_ == other.impl_; }

 private:
  explicit Tensor(std::shared_ptr<detail::TensorData> impl) : impl_(std::move(impl)) {}
  std::shared_ptr<detail::TensorData> impl_;
};

}  // namespace mshed
