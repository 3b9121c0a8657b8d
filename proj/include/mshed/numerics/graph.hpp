#pragma once

#include <cstddef>
#include <functional>
#include <initializer_list>
#include <vector>

#include "mshed/numerics/tensor.hpp"

namespace mshed {

// Tape of primitive operations recorded in execution order. One graph per
// thread; ops record into Graph::current() whenever gradient mode is on and
// at least one input requires a gradient.
class Graph {
 public:
  struct Node {
    std::vector<Tensor> inputs;
    Tensor output;
    std::function<void()> backward;
  };

  static Graph& current();

  void record(std::vector<Tensor> inputs, Tensor output, std::function<void()> backward);

  // Runs every recorded backward rule once, newest first, then clears the tape.
  void run_backward();
  void clear() { nodes_.clear(); }

  std::size_t size() const noexcept { return nodes_.size(); }
  const std::vector<Node>& nodes() const noexcept { return nodes_; }

 private:
  std::vector<Node> nodes_;
};

bool grad_enabled();

// Disables recording on the current thread for its lifetime.
class NoGradGuard {
 public:
  NoGradGuard();
  ~NoGradGuard();
  NoGradGuard(const NoGradGuard&) = delete;
  NoGradGuard& operator=(const NoGradGuard&) = delete;

 private:
  bool previous_;
};

// True when an op over `inputs` must be recorded.
bool should_record(std::initializer_list<const Tensor*> inputs);

// Marks `output` differentiable and records it on the current graph.
void record_op(std::vector<Tensor> inputs, Tensor& output, std::function<void()> rule);

// Seeds d loss / d loss = 1 and propagates through the current graph.
// Gradients accumulate into existing grad buffers; zero them between steps.
void backward(const Tensor& loss);

}  // namespace mshed
