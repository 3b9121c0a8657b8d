#include "mshed/numerics/graph.hpp"

#include "mshed/errors.hpp"

namespace mshed {
namespace {
thread_local bool g_grad_enabled = true;
}  // namespace

Graph& Graph::current() {
  thread_local Graph graph;
  return graph;
}

void Graph::record(std::vector<Tensor> inputs, Tensor output, std::function<void()> backward) {
  nodes_.push_back(Node{std::move(inputs), std::move(output), std::move(backward)});
}

void Graph::run_backward() {
  // Detach the tape first so rules that allocate tensors cannot append to it.
  std::vector<Node> nodes;
  nodes.swap(nodes_);
  for (auto it = nodes.rbegin(); it != nodes.rend(); ++it) {
    if (it->output.has_grad()) it->backward();
  }
}

bool grad_enabled() { return g_grad_enabled; }

NoGradGuard::NoGradGuard() : previous_(g_grad_enabled) { g_grad_enabled = false; }
NoGradGuard::~NoGradGuard() { g_grad_enabled = previous_; }

bool should_record(std::initializer_list<const Tensor*> inputs) {
  if (!g_grad_enabled) return false;
  for (const Tensor* t : inputs) {
    if (t && t->defined() && t->requires_grad()) return true;
  }
  return false;
}

void record_op(std::vector<Tensor> inputs, Tensor& output, std::function<void()> rule) {
  output.set_requires_grad(true);
  Graph::current().record(std::move(inputs), output, std::move(rule));
}

void backward(const Tensor& loss) {
  if (!loss.defined() || loss.numel() != 1) {
    throw ContractError("backward() needs a scalar loss, got " +
                        (loss.defined() ? shape_str(loss.shape()) : std::string("undefined")));
  }
  Tensor seed = loss;
  seed.grad_buffer()[0] += 1.0f;
  Graph::current().run_backward();
}

}  // namespace mshed
