#pragma once

#include <cstdint>
#include <functional>
#include <memory>
#include <string>
#include <vector>

namespace dihc {

using Shape = std::vector<int>;

int64_t shape_numel(const Shape& s);
std::string shape_str(const Shape& s);

struct TensorImpl {
  Shape shape;
  std::vector<float> data;
  bool requires_grad = false;
  std::vector<float> grad;  // empty until first accumulation

  int64_t numel() const { return static_cast<int64_t>(data.size()); }

  std::vector<float>& ensure_grad() {
    if (grad.empty()) grad.assign(data.size(), 0.f);
    return grad;
  }
};

// Value-semantic handle over a shared buffer. Tensors are immutable after
// creation except for gradient accumulation and optimizer updates.
class Tensor {
 public:
  Tensor() = default;
  explicit Tensor(std::shared_ptr<TensorImpl> impl) : impl_(std::move(impl)) {}

  static Tensor zeros(const Shape& shape, bool requires_grad = false);
  static Tensor full(const Shape& shape, float value, bool requires_grad = false);
  static Tensor from_vector(const Shape& shape, std::vector<float> values,
                            bool requires_grad = false);
  static Tensor scalar(float value, bool requires_grad = false);

  bool defined() const { return impl_ != nullptr; }
  const Shape& shape() const { return impl_->shape; }
  int64_t numel() const { return impl_->numel(); }
  float* data() { return impl_->data.data(); }
  const float* data() const { return impl_->data.data(); }
  std::vector<float>& values() { return impl_->data; }
  const std::vector<float>& values() const { return impl_->data; }

  bool requires_grad() const { return impl_->requires_grad; }
  void set_requires_grad(bool rg) { impl_->requires_grad = rg; }
  bool has_grad() const { return !impl_->grad.empty(); }
  std::vector<float>& grad() { return impl_->ensure_grad(); }
  const std::vector<float>& grad_view() const { return impl_->grad; }
  void zero_grad() { impl_->grad.clear(); }

  // Scalar access; throws unless numel() == 1.
  float item() const;

  // Same values, no gradient tracking, no graph edge. Shares the buffer.
  Tensor detach() const;
  Tensor clone(bool requires_grad = false) const;

  const std::shared_ptr<TensorImpl>& impl() const { return impl_; }

 private:
  std::shared_ptr<TensorImpl> impl_;
};

// Tape of executed operations. Nodes are recorded in execution order, so a
// single reverse sweep visits each exactly once with every consumer's
// contribution already accumulated.
class Graph {
 public:
  struct Node {
    const char* op;
    std::function<void()> backward;
  };

  void record(const char* op, std::function<void()> backward) {
    nodes_.push_back(Node{op, std::move(backward)});
  }
  size_t size() const { return nodes_.size(); }
  void clear() { nodes_.clear(); }
  void backward_sweep();

 private:
  std::vector<Node> nodes_;
};

Graph& active_graph();
bool grad_enabled();

struct NoGradGuard {
  NoGradGuard();
  ~NoGradGuard();
  NoGradGuard(const NoGradGuard&) = delete;
  NoGradGuard& operator=(const NoGradGuard&) = delete;
};

// Seeds d(loss)/d(loss) = 1, runs the reverse sweep, then frees the tape.
// Gradients accumulate (+=) into every requires_grad tensor reached.
void backward(const Tensor& loss);

// Named parameter list; ordering is the checkpoint and update order.
using NamedParams = std::vector<std::pair<std::string, Tensor>>;

// SGD with classical momentum and decoupled-from-nothing weight decay folded
// into the gradient: v <- momentum*v + (g + wd*p); p <- p - lr*v.
class SgdOptimizer {
 public:
  SgdOptimizer(NamedParams params, float lr, float momentum, float weight_decay);

  // Applies one update and clears all gradients.
  void step();

  float lr() const { return lr_; }
  const NamedParams& params() const { return params_; }
  std::vector<std::vector<float>>& velocities() { return velocity_; }

 private:
  NamedParams params_;
  std::vector<std::vector<float>> velocity_;
  float lr_;
  float momentum_;
  float weight_decay_;
};

}  // namespace dihc
