#include "dihc/tensor.hpp"

#include <sstream>
#include <stdexcept>
#include <utility>

namespace dihc {

int64_t shape_numel(const Shape& s) {
  int64_t n = 1;
  for (int d : s) n *= d;
  return n;
}

std::string shape_str(const Shape& s) {
  std::ostringstream os;
  os << "[";
  for (size_t i = 0; i < s.size(); ++i) os << (i ? "," : "") << s[i];
  os << "]";
  return os.str();
}

Tensor Tensor::zeros(const Shape& shape, bool requires_grad) {
  return full(shape, 0.f, requires_grad);
}

Tensor Tensor::full(const Shape& shape, float value, bool requires_grad) {
  for (int d : shape) {
    if (d <= 0) throw std::invalid_argument("tensor dims must be positive, got " + shape_str(shape));
  }
  auto impl = std::make_shared<TensorImpl>();
  impl->shape = shape;
  impl->data.assign(static_cast<size_t>(shape_numel(shape)), value);
  impl->requires_grad = requires_grad;
  return Tensor(std::move(impl));
}

Tensor Tensor::from_vector(const Shape& shape, std::vector<float> values, bool requires_grad) {
  if (shape_numel(shape) != static_cast<int64_t>(values.size())) {
    throw std::invalid_argument("shape " + shape_str(shape) + " does not match buffer of " +
                                std::to_string(values.size()) + " elements");
  }
  auto impl = std::make_shared<TensorImpl>();
  impl->shape = shape;
  impl->data = std::move(values);
  impl->requires_grad = requires_grad;
  return Tensor(std::move(impl));
}

Tensor Tensor::scalar(float value, bool requires_grad) {
  return from_vector({1}, {value}, requires_grad);
}

float Tensor::item() const {
  if (numel() != 1) {
    throw std::invalid_argument("item() requires a scalar tensor, shape is " + shape_str(shape()));
  }
  return impl_->data[0];
}

Tensor Tensor::detach() const {
  auto impl = std::make_shared<TensorImpl>();
  impl->shape = impl_->shape;
  impl->data = impl_->data;  // copy keeps the detached view stable under later updates
  impl->requires_grad = false;
  return Tensor(std::move(impl));
}

Tensor Tensor::clone(bool requires_grad) const {
  auto impl = std::make_shared<TensorImpl>();
  impl->shape = impl_->shape;
  impl->data = impl_->data;
  impl->requires_grad = requires_grad;
  return Tensor(std::move(impl));
}

void Graph::backward_sweep() {
  for (auto it = nodes_.rbegin(); it != nodes_.rend(); ++it) {
    it->backward();
  }
}

namespace {
thread_local Graph g_graph;
thread_local int g_no_grad_depth = 0;
}  // namespace

Graph& active_graph() { return g_graph; }
bool grad_enabled() { return g_no_grad_depth == 0; }

NoGradGuard::NoGradGuard() { ++g_no_grad_depth; }
NoGradGuard::~NoGradGuard() { --g_no_grad_depth; }

void backward(const Tensor& loss) {
  if (loss.numel() != 1) {
    throw std::invalid_argument("backward() requires a scalar loss, shape is " +
                                shape_str(loss.shape()));
  }
  auto& grad = loss.impl()->ensure_grad();
  grad[0] += 1.f;
  g_graph.backward_sweep();
  g_graph.clear();
}

SgdOptimizer::SgdOptimizer(NamedParams params, float lr, float momentum, float weight_decay)
    : params_(std::move(params)), lr_(lr), momentum_(momentum), weight_decay_(weight_decay) {
  velocity_.resize(params_.size());
  for (size_t i = 0; i < params_.size(); ++i) {
    velocity_[i].assign(params_[i].second.numel(), 0.f);
  }
}

void SgdOptimizer::step() {
  for (size_t i = 0; i < params_.size(); ++i) {
    auto& [name, p] = params_[i];
    if (!p.has_grad()) {
      throw std::runtime_error("sgd_step: parameter '" + name + "' has no gradient");
    }
    float* w = p.data();
    const float* g = p.grad_view().data();
    float* v = velocity_[i].data();
    const int64_t n = p.numel();
    for (int64_t k = 0; k < n; ++k) {
      v[k] = momentum_ * v[k] + (g[k] + weight_decay_ * w[k]);
      w[k] -= lr_ * v[k];
    }
  }
  for (auto& [name, p] : params_) p.zero_grad();
}

}  // namespace dihc
