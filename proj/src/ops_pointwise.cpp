#include <cmath>
#include <stdexcept>

#include "dihc/ops.hpp"

namespace dihc {

namespace {

void check_same_shape(const char* op, const Tensor& a, const Tensor& b) {
  if (a.shape() != b.shape()) {
    throw std::invalid_argument(std::string(op) + ": shape mismatch " + shape_str(a.shape()) +
                                " vs " + shape_str(b.shape()));
  }
}

Tensor make_result(const Shape& shape, bool requires_grad) {
  Tensor out = Tensor::zeros(shape);
  out.set_requires_grad(requires_grad && grad_enabled());
  return out;
}

bool track(const Tensor& t) { return grad_enabled() && t.requires_grad(); }

}  // namespace

Tensor add(const Tensor& a, const Tensor& b) {
  check_same_shape("add", a, b);
  Tensor out = make_result(a.shape(), a.requires_grad() || b.requires_grad());
  const int64_t n = a.numel();
  const float* pa = a.data();
  const float* pb = b.data();
  float* po = out.data();
  for (int64_t i = 0; i < n; ++i) po[i] = pa[i] + pb[i];
  if (out.requires_grad()) {
    auto ai = a.impl(), bi = b.impl(), oi = out.impl();
    active_graph().record("add", [ai, bi, oi] {
      if (oi->grad.empty()) return;
      const float* g = oi->grad.data();
      const int64_t n = oi->numel();
      if (ai->requires_grad) {
        float* ga = ai->ensure_grad().data();
        for (int64_t i = 0; i < n; ++i) ga[i] += g[i];
      }
      if (bi->requires_grad) {
        float* gb = bi->ensure_grad().data();
        for (int64_t i = 0; i < n; ++i) gb[i] += g[i];
      }
    });
  }
  return out;
}

Tensor sub(const Tensor& a, const Tensor& b) {
  check_same_shape("sub", a, b);
  Tensor out = make_result(a.shape(), a.requires_grad() || b.requires_grad());
  const int64_t n = a.numel();
  const float* pa = a.data();
  const float* pb = b.data();
  float* po = out.data();
  for (int64_t i = 0; i < n; ++i) po[i] = pa[i] - pb[i];
  if (out.requires_grad()) {
    auto ai = a.impl(), bi = b.impl(), oi = out.impl();
    active_graph().record("sub", [ai, bi, oi] {
      if (oi->grad.empty()) return;
      const float* g = oi->grad.data();
      const int64_t n = oi->numel();
      if (ai->requires_grad) {
        float* ga = ai->ensure_grad().data();
        for (int64_t i = 0; i < n; ++i) ga[i] += g[i];
      }
      if (bi->requires_grad) {
        float* gb = bi->ensure_grad().data();
        for (int64_t i = 0; i < n; ++i) gb[i] -= g[i];
      }
    });
  }
  return out;
}

Tensor mul(const Tensor& a, const Tensor& b) {
  check_same_shape("mul", a, b);
  Tensor out = make_result(a.shape(), a.requires_grad() || b.requires_grad());
  const int64_t n = a.numel();
  const float* pa = a.data();
  const float* pb = b.data();
  float* po = out.data();
  for (int64_t i = 0; i < n; ++i) po[i] = pa[i] * pb[i];
  if (out.requires_grad()) {
    auto ai = a.impl(), bi = b.impl(), oi = out.impl();
    active_graph().record("mul", [ai, bi, oi] {
      if (oi->grad.empty()) return;
      const float* g = oi->grad.data();
      const int64_t n = oi->numel();
      if (ai->requires_grad) {
        float* ga = ai->ensure_grad().data();
        const float* pb = bi->data.data();
        for (int64_t i = 0; i < n; ++i) ga[i] += g[i] * pb[i];
      }
      if (bi->requires_grad) {
        float* gb = bi->ensure_grad().data();
        const float* pa = ai->data.data();
        for (int64_t i = 0; i < n; ++i) gb[i] += g[i] * pa[i];
      }
    });
  }
  return out;
}

Tensor div(const Tensor& a, const Tensor& b) {
  check_same_shape("div", a, b);
  Tensor out = make_result(a.shape(), a.requires_grad() || b.requires_grad());
  const int64_t n = a.numel();
  const float* pa = a.data();
  const float* pb = b.data();
  float* po = out.data();
  for (int64_t i = 0; i < n; ++i) po[i] = pa[i] / pb[i];
  if (out.requires_grad()) {
    auto ai = a.impl(), bi = b.impl(), oi = out.impl();
    active_graph().record("div", [ai, bi, oi] {
      if (oi->grad.empty()) return;
      const float* g = oi->grad.data();
      const float* pa = ai->data.data();
      const float* pb = bi->data.data();
      const int64_t n = oi->numel();
      if (ai->requires_grad) {
        float* ga = ai->ensure_grad().data();
        for (int64_t i = 0; i < n; ++i) ga[i] += g[i] / pb[i];
      }
      if (bi->requires_grad) {
        float* gb = bi->ensure_grad().data();
        for (int64_t i = 0; i < n; ++i) gb[i] -= g[i] * pa[i] / (pb[i] * pb[i]);
      }
    });
  }
  return out;
}

Tensor scalar_mul(const Tensor& a, float s) {
  Tensor out = make_result(a.shape(), a.requires_grad());
  const int64_t n = a.numel();
  const float* pa = a.data();
  float* po = out.data();
  for (int64_t i = 0; i < n; ++i) po[i] = pa[i] * s;
  if (out.requires_grad()) {
    auto ai = a.impl();
    auto oi = out.impl();
    active_graph().record("scalar_mul", [ai, oi, s] {
      if (oi->grad.empty() || !ai->requires_grad) return;
      const float* g = oi->grad.data();
      float* ga = ai->ensure_grad().data();
      const int64_t n = oi->numel();
      for (int64_t i = 0; i < n; ++i) ga[i] += g[i] * s;
    });
  }
  return out;
}

Tensor add_scalar(const Tensor& a, float s) {
  Tensor out = make_result(a.shape(), a.requires_grad());
  const int64_t n = a.numel();
  const float* pa = a.data();
  float* po = out.data();
  for (int64_t i = 0; i < n; ++i) po[i] = pa[i] + s;
  if (out.requires_grad()) {
    auto ai = a.impl();
    auto oi = out.impl();
    active_graph().record("add_scalar", [ai, oi] {
      if (oi->grad.empty() || !ai->requires_grad) return;
      const float* g = oi->grad.data();
      float* ga = ai->ensure_grad().data();
      const int64_t n = oi->numel();
      for (int64_t i = 0; i < n; ++i) ga[i] += g[i];
    });
  }
  return out;
}

Tensor relu(const Tensor& a) {
  Tensor out = make_result(a.shape(), a.requires_grad());
  const int64_t n = a.numel();
  const float* pa = a.data();
  float* po = out.data();
  for (int64_t i = 0; i < n; ++i) po[i] = pa[i] > 0.f ? pa[i] : 0.f;
  if (out.requires_grad()) {
    auto ai = a.impl();
    auto oi = out.impl();
    active_graph().record("relu", [ai, oi] {
      if (oi->grad.empty() || !ai->requires_grad) return;
      const float* g = oi->grad.data();
      const float* pa = ai->data.data();
      float* ga = ai->ensure_grad().data();
      const int64_t n = oi->numel();
      for (int64_t i = 0; i < n; ++i) ga[i] += pa[i] > 0.f ? g[i] : 0.f;
    });
  }
  return out;
}

Tensor sigmoid(const Tensor& a) {
  Tensor out = make_result(a.shape(), a.requires_grad());
  const int64_t n = a.numel();
  const float* pa = a.data();
  float* po = out.data();
  for (int64_t i = 0; i < n; ++i) po[i] = 1.f / (1.f + std::exp(-pa[i]));
  if (out.requires_grad()) {
    auto ai = a.impl();
    auto oi = out.impl();
    active_graph().record("sigmoid", [ai, oi] {
      if (oi->grad.empty() || !ai->requires_grad) return;
      const float* g = oi->grad.data();
      const float* y = oi->data.data();
      float* ga = ai->ensure_grad().data();
      const int64_t n = oi->numel();
      for (int64_t i = 0; i < n; ++i) ga[i] += g[i] * y[i] * (1.f - y[i]);
    });
  }
  return out;
}

Tensor sum(const Tensor& a) {
  Tensor out = make_result({1}, a.requires_grad());
  const int64_t n = a.numel();
  const float* pa = a.data();
  double acc = 0.0;
  for (int64_t i = 0; i < n; ++i) acc += pa[i];
  out.data()[0] = static_cast<float>(acc);
  if (out.requires_grad()) {
    auto ai = a.impl();
    auto oi = out.impl();
    active_graph().record("sum", [ai, oi] {
      if (oi->grad.empty() || !ai->requires_grad) return;
      const float g = oi->grad[0];
      float* ga = ai->ensure_grad().data();
      const int64_t n = ai->numel();
      for (int64_t i = 0; i < n; ++i) ga[i] += g;
    });
  }
  return out;
}

Tensor mean(const Tensor& a) {
  Tensor out = make_result({1}, a.requires_grad());
  const int64_t n = a.numel();
  const float* pa = a.data();
  double acc = 0.0;
  for (int64_t i = 0; i < n; ++i) acc += pa[i];
  out.data()[0] = static_cast<float>(acc / static_cast<double>(n));
  if (out.requires_grad()) {
    auto ai = a.impl();
    auto oi = out.impl();
    active_graph().record("mean", [ai, oi] {
      if (oi->grad.empty() || !ai->requires_grad) return;
      const int64_t n = ai->numel();
      const float g = oi->grad[0] / static_cast<float>(n);
      float* ga = ai->ensure_grad().data();
      for (int64_t i = 0; i < n; ++i) ga[i] += g;
    });
  }
  return out;
}

Tensor mse(const Tensor& a, const Tensor& b) {
  check_same_shape("mse", a, b);
  Tensor out = make_result({1}, a.requires_grad() || b.requires_grad());
  const int64_t n = a.numel();
  const float* pa = a.data();
  const float* pb = b.data();
  double acc = 0.0;
  for (int64_t i = 0; i < n; ++i) {
    const double d = static_cast<double>(pa[i]) - static_cast<double>(pb[i]);
    acc += d * d;
  }
  out.data()[0] = static_cast<float>(acc / static_cast<double>(n));
  if (out.requires_grad()) {
    auto ai = a.impl(), bi = b.impl(), oi = out.impl();
    active_graph().record("mse", [ai, bi, oi] {
      if (oi->grad.empty()) return;
      const int64_t n = ai->numel();
      const float scale = 2.f * oi->grad[0] / static_cast<float>(n);
      const float* pa = ai->data.data();
      const float* pb = bi->data.data();
      if (ai->requires_grad) {
        float* ga = ai->ensure_grad().data();
        for (int64_t i = 0; i < n; ++i) ga[i] += scale * (pa[i] - pb[i]);
      }
      if (bi->requires_grad) {
        float* gb = bi->ensure_grad().data();
        for (int64_t i = 0; i < n; ++i) gb[i] -= scale * (pa[i] - pb[i]);
      }
    });
  }
  return out;
}

Tensor reshape(const Tensor& a, const Shape& shape) {
  if (shape_numel(shape) != a.numel()) {
    throw std::invalid_argument("reshape: cannot view " + shape_str(a.shape()) + " as " +
                                shape_str(shape));
  }
  Tensor out = make_result(shape, a.requires_grad());
  out.values() = a.values();
  if (out.requires_grad()) {
    auto ai = a.impl();
    auto oi = out.impl();
    active_graph().record("reshape", [ai, oi] {
      if (oi->grad.empty() || !ai->requires_grad) return;
      float* ga = ai->ensure_grad().data();
      const float* g = oi->grad.data();
      const int64_t n = oi->numel();
      for (int64_t i = 0; i < n; ++i) ga[i] += g[i];
    });
  }
  return out;
}

Tensor concat_channels(const Tensor& a, const Tensor& b) {
  if (a.shape().size() != 5 || b.shape().size() != 5) {
    throw std::invalid_argument("concat_channels expects 5-D tensors");
  }
  for (int d : {0, 2, 3, 4}) {
    if (a.shape()[d] != b.shape()[d]) {
      throw std::invalid_argument("concat_channels: dim " + std::to_string(d) + " mismatch " +
                                  shape_str(a.shape()) + " vs " + shape_str(b.shape()));
    }
  }
  const int n = a.shape()[0], ca = a.shape()[1], cb = b.shape()[1];
  const int64_t spatial = static_cast<int64_t>(a.shape()[2]) * a.shape()[3] * a.shape()[4];
  Tensor out = make_result({n, ca + cb, a.shape()[2], a.shape()[3], a.shape()[4]},
                           a.requires_grad() || b.requires_grad());
  float* po = out.data();
  const float* pa = a.data();
  const float* pb = b.data();
  for (int i = 0; i < n; ++i) {
    std::copy(pa + i * ca * spatial, pa + (i + 1) * ca * spatial,
              po + i * (ca + cb) * spatial);
    std::copy(pb + i * cb * spatial, pb + (i + 1) * cb * spatial,
              po + i * (ca + cb) * spatial + ca * spatial);
  }
  if (out.requires_grad()) {
    auto ai = a.impl(), bi = b.impl(), oi = out.impl();
    active_graph().record("concat", [ai, bi, oi, n, ca, cb, spatial] {
      if (oi->grad.empty()) return;
      const float* g = oi->grad.data();
      if (ai->requires_grad) {
        float* ga = ai->ensure_grad().data();
        for (int i = 0; i < n; ++i) {
          const float* src = g + i * (ca + cb) * spatial;
          float* dst = ga + i * ca * spatial;
          for (int64_t k = 0; k < ca * spatial; ++k) dst[k] += src[k];
        }
      }
      if (bi->requires_grad) {
        float* gb = bi->ensure_grad().data();
        for (int i = 0; i < n; ++i) {
          const float* src = g + i * (ca + cb) * spatial + ca * spatial;
          float* dst = gb + i * cb * spatial;
          for (int64_t k = 0; k < cb * spatial; ++k) dst[k] += src[k];
        }
      }
    });
  }
  return out;
}

Tensor slice_batch(const Tensor& a, int start, int len) {
  if (a.shape().empty()) throw std::invalid_argument("slice_batch: scalar input");
  const int n = a.shape()[0];
  if (start < 0 || len <= 0 || start + len > n) {
    throw std::invalid_argument("slice_batch: range [" + std::to_string(start) + "," +
                                std::to_string(start + len) + ") out of batch " +
                                std::to_string(n));
  }
  Shape oshape = a.shape();
  oshape[0] = len;
  const int64_t stride = a.numel() / n;
  Tensor out = make_result(oshape, a.requires_grad());
  std::copy(a.data() + start * stride, a.data() + (start + len) * stride, out.data());
  if (out.requires_grad()) {
    auto ai = a.impl();
    auto oi = out.impl();
    active_graph().record("slice_batch", [ai, oi, start, stride] {
      if (oi->grad.empty() || !ai->requires_grad) return;
      float* ga = ai->ensure_grad().data() + start * stride;
      const float* g = oi->grad.data();
      const int64_t n = oi->numel();
      for (int64_t i = 0; i < n; ++i) ga[i] += g[i];
    });
  }
  return out;
}

double sharpen_value(double p, double temperature) {
  const double lo = 1e-7, hi = 1.0 - 1e-7;
  p = p < lo ? lo : (p > hi ? hi : p);
  // 1 / (1 + ((1-p)/p)^(1/T)) avoids underflow of both powers at small T.
  const double r = (1.0 - p) / p;
  const double q = std::pow(r, 1.0 / temperature);
  if (std::isinf(q)) return 0.0;
  return 1.0 / (1.0 + q);
}

Tensor sharpen_op(const Tensor& p, float temperature, bool detach) {
  if (!(temperature > 0.f)) throw std::invalid_argument("sharpen: temperature must be > 0");
  const int64_t n = p.numel();
  const float* pp = p.data();
  for (int64_t i = 0; i < n; ++i) {
    if (std::isnan(pp[i])) throw std::invalid_argument("sharpen: NaN input");
  }
  Tensor out = make_result(p.shape(), !detach && p.requires_grad());
  float* po = out.data();
  for (int64_t i = 0; i < n; ++i) {
    po[i] = static_cast<float>(sharpen_value(pp[i], temperature));
  }
  if (out.requires_grad()) {
    auto pi = p.impl();
    auto oi = out.impl();
    const double T = temperature;
    active_graph().record("sharpen", [pi, oi, T] {
      if (oi->grad.empty() || !pi->requires_grad) return;
      const float* g = oi->grad.data();
      const float* pp = pi->data.data();
      float* gp = pi->ensure_grad().data();
      const int64_t n = oi->numel();
      const double a = 1.0 / T;
      for (int64_t i = 0; i < n; ++i) {
        double p = pp[i];
        const double lo = 1e-7, hi = 1.0 - 1e-7;
        if (p <= lo || p >= hi) continue;  // clamped region has zero slope
        const double u = std::pow(p, a), v = std::pow(1.0 - p, a);
        const double num = a * (std::pow(p, a - 1.0) * v + std::pow(1.0 - p, a - 1.0) * u);
        const double den = (u + v) * (u + v);
        gp[i] += static_cast<float>(g[i] * (num / den));
      }
    });
  }
  return out;
}

}  // namespace dihc
