#include <cmath>
#include <stdexcept>

#include "dihc/ops.hpp"

namespace dihc {
namespace {

struct AxisTap {
  int i0, i1;
  float w1;  // weight of i1; i0 gets 1-w1
};

// align-corners=false source mapping, clamped at both ends
std::vector<AxisTap> trilinear_taps(int out_size, int in_size, int factor) {
  std::vector<AxisTap> taps(out_size);
  for (int o = 0; o < out_size; ++o) {
    const double src = (o + 0.5) / factor - 0.5;
    if (src <= 0.0) {
      taps[o] = {0, 0, 0.f};
    } else if (src >= in_size - 1) {
      taps[o] = {in_size - 1, in_size - 1, 0.f};
    } else {
      const int lo = static_cast<int>(src);
      taps[o] = {lo, lo + 1, static_cast<float>(src - lo)};
    }
  }
  return taps;
}

}  // namespace

Tensor upsample(const Tensor& input, int factor, UpsampleMode mode) {
  if (factor < 2) {
    throw std::invalid_argument("upsample: factor must be >= 2, got " + std::to_string(factor));
  }
  if (input.shape().size() != 5) {
    throw std::invalid_argument("upsample: input must be [N,C,D,H,W], got " +
                                shape_str(input.shape()));
  }
  const int N = input.shape()[0], C = input.shape()[1];
  const int D = input.shape()[2], H = input.shape()[3], W = input.shape()[4];
  const int OD = D * factor, OH = H * factor, OW = W * factor;
  const bool rg = grad_enabled() && input.requires_grad();
  Tensor out = Tensor::zeros({N, C, OD, OH, OW});
  out.set_requires_grad(rg);

  const long inCh = static_cast<long>(D) * H * W;
  const long outCh = static_cast<long>(OD) * OH * OW;

  if (mode == UpsampleMode::kNearest) {
    for (long nc = 0; nc < static_cast<long>(N) * C; ++nc) {
      const float* in = input.data() + nc * inCh;
      float* po = out.data() + nc * outCh;
      for (int z = 0; z < OD; ++z) {
        for (int y = 0; y < OH; ++y) {
          const float* irow = in + (static_cast<long>(z / factor) * H + y / factor) * W;
          float* orow = po + (static_cast<long>(z) * OH + y) * OW;
          for (int x = 0; x < OW; ++x) orow[x] = irow[x / factor];
        }
      }
    }
  } else {
    const auto tz = trilinear_taps(OD, D, factor);
    const auto ty = trilinear_taps(OH, H, factor);
    const auto tx = trilinear_taps(OW, W, factor);
    for (long nc = 0; nc < static_cast<long>(N) * C; ++nc) {
      const float* in = input.data() + nc * inCh;
      float* po = out.data() + nc * outCh;
      for (int z = 0; z < OD; ++z) {
        const auto& az = tz[z];
        for (int y = 0; y < OH; ++y) {
          const auto& ay = ty[y];
          const float* r00 = in + (static_cast<long>(az.i0) * H + ay.i0) * W;
          const float* r01 = in + (static_cast<long>(az.i0) * H + ay.i1) * W;
          const float* r10 = in + (static_cast<long>(az.i1) * H + ay.i0) * W;
          const float* r11 = in + (static_cast<long>(az.i1) * H + ay.i1) * W;
          const float wz1 = az.w1, wy1 = ay.w1;
          const float c00 = (1 - wz1) * (1 - wy1), c01 = (1 - wz1) * wy1;
          const float c10 = wz1 * (1 - wy1), c11 = wz1 * wy1;
          float* orow = po + (static_cast<long>(z) * OH + y) * OW;
          for (int x = 0; x < OW; ++x) {
            const auto& ax = tx[x];
            const float v0 = c00 * r00[ax.i0] + c01 * r01[ax.i0] + c10 * r10[ax.i0] +
                             c11 * r11[ax.i0];
            const float v1 = c00 * r00[ax.i1] + c01 * r01[ax.i1] + c10 * r10[ax.i1] +
                             c11 * r11[ax.i1];
            orow[x] = v0 + ax.w1 * (v1 - v0);
          }
        }
      }
    }
  }

  if (rg) {
    auto ii = input.impl();
    auto oi = out.impl();
    active_graph().record("upsample", [ii, oi, N, C, D, H, W, factor, mode, inCh, outCh] {
      if (oi->grad.empty() || !ii->requires_grad) return;
      const int OD = D * factor, OH = H * factor, OW = W * factor;
      const float* g = oi->grad.data();
      float* gi = ii->ensure_grad().data();
      if (mode == UpsampleMode::kNearest) {
        for (long nc = 0; nc < static_cast<long>(N) * C; ++nc) {
          const float* grow0 = g + nc * outCh;
          float* girow0 = gi + nc * inCh;
          for (int z = 0; z < OD; ++z) {
            for (int y = 0; y < OH; ++y) {
              const float* grow = grow0 + (static_cast<long>(z) * OH + y) * OW;
              float* girow = girow0 + (static_cast<long>(z / factor) * H + y / factor) * W;
              for (int x = 0; x < OW; ++x) girow[x / factor] += grow[x];
            }
          }
        }
      } else {
        const auto tz = trilinear_taps(OD, D, factor);
        const auto ty = trilinear_taps(OH, H, factor);
        const auto tx = trilinear_taps(OW, W, factor);
        for (long nc = 0; nc < static_cast<long>(N) * C; ++nc) {
          const float* grow0 = g + nc * outCh;
          float* gin = gi + nc * inCh;
          for (int z = 0; z < OD; ++z) {
            const auto& az = tz[z];
            for (int y = 0; y < OH; ++y) {
              const auto& ay = ty[y];
              const float wz1 = az.w1, wy1 = ay.w1;
              const float c00 = (1 - wz1) * (1 - wy1), c01 = (1 - wz1) * wy1;
              const float c10 = wz1 * (1 - wy1), c11 = wz1 * wy1;
              float* g00 = gin + (static_cast<long>(az.i0) * H + ay.i0) * W;
              float* g01 = gin + (static_cast<long>(az.i0) * H + ay.i1) * W;
              float* g10 = gin + (static_cast<long>(az.i1) * H + ay.i0) * W;
              float* g11 = gin + (static_cast<long>(az.i1) * H + ay.i1) * W;
              const float* grow = grow0 + (static_cast<long>(z) * OH + y) * OW;
              for (int x = 0; x < OW; ++x) {
                const auto& ax = tx[x];
                const float gv = grow[x];
                const float w0 = 1 - ax.w1, w1 = ax.w1;
                g00[ax.i0] += gv * c00 * w0;
                g00[ax.i1] += gv * c00 * w1;
                g01[ax.i0] += gv * c01 * w0;
                g01[ax.i1] += gv * c01 * w1;
                g10[ax.i0] += gv * c10 * w0;
                g10[ax.i1] += gv * c10 * w1;
                g11[ax.i0] += gv * c11 * w0;
                g11[ax.i1] += gv * c11 * w1;
              }
            }
          }
        }
      }
    });
  }
  return out;
}

}  // namespace dihc
