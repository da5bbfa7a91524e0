#include <cstring>
#include <stdexcept>
#include <string>

#include "dihc/ops.hpp"

#if defined(__AVX512F__)
#include <immintrin.h>
#endif

namespace dihc {
namespace {

struct ConvDims {
  int N, C, D, H, W;
  int F, K;
  int stride, pad;
  int OD, OH, OW;
};

int out_dim(int d, int k, int stride, int pad) { return (d + 2 * pad - k) / stride + 1; }

ConvDims check_conv3d(const Tensor& input, const Tensor& weight, const Tensor& bias,
                      int stride, int pad) {
  if (input.shape().size() != 5) {
    throw std::invalid_argument("conv3d: input must be [N,C,D,H,W], got " +
                                shape_str(input.shape()));
  }
  if (weight.shape().size() != 5) {
    throw std::invalid_argument("conv3d: weight must be [F,C,k,k,k], got " +
                                shape_str(weight.shape()));
  }
  ConvDims d;
  d.N = input.shape()[0];
  d.C = input.shape()[1];
  d.D = input.shape()[2];
  d.H = input.shape()[3];
  d.W = input.shape()[4];
  d.F = weight.shape()[0];
  d.K = weight.shape()[2];
  d.stride = stride;
  d.pad = pad;
  if (weight.shape()[1] != d.C) {
    throw std::invalid_argument("conv3d: weight channel dim " + std::to_string(weight.shape()[1]) +
                                " does not match input channels " + std::to_string(d.C));
  }
  if (weight.shape()[3] != d.K || weight.shape()[4] != d.K) {
    throw std::invalid_argument("conv3d: kernel must be cubic, got " + shape_str(weight.shape()));
  }
  if (d.K % 2 == 0) throw std::invalid_argument("conv3d: kernel size must be odd");
  if (pad < 0) throw std::invalid_argument("conv3d: padding must be >= 0");
  if (stride < 1) throw std::invalid_argument("conv3d: stride must be >= 1");
  for (int axis = 2; axis < 5; ++axis) {
    if (input.shape()[axis] + 2 * pad < d.K) {
      throw std::invalid_argument("conv3d: spatial dim " + std::to_string(axis) + " of size " +
                                  std::to_string(input.shape()[axis]) +
                                  " is smaller than the kernel after padding");
    }
  }
  if (bias.defined() && (bias.shape().size() != 1 || bias.shape()[0] != d.F)) {
    throw std::invalid_argument("conv3d: bias must be [F], got " + shape_str(bias.shape()));
  }
  d.OD = out_dim(d.D, d.K, stride, pad);
  d.OH = out_dim(d.H, d.K, stride, pad);
  d.OW = out_dim(d.W, d.K, stride, pad);
  return d;
}

std::vector<float>& scratch(int slot, size_t n) {
  thread_local std::vector<float> bufs[6];
  auto& b = bufs[slot];
  if (b.size() < n) b.resize(n);
  return b;
}

constexpr size_t kSlack = 16;  // row kernels may overread past the last row

// src [C][D][H][W] -> dst [C][D+2][H+2][W+2], zero border, zeroed slack
void pad1_sample(const float* src, float* dst, int C, int D, int H, int W) {
  const int PD = D + 2, PH = H + 2, PW = W + 2;
  std::memset(dst, 0, (static_cast<size_t>(C) * PD * PH * PW + kSlack) * sizeof(float));
  for (int c = 0; c < C; ++c) {
    for (int z = 0; z < D; ++z) {
      for (int y = 0; y < H; ++y) {
        std::memcpy(dst + ((static_cast<size_t>(c) * PD + z + 1) * PH + y + 1) * PW + 1,
                    src + ((static_cast<size_t>(c) * D + z) * H + y) * W,
                    static_cast<size_t>(W) * sizeof(float));
      }
    }
  }
}

// ---- stride-1 k=3 row kernels ------------------------------------------------
// inP is the pad1 buffer; out is [F][D][H][W]. Requires W <= 46.

#if defined(__AVX512F__)

void conv_s1_fwd(const float* __restrict inP, const float* __restrict wgt,
                 const float* __restrict bias, float* __restrict out,
                 int C, int F, int D, int H, int W) {
  const int PH = H + 2, PW = W + 2;
  const long planeP = static_cast<long>(PH) * PW;
  const long sliceP = static_cast<long>(D + 2) * planeP;
  const long wStrideF = static_cast<long>(C) * 27;
  const int nv = (W + 15) / 16;
  const __mmask16 tail = (W % 16) ? static_cast<__mmask16>((1u << (W % 16)) - 1) : 0xFFFF;
  for (int f0 = 0; f0 < F; f0 += 4) {
    const int fb = (F - f0) < 4 ? (F - f0) : 4;
    for (int od = 0; od < D; ++od) {
      for (int oh = 0; oh < H; ++oh) {
        __m512 acc[4][3];
        for (int i = 0; i < fb; ++i) {
          const __m512 b = _mm512_set1_ps(bias ? bias[f0 + i] : 0.f);
          for (int v = 0; v < nv; ++v) acc[i][v] = b;
        }
        for (int c = 0; c < C; ++c) {
          const float* wbase = wgt + (static_cast<long>(f0) * C + c) * 27;
          for (int kd = 0; kd < 3; ++kd) {
            for (int kh = 0; kh < 3; ++kh) {
              const float* irow = inP + c * sliceP + (od + kd) * planeP +
                                  static_cast<long>(oh + kh) * PW;
              const int koff = kd * 9 + kh * 3;
              for (int v = 0; v < nv; ++v) {
                const __m512 i0 = _mm512_loadu_ps(irow + v * 16);
                const __m512 i1 = _mm512_loadu_ps(irow + v * 16 + 1);
                const __m512 i2 = _mm512_loadu_ps(irow + v * 16 + 2);
                for (int i = 0; i < fb; ++i) {
                  const float* wp = wbase + i * wStrideF + koff;
                  acc[i][v] = _mm512_fmadd_ps(i0, _mm512_set1_ps(wp[0]), acc[i][v]);
                  acc[i][v] = _mm512_fmadd_ps(i1, _mm512_set1_ps(wp[1]), acc[i][v]);
                  acc[i][v] = _mm512_fmadd_ps(i2, _mm512_set1_ps(wp[2]), acc[i][v]);
                }
              }
            }
          }
        }
        for (int i = 0; i < fb; ++i) {
          float* orow = out + ((static_cast<long>(f0 + i) * D + od) * H + oh) * W;
          for (int v = 0; v < nv; ++v) {
            if (v == nv - 1) {
              _mm512_mask_storeu_ps(orow + v * 16, tail, acc[i][v]);
            } else {
              _mm512_storeu_ps(orow + v * 16, acc[i][v]);
            }
          }
        }
      }
    }
  }
}

// dW[F][C][27] += correlation of inP with dOut. inP strides are passed
// explicitly so a dilated dOut (stride-2 backward) can reuse the kernel.
void conv_s1_dw(const float* __restrict inP, long sliceP, long planeP, int rowP,
                const float* __restrict dout, float* __restrict dw,
                int C, int F, int D, int H, int W) {
  const int nv = (W + 15) / 16;
  const __mmask16 tail = (W % 16) ? static_cast<__mmask16>((1u << (W % 16)) - 1) : 0xFFFF;
  const long wStrideF = static_cast<long>(C) * 27;
  for (int f0 = 0; f0 < F; f0 += 4) {
    const int fb = (F - f0) < 4 ? (F - f0) : 4;
    for (int c = 0; c < C; ++c) {
      for (int kd = 0; kd < 3; ++kd) {
        for (int kh = 0; kh < 3; ++kh) {
          __m512 acc[4][3];
          for (int i = 0; i < fb; ++i)
            for (int kw = 0; kw < 3; ++kw) acc[i][kw] = _mm512_setzero_ps();
          for (int od = 0; od < D; ++od) {
            for (int oh = 0; oh < H; ++oh) {
              const float* irow = inP + c * sliceP + (od + kd) * planeP +
                                  static_cast<long>(oh + kh) * rowP;
              for (int v = 0; v < nv; ++v) {
                const __m512 i0 = _mm512_loadu_ps(irow + v * 16);
                const __m512 i1 = _mm512_loadu_ps(irow + v * 16 + 1);
                const __m512 i2 = _mm512_loadu_ps(irow + v * 16 + 2);
                const __mmask16 m = (v == nv - 1) ? tail : static_cast<__mmask16>(0xFFFF);
                for (int i = 0; i < fb; ++i) {
                  const float* drow =
                      dout + ((static_cast<long>(f0 + i) * D + od) * H + oh) * W;
                  const __m512 g = _mm512_maskz_loadu_ps(m, drow + v * 16);
                  acc[i][0] = _mm512_fmadd_ps(g, i0, acc[i][0]);
                  acc[i][1] = _mm512_fmadd_ps(g, i1, acc[i][1]);
                  acc[i][2] = _mm512_fmadd_ps(g, i2, acc[i][2]);
                }
              }
            }
          }
          for (int i = 0; i < fb; ++i) {
            float* wp = dw + (static_cast<long>(f0 + i) * C + c) * 27 + kd * 9 + kh * 3;
            wp[0] += _mm512_reduce_add_ps(acc[i][0]);
            wp[1] += _mm512_reduce_add_ps(acc[i][1]);
            wp[2] += _mm512_reduce_add_ps(acc[i][2]);
          }
        }
      }
    }
  }
}

#else  // portable fallbacks

void conv_s1_fwd(const float* __restrict inP, const float* __restrict wgt,
                 const float* __restrict bias, float* __restrict out,
                 int C, int F, int D, int H, int W) {
  const int PH = H + 2, PW = W + 2;
  const long planeP = static_cast<long>(PH) * PW;
  const long sliceP = static_cast<long>(D + 2) * planeP;
  const long wStrideF = static_cast<long>(C) * 27;
  float buf[4][48];
  for (int f0 = 0; f0 < F; f0 += 4) {
    const int fb = (F - f0) < 4 ? (F - f0) : 4;
    for (int od = 0; od < D; ++od) {
      for (int oh = 0; oh < H; ++oh) {
        for (int i = 0; i < fb; ++i) {
          const float b = bias ? bias[f0 + i] : 0.f;
          for (int w = 0; w < W; ++w) buf[i][w] = b;
        }
        for (int c = 0; c < C; ++c) {
          const float* wbase = wgt + (static_cast<long>(f0) * C + c) * 27;
          for (int kd = 0; kd < 3; ++kd) {
            for (int kh = 0; kh < 3; ++kh) {
              const float* irow = inP + c * sliceP + (od + kd) * planeP +
                                  static_cast<long>(oh + kh) * PW;
              const int koff = kd * 9 + kh * 3;
              for (int i = 0; i < fb; ++i) {
                const float* wp = wbase + i * wStrideF + koff;
                const float w0 = wp[0], w1 = wp[1], w2 = wp[2];
                float* __restrict b = buf[i];
                for (int w = 0; w < W; ++w) {
                  b[w] += w0 * irow[w] + w1 * irow[w + 1] + w2 * irow[w + 2];
                }
              }
            }
          }
        }
        for (int i = 0; i < fb; ++i) {
          std::memcpy(out + ((static_cast<long>(f0 + i) * D + od) * H + oh) * W, buf[i],
                      static_cast<size_t>(W) * sizeof(float));
        }
      }
    }
  }
}

void conv_s1_dw(const float* __restrict inP, long sliceP, long planeP, int rowP,
                const float* __restrict dout, float* __restrict dw,
                int C, int F, int D, int H, int W) {
  for (int f = 0; f < F; ++f) {
    for (int c = 0; c < C; ++c) {
      for (int kd = 0; kd < 3; ++kd) {
        for (int kh = 0; kh < 3; ++kh) {
          double acc[3] = {0.0, 0.0, 0.0};
          for (int od = 0; od < D; ++od) {
            for (int oh = 0; oh < H; ++oh) {
              const float* irow = inP + c * sliceP + (od + kd) * planeP +
                                  static_cast<long>(oh + kh) * rowP;
              const float* drow = dout + ((static_cast<long>(f) * D + od) * H + oh) * W;
              for (int w = 0; w < W; ++w) {
                acc[0] += static_cast<double>(drow[w]) * irow[w];
                acc[1] += static_cast<double>(drow[w]) * irow[w + 1];
                acc[2] += static_cast<double>(drow[w]) * irow[w + 2];
              }
            }
          }
          float* wp = dw + (static_cast<long>(f) * C + c) * 27 + kd * 9 + kh * 3;
          for (int kw = 0; kw < 3; ++kw) wp[kw] += static_cast<float>(acc[kw]);
        }
      }
    }
  }
}

#endif

// weight [F,C,3,3,3] -> [C,F,3,3,3] with all taps reversed
void flip_weights_k3(const float* w, float* wf, int F, int C) {
  for (int f = 0; f < F; ++f) {
    for (int c = 0; c < C; ++c) {
      for (int t = 0; t < 27; ++t) {
        wf[(static_cast<long>(c) * F + f) * 27 + (26 - t)] =
            w[(static_cast<long>(f) * C + c) * 27 + t];
      }
    }
  }
}

bool fast_path_ok(const ConvDims& d) {
  return d.K == 3 && d.pad == 1 && (d.stride == 1 || d.stride == 2) && d.W <= 46 && d.H >= 1;
}

// ---- generic odd-k naive path (small shapes, gradcheck) ----------------------

void conv_generic_fwd(const float* in, const float* w, const float* bias, float* out,
                      const ConvDims& d) {
  const long inC = static_cast<long>(d.D) * d.H * d.W;
  const int K = d.K;
  for (int f = 0; f < d.F; ++f) {
    for (int od = 0; od < d.OD; ++od) {
      for (int oh = 0; oh < d.OH; ++oh) {
        for (int ow = 0; ow < d.OW; ++ow) {
          double acc = bias ? bias[f] : 0.0;
          for (int c = 0; c < d.C; ++c) {
            for (int kd = 0; kd < K; ++kd) {
              const int iz = od * d.stride - d.pad + kd;
              if (iz < 0 || iz >= d.D) continue;
              for (int kh = 0; kh < K; ++kh) {
                const int iy = oh * d.stride - d.pad + kh;
                if (iy < 0 || iy >= d.H) continue;
                for (int kw = 0; kw < K; ++kw) {
                  const int ix = ow * d.stride - d.pad + kw;
                  if (ix < 0 || ix >= d.W) continue;
                  acc += static_cast<double>(in[c * inC + (static_cast<long>(iz) * d.H + iy) * d.W + ix]) *
                         w[((static_cast<long>(f) * d.C + c) * K + kd) * K * K + kh * K + kw];
                }
              }
            }
          }
          out[((static_cast<long>(f) * d.OD + od) * d.OH + oh) * d.OW + ow] =
              static_cast<float>(acc);
        }
      }
    }
  }
}

void conv_generic_bwd(const float* in, const float* w, const float* gout,
                      float* gin, float* gw, float* gb, const ConvDims& d) {
  const long inC = static_cast<long>(d.D) * d.H * d.W;
  const int K = d.K;
  for (int f = 0; f < d.F; ++f) {
    for (int od = 0; od < d.OD; ++od) {
      for (int oh = 0; oh < d.OH; ++oh) {
        for (int ow = 0; ow < d.OW; ++ow) {
          const float g = gout[((static_cast<long>(f) * d.OD + od) * d.OH + oh) * d.OW + ow];
          if (gb) gb[f] += g;
          for (int c = 0; c < d.C; ++c) {
            for (int kd = 0; kd < K; ++kd) {
              const int iz = od * d.stride - d.pad + kd;
              if (iz < 0 || iz >= d.D) continue;
              for (int kh = 0; kh < K; ++kh) {
                const int iy = oh * d.stride - d.pad + kh;
                if (iy < 0 || iy >= d.H) continue;
                for (int kw = 0; kw < K; ++kw) {
                  const int ix = ow * d.stride - d.pad + kw;
                  if (ix < 0 || ix >= d.W) continue;
                  const long ii = c * inC + (static_cast<long>(iz) * d.H + iy) * d.W + ix;
                  const long wi =
                      ((static_cast<long>(f) * d.C + c) * K + kd) * K * K + kh * K + kw;
                  if (gin) gin[ii] += g * w[wi];
                  if (gw) gw[wi] += g * in[ii];
                }
              }
            }
          }
        }
      }
    }
  }
}

}  // namespace

Tensor conv3d(const Tensor& input, const Tensor& weight, const Tensor& bias,
              int stride, int padding) {
  const ConvDims d = check_conv3d(input, weight, bias, stride, padding);
  const bool rg = grad_enabled() &&
                  (input.requires_grad() || weight.requires_grad() ||
                   (bias.defined() && bias.requires_grad()));
  Tensor out = Tensor::zeros({d.N, d.F, d.OD, d.OH, d.OW});
  out.set_requires_grad(rg);

  const long inStride = static_cast<long>(d.C) * d.D * d.H * d.W;
  const long outStride = static_cast<long>(d.F) * d.OD * d.OH * d.OW;
  const float* bp = bias.defined() ? bias.data() : nullptr;

  if (fast_path_ok(d)) {
    const size_t padded = static_cast<size_t>(d.C) * (d.D + 2) * (d.H + 2) * (d.W + 2) + kSlack;
    auto& inP = scratch(0, padded);
    if (d.stride == 1) {
      for (int n = 0; n < d.N; ++n) {
        pad1_sample(input.data() + n * inStride, inP.data(), d.C, d.D, d.H, d.W);
        conv_s1_fwd(inP.data(), weight.data(), bp, out.data() + n * outStride,
                    d.C, d.F, d.D, d.H, d.W);
      }
    } else {
      // stride 2: full-resolution stride-1 pass, then subsample even indices
      auto& full = scratch(1, static_cast<size_t>(d.F) * d.D * d.H * d.W);
      for (int n = 0; n < d.N; ++n) {
        pad1_sample(input.data() + n * inStride, inP.data(), d.C, d.D, d.H, d.W);
        conv_s1_fwd(inP.data(), weight.data(), bp, full.data(), d.C, d.F, d.D, d.H, d.W);
        float* dst = out.data() + n * outStride;
        for (int f = 0; f < d.F; ++f) {
          for (int od = 0; od < d.OD; ++od) {
            for (int oh = 0; oh < d.OH; ++oh) {
              const float* src =
                  full.data() + ((static_cast<long>(f) * d.D + 2 * od) * d.H + 2 * oh) * d.W;
              for (int ow = 0; ow < d.OW; ++ow) {
                *dst++ = src[2 * ow];
              }
            }
          }
        }
      }
    }
  } else if (d.K == 1 && d.stride == 1 && d.pad == 0) {
    const long sp = static_cast<long>(d.D) * d.H * d.W;
    for (int n = 0; n < d.N; ++n) {
      const float* in = input.data() + n * inStride;
      float* po = out.data() + n * outStride;
      for (int f = 0; f < d.F; ++f) {
        float* orow = po + f * sp;
        const float b = bp ? bp[f] : 0.f;
        for (long v = 0; v < sp; ++v) orow[v] = b;
        for (int c = 0; c < d.C; ++c) {
          const float wv = weight.data()[f * d.C + c];
          const float* irow = in + c * sp;
          for (long v = 0; v < sp; ++v) orow[v] += wv * irow[v];
        }
      }
    }
  } else {
    for (int n = 0; n < d.N; ++n) {
      conv_generic_fwd(input.data() + n * inStride, weight.data(), bp,
                       out.data() + n * outStride, d);
    }
  }

  if (rg) {
    auto ii = input.impl(), wi = weight.impl(), oi = out.impl();
    auto bi = bias.defined() ? bias.impl() : nullptr;
    active_graph().record("conv3d", [ii, wi, bi, oi, d, inStride, outStride] {
      if (oi->grad.empty()) return;
      const float* gout = oi->grad.data();
      float* gin = ii->requires_grad ? ii->ensure_grad().data() : nullptr;
      float* gw = wi->requires_grad ? wi->ensure_grad().data() : nullptr;
      float* gb = (bi && bi->requires_grad) ? bi->ensure_grad().data() : nullptr;

      if (gb) {
        const long sp = static_cast<long>(d.OD) * d.OH * d.OW;
        for (int n = 0; n < d.N; ++n) {
          for (int f = 0; f < d.F; ++f) {
            const float* g = gout + n * outStride + f * sp;
            double acc = 0.0;
            for (long v = 0; v < sp; ++v) acc += g[v];
            gb[f] += static_cast<float>(acc);
          }
        }
      }

      if (fast_path_ok(d)) {
        const size_t paddedIn =
            static_cast<size_t>(d.C) * (d.D + 2) * (d.H + 2) * (d.W + 2) + kSlack;
        const size_t paddedOut =
            static_cast<size_t>(d.F) * (d.D + 2) * (d.H + 2) * (d.W + 2) + kSlack;
        auto& wf = scratch(2, static_cast<size_t>(d.F) * d.C * 27);
        if (gin) flip_weights_k3(wi->data.data(), wf.data(), d.F, d.C);
        const long planeP = static_cast<long>(d.H + 2) * (d.W + 2);
        const long sliceP = static_cast<long>(d.D + 2) * planeP;
        const long inSample = static_cast<long>(d.C) * d.D * d.H * d.W;
        for (int n = 0; n < d.N; ++n) {
          const float* goutN = gout + n * outStride;
          if (gin) {
            // padded (and, for stride 2, dilated) output gradient
            auto& gP = scratch(3, paddedOut);
            std::memset(gP.data(), 0, paddedOut * sizeof(float));
            if (d.stride == 1) {
              for (int f = 0; f < d.F; ++f) {
                for (int od = 0; od < d.OD; ++od) {
                  for (int oh = 0; oh < d.OH; ++oh) {
                    std::memcpy(gP.data() + f * sliceP + (od + 1) * planeP +
                                    static_cast<long>(oh + 1) * (d.W + 2) + 1,
                                goutN + ((static_cast<long>(f) * d.OD + od) * d.OH + oh) * d.OW,
                                static_cast<size_t>(d.OW) * sizeof(float));
                  }
                }
              }
            } else {
              for (int f = 0; f < d.F; ++f) {
                for (int od = 0; od < d.OD; ++od) {
                  for (int oh = 0; oh < d.OH; ++oh) {
                    const float* src =
                        goutN + ((static_cast<long>(f) * d.OD + od) * d.OH + oh) * d.OW;
                    float* dst = gP.data() + f * sliceP + (2 * od + 1) * planeP +
                                 static_cast<long>(2 * oh + 1) * (d.W + 2) + 1;
                    for (int ow = 0; ow < d.OW; ++ow) dst[2 * ow] = src[ow];
                  }
                }
              }
            }
            auto& dx = scratch(5, static_cast<size_t>(inSample));
            conv_s1_fwd(gP.data(), wf.data(), nullptr, dx.data(), d.F, d.C, d.D, d.H, d.W);
            float* giN = gin + n * inSample;
            for (long i = 0; i < inSample; ++i) giN[i] += dx[i];
          }
          if (gw) {
            auto& inP = scratch(0, paddedIn);
            pad1_sample(ii->data.data() + n * inStride, inP.data(), d.C, d.D, d.H, d.W);
            if (d.stride == 1) {
              conv_s1_dw(inP.data(), sliceP, planeP, d.W + 2, goutN, gw, d.C, d.F,
                         d.OD, d.OH, d.OW);
            } else {
              // dilate the gradient so the stride-1 correlation kernel applies
              const int DD = 2 * d.OD - 1, DH = 2 * d.OH - 1, DW = 2 * d.OW - 1;
              const size_t dil = static_cast<size_t>(d.F) * DD * DH * DW + kSlack;
              auto& gD = scratch(4, dil);
              std::memset(gD.data(), 0, dil * sizeof(float));
              for (int f = 0; f < d.F; ++f) {
                for (int od = 0; od < d.OD; ++od) {
                  for (int oh = 0; oh < d.OH; ++oh) {
                    const float* src =
                        goutN + ((static_cast<long>(f) * d.OD + od) * d.OH + oh) * d.OW;
                    float* dst =
                        gD.data() + ((static_cast<long>(f) * DD + 2 * od) * DH + 2 * oh) * DW;
                    for (int ow = 0; ow < d.OW; ++ow) dst[2 * ow] = src[ow];
                  }
                }
              }
              conv_s1_dw(inP.data(), sliceP, planeP, d.W + 2, gD.data(), gw, d.C, d.F,
                         DD, DH, DW);
            }
          }
        }
      } else if (d.K == 1 && d.stride == 1 && d.pad == 0) {
        const long sp = static_cast<long>(d.D) * d.H * d.W;
        for (int n = 0; n < d.N; ++n) {
          const float* in = ii->data.data() + n * inStride;
          const float* goN = gout + n * outStride;
          for (int f = 0; f < d.F; ++f) {
            const float* grow = goN + f * sp;
            for (int c = 0; c < d.C; ++c) {
              if (gin) {
                float* girow = gin + n * inStride + c * sp;
                const float wv = wi->data.data()[f * d.C + c];
                for (long v = 0; v < sp; ++v) girow[v] += wv * grow[v];
              }
              if (gw) {
                const float* irow = in + c * sp;
                double acc = 0.0;
                for (long v = 0; v < sp; ++v) acc += static_cast<double>(grow[v]) * irow[v];
                gw[f * d.C + c] += static_cast<float>(acc);
              }
            }
          }
        }
      } else {
        const long inC = static_cast<long>(d.C) * d.D * d.H * d.W;
        for (int n = 0; n < d.N; ++n) {
          conv_generic_bwd(ii->data.data() + n * inC, wi->data.data(), gout + n * outStride,
                           gin ? gin + n * inC : nullptr, gw, nullptr, d);
        }
      }
    });
  }
  return out;
}

Tensor conv_transpose3d(const Tensor& input, const Tensor& weight, int stride) {
  if (stride != 2) {
    throw std::invalid_argument("conv_transpose3d: only stride 2 is supported, got " +
                                std::to_string(stride));
  }
  if (input.shape().size() != 5 || weight.shape().size() != 5) {
    throw std::invalid_argument("conv_transpose3d: input and weight must be 5-D");
  }
  if (weight.shape()[2] != 2 || weight.shape()[3] != 2 || weight.shape()[4] != 2) {
    throw std::invalid_argument("conv_transpose3d: only kernel 2 is supported, got " +
                                shape_str(weight.shape()));
  }
  const int N = input.shape()[0], C = input.shape()[1];
  const int D = input.shape()[2], H = input.shape()[3], W = input.shape()[4];
  if (weight.shape()[0] != C) {
    throw std::invalid_argument("conv_transpose3d: weight input-channel dim " +
                                std::to_string(weight.shape()[0]) +
                                " does not match input channels " + std::to_string(C));
  }
  const int F = weight.shape()[1];
  const bool rg = grad_enabled() && (input.requires_grad() || weight.requires_grad());
  Tensor out = Tensor::zeros({N, F, 2 * D, 2 * H, 2 * W});
  out.set_requires_grad(rg);

  const long inN = static_cast<long>(C) * D * H * W;
  const long outN = static_cast<long>(F) * 8 * D * H * W;
  const long inSp = static_cast<long>(D) * H * W;
  const long outSp = static_cast<long>(8) * D * H * W;

  for (int n = 0; n < N; ++n) {
    const float* in = input.data() + n * inN;
    float* po = out.data() + n * outN;
    for (int c = 0; c < C; ++c) {
      for (int f = 0; f < F; ++f) {
        const float* wp = weight.data() + (static_cast<long>(c) * F + f) * 8;
        for (int z = 0; z < D; ++z) {
          for (int y = 0; y < H; ++y) {
            const float* irow = in + c * inSp + (static_cast<long>(z) * H + y) * W;
            for (int kd = 0; kd < 2; ++kd) {
              for (int kh = 0; kh < 2; ++kh) {
                float* orow = po + f * outSp +
                              (static_cast<long>(2 * z + kd) * 2 * H + 2 * y + kh) * 2 * W;
                const float w0 = wp[kd * 4 + kh * 2];
                const float w1 = wp[kd * 4 + kh * 2 + 1];
                for (int x = 0; x < W; ++x) {
                  orow[2 * x] += w0 * irow[x];
                  orow[2 * x + 1] += w1 * irow[x];
                }
              }
            }
          }
        }
      }
    }
  }

  if (rg) {
    auto ii = input.impl(), wi = weight.impl(), oi = out.impl();
    active_graph().record("conv_transpose3d", [ii, wi, oi, N, C, F, D, H, W, inN, outN, inSp, outSp] {
      if (oi->grad.empty()) return;
      const float* gout = oi->grad.data();
      float* gin = ii->requires_grad ? ii->ensure_grad().data() : nullptr;
      float* gw = wi->requires_grad ? wi->ensure_grad().data() : nullptr;
      for (int n = 0; n < N; ++n) {
        const float* in = ii->data.data() + n * inN;
        const float* go = gout + n * outN;
        for (int c = 0; c < C; ++c) {
          for (int f = 0; f < F; ++f) {
            const float* wp = wi->data.data() + (static_cast<long>(c) * F + f) * 8;
            float* gwp = gw ? gw + (static_cast<long>(c) * F + f) * 8 : nullptr;
            for (int z = 0; z < D; ++z) {
              for (int y = 0; y < H; ++y) {
                const long irowOff = c * inSp + (static_cast<long>(z) * H + y) * W;
                for (int kd = 0; kd < 2; ++kd) {
                  for (int kh = 0; kh < 2; ++kh) {
                    const float* grow = go + f * outSp +
                                        (static_cast<long>(2 * z + kd) * 2 * H + 2 * y + kh) * 2 * W;
                    const float w0 = wp[kd * 4 + kh * 2];
                    const float w1 = wp[kd * 4 + kh * 2 + 1];
                    double a0 = 0.0, a1 = 0.0;
                    for (int x = 0; x < W; ++x) {
                      const float g0 = grow[2 * x], g1 = grow[2 * x + 1];
                      if (gin) gin[n * inN + irowOff + x] += w0 * g0 + w1 * g1;
                      if (gwp) {
                        a0 += static_cast<double>(in[irowOff + x]) * g0;
                        a1 += static_cast<double>(in[irowOff + x]) * g1;
                      }
                    }
                    if (gwp) {
                      gwp[kd * 4 + kh * 2] += static_cast<float>(a0);
                      gwp[kd * 4 + kh * 2 + 1] += static_cast<float>(a1);
                    }
                  }
                }
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
