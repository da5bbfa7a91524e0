#include <cmath>
#include <stdexcept>

#include "dihc/ops.hpp"

namespace dihc {
namespace {

// One statistics group, iterated as contiguous runs of `spatial` elements,
// each run belonging to a single channel. Covers per-channel-over-batch
// (batch norm) and per-sample channel blocks (group/instance norm).
struct StatGroup {
  std::vector<long> run_offsets;
  std::vector<int> run_channels;
  long count = 0;
};

}  // namespace

Tensor normalize(const Tensor& input, const Tensor& gamma, const Tensor& beta,
                 NormState& state) {
  if (input.shape().size() != 5) {
    throw std::invalid_argument("normalize: input must be [N,C,D,H,W], got " +
                                shape_str(input.shape()));
  }
  const int N = input.shape()[0], C = input.shape()[1];
  const long spatial = static_cast<long>(input.shape()[2]) * input.shape()[3] * input.shape()[4];
  if (gamma.shape() != Shape{C} || beta.shape() != Shape{C}) {
    throw std::invalid_argument("normalize: gamma/beta must be [C]");
  }
  if (state.mode == NormMode::kGroup && (state.groups <= 0 || C % state.groups != 0)) {
    throw std::invalid_argument("normalize: channels " + std::to_string(C) +
                                " not divisible by groups " + std::to_string(state.groups));
  }
  if (state.mode == NormMode::kBatch && state.running_mean.empty()) {
    state.running_mean.assign(C, 0.f);
    state.running_var.assign(C, 1.f);
  }

  const long sampleStride = static_cast<long>(C) * spatial;
  auto groups = std::make_shared<std::vector<StatGroup>>();
  if (state.mode == NormMode::kBatch) {
    groups->resize(C);
    for (int c = 0; c < C; ++c) {
      auto& g = (*groups)[c];
      for (int n = 0; n < N; ++n) {
        g.run_offsets.push_back(n * sampleStride + static_cast<long>(c) * spatial);
        g.run_channels.push_back(c);
      }
      g.count = static_cast<long>(N) * spatial;
    }
  } else {
    const int ng = state.mode == NormMode::kInstance ? C : state.groups;
    const int chPerGroup = C / ng;
    groups->resize(static_cast<size_t>(N) * ng);
    for (int n = 0; n < N; ++n) {
      for (int gi = 0; gi < ng; ++gi) {
        auto& g = (*groups)[static_cast<size_t>(n) * ng + gi];
        for (int k = 0; k < chPerGroup; ++k) {
          const int c = gi * chPerGroup + k;
          g.run_offsets.push_back(n * sampleStride + static_cast<long>(c) * spatial);
          g.run_channels.push_back(c);
        }
        g.count = static_cast<long>(chPerGroup) * spatial;
      }
    }
  }

  const bool rg = grad_enabled() &&
                  (input.requires_grad() || gamma.requires_grad() || beta.requires_grad());
  const bool use_running = state.mode == NormMode::kBatch && !state.training;
  Tensor out = Tensor::zeros(input.shape());
  out.set_requires_grad(rg);

  const float* x = input.data();
  float* y = out.data();
  const float* gm = gamma.data();
  const float* bt = beta.data();

  auto inv_std = std::make_shared<std::vector<float>>(groups->size());
  auto xhat = std::make_shared<std::vector<float>>();
  if (rg) xhat->resize(input.numel());

  for (size_t gi = 0; gi < groups->size(); ++gi) {
    const auto& G = (*groups)[gi];
    double mu, var;
    if (use_running) {
      mu = state.running_mean[gi];  // batch mode: group index == channel
      var = state.running_var[gi];
    } else {
      double s = 0.0, s2 = 0.0;
      for (long off : G.run_offsets) {
        const float* p = x + off;
        for (long i = 0; i < spatial; ++i) {
          s += p[i];
          s2 += static_cast<double>(p[i]) * p[i];
        }
      }
      const double cnt = static_cast<double>(G.count);
      mu = s / cnt;
      var = s2 / cnt - mu * mu;
      if (var < 0) var = 0;  // rounding guard
      if (state.mode == NormMode::kBatch && state.training) {
        const float m = state.momentum;
        state.running_mean[gi] = m * state.running_mean[gi] + (1.f - m) * static_cast<float>(mu);
        state.running_var[gi] = m * state.running_var[gi] + (1.f - m) * static_cast<float>(var);
      }
    }
    const float istd = static_cast<float>(1.0 / std::sqrt(var + state.eps));
    const float muf = static_cast<float>(mu);
    (*inv_std)[gi] = istd;
    for (size_t r = 0; r < G.run_offsets.size(); ++r) {
      const long off = G.run_offsets[r];
      const int c = G.run_channels[r];
      const float* p = x + off;
      float* q = y + off;
      const float a = gm[c] * istd;
      const float b = bt[c] - muf * a;
      if (rg) {
        float* xh = xhat->data() + off;
        for (long i = 0; i < spatial; ++i) {
          xh[i] = (p[i] - muf) * istd;
          q[i] = a * p[i] + b;
        }
      } else {
        for (long i = 0; i < spatial; ++i) q[i] = a * p[i] + b;
      }
    }
  }

  if (rg) {
    auto ii = input.impl(), gmi = gamma.impl(), bti = beta.impl(), oi = out.impl();
    const bool train_stats = !use_running;
    active_graph().record("normalize",
                          [ii, gmi, bti, oi, xhat, inv_std, groups, spatial, train_stats] {
      if (oi->grad.empty()) return;
      const float* g = oi->grad.data();
      const float* xh = xhat->data();
      const float* gm = gmi->data.data();
      float* gin = ii->requires_grad ? ii->ensure_grad().data() : nullptr;
      float* ggm = gmi->requires_grad ? gmi->ensure_grad().data() : nullptr;
      float* gbt = bti->requires_grad ? bti->ensure_grad().data() : nullptr;

      for (size_t gi = 0; gi < groups->size(); ++gi) {
        const auto& G = (*groups)[gi];
        const float istd = (*inv_std)[gi];
        if (ggm || gbt) {
          for (size_t r = 0; r < G.run_offsets.size(); ++r) {
            const long off = G.run_offsets[r];
            const int c = G.run_channels[r];
            double sgx = 0.0, sg = 0.0;
            for (long i = 0; i < spatial; ++i) {
              sgx += static_cast<double>(g[off + i]) * xh[off + i];
              sg += g[off + i];
            }
            if (ggm) ggm[c] += static_cast<float>(sgx);
            if (gbt) gbt[c] += static_cast<float>(sg);
          }
        }
        if (!gin) continue;
        if (!train_stats) {
          // statistics are constants: dx = g * gamma * inv_std
          for (size_t r = 0; r < G.run_offsets.size(); ++r) {
            const long off = G.run_offsets[r];
            const float a = gm[G.run_channels[r]] * istd;
            for (long i = 0; i < spatial; ++i) gin[off + i] += g[off + i] * a;
          }
          continue;
        }
        double sum_dxh = 0.0, sum_dxh_xh = 0.0;
        for (size_t r = 0; r < G.run_offsets.size(); ++r) {
          const long off = G.run_offsets[r];
          const float gmc = gm[G.run_channels[r]];
          for (long i = 0; i < spatial; ++i) {
            const double dxh = static_cast<double>(g[off + i]) * gmc;
            sum_dxh += dxh;
            sum_dxh_xh += dxh * xh[off + i];
          }
        }
        const double cnt = static_cast<double>(G.count);
        const float mean_dxh = static_cast<float>(sum_dxh / cnt);
        const float mean_dxh_xh = static_cast<float>(sum_dxh_xh / cnt);
        for (size_t r = 0; r < G.run_offsets.size(); ++r) {
          const long off = G.run_offsets[r];
          const float gmc = gm[G.run_channels[r]];
          for (long i = 0; i < spatial; ++i) {
            const float dxh = g[off + i] * gmc;
            gin[off + i] += istd * (dxh - mean_dxh - xh[off + i] * mean_dxh_xh);
          }
        }
      }
    });
  }
  return out;
}

}  // namespace dihc
