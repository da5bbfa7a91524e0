#include "dihc/losses.hpp"

#include <cmath>
#include <stdexcept>

namespace dihc {

std::vector<ConsistencyPair> mc_pairs() {
  std::vector<ConsistencyPair> pairs;
  for (int i = 1; i <= 3; ++i) {
    for (int j = 1; j <= 3; ++j) {
      if (i != j) pairs.push_back({i, j, 1});
    }
  }
  return pairs;
}

std::vector<ConsistencyPair> dihc_pairs() {
  return {
      {1, 3, 2}, {1, 2, 3},  // S^M1 -> p_2^M3, p_3^M2
      {2, 1, 2}, {2, 3, 3},  // S^M2 -> p_2^M1, p_3^M3
      {3, 2, 2}, {3, 1, 3},  // S^M3 -> p_2^M2, p_3^M1
  };
}

Tensor dice_loss(const Tensor& p, const Tensor& y, float smooth) {
  if (p.shape() != y.shape()) {
    throw std::invalid_argument("dice_loss: shape mismatch " + shape_str(p.shape()) + " vs " +
                                shape_str(y.shape()));
  }
  Tensor intersection = sum(mul(p, y));
  Tensor num = add_scalar(scalar_mul(intersection, 2.f), smooth);
  Tensor den = add_scalar(add(sum(p), sum(y)), smooth);
  // 1 - num/den
  return add_scalar(scalar_mul(div(num, den), -1.f), 1.f);
}

Tensor deep_supervised_loss(const std::array<MultiScalePrediction, 3>& preds, const Tensor& y,
                            int num_scales, float smooth) {
  Tensor total;
  for (const auto& pred : preds) {
    const int S = std::min<int>(num_scales, static_cast<int>(pred.probs.size()));
    for (int s = 0; s < S; ++s) {
      Tensor term = dice_loss(pred.probs[s], y, smooth);
      total = total.defined() ? add(total, term) : term;
    }
  }
  return total;
}

Tensor sharpen(const Tensor& p, const SharpenConfig& cfg, bool detach) {
  return sharpen_op(p, cfg.temperature, detach);
}

namespace {

// Shared accumulation for both consistency losses. The producer side is the
// sharpened scale-1 map; weight 0 terms are skipped entirely.
Tensor consistency_sum(const std::array<MultiScalePrediction, 3>& preds,
                       const std::vector<ConsistencyPair>& pairs,
                       const ConsistencyWeights& w, const SharpenConfig& cfg,
                       bool detach_pseudo) {
  std::array<Tensor, 3> sharpened;
  Tensor total;
  for (const auto& pair : pairs) {
    const float weight = pair.consumer_scale == 1   ? w.alpha1
                         : pair.consumer_scale == 2 ? w.alpha2
                                                    : w.alpha3;
    if (weight == 0.f) continue;
    auto& sp = sharpened[pair.producer - 1];
    if (!sp.defined()) {
      sp = sharpen(preds[pair.producer - 1].probs[0], cfg, detach_pseudo);
    }
    const auto& consumer = preds[pair.consumer - 1].probs[pair.consumer_scale - 1];
    Tensor term = scalar_mul(mse(sp, consumer), weight);
    total = total.defined() ? add(total, term) : term;
  }
  if (!total.defined()) total = Tensor::scalar(0.f);
  return total;
}

}  // namespace

Tensor mutual_consistency_loss(const std::array<MultiScalePrediction, 3>& preds,
                               const ConsistencyWeights& w, const SharpenConfig& cfg,
                               bool detach_pseudo) {
  return consistency_sum(preds, mc_pairs(), w, cfg, detach_pseudo);
}

Tensor diagonal_consistency_loss(const std::array<MultiScalePrediction, 3>& preds,
                                 const ConsistencyWeights& w, const SharpenConfig& cfg,
                                 bool detach_pseudo) {
  return consistency_sum(preds, dihc_pairs(), w, cfg, detach_pseudo);
}

double ramp_weight(int t, const RampSchedule& sched) {
  if (sched.t_max <= 0) return sched.base;
  double x = static_cast<double>(t) / static_cast<double>(sched.t_max);
  if (x < 0.0) x = 0.0;
  if (x > 1.0) x = 1.0;
  const double ramp = 1.0 - x;
  return sched.base * std::exp(-5.0 * (sched.squared ? ramp * ramp : ramp));
}

std::pair<Tensor, LossBreakdown> total_loss(const Tensor& l_sup, const Tensor& l_mc,
                                            const Tensor& l_dihc, int t,
                                            const RampSchedule& sched) {
  const double lambda_cst = ramp_weight(t, sched);
  Tensor cst = add(l_mc, l_dihc);
  Tensor total = add(scalar_mul(l_sup, static_cast<float>(sched.lambda_sup)),
                     scalar_mul(cst, static_cast<float>(lambda_cst)));
  LossBreakdown b;
  b.l_sup = l_sup.item();
  b.l_mc = l_mc.item();
  b.l_dihc = l_dihc.item();
  b.lambda_cst = lambda_cst;
  b.l_total = total.item();
  return {total, b};
}

}  // namespace dihc
